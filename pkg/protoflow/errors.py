"""
Protoflow Exceptions

Every error raised by the pipeline names the stage it came from and, when
known, the offending symbol or step index, so CLI messages can point the user
at the exact spot to fix.
"""

from typing import Optional


class ProtoflowError(Exception):
    """Base class for all pipeline errors."""

    stage = "pipeline"

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        symbol: Optional[str] = None,
        stage: Optional[str] = None
    ):
        self.message = message
        self.step = step
        self.symbol = symbol
        if stage is not None:
            self.stage = stage
        super().__init__(self._format())

    def _format(self) -> str:
        parts = [f"[{self.stage}]"]
        if self.step is not None:
            parts.append(f"step {self.step}:")
        if self.symbol is not None:
            parts.append(f"'{self.symbol}':")
        parts.append(self.message)
        return " ".join(parts)


class SpecParseError(ProtoflowError):
    """DSL spec file is not valid YAML or does not follow the spec schema."""
    stage = "dsl"


class SpecValidationError(ProtoflowError):
    """DSL spec is well-formed but breaks a structural invariant."""
    stage = "dsl"


class NoActionFound(ProtoflowError):
    """A protocol step has no verb matching any operation above the floor."""
    stage = "preprocess"


class ExtractionUnavailable(ProtoflowError):
    """The extraction service failed and no fallback is configured."""
    stage = "extractor"


class BudgetExceeded(ExtractionUnavailable):
    """The per-run request budget is spent."""


class MalformedReply(ProtoflowError):
    """A service reply could not be parsed even after a re-ask."""
    stage = "extractor"


class LengthMismatch(ProtoflowError):
    """Program and entity sequence cover different step counts."""
    stage = "synthesis"


class UnresolvedControlSignal(ProtoflowError):
    """A loop/branch keyword has no instruction range it could govern."""
    stage = "synthesis"


class IllegalTransition(ProtoflowError):
    """The automaton was asked to run an instruction that is not enabled."""
    stage = "reagent-flow"


class InconsistentInputs(ProtoflowError):
    """A flow graph refers to instructions the program does not have."""
    stage = "pdg"


class RuleCompileError(ProtoflowError):
    """A safety rule guard uses an unknown attribute or bad syntax."""
    stage = "execution"


class StuckExecution(ProtoflowError):
    """No instruction is enabled although the trace is incomplete."""
    stage = "execution"


class InvalidEdit(ProtoflowError):
    """A what-if edit produced a syntactically invalid program."""
    stage = "execution"
