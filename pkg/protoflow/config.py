"""
Protoflow Configuration

Environment-based service configuration (endpoint and key for the language
model service) and YAML run configuration validated with pydantic.

Core functions:
    - get_service_config() - Read service endpoint/credential from the environment
    - load_run_config() - Load and validate a YAML run-config file
    - mask_key() - Render a credential safely for debug output

Usage:
    from protoflow.config import load_run_config, get_service_config

    run_config = load_run_config("run.yaml")
    service = get_service_config()   # only needed for --extractor service
"""

import os
from typing import Dict, Optional, Any

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

# Load environment variables
load_dotenv()

DEFAULT_MODEL = "gpt-3.5-turbo"
DEFAULT_TIMEOUT = 30.0


def get_service_config() -> Dict[str, Any]:
    """
    Get extraction service configuration from environment variables.

    Returns:
        Dictionary with endpoint, key, model and timeout

    Raises:
        ValueError: If PROTOFLOW_LLM_ENDPOINT or PROTOFLOW_LLM_KEY is missing
    """
    required_vars = [
        "PROTOFLOW_LLM_ENDPOINT",
        "PROTOFLOW_LLM_KEY",
    ]

    config: Dict[str, Any] = {}
    missing = []
    for var in required_vars:
        value = os.getenv(var)
        if not value:
            missing.append(var)
        else:
            config[var.lower().replace("protoflow_llm_", "")] = value

    if missing:
        raise ValueError(
            f"Missing required environment variables: {', '.join(missing)}\n"
            f"Please set these in your .env file. See protoflow.env.example for a template."
        )

    config["model"] = os.getenv("PROTOFLOW_LLM_MODEL", DEFAULT_MODEL)
    config["timeout"] = float(os.getenv("PROTOFLOW_LLM_TIMEOUT", DEFAULT_TIMEOUT))
    return config


def mask_key(key: Optional[str]) -> str:
    """Mask a credential for display: '***' plus its last four characters."""
    if not key:
        return "<unset>"
    return "***" + key[-4:]


class SynthesisConfig(BaseModel):
    """Divergence weights and EM search budget."""

    lambda_span: float = Field(1.0, ge=0.0, description="Weight of the text-span distance")
    lambda_structure: float = Field(1.0, ge=0.0, description="Weight of the structure mismatch")
    lambda_unmapped: float = Field(1.0, ge=0.0, description="Weight of unmapped entities")
    max_iterations: int = Field(50, ge=1)
    restarts: int = Field(8, ge=1)
    samples_per_iteration: int = Field(16, ge=1)
    seed: int = 0
    size_prior: float = Field(1.0, ge=0.0, description="Exponent of the 1/size pattern prior")

    @model_validator(mode="after")
    def check_weights(self) -> "SynthesisConfig":
        if self.lambda_span == 0 and self.lambda_structure == 0 and self.lambda_unmapped == 0:
            raise ValueError("At least one divergence weight must be positive")
        return self


class MatchConfig(BaseModel):
    """Blend of exact and semantic scores used by operation matching."""

    w_exact: float = Field(0.7, ge=0.0, le=1.0)
    w_sem: float = Field(0.3, ge=0.0, le=1.0)
    floor: float = Field(0.35, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_blend(self) -> "MatchConfig":
        if abs(self.w_exact + self.w_sem - 1.0) > 1e-9:
            raise ValueError("w_exact and w_sem must sum to 1")
        return self


class GatewayConfig(BaseModel):
    """Extraction backend selection and service client limits."""

    backend: str = Field("rule", pattern="^(rule|service|fallback)$")
    timeout: float = Field(DEFAULT_TIMEOUT, gt=0)
    retries: int = Field(2, ge=0)
    max_concurrency: int = Field(4, ge=1)
    budget: int = Field(500, ge=0)
    max_tokens: int = Field(256, ge=1)
    cassette: Optional[str] = None
    cassette_mode: str = Field("off", pattern="^(off|record|replay)$")


DEFAULT_KEY_WEIGHTS = {"action": 3.0, "temperature": 2.0, "reagent": 2.0}


class EvalConfig(BaseModel):
    """Per-key weights for key-value comparison; unlisted keys weigh 1."""

    key_weights: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_KEY_WEIGHTS))


class RunConfig(BaseModel):
    """Everything a CLI run needs; file values are overridden by CLI flags."""

    dsl: Optional[str] = None
    rules: Optional[str] = None
    resources: Optional[str] = None
    out: str = "protoflow_out"
    formats: list = Field(default_factory=lambda: ["json", "dot", "text"])
    seed: int = 0
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    match: MatchConfig = Field(default_factory=MatchConfig)
    gateway: GatewayConfig = Field(default_factory=GatewayConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a run configuration, applying CLI overrides on top of file values.

    Args:
        path: Optional YAML file path
        overrides: Flat mapping of top-level or dotted keys ("gateway.budget")
                   whose non-None values replace file values

    Returns:
        Validated RunConfig

    Raises:
        FileNotFoundError: If path is given but doesn't exist
        ValueError: If the file fails validation
    """
    data: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value

    # the top-level seed drives synthesis unless the file pins its own
    if "seed" in data:
        data.setdefault("synthesis", {})
        if overrides and overrides.get("seed") is not None:
            data["synthesis"]["seed"] = data["seed"]
        else:
            data["synthesis"].setdefault("seed", data["seed"])

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ValueError(f"Invalid run config{f' {path}' if path else ''}: {e}")
