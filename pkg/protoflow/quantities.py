"""
Quantity Grammar

Recognizes numbers with units in protocol text: decimals, vulgar and mixed
fractions ("1 1/2"), ranges ("5-10 minutes", "20 to 25 °C"), approximate
values ("~8 minutes") and unit synonyms (min/minutes, mL/ml/milliliters,
°C/C/F with an explicit scale tag).

Core functions:
    - find_quantities() - Locate every quantity in a text with its span
    - parse_quantity() - Parse a standalone quantity literal ("300F", "2mins")
    - Quantity.base() / Quantity.render() - Convert to base units / compact text
"""

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

# Unit dimensions a parameter schema may declare
DIMENSIONS = (
    "volume-mL",
    "mass-g",
    "temperature-C",
    "duration-s",
    "rate",
    "count",
    "dimensionless",
)

# surface (lowercase) -> (canonical unit, dimension)
UNIT_SYNONYMS: Dict[str, Tuple[str, str]] = {
    # volume
    "ml": ("mL", "volume-mL"),
    "milliliter": ("mL", "volume-mL"),
    "milliliters": ("mL", "volume-mL"),
    "millilitre": ("mL", "volume-mL"),
    "millilitres": ("mL", "volume-mL"),
    "l": ("L", "volume-mL"),
    "liter": ("L", "volume-mL"),
    "liters": ("L", "volume-mL"),
    "litre": ("L", "volume-mL"),
    "litres": ("L", "volume-mL"),
    "ul": ("uL", "volume-mL"),
    "µl": ("uL", "volume-mL"),
    "μl": ("uL", "volume-mL"),
    "microliter": ("uL", "volume-mL"),
    "microliters": ("uL", "volume-mL"),
    "cup": ("cup", "volume-mL"),
    "cups": ("cup", "volume-mL"),
    "floz": ("floz", "volume-mL"),
    "fl oz": ("floz", "volume-mL"),
    "tbsp": ("tbsp", "volume-mL"),
    "tablespoon": ("tbsp", "volume-mL"),
    "tablespoons": ("tbsp", "volume-mL"),
    "tsp": ("tsp", "volume-mL"),
    "teaspoon": ("tsp", "volume-mL"),
    "teaspoons": ("tsp", "volume-mL"),
    # mass
    "g": ("g", "mass-g"),
    "gram": ("g", "mass-g"),
    "grams": ("g", "mass-g"),
    "mg": ("mg", "mass-g"),
    "milligram": ("mg", "mass-g"),
    "milligrams": ("mg", "mass-g"),
    "kg": ("kg", "mass-g"),
    "kilogram": ("kg", "mass-g"),
    "kilograms": ("kg", "mass-g"),
    "oz": ("oz", "mass-g"),
    "ounce": ("oz", "mass-g"),
    "ounces": ("oz", "mass-g"),
    "lb": ("lb", "mass-g"),
    "lbs": ("lb", "mass-g"),
    "pound": ("lb", "mass-g"),
    "pounds": ("lb", "mass-g"),
    # temperature
    "°c": ("C", "temperature-C"),
    "ºc": ("C", "temperature-C"),
    "° c": ("C", "temperature-C"),
    "c": ("C", "temperature-C"),
    "degc": ("C", "temperature-C"),
    "degrees celsius": ("C", "temperature-C"),
    "celsius": ("C", "temperature-C"),
    "°f": ("F", "temperature-C"),
    "ºf": ("F", "temperature-C"),
    "° f": ("F", "temperature-C"),
    "f": ("F", "temperature-C"),
    "degf": ("F", "temperature-C"),
    "degrees fahrenheit": ("F", "temperature-C"),
    "fahrenheit": ("F", "temperature-C"),
    # duration
    "s": ("s", "duration-s"),
    "sec": ("s", "duration-s"),
    "secs": ("s", "duration-s"),
    "second": ("s", "duration-s"),
    "seconds": ("s", "duration-s"),
    "min": ("min", "duration-s"),
    "mins": ("min", "duration-s"),
    "minute": ("min", "duration-s"),
    "minutes": ("min", "duration-s"),
    "h": ("h", "duration-s"),
    "hr": ("h", "duration-s"),
    "hrs": ("h", "duration-s"),
    "hour": ("h", "duration-s"),
    "hours": ("h", "duration-s"),
    # rate
    "ml/s": ("mL/s", "rate"),
    "ml/min": ("mL/min", "rate"),
    "rpm": ("rpm", "rate"),
    "x g": ("xg", "rate"),
    "xg": ("xg", "rate"),
    "×g": ("xg", "rate"),
    "× g": ("xg", "rate"),
    # count
    "times": ("times", "count"),
    "pcs": ("pcs", "count"),
}

# Factor to the dimension's base unit (mL, g, s); temperature handled apart
_BASE_FACTORS: Dict[str, float] = {
    "mL": 1.0,
    "L": 1000.0,
    "uL": 0.001,
    "cup": 236.588,
    "floz": 29.5735,
    "tbsp": 14.7868,
    "tsp": 4.92892,
    "g": 1.0,
    "mg": 0.001,
    "kg": 1000.0,
    "oz": 28.3495,
    "lb": 453.592,
    "s": 1.0,
    "min": 60.0,
    "h": 3600.0,
}

_NUMBER = r"(?:\d+\s+\d+/\d+|\d+/\d+|\d+(?:\.\d+)?|\.\d+)"
_UNIT_ALTERNATION = "|".join(
    re.escape(unit) for unit in sorted(UNIT_SYNONYMS, key=len, reverse=True)
)
QUANTITY_RE = re.compile(
    rf"(?P<approx>~\s*)?(?P<low>{_NUMBER})"
    rf"(?:\s*(?:-|–|to)\s*(?P<high>{_NUMBER}))?"
    rf"\s*(?P<unit>{_UNIT_ALTERNATION})(?![A-Za-z])",
    re.IGNORECASE,
)
_BARE_NUMBER_RE = re.compile(rf"^\s*~?\s*(?P<low>{_NUMBER})\s*$")


def parse_number(text: str) -> float:
    """Parse "7.5", "1/4" or "1 1/2" into a float."""
    text = text.strip()
    if " " in text:
        whole, frac = text.split(None, 1)
        return float(int(whole) + Fraction(frac))
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _format_number(value: float) -> str:
    return f"{value:g}"


@dataclass(frozen=True)
class Quantity:
    """A number (or range) with a canonical unit and dimension."""

    value: float
    unit: str
    dimension: str
    high: Optional[float] = None
    text: str = field(default="", compare=False)

    @property
    def is_range(self) -> bool:
        return self.high is not None

    def base(self) -> Tuple[float, float]:
        """Return (low, high) in the dimension's base unit (mL, g, °C, s)."""
        high = self.value if self.high is None else self.high
        return to_base(self.value, self.unit), to_base(high, self.unit)

    def worst_case(self) -> float:
        """Upper endpoint in base units, used for conservative checks."""
        return self.base()[1]

    def render(self) -> str:
        number = _format_number(self.value)
        if self.high is not None:
            number += "-" + _format_number(self.high)
        return f"{number}{self.unit}"

    def __str__(self) -> str:
        return self.render()


def to_base(value: float, unit: str) -> float:
    if unit == "F":
        return (value - 32.0) * 5.0 / 9.0
    return value * _BASE_FACTORS.get(unit, 1.0)


def _build(match: "re.Match[str]") -> Quantity:
    unit, dimension = UNIT_SYNONYMS[match.group("unit").lower()]
    high = match.group("high")
    return Quantity(
        value=parse_number(match.group("low")),
        unit=unit,
        dimension=dimension,
        high=parse_number(high) if high else None,
        text=match.group(0),
    )


def find_quantities(text: str) -> List[Tuple[Quantity, int, int]]:
    """
    Locate every quantity in text.

    Args:
        text: Any string (markup should already be masked)

    Returns:
        List of (quantity, start, end) in text order; text[start:end] equals
        the quantity's surface text.
    """
    return [(_build(m), m.start(), m.end()) for m in QUANTITY_RE.finditer(text)]


def parse_quantity(text: str) -> Optional[Quantity]:
    """
    Parse a standalone quantity literal such as "300F", "2mins" or "20-25 °C".

    Bare numbers parse as dimensionless quantities. Returns None when the
    text is not a quantity.
    """
    match = QUANTITY_RE.fullmatch(text.strip())
    if match:
        return _build(match)
    bare = _BARE_NUMBER_RE.match(text)
    if bare:
        return Quantity(parse_number(bare.group("low")), "", "dimensionless", text=text.strip())
    return None
