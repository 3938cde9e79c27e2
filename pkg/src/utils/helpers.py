"""
Helper functions for Kernel Warehouse.
Contains utilities for exact budget parsing and topology hashing.
"""
import hashlib
import json
import logging
import math
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Any, Dict, Union

logger = logging.getLogger(__name__)

Rational = Union[Fraction, int, str]


def parse_rational(value: Rational) -> Fraction:
    """
    Parse a budget value into an exact rational.

    Args:
        value: Fraction, integer, or a string such as "1/2", "4" or "0.25"

    Returns:
        Exact Fraction

    Raises:
        ValueError: If the value cannot be read as a rational
    """
    if isinstance(value, bool):
        raise ValueError(f"Cannot interpret boolean {value!r} as a rational budget")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"Budget must be finite, got {value!r}")
        # go through the shortest decimal repr so 0.1 means 1/10
        return Fraction(Decimal(repr(value)))
    if isinstance(value, str):
        text = value.strip()
        if not text:
            raise ValueError("Empty string is not a rational budget")
        try:
            if "/" in text:
                return Fraction(text)
            number = Decimal(text)
            if not number.is_finite():
                raise ValueError("budget must be finite")
            return Fraction(number)
        except (ValueError, ZeroDivisionError, OverflowError, InvalidOperation) as e:
            raise ValueError(f"Cannot parse rational budget '{value}': {e}") from e
    raise ValueError(f"Unsupported budget type {type(value).__name__}: {value!r}")


def format_rational(value: Fraction) -> str:
    """Render a Fraction as "p/q", or "p" for integers."""
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def canonical_json(payload: Any) -> str:
    """Sorted-key, compact JSON used for hashing."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def topology_hash(structure: Dict[str, Any]) -> int:
    """
    Compute the 64-bit topology hash of a model description.

    Args:
        structure: JSON-serializable description of layers and warehouse settings

    Returns:
        Unsigned 64-bit integer built from the first 8 bytes of SHA-256
    """
    digest = hashlib.sha256(canonical_json(structure).encode("utf-8")).digest()
    value = int.from_bytes(digest[:8], "little")
    logger.debug(f"Topology hash {value:016x}")
    return value
