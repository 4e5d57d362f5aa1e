"""
Number formatting and table writers shared by the report commands.

Percentages are rounded half-up to one decimal from exact fractions so the
printed figures do not depend on binary floating point. Every CSV is written
with a header row and LF line endings.
"""

import math
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import pandas as pd


def percent_half_up(numerator, denominator):
    """
    Percentage of numerator/denominator rounded half-up to one decimal.

    Returns:
    Decimal | None: e.g. Decimal('68.8') for 121/176; None when denominator is 0.
    """
    if denominator == 0:
        return None
    tenths = math.floor(Fraction(1000 * numerator, denominator) + Fraction(1, 2))
    return Decimal(tenths).scaleb(-1)


def fraction_percent(value):
    """Percentage of an exact Fraction (or None) rounded half-up to one decimal."""
    if value is None:
        return None
    value = Fraction(value)
    return percent_half_up(value.numerator, value.denominator)


def real_percent(value):
    """One-decimal percentage of a float probability, via its exact binary value."""
    if value is None:
        return None
    return fraction_percent(Fraction(value))


def format_percent(value):
    """'68.8' for Decimal('68.8'); empty string for an absent value."""
    return "" if value is None else f"{value:.1f}"


def format_iou(value):
    """Two-decimal IoU rendering, rounded half-up from the exact binary value."""
    if value is None:
        return ""
    hundredths = math.floor(Fraction(value) * 100 + Fraction(1, 2))
    return f"{Decimal(hundredths).scaleb(-2):.2f}"


def write_csv(frame, path):
    """Write a DataFrame as comma-separated text with header and LF endings."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


def empty_frame(columns):
    """Header-only frame for commands that produced no rows."""
    return pd.DataFrame({column: pd.Series(dtype=object) for column in columns})


def markdown_table(header, rows):
    """Render a pipe table from a header list and rows of already formatted strings."""
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    lines.extend("| " + " | ".join(str(cell) for cell in row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def write_text(text, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
