"""Letter-grade brand trust ratings and their numeric 25-100 scale.

The scale has 28 grades from AAA+ down to D. Adjacent grades are 2.5
points apart within a rating category; the numeric value drops by 5.0
when crossing into a lower category (A- to BBB+, B- to CCC+, C- to D).
"""

from __future__ import annotations

import csv
import io

from .errors import RatingError

# (label, description, numeric value), best to worst
GRADE_SCALE: tuple[tuple[str, str, float], ...] = (
    ("AAA+", "Prime", 100.00),
    ("AAA", "Prime", 97.50),
    ("AAA-", "Prime", 95.00),
    ("AA+", "High grade", 92.50),
    ("AA", "High grade", 90.00),
    ("AA-", "High grade", 87.50),
    ("A+", "Upper medium grade", 85.00),
    ("A", "Upper medium grade", 82.50),
    ("A-", "Upper medium grade", 80.00),
    ("BBB+", "Lower medium grade", 75.00),
    ("BBB", "Lower medium grade", 72.50),
    ("BBB-", "Lower medium grade", 70.00),
    ("BB+", "Speculative", 67.50),
    ("BB", "Speculative", 65.00),
    ("BB-", "Speculative", 62.50),
    ("B+", "Highly speculative", 60.00),
    ("B", "Highly speculative", 57.50),
    ("B-", "Highly speculative", 55.00),
    ("CCC+", "Substantial risks", 50.00),
    ("CCC", "Substantial risks", 47.50),
    ("CCC-", "Substantial risks", 45.00),
    ("CC+", "Extremely speculative", 42.50),
    ("CC", "Extremely speculative", 40.00),
    ("CC-", "Extremely speculative", 37.50),
    ("C+", "Default imminent", 35.00),
    ("C", "Default imminent", 32.50),
    ("C-", "Default imminent", 30.00),
    ("D", "In default", 25.00),
)

_VALUE_BY_GRADE = {label: value for label, _, value in GRADE_SCALE}

VALUE_MIN = GRADE_SCALE[-1][2]
VALUE_MAX = GRADE_SCALE[0][2]


def grade_to_numeric(grade: str) -> float:
    """Map a letter grade to its numeric value.

    Labels are matched case-insensitively after stripping surrounding
    whitespace. Raises :class:`RatingError` for unknown labels.
    """
    key = grade.strip().upper()
    try:
        return _VALUE_BY_GRADE[key]
    except KeyError:
        valid = ", ".join(label for label, _, _ in GRADE_SCALE)
        raise RatingError(
            f"unknown grade {grade!r}; valid grades: {valid}"
        ) from None


def numeric_to_grade(value: float) -> str:
    """Map a numeric value in [25, 100] to the nearest grade label.

    Exact scale values map to their own grade. Midpoint ties resolve to
    the higher grade. Values outside [25, 100] raise :class:`RatingError`.
    """
    if not VALUE_MIN <= value <= VALUE_MAX:
        raise RatingError(
            f"value {value} outside the rating scale [{VALUE_MIN}, {VALUE_MAX}]"
        )
    best = GRADE_SCALE[0]
    best_dist = abs(value - best[2])
    for entry in GRADE_SCALE[1:]:
        dist = abs(value - entry[2])
        # strict < keeps the earlier (higher) grade on ties
        if dist < best_dist:
            best, best_dist = entry, dist
    return best[0]


def scale_as_csv() -> str:
    """Render the full scale as CSV text (grade, description, value)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["grade", "description", "value"])
    for label, description, value in GRADE_SCALE:
        writer.writerow([label, description, f"{value:.2f}"])
    return buf.getvalue()
