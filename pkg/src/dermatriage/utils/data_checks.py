"""
Field-level checks shared by the manifest, annotation and registry loaders.

Each check returns None when the value is acceptable, or a short reason
string describing what is wrong, so the caller can decide whether to raise,
collect or log.
"""

import math

from dermatriage.logger import logger

REFERENCE_LABELS = ("malignant", "benign")
NOSOLOGY_CLASSES = ("MEL", "BCC", "SCC", "DN", "NV", "other")
STAGE2_CLASSES = ("MEL", "SCC", "BCC")

# Stage 2 of the cascade only runs at or above this probability
STAGE2_MIN_PROBABILITY = 0.50

STRUCTURE_LABELS = (
    "reticular network",
    "globules",
    "pseudopods",
    "blue-white veil",
    "vascular",
    "pseudopodial",
)


def is_real_number(value):
    """True for int/float values that are not booleans and are finite."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    return math.isfinite(value)


def is_positive_int(value):
    """True for ints (not booleans) greater than zero."""
    return isinstance(value, int) and not isinstance(value, bool) and value > 0


def check_probability(value):
    """
    Check a cascade Stage-1 probability.

    Args:
        value: Raw value from the manifest.

    Returns:
        None if value is a finite real in [0, 1], otherwise the reason.
    """
    if not is_real_number(value):
        return f"probability must be a finite number, got {value!r}"
    if not 0.0 <= value <= 1.0:
        return f"probability {value} outside [0, 1]"
    return None


def check_cascade_contract(probability, stage2_class):
    """
    Check that a Stage-2 class only accompanies a probability that triggers Stage 2.

    Returns:
        None if the pairing is valid, otherwise the reason.
    """
    if stage2_class is None:
        return None
    if stage2_class not in STAGE2_CLASSES:
        return f"stage2_class must be one of {STAGE2_CLASSES}, got {stage2_class!r}"
    if probability < STAGE2_MIN_PROBABILITY:
        return f"stage2_class {stage2_class} present with P={probability} < {STAGE2_MIN_PROBABILITY}"
    return None


def check_choice(value, choices, field, allow_none=True):
    """Check an enumerated field, optionally allowing null."""
    if value is None and allow_none:
        return None
    if value not in choices:
        return f"{field} must be one of {choices}, got {value!r}"
    return None


def check_box(box, image_width, image_height):
    """
    Check one (x, y, w, h) annotation rectangle against the image bounds.

    Boxes are half-open: the box covers columns [x, x+w) and rows [y, y+h),
    so a box touching the right or bottom edge has x + w == width.

    Returns:
        None if the box lies fully inside the image, otherwise the reason.
    """
    x, y, w, h = box
    if w < 1 or h < 1:
        return f"box {box} has non-positive size"
    if x < 0 or y < 0 or x + w > image_width or y + h > image_height:
        return f"box {box} exceeds image {image_width}x{image_height}"
    return None


def check_structure_label(label):
    """Warn (not fail) on dermoscopic structure labels outside the known vocabulary."""
    if label not in STRUCTURE_LABELS:
        logger.warning(f"Unrecognised dermoscopic structure label '{label}'")
        return False
    return True
