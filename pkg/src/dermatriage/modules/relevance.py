"""
relevance.py

Agreement between saliency maps and expert dermoscopic annotations.

Contains the following functions:
    binarize() - Threshold a normalised map into the model mask (strictly above tau).
    rasterize_annotations() - Union of all expert boxes as a mask.
    iou() - Pixel-count intersection over union of two masks.
    relevance_band() - Clinical reading of an IoU value.
    aggregate_iou() - Mean and sample SD per (architecture, class), plus per-architecture rows.
"""

import statistics
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
import pandas as pd

from dermatriage.logger import logger

DEFAULT_TAU = 0.5
FOCUSED_ABOVE = 0.5
PARTIAL_FROM = 0.3

# Group key used for the per-architecture row covering every class
OVERALL = "all"


class TauOutOfRange(Exception):
    """Raised when the binarisation threshold is outside [0, 1]."""
    pass


class DimensionMismatch(Exception):
    """Raised when two masks (or a map and its image) differ in size."""
    pass


class Band(StrEnum):
    FOCUSED = "Focused"
    PARTIAL = "Partial"
    IRRELEVANT = "Irrelevant"
    UNDEFINED = "Undefined"


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def area(self):
        return int(np.count_nonzero(self.bits))


@dataclass(frozen=True)
class RelevanceResult:
    """IoU with the pixel counts it came from; iou is None when both masks are empty."""
    iou: float | None
    band: Band
    model_area: int
    expert_area: int
    intersection_area: int

    @property
    def union_area(self):
        return self.model_area + self.expert_area - self.intersection_area

    @property
    def audit_flag(self):
        """Irrelevant and Undefined results go to manual review."""
        return self.band in (Band.IRRELEVANT, Band.UNDEFINED)


@dataclass(frozen=True)
class IoUSummary:
    architecture: str
    nosology_class: str
    n: int
    mean: float
    sd: float | None
    macro_mean: float | None = None


def binarize(saliency_map, tau=DEFAULT_TAU):
    """Model mask: pixels whose normalised value exceeds tau (a value equal to tau is left out)."""
    if not 0.0 <= tau <= 1.0:
        raise TauOutOfRange(f"tau {tau} outside [0, 1]")
    values = np.asarray(saliency_map.values, dtype=np.float64)
    return BinaryMask(bits=values > tau)


def rasterize_annotations(annotations):
    """Expert mask: union of all half-open boxes."""
    bits = np.zeros((annotations.image_height, annotations.image_width), dtype=bool)
    for box in annotations.boxes:
        bits[box.y:box.y + box.h, box.x:box.x + box.w] = True
    return BinaryMask(bits=bits)


def relevance_band(iou_value):
    """
    Clinical reading of an IoU value.

    > 0.5 Focused; 0.3 to 0.5 inclusive Partial (visual review);
    < 0.3 Irrelevant (manual-review flag).
    """
    if iou_value > FOCUSED_ABOVE:
        return Band.FOCUSED
    if iou_value >= PARTIAL_FROM:
        return Band.PARTIAL
    return Band.IRRELEVANT


def iou(a, b):
    """
    Intersection over union of two equally sized masks, from exact pixel counts.

    Returns:
    RelevanceResult: band Undefined (iou None) when the union is empty.
    """
    if a.bits.shape != b.bits.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")

    intersection = int(np.count_nonzero(a.bits & b.bits))
    area_a, area_b = a.area, b.area
    union = area_a + area_b - intersection

    if union == 0:
        logger.warning("Both masks are empty; IoU undefined, flagged for manual review")
        return RelevanceResult(None, Band.UNDEFINED, area_a, area_b, intersection)

    value = intersection / union
    return RelevanceResult(value, relevance_band(value), area_a, area_b, intersection)


def evaluate_case(saliency_map, annotations, tau=DEFAULT_TAU):
    """Binarise a map, rasterise its annotations and score them."""
    if (saliency_map.height, saliency_map.width) != (annotations.image_height, annotations.image_width):
        raise DimensionMismatch(
            f"map {saliency_map.width}x{saliency_map.height} does not match image "
            f"{annotations.image_width}x{annotations.image_height}"
        )
    return iou(binarize(saliency_map, tau), rasterize_annotations(annotations))


def _summarise(architecture, nosology_class, values):
    values = [float(v) for v in values]
    # statistics works on exact fractions, so the mean never leaves [min, max]
    sd = statistics.stdev(values) if len(values) >= 2 else None
    return IoUSummary(architecture, nosology_class, len(values), statistics.mean(values), sd)


def aggregate_iou(results):
    """
    Group IoU values by architecture and nosological class.

    Parameters:
    results: iterable of (architecture, class, iou) with iou in [0, 1].

    Returns:
    list of IoUSummary: per architecture (sorted), its class rows (sorted)
    followed by one OVERALL row pooling every result of that architecture.
    The OVERALL row also carries macro_mean, the unweighted mean of its class means.
    """
    frame = pd.DataFrame(list(results), columns=["architecture", "nosology_class", "iou"])
    summaries = []
    for architecture, arch_frame in frame.groupby("architecture", sort=True):
        class_rows = [
            _summarise(architecture, nosology_class, group["iou"])
            for nosology_class, group in arch_frame.groupby("nosology_class", sort=True)
        ]
        overall = _summarise(architecture, OVERALL, arch_frame["iou"])
        macro = statistics.mean(row.mean for row in class_rows)
        summaries.extend(class_rows)
        summaries.append(IoUSummary(overall.architecture, OVERALL, overall.n, overall.mean, overall.sd, macro))
    return summaries
