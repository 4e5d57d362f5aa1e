"""
tensor_io.py

Bit-exact reading and writing of the inputs that feed the pipeline:
TNSR tensor files (attention stacks, activations, gradients, saliency maps),
JSON annotation documents and JSON case manifests.

TNSR layout, all little-endian:
    b"TNSR" | u32 rank | rank x u32 dims | row-major float32 payload
"""

import json
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from dermatriage.logger import logger
from dermatriage.utils.data_checks import (
    NOSOLOGY_CLASSES,
    REFERENCE_LABELS,
    check_box,
    check_cascade_contract,
    check_choice,
    check_probability,
    check_structure_label,
    is_positive_int,
)

MAGIC = b"TNSR"
MAX_RANK = 4
ROW_SUM_TOLERANCE = 1e-4

_HEADER_DTYPE = np.dtype("<u4")
_PAYLOAD_DTYPE = np.dtype("<f4")

MANIFEST_FIELDS = (
    "case_id", "reference_label", "nosology_reference", "probability", "stage2_class",
    "attention_path", "activations_path", "gradients_path", "annotation_path",
    "architecture", "session",
)
_PATH_FIELDS = ("attention_path", "activations_path", "gradients_path", "annotation_path")


class BadMagic(Exception):
    """Raised when a tensor file does not start with the TNSR magic bytes."""
    pass


class RankOutOfRange(Exception):
    """Raised when a tensor rank is 0 or greater than 4."""
    pass


class InvalidDims(Exception):
    """Raised when a tensor dimension is zero or does not match the data length."""
    pass


class TruncatedPayload(Exception):
    """Raised when a tensor file is shorter (or longer) than its header declares."""
    pass


class NonFiniteValue(Exception):
    """Raised when a tensor or map contains NaN or infinity."""
    pass


class IoFailure(Exception):
    """Raised when a file cannot be read or written."""
    pass


class ParseError(Exception):
    """Raised when a JSON manifest or annotation document is malformed."""
    pass


class InvariantViolation(Exception):
    """Raised when a manifest case breaks a field invariant."""

    def __init__(self, case_id, field, reason=""):
        self.case_id = case_id
        self.field = field
        self.reason = reason
        super().__init__(f"case '{case_id}': invalid {field}: {reason}")


class BoxOutOfBounds(Exception):
    """Raised when an annotation box leaves the declared image."""
    pass


class ShapeMismatch(Exception):
    """Raised when paired tensors or attention layers disagree in shape."""
    pass


class InvalidAttention(Exception):
    """Raised when an attention stack has negative weights or inconsistent token counts."""
    pass


@dataclass(frozen=True)
class Tensor:
    """Dense float32 tensor of rank 1-4; data is held reshaped to dims."""
    dims: tuple
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not 1 <= len(dims) <= MAX_RANK:
            raise RankOutOfRange(f"rank {len(dims)} outside 1..{MAX_RANK}")
        if any(d < 1 for d in dims):
            raise InvalidDims(f"dims {dims} must all be positive")
        data = np.ascontiguousarray(self.data, dtype=_PAYLOAD_DTYPE)
        if data.size != prod(dims):
            raise InvalidDims(f"data length {data.size} does not match dims {dims}")
        if not np.isfinite(data).all():
            raise NonFiniteValue("tensor contains NaN or infinity")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data.reshape(dims))

    @classmethod
    def from_array(cls, array):
        array = np.asarray(array)
        return cls(dims=array.shape, data=array)


@dataclass(frozen=True)
class RowSumWarning:
    """An attention row whose sum deviates from 1 by more than the tolerance."""
    layer: int
    head: int | None
    row: int
    row_sum: float


@dataclass
class AttentionStack:
    """
    Per-layer attention for one image, shallowest layer first.

    Each layer is either raw (heads, T, T) or pre-averaged (T, T).
    """
    layers: list
    target_index: int = 0
    token_count: int = field(init=False)

    def __post_init__(self):
        if not self.layers:
            self.token_count = 0
            return
        token_counts = {layer.shape[-1] for layer in self.layers}
        for i, layer in enumerate(self.layers):
            if layer.ndim not in (2, 3) or layer.shape[-1] != layer.shape[-2]:
                raise InvalidAttention(f"layer {i} has shape {layer.shape}, expected (H, T, T) or (T, T)")
            if (layer < 0).any():
                raise InvalidAttention(f"layer {i} contains negative attention weights")
        if len(token_counts) != 1:
            raise InvalidAttention(f"layers disagree on token count: {sorted(token_counts)}")
        self.token_count = token_counts.pop()
        if not 0 <= self.target_index < self.token_count:
            raise InvalidAttention(f"target_index {self.target_index} outside [0, {self.token_count})")

    def row_sum_warnings(self, tolerance=ROW_SUM_TOLERANCE):
        """List every attention row whose sum is more than tolerance away from 1."""
        warnings = []
        for l, layer in enumerate(self.layers):
            heads = layer if layer.ndim == 3 else layer[np.newaxis]
            sums = heads.sum(axis=-1, dtype=np.float64)
            for h, r in zip(*np.nonzero(np.abs(sums - 1.0) > tolerance)):
                warnings.append(RowSumWarning(
                    layer=l,
                    head=int(h) if layer.ndim == 3 else None,
                    row=int(r),
                    row_sum=float(sums[h, r]),
                ))
        return warnings


@dataclass(frozen=True)
class GradCamInput:
    """Final-layer activations and class-score gradients, both (K, H, W)."""
    activations: np.ndarray
    gradients: np.ndarray
    class_id: str = "malignant"

    def __post_init__(self):
        if self.activations.ndim != 3:
            raise ShapeMismatch(f"activations must be (K, H, W), got {self.activations.shape}")
        if self.activations.shape != self.gradients.shape:
            raise ShapeMismatch(
                f"activations {self.activations.shape} and gradients {self.gradients.shape} differ"
            )


@dataclass(frozen=True)
class Box:
    """Half-open expert rectangle [x, x+w) x [y, y+h) tagged with its structure."""
    x: int
    y: int
    w: int
    h: int
    label: str = ""


@dataclass(frozen=True)
class AnnotationSet:
    image_width: int
    image_height: int
    boxes: tuple = ()


@dataclass(frozen=True)
class CaseManifest:
    """One patient/lesion as listed in a manifest; paths are resolved against the manifest folder."""
    case_id: str
    probability: float
    reference_label: str | None = None
    nosology_reference: str | None = None
    stage2_class: str | None = None
    attention_path: Path | None = None
    activations_path: Path | None = None
    gradients_path: Path | None = None
    annotation_path: Path | None = None
    architecture: str = "unknown"
    session: str = ""


# --- Tensors ---

def read_tensor(path):
    """
    Read a TNSR file.

    Parameters:
    path (str | Path): File to read.

    Returns:
    Tensor: dims and float32 data exactly as stored.

    Raises:
    IoFailure, BadMagic, RankOutOfRange, InvalidDims, TruncatedPayload, NonFiniteValue
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read tensor file {path}: {e}") from e

    if raw[:4] != MAGIC:
        raise BadMagic(f"{path} does not start with {MAGIC!r}")
    if len(raw) < 8:
        raise TruncatedPayload(f"{path} ends inside the header")

    rank = int(np.frombuffer(raw, dtype=_HEADER_DTYPE, count=1, offset=4)[0])
    if not 1 <= rank <= MAX_RANK:
        raise RankOutOfRange(f"{path} declares rank {rank}")

    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise TruncatedPayload(f"{path} ends inside the dims block")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=_HEADER_DTYPE, count=rank, offset=8))
    if any(d == 0 for d in dims):
        raise InvalidDims(f"{path} declares a zero dimension {dims}")

    expected = prod(dims) * _PAYLOAD_DTYPE.itemsize
    payload_len = len(raw) - header_end
    if payload_len != expected:
        raise TruncatedPayload(f"{path} payload is {payload_len} bytes, header declares {expected}")

    data = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE, offset=header_end).copy()
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{path} contains NaN or infinity")

    logger.debug(f"Read tensor {Path(path).name} with dims {dims}")
    return Tensor(dims=dims, data=data)


def write_tensor(t, path):
    """Write a Tensor as a TNSR file that read_tensor returns bit-for-bit."""
    header = MAGIC + np.array([len(t.dims), *t.dims], dtype=_HEADER_DTYPE).tobytes()
    payload = np.ascontiguousarray(t.data, dtype=_PAYLOAD_DTYPE).tobytes()
    try:
        Path(path).write_bytes(header + payload)
    except OSError as e:
        raise IoFailure(f"cannot write tensor file {path}: {e}") from e


def load_attention_stack(path, target_index=0):
    """
    Load an attention stack from one TNSR file.

    Rank 4 is read as raw (L, heads, T, T), rank 3 as pre-averaged (L, T, T)
    and rank 2 as a single pre-averaged layer.

    Returns:
    tuple: (AttentionStack, list of RowSumWarning). Row-sum deviations are
    logged, never fatal.
    """
    tensor = read_tensor(path)
    if tensor.data.ndim in (3, 4):
        layers = [tensor.data[l] for l in range(tensor.dims[0])]
    elif tensor.data.ndim == 2:
        layers = [tensor.data]
    else:
        raise InvalidAttention(f"{path}: rank-1 tensor cannot hold attention")

    stack = AttentionStack(layers=layers, target_index=target_index)
    warnings = stack.row_sum_warnings()
    if warnings:
        worst = max(warnings, key=lambda w: abs(w.row_sum - 1.0))
        logger.warning(
            f"{Path(path).name}: {len(warnings)} attention rows deviate from sum 1 "
            f"(worst: layer {worst.layer}, row {worst.row}, sum {worst.row_sum:.6f})"
        )
    return stack, warnings


def load_gradcam_input(activations_path, gradients_path, class_id="malignant"):
    """Load paired activation and gradient tensors for Grad-CAM."""
    activations = read_tensor(activations_path).data
    gradients = read_tensor(gradients_path).data
    return GradCamInput(activations=activations, gradients=gradients, class_id=class_id)


# --- Annotations ---

def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from e


def parse_annotations(document, source="<annotations>"):
    """Build an AnnotationSet from a decoded JSON object, validating every box."""
    if not isinstance(document, dict):
        raise ParseError(f"{source}: expected a JSON object")
    width = document.get("width")
    height = document.get("height")
    if not (is_positive_int(width) and is_positive_int(height)):
        raise ParseError(f"{source}: width and height must be positive integers")

    raw_boxes = document.get("boxes", [])
    if not isinstance(raw_boxes, list):
        raise ParseError(f"{source}: 'boxes' must be a list")

    boxes = []
    for i, raw in enumerate(raw_boxes):
        try:
            coords = tuple(raw[k] for k in ("x", "y", "w", "h"))
        except (KeyError, TypeError) as e:
            raise ParseError(f"{source}: box {i} is missing x/y/w/h") from e
        if not all(isinstance(c, int) and not isinstance(c, bool) for c in coords):
            raise ParseError(f"{source}: box {i} coordinates must be integers")

        problem = check_box(coords, width, height)
        if problem:
            raise BoxOutOfBounds(f"{source}: {problem}")

        label = str(raw.get("label", ""))
        check_structure_label(label)
        boxes.append(Box(*coords, label=label))

    return AnnotationSet(image_width=width, image_height=height, boxes=tuple(boxes))


def load_annotations(path):
    """
    Load an annotation document {width, height, boxes: [{x, y, w, h, label}]}.

    Out-of-bounds boxes are an error, never silently clipped. Overlapping
    boxes are all retained.
    """
    annotations = parse_annotations(_read_json(path), source=str(path))
    logger.debug(f"Loaded {len(annotations.boxes)} boxes from {Path(path).name}")
    return annotations


def write_annotations(annotations, path):
    """Write an AnnotationSet back to its JSON document form."""
    document = {
        "width": annotations.image_width,
        "height": annotations.image_height,
        "boxes": [
            {"x": b.x, "y": b.y, "w": b.w, "h": b.h, "label": b.label}
            for b in annotations.boxes
        ],
    }
    try:
        Path(path).write_text(json.dumps(document, indent=1) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


# --- Manifests ---

def parse_case(entry, base_dir):
    """
    Validate one manifest object and build its CaseManifest.

    Raises:
    ParseError: entry is not an object or has no usable case_id.
    InvariantViolation: a field breaks its invariant.
    """
    if not isinstance(entry, dict):
        raise ParseError("manifest entries must be JSON objects")
    case_id = entry.get("case_id")
    if not isinstance(case_id, str) or not case_id:
        raise ParseError(f"manifest entry without a case_id: {entry!r}")

    probability = entry.get("probability")
    problem = check_probability(probability)
    if problem:
        raise InvariantViolation(case_id, "probability", problem)

    stage2_class = entry.get("stage2_class")
    problem = check_cascade_contract(probability, stage2_class)
    if problem:
        raise InvariantViolation(case_id, "stage2_class", problem)

    for field_name, choices in (("reference_label", REFERENCE_LABELS),
                                ("nosology_reference", NOSOLOGY_CLASSES)):
        problem = check_choice(entry.get(field_name), choices, field_name)
        if problem:
            raise InvariantViolation(case_id, field_name, problem)

    paths = {}
    for field_name in _PATH_FIELDS:
        value = entry.get(field_name)
        if value is None:
            paths[field_name] = None
        elif isinstance(value, str) and value:
            paths[field_name] = Path(base_dir) / value
        else:
            raise InvariantViolation(case_id, field_name, f"expected a path string, got {value!r}")

    session = entry.get("session")
    return CaseManifest(
        case_id=case_id,
        probability=float(probability),
        reference_label=entry.get("reference_label"),
        nosology_reference=entry.get("nosology_reference"),
        stage2_class=stage2_class,
        architecture=str(entry.get("architecture") or "unknown"),
        session="" if session is None else str(session),
        **paths,
    )


def read_manifest_cases(path):
    """
    Load a manifest, separating valid cases from rejected ones.

    Returns:
    tuple: (list of CaseManifest, list of InvariantViolation), both in manifest order.
    Each rejection is logged with its case_id.

    Raises:
    IoFailure, ParseError: the document itself is unusable.
    """
    document = _read_json(path)
    if not isinstance(document, list):
        raise ParseError(f"{path}: manifest must be a JSON array of cases")

    base_dir = Path(path).resolve().parent
    cases, violations = [], []
    seen = set()
    for entry in document:
        try:
            case = parse_case(entry, base_dir)
            if case.case_id in seen:
                raise InvariantViolation(case.case_id, "case_id", "duplicate case_id")
        except InvariantViolation as e:
            logger.warning(f"Rejected manifest case: {e}")
            violations.append(e)
            continue
        seen.add(case.case_id)
        cases.append(case)

    logger.info(f"Loaded {len(cases)} cases from {Path(path).name} ({len(violations)} rejected)")
    return cases, violations


def load_manifest(path):
    """
    Load a manifest and enforce every CaseManifest invariant.

    Raises:
    InvariantViolation: for the first rejected case (all rejections are logged);
    no partially accepted manifest is ever returned.
    """
    cases, violations = read_manifest_cases(path)
    if violations:
        raise violations[0]
    return cases


def case_to_entry(case, base_dir=None):
    """Serialise a CaseManifest back to its manifest object, paths relative to base_dir."""
    entry = {}
    for name in MANIFEST_FIELDS:
        value = getattr(case, name)
        if isinstance(value, Path):
            value = value.relative_to(base_dir).as_posix() if base_dir else value.as_posix()
        entry[name] = value
    return entry


def write_manifest(cases, path):
    """Write cases as a JSON manifest; tensor paths are stored relative to the manifest folder."""
    base_dir = Path(path).resolve().parent
    entries = [case_to_entry(case, base_dir) for case in cases]
    try:
        Path(path).write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
