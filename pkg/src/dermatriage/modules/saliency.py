"""
saliency.py

Relevance maps for the two architecture families:
    - attention rollout for transformers (head-average, residual mix, layer product)
    - Grad-CAM for convolutional models (gradient-weighted activation sum, ReLU)

Raw maps are upsampled to the annotated image size with corner-aligned
bilinear interpolation and min-max normalised to [0, 1].
"""

from dataclasses import dataclass
from enum import StrEnum
from math import isqrt
from pathlib import Path

import numpy as np

from dermatriage.logger import logger
from dermatriage.modules.tensor_io import (
    NonFiniteValue,
    ShapeMismatch,
    Tensor,
    load_annotations,
    load_attention_stack,
    load_gradcam_input,
    read_tensor,
    write_tensor,
)


class EmptyStack(Exception):
    """Raised when attention rollout is given no layers."""
    pass


class GridMismatch(Exception):
    """Raised when the token count does not fit the requested patch grid."""
    pass


class MissingInput(Exception):
    """Raised when a case has neither an attention stack nor activations plus gradients."""
    pass


class SaliencyMethod(StrEnum):
    ROLLOUT = "Rollout"
    GRADCAM = "GradCam"


@dataclass(frozen=True)
class SaliencyMap:
    """Normalised relevance field (height, width), stored as float32 like every pipeline tensor."""
    values: np.ndarray
    method: SaliencyMethod
    architecture: str = "unknown"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ShapeMismatch(f"saliency map must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise NonFiniteValue("saliency map contains NaN or infinity")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "method", SaliencyMethod(self.method))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


# --- Attention rollout ---

def head_average(raw_layer):
    """Elementwise mean over the head axis of a (heads, T, T) attention layer."""
    raw_layer = np.asarray(raw_layer)
    if raw_layer.ndim != 3 or raw_layer.shape[0] < 1 or raw_layer.shape[1] != raw_layer.shape[2]:
        raise ShapeMismatch(f"expected (heads, T, T), got {raw_layer.shape}")
    return raw_layer.mean(axis=0, dtype=np.float64)


def rollout_factor(averaged, residual_weight=0.5):
    """M_l = w*I + (1 - w)*A_l; row-stochastic whenever A_l is."""
    averaged = np.asarray(averaged, dtype=np.float64)
    identity = np.eye(averaged.shape[0])
    return residual_weight * identity + (1.0 - residual_weight) * averaged


def rollout_factors(stack, residual_weight=0.5):
    """Per-layer rollout factors, shallowest layer first."""
    factors = []
    for i, layer in enumerate(stack.layers):
        averaged = head_average(layer) if layer.ndim == 3 else np.asarray(layer, dtype=np.float64)
        if averaged.ndim != 2 or averaged.shape[0] != averaged.shape[1]:
            raise ShapeMismatch(f"layer {i} is not square: {averaged.shape}")
        factors.append(rollout_factor(averaged, residual_weight))
    if factors and len({f.shape for f in factors}) != 1:
        raise ShapeMismatch("attention layers have different token counts")
    return factors


def attention_rollout(stack, residual_weight=0.5):
    """
    Compose per-layer attention into one token-to-token relevance matrix.

    Returns M_L @ ... @ M_2 @ M_1 where deeper layers are left factors.
    With residual_weight=0.5 each factor is 0.5*A_l + 0.5*I.
    """
    if not stack.layers:
        raise EmptyStack("attention stack has no layers")
    factors = rollout_factors(stack, residual_weight)
    rollout = np.eye(factors[0].shape[0])
    for factor in factors:
        rollout = factor @ rollout
    return rollout


def infer_rollout_layout(token_count):
    """
    Guess the patch grid from the token count.

    T - 1 a perfect square: one class token plus a square grid.
    T a perfect square: no class token (windowed models), full row kept.

    Returns:
    tuple: (grid_h, grid_w)
    """
    if token_count > 1 and isqrt(token_count - 1) ** 2 == token_count - 1:
        side = isqrt(token_count - 1)
        return side, side
    side = isqrt(token_count)
    if token_count >= 1 and side * side == token_count:
        return side, side
    raise GridMismatch(f"{token_count} tokens do not form a square patch grid")


def rollout_to_map(roll, target_index, grid_h, grid_w):
    """
    Take the target token's rollout row and lay it out on the patch grid.

    When T == grid_h*grid_w + 1 the target is a class token outside the grid
    and its own column is dropped; when T == grid_h*grid_w the full row is kept.
    """
    roll = np.asarray(roll)
    token_count = roll.shape[0]
    if not 0 <= target_index < token_count:
        raise GridMismatch(f"target_index {target_index} outside [0, {token_count})")
    cells = grid_h * grid_w
    row = roll[target_index]
    if token_count == cells + 1:
        row = np.delete(row, target_index)
    elif token_count != cells:
        raise GridMismatch(f"{token_count} tokens do not fit a {grid_h}x{grid_w} grid")
    return row.reshape(grid_h, grid_w)


# --- Grad-CAM ---

def gradcam(gradcam_input):
    """
    Grad-CAM map: ReLU(sum_k alpha_k * A^k), alpha_k the spatial mean of the
    class-score gradients for channel k (Z = H*W).
    """
    activations = gradcam_input.activations.astype(np.float64)
    gradients = gradcam_input.gradients.astype(np.float64)
    if activations.shape != gradients.shape:
        raise ShapeMismatch(f"activations {activations.shape} and gradients {gradients.shape} differ")
    alpha = gradients.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)


# --- Resampling and normalisation ---

def _source_coords(n_in, n_out):
    if n_in == 1:
        return np.zeros(n_out)
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def upsample_bilinear(raw_map, out_h, out_w):
    """
    Resize a 2-D map with corner-aligned bilinear interpolation.

    Output corners sample the input corners exactly; a single-row or
    single-column input is replicated.
    """
    raw_map = np.asarray(raw_map, dtype=np.float64)
    if raw_map.ndim != 2 or min(raw_map.shape) < 1 or out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"cannot resample {raw_map.shape} to {out_h}x{out_w}")
    h, w = raw_map.shape

    y = _source_coords(h, out_h)
    x = _source_coords(w, out_w)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (y - y0)[:, np.newaxis]
    wx = (x - x0)[np.newaxis, :]

    # lerp form a + (b - a) * t keeps constant maps exactly constant
    top = raw_map[y0][:, x0] + (raw_map[y0][:, x1] - raw_map[y0][:, x0]) * wx
    bottom = raw_map[y1][:, x0] + (raw_map[y1][:, x1] - raw_map[y1][:, x0]) * wx
    return top + (bottom - top) * wy


def normalize_minmax(raw_map):
    """(v - min) / (max - min); a constant map carries no localisation and becomes all zeros."""
    raw_map = np.asarray(raw_map, dtype=np.float64)
    if not np.isfinite(raw_map).all():
        raise NonFiniteValue("cannot normalise a map containing NaN or infinity")
    low, high = raw_map.min(), raw_map.max()
    if high == low:
        return np.zeros_like(raw_map)
    return (raw_map - low) / (high - low)


# --- Per-case pipeline ---

def compute_raw_map(case, residual_weight=0.5, target_index=0):
    """Run the method matching the case's inputs and return (raw map, method)."""
    if case.attention_path is not None:
        stack, _ = load_attention_stack(case.attention_path, target_index=target_index)
        roll = attention_rollout(stack, residual_weight)
        grid_h, grid_w = infer_rollout_layout(stack.token_count)
        return rollout_to_map(roll, target_index, grid_h, grid_w), SaliencyMethod.ROLLOUT

    if case.activations_path is not None and case.gradients_path is not None:
        class_id = case.stage2_class or "malignant"
        inputs = load_gradcam_input(case.activations_path, case.gradients_path, class_id)
        return gradcam(inputs), SaliencyMethod.GRADCAM

    raise MissingInput(f"case '{case.case_id}' has neither an attention stack nor activations+gradients")


def saliency_pipeline(case, residual_weight=0.5, target_index=0):
    """
    Produce the normalised SaliencyMap for one manifest case.

    The map is resized to the annotated image size; without an annotation
    file it stays at the model's grid resolution.
    """
    raw_map, method = compute_raw_map(case, residual_weight, target_index)

    if case.annotation_path is not None:
        annotations = load_annotations(case.annotation_path)
        out_h, out_w = annotations.image_height, annotations.image_width
    else:
        logger.warning(f"Case '{case.case_id}' has no annotation file; map kept at {raw_map.shape}")
        out_h, out_w = raw_map.shape

    values = normalize_minmax(upsample_bilinear(raw_map, out_h, out_w))
    logger.debug(f"Case '{case.case_id}': {method} map {out_w}x{out_h}")
    return SaliencyMap(values=values, method=method, architecture=case.architecture)


# --- Map files ---

def write_saliency_map(saliency_map, path):
    """Store a map as a rank-2 TNSR file."""
    write_tensor(Tensor.from_array(saliency_map.values), path)


def read_saliency_map(path, method, architecture="unknown"):
    tensor = read_tensor(path)
    if len(tensor.dims) != 2:
        raise ShapeMismatch(f"{path}: saliency map must be rank 2, got dims {tensor.dims}")
    return SaliencyMap(values=tensor.data, method=method, architecture=architecture)


def write_pgm(saliency_map, path):
    """Export a map as an 8-bit binary graymap (P5), quantised by round-half-up of v*255."""
    levels = np.floor(saliency_map.values.astype(np.float64) * 255.0 + 0.5)
    pixels = np.clip(levels, 0, 255).astype(np.uint8)
    header = f"P5\n{saliency_map.width} {saliency_map.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
