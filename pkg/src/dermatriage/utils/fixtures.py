"""
Deterministic fixture builders.

    build_validation_fixture() - 176-case screening manifest (sessions 6-9) and the GP paired-assessment file.
    build_iou_fixture() - 180 annotated cases per architecture with stored saliency maps.
    build_tensor_fixture() - a few raw attention / Grad-CAM cases for the saliency command.

The IoU fixture keeps every map on a 2000x1 image whose expert box covers
columns [0, 1000); a map set to 1 on columns [0, m) scores exactly m/1000.
"""

from pathlib import Path

import numpy as np
import pandas as pd

from dermatriage.logger import logger
from dermatriage.modules.saliency import SaliencyMap, SaliencyMethod, write_saliency_map
from dermatriage.modules.tensor_io import (
    AnnotationSet,
    Box,
    CaseManifest,
    Tensor,
    write_annotations,
    write_manifest,
    write_tensor,
)
from dermatriage.utils.rendering import write_csv

SEED = 20250607

# (session, patients, red, yellow, green)
SESSIONS = (
    ("6", 40, 7, 7, 26),
    ("7", 43, 6, 7, 30),
    ("8", 50, 7, 9, 34),
    ("9", 43, 5, 7, 31),
)

# Red-zone cases per session: (nosology, reference_label, stage2_class, probability or None)
RED_CASES = {
    "6": [("DN", "benign", "MEL", None)] * 4 + [("other", "benign", "BCC", None)] * 3,
    "7": [("BCC", "malignant", "BCC", None)] + [("DN", "benign", "MEL", None)] * 2
         + [("other", "benign", "MEL", None)] * 3,
    "8": [("MEL", "malignant", "MEL", None)] * 2 + [("other", "benign", "BCC", None)] * 5,
    "9": [("MEL", "malignant", "MEL", 0.71), ("BCC", "malignant", "BCC", None)]
         + [("other", "benign", "MEL", None)] * 3,
}

# GP correctness (without, with) the system: 123 both correct, 22 only with, 2 only without, 29 neither
GP_PATTERN = ((True, True),) * 123 + ((False, True),) * 22 + ((True, False),) * 2 + ((False, False),) * 29

# name, method, {class: (count, mean, sd)}, pooled mean
IOU_ARCHITECTURES = (
    ("ViT-B/16", SaliencyMethod.ROLLOUT,
     {"MEL": (18, 0.74, 0.09), "BCC": (15, 0.71, 0.11), "DN": (16, 0.68, 0.12), "NV": (131, None, 0.14)}, 0.69),
    ("Swin-T", SaliencyMethod.ROLLOUT,
     {"MEL": (18, 0.69, 0.10), "BCC": (15, 0.67, 0.13), "DN": (16, 0.63, 0.11), "NV": (131, None, 0.15)}, 0.64),
    ("ConvNeXt-B", SaliencyMethod.GRADCAM,
     {"MEL": (18, 0.58, 0.13), "BCC": (15, 0.56, 0.14), "DN": (16, 0.52, 0.13), "NV": (131, None, 0.16)}, 0.53),
    ("EfficientNetV2", SaliencyMethod.GRADCAM,
     {"MEL": (18, 0.55, 0.12), "BCC": (15, 0.54, 0.15), "DN": (16, 0.50, 0.14), "NV": (131, None, 0.17)}, 0.51),
)

IOU_IMAGE_WIDTH = 2000
IOU_BOX_WIDTH = 1000

INDEX_COLUMNS = ["case_id", "architecture", "method", "width", "height", "map_path"]


def architecture_slug(name):
    """'ViT-B/16' -> 'vit-b16'."""
    return "".join(ch for ch in name.lower() if ch.isalnum() or ch == "-")


# --- Validation cohort ---

def _session_rows(session, yellow, green):
    """(probability, reference_label, nosology, stage2_class) rows for one session."""
    rows = []
    for i, (nosology, label, stage2, probability) in enumerate(RED_CASES[session]):
        if probability is None:
            probability = round(0.50 + (i * 5 % 45) * 0.01, 2)
        rows.append((probability, label, nosology, stage2))
    for i in range(yellow):
        rows.append((round(0.15 + (i * 4 % 35) * 0.01, 2), "benign", "other" if i % 3 == 2 else "NV", None))
    for i in range(green):
        rows.append((round(0.01 + (i % 14) * 0.01, 2), "benign", "other" if i % 5 == 4 else "NV", None))
    return rows


def validation_cases():
    """The 176 screening cases in session order, each session listed Red, Yellow, Green."""
    cases = []
    for session, patients, red, yellow, green in SESSIONS:
        rows = _session_rows(session, yellow, green)
        if len(rows) != patients or len(RED_CASES[session]) != red:
            raise ValueError(f"session {session} composition does not add up to {patients} patients")
        for number, (probability, label, nosology, stage2) in enumerate(rows, start=1):
            cases.append(CaseManifest(
                case_id=f"S{session}-{number:03d}",
                probability=probability,
                reference_label=label,
                nosology_reference=nosology,
                stage2_class=stage2,
                session=session,
            ))
    return cases


def gp_assessments(cases):
    """Per-case GP correctness without and with the system, in case order."""
    if len(cases) != len(GP_PATTERN):
        raise ValueError(f"GP pattern covers {len(GP_PATTERN)} cases, got {len(cases)}")
    return pd.DataFrame(
        [(case.case_id, int(without), int(with_system))
         for case, (without, with_system) in zip(cases, GP_PATTERN)],
        columns=["case_id", "correct_without", "correct_with"],
    )


def build_validation_fixture(out_dir):
    """Write validation/manifest.json and validation/gp_paired.csv; return the manifest path."""
    folder = Path(out_dir) / "validation"
    folder.mkdir(parents=True, exist_ok=True)
    cases = validation_cases()
    manifest = folder / "manifest.json"
    write_manifest(cases, manifest)
    write_csv(gp_assessments(cases), folder / "gp_paired.csv")
    logger.info(f"Wrote {len(cases)}-case validation fixture to {folder}")
    return manifest


# --- IoU cohort ---

def thousandths(count, total, sd, rng):
    """
    count integers in [1, 1000] summing exactly to total, spread with roughly sd*1000.

    Raises:
    ValueError: total cannot be reached inside the bounds.
    """
    if not count <= total <= 1000 * count:
        raise ValueError(f"cannot spread {total} over {count} values in [1, 1000]")
    z = rng.standard_normal(count)
    if count > 1:
        z = (z - z.mean()) / z.std(ddof=1)
    values = np.clip(np.rint(total / count + sd * 1000 * z), 1, 1000).astype(np.int64)

    residual = int(total - values.sum())
    i = 0
    while residual != 0:
        step = 1 if residual > 0 else -1
        if 1 <= values[i] + step <= 1000:
            values[i] += step
            residual -= step
        i = (i + 1) % count
    return [int(v) for v in values]


def iou_class_values(classes, pooled_mean, rng):
    """
    Thousandths per class: fixed classes keep their means, NV absorbs the rest
    so the pooled mean over every case equals pooled_mean.
    """
    n_total = sum(count for count, _, _ in classes.values())
    pooled_total = round(pooled_mean * n_total * 1000)
    values = {}
    for nosology, (count, mean, sd) in classes.items():
        if mean is not None:
            values[nosology] = thousandths(count, round(mean * count * 1000), sd, rng)
    remaining = pooled_total - sum(sum(v) for v in values.values())
    for nosology, (count, mean, sd) in classes.items():
        if mean is None:
            values[nosology] = thousandths(count, remaining, sd, rng)
    return values


def iou_map(covered):
    """Map over the 2000x1 fixture image with value 1 on columns [0, covered)."""
    values = np.zeros((1, IOU_IMAGE_WIDTH), dtype=np.float32)
    values[0, :covered] = 1.0
    return values


def build_iou_fixture(out_dir, architectures=None):
    """
    Write iou/manifest.json, iou/annotations.json, iou/saliency/*.tnsr and
    iou/saliency_index.csv (the layout cmd_saliency produces).

    Parameters:
    architectures: optional subset of architecture names.

    Returns:
    Path: the manifest path.
    """
    folder = Path(out_dir) / "iou"
    maps_folder = folder / "saliency"
    maps_folder.mkdir(parents=True, exist_ok=True)

    annotation_path = folder / "annotations.json"
    write_annotations(
        AnnotationSet(IOU_IMAGE_WIDTH, 1, (Box(0, 0, IOU_BOX_WIDTH, 1, "reticular network"),)),
        annotation_path,
    )

    rng = np.random.default_rng(SEED)
    cases, index_rows = [], []
    for name, method, classes, pooled_mean in IOU_ARCHITECTURES:
        class_values = iou_class_values(classes, pooled_mean, rng)
        if architectures is not None and name not in architectures:
            continue
        slug = architecture_slug(name)
        counter = 0
        for nosology, values in class_values.items():
            malignant = nosology in ("MEL", "BCC")
            for covered in values:
                counter += 1
                case_id = f"{slug}-{counter:03d}"
                map_path = maps_folder / f"{case_id}.tnsr"
                write_saliency_map(SaliencyMap(iou_map(covered), method, name), map_path)
                cases.append(CaseManifest(
                    case_id=case_id,
                    probability=0.80 if malignant else 0.05,
                    reference_label="malignant" if malignant else "benign",
                    nosology_reference=nosology,
                    stage2_class=nosology if malignant else None,
                    annotation_path=annotation_path.resolve(),
                    architecture=name,
                    session="iou",
                ))
                index_rows.append([case_id, name, str(method), IOU_IMAGE_WIDTH, 1,
                                   map_path.relative_to(folder).as_posix()])

    manifest = folder / "manifest.json"
    write_manifest(cases, manifest)
    write_csv(pd.DataFrame(index_rows, columns=INDEX_COLUMNS), folder / "saliency_index.csv")
    logger.info(f"Wrote {len(cases)}-case IoU fixture to {folder}")
    return manifest


# --- Raw tensors ---

def row_stochastic(rng, shape):
    weights = rng.random(shape) + 0.05
    return weights / weights.sum(axis=-1, keepdims=True)


def build_tensor_fixture(out_dir):
    """
    Write tensors/ with one rollout case with a class token (1 + 4x4 tokens),
    one rollout case without (4x4 tokens) and one Grad-CAM case (4 channels, 4x4),
    each annotated on a 32x32 image.
    """
    folder = Path(out_dir) / "tensors"
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)

    annotation_path = folder / "annotations.json"
    write_annotations(
        AnnotationSet(32, 32, (Box(8, 8, 12, 10, "reticular network"), Box(18, 16, 8, 8, "blue-white veil"))),
        annotation_path,
    )

    write_tensor(Tensor.from_array(row_stochastic(rng, (2, 3, 17, 17))), folder / "vit_attention.tnsr")
    write_tensor(Tensor.from_array(row_stochastic(rng, (3, 16, 16))), folder / "swin_attention.tnsr")
    write_tensor(Tensor.from_array(rng.random((4, 4, 4))), folder / "convnext_activations.tnsr")
    write_tensor(Tensor.from_array(rng.standard_normal((4, 4, 4))), folder / "convnext_gradients.tnsr")

    annotation = annotation_path.resolve()
    cases = [
        CaseManifest("T-001", 0.62, "malignant", "MEL", "MEL", attention_path=(folder / "vit_attention.tnsr").resolve(),
                     annotation_path=annotation, architecture="ViT-B/16", session="demo"),
        CaseManifest("T-002", 0.31, "benign", "DN", attention_path=(folder / "swin_attention.tnsr").resolve(),
                     annotation_path=annotation, architecture="Swin-T", session="demo"),
        CaseManifest("T-003", 0.07, "benign", "NV",
                     activations_path=(folder / "convnext_activations.tnsr").resolve(),
                     gradients_path=(folder / "convnext_gradients.tnsr").resolve(),
                     annotation_path=annotation, architecture="ConvNeXt-B", session="demo"),
    ]
    manifest = folder / "manifest.json"
    write_manifest(cases, manifest)
    logger.info(f"Wrote {len(cases)}-case tensor fixture to {folder}")
    return manifest


def build_all(out_dir):
    """Write every fixture under out_dir and return their manifest paths by name."""
    return {
        "validation": build_validation_fixture(out_dir),
        "iou": build_iou_fixture(out_dir),
        "tensors": build_tensor_fixture(out_dir),
    }
