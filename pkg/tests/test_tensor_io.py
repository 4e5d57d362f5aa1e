"""
Tests for tensor_io.py:
read_tensor(), write_tensor(),
load_attention_stack(), load_gradcam_input(),
parse_annotations(), load_annotations(),
read_manifest_cases(), load_manifest(), write_manifest().
"""

import json
import struct

import numpy as np
import pytest

from dermatriage.modules import tensor_io
from dermatriage.modules.tensor_io import (
    AttentionStack,
    BadMagic,
    BoxOutOfBounds,
    CaseManifest,
    InvalidAttention,
    InvalidDims,
    InvariantViolation,
    IoFailure,
    NonFiniteValue,
    ParseError,
    RankOutOfRange,
    ShapeMismatch,
    Tensor,
    TruncatedPayload,
)


### FIXTURES ###

def raw_tensor_bytes(dims, values):
    header = b"TNSR" + struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    return header + struct.pack(f"<{len(values)}f", *values)


@pytest.fixture
def manifest_dir(tmp_path):
    (tmp_path / "ann.json").write_text(
        json.dumps({"width": 4, "height": 3, "boxes": [{"x": 0, "y": 0, "w": 4, "h": 3, "label": "globules"}]})
    )
    return tmp_path


def write_manifest_doc(folder, entries):
    path = folder / "manifest.json"
    path.write_text(json.dumps(entries))
    return path


# Test read_tensor / write_tensor
def test_read_tensor_parses_reference_layout(tmp_path):
    """A hand-packed 2x3 file is read with the declared dims and exact values."""
    path = tmp_path / "t.tnsr"
    path.write_bytes(raw_tensor_bytes((2, 3), [0.0, 0.5, 1.0, -2.0, 3.25, 7.0]))

    tensor = tensor_io.read_tensor(path)

    assert tensor.dims == (2, 3)
    assert tensor.data.dtype == np.float32
    assert tensor.data.tolist() == [[0.0, 0.5, 1.0], [-2.0, 3.25, 7.0]]


def test_write_tensor_matches_reference_bytes(tmp_path):
    """Writer produces the same bytes as the hand-packed layout."""
    path = tmp_path / "t.tnsr"
    tensor_io.write_tensor(Tensor.from_array(np.array([[1.5, -1.0]], dtype=np.float32)), path)

    assert path.read_bytes() == raw_tensor_bytes((1, 2), [1.5, -1.0])


def test_written_tensor_is_read_bit_for_bit(tmp_path):
    """Float32 payloads survive a write and read without any change."""
    rng = np.random.default_rng(3)
    data = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    path = tmp_path / "t.tnsr"

    tensor_io.write_tensor(Tensor.from_array(data), path)

    assert tensor_io.read_tensor(path).data.tobytes() == data.tobytes()


def test_read_tensor_rejects_bad_magic(tmp_path):
    path = tmp_path / "t.tnsr"
    path.write_bytes(b"TNSX" + raw_tensor_bytes((1,), [1.0])[4:])
    with pytest.raises(BadMagic):
        tensor_io.read_tensor(path)


@pytest.mark.parametrize("rank", [0, 5])
def test_read_tensor_rejects_rank_out_of_range(tmp_path, rank):
    path = tmp_path / "t.tnsr"
    path.write_bytes(b"TNSR" + struct.pack("<I", rank) + struct.pack(f"<{rank}I", *([1] * rank)))
    with pytest.raises(RankOutOfRange):
        tensor_io.read_tensor(path)


def test_read_tensor_rejects_zero_dimension(tmp_path):
    path = tmp_path / "t.tnsr"
    path.write_bytes(raw_tensor_bytes((2, 0), []))
    with pytest.raises(InvalidDims):
        tensor_io.read_tensor(path)


def test_read_tensor_rejects_short_and_long_payloads(tmp_path):
    """Both a missing float and a trailing float are payload-length errors."""
    short = tmp_path / "short.tnsr"
    short.write_bytes(raw_tensor_bytes((3,), [1.0, 2.0, 3.0])[:-4])
    long = tmp_path / "long.tnsr"
    long.write_bytes(raw_tensor_bytes((3,), [1.0, 2.0, 3.0]) + struct.pack("<f", 4.0))

    with pytest.raises(TruncatedPayload):
        tensor_io.read_tensor(short)
    with pytest.raises(TruncatedPayload):
        tensor_io.read_tensor(long)


def test_read_tensor_rejects_header_cut_short(tmp_path):
    path = tmp_path / "t.tnsr"
    path.write_bytes(b"TNSR" + struct.pack("<I", 2) + struct.pack("<I", 3))
    with pytest.raises(TruncatedPayload):
        tensor_io.read_tensor(path)


def test_read_tensor_rejects_nan(tmp_path):
    path = tmp_path / "t.tnsr"
    path.write_bytes(raw_tensor_bytes((2,), [1.0, float("nan")]))
    with pytest.raises(NonFiniteValue):
        tensor_io.read_tensor(path)


def test_read_tensor_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        tensor_io.read_tensor(tmp_path / "absent.tnsr")


def test_tensor_rejects_length_mismatch():
    with pytest.raises(InvalidDims):
        Tensor(dims=(2, 2), data=np.zeros(3))


# Test load_attention_stack
def test_load_attention_stack_raw_layers(tmp_path):
    """Rank-4 files give one (heads, T, T) array per layer and no warnings when rows sum to 1."""
    data = np.full((2, 3, 5, 5), 0.2, dtype=np.float32)
    path = tmp_path / "att.tnsr"
    tensor_io.write_tensor(Tensor.from_array(data), path)

    stack, warnings = tensor_io.load_attention_stack(path)

    assert len(stack.layers) == 2
    assert stack.layers[0].shape == (3, 5, 5)
    assert stack.token_count == 5
    assert warnings == []


def test_load_attention_stack_reports_row_sum_deviation(tmp_path):
    """A row summing to 1.1 is reported with its layer, head and row."""
    data = np.full((1, 2, 4, 4), 0.25, dtype=np.float32)
    data[0, 1, 2, 0] = 0.35
    path = tmp_path / "att.tnsr"
    tensor_io.write_tensor(Tensor.from_array(data), path)

    _, warnings = tensor_io.load_attention_stack(path)

    assert len(warnings) == 1
    assert (warnings[0].layer, warnings[0].head, warnings[0].row) == (0, 1, 2)
    assert warnings[0].row_sum == pytest.approx(1.1, abs=1e-6)


def test_attention_stack_rejects_negative_weights():
    layer = np.full((3, 3), 1 / 3)
    layer[0, 0] = -0.1
    with pytest.raises(InvalidAttention):
        AttentionStack(layers=[layer])


def test_attention_stack_rejects_mixed_token_counts():
    with pytest.raises(InvalidAttention):
        AttentionStack(layers=[np.eye(3), np.eye(4)])


def test_load_gradcam_input_requires_matching_shapes(tmp_path):
    tensor_io.write_tensor(Tensor.from_array(np.ones((2, 3, 3))), tmp_path / "a.tnsr")
    tensor_io.write_tensor(Tensor.from_array(np.ones((2, 3, 4))), tmp_path / "g.tnsr")
    with pytest.raises(ShapeMismatch):
        tensor_io.load_gradcam_input(tmp_path / "a.tnsr", tmp_path / "g.tnsr")


# Test annotations
def test_parse_annotations_keeps_overlapping_boxes():
    doc = {"width": 10, "height": 10, "boxes": [
        {"x": 0, "y": 0, "w": 5, "h": 5, "label": "globules"},
        {"x": 2, "y": 2, "w": 5, "h": 5, "label": "blue-white veil"},
    ]}
    annotations = tensor_io.parse_annotations(doc)
    assert len(annotations.boxes) == 2
    assert annotations.boxes[1].label == "blue-white veil"


def test_parse_annotations_accepts_box_touching_far_edge():
    doc = {"width": 10, "height": 8, "boxes": [{"x": 6, "y": 4, "w": 4, "h": 4}]}
    assert tensor_io.parse_annotations(doc).boxes[0].w == 4


def test_parse_annotations_rejects_box_past_edge():
    doc = {"width": 10, "height": 8, "boxes": [{"x": 7, "y": 0, "w": 4, "h": 2}]}
    with pytest.raises(BoxOutOfBounds):
        tensor_io.parse_annotations(doc)


def test_parse_annotations_rejects_missing_size():
    with pytest.raises(ParseError):
        tensor_io.parse_annotations({"boxes": []})


def test_load_annotations_rejects_invalid_json(tmp_path):
    path = tmp_path / "ann.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        tensor_io.load_annotations(path)


# Test manifests
def test_read_manifest_cases_resolves_paths(manifest_dir):
    path = write_manifest_doc(manifest_dir, [{
        "case_id": "c1", "probability": 0.7, "reference_label": "malignant",
        "nosology_reference": "MEL", "stage2_class": "MEL", "annotation_path": "ann.json",
        "architecture": "ViT-B/16", "session": 8,
    }])

    cases, violations = tensor_io.read_manifest_cases(path)

    assert violations == []
    assert cases[0].annotation_path == manifest_dir.resolve() / "ann.json"
    assert cases[0].session == "8"


@pytest.mark.parametrize("entry, field", [
    ({"case_id": "c1", "probability": 1.2}, "probability"),
    ({"case_id": "c1", "probability": 0.2, "stage2_class": "MEL"}, "stage2_class"),
    ({"case_id": "c1", "probability": 0.2, "reference_label": "maybe"}, "reference_label"),
    ({"case_id": "c1", "probability": 0.2, "nosology_reference": "XYZ"}, "nosology_reference"),
])
def test_read_manifest_cases_collects_violations(manifest_dir, entry, field):
    """Invalid entries are returned as violations naming the case and field."""
    path = write_manifest_doc(manifest_dir, [entry, {"case_id": "ok", "probability": 0.1}])

    cases, violations = tensor_io.read_manifest_cases(path)

    assert [c.case_id for c in cases] == ["ok"]
    assert violations[0].case_id == "c1"
    assert violations[0].field == field


def test_read_manifest_cases_rejects_duplicate_ids(manifest_dir):
    path = write_manifest_doc(manifest_dir, [
        {"case_id": "c1", "probability": 0.1},
        {"case_id": "c1", "probability": 0.2},
    ])
    cases, violations = tensor_io.read_manifest_cases(path)
    assert len(cases) == 1
    assert violations[0].field == "case_id"


def test_load_manifest_raises_on_any_violation(manifest_dir):
    path = write_manifest_doc(manifest_dir, [{"case_id": "c1", "probability": -0.1}])
    with pytest.raises(InvariantViolation):
        tensor_io.load_manifest(path)


def test_load_manifest_requires_array(manifest_dir):
    path = manifest_dir / "manifest.json"
    path.write_text(json.dumps({"case_id": "c1"}))
    with pytest.raises(ParseError):
        tensor_io.load_manifest(path)


def test_write_manifest_stores_relative_paths(manifest_dir):
    case = CaseManifest("c1", 0.05, "benign", "NV", annotation_path=(manifest_dir / "ann.json").resolve())
    path = manifest_dir / "manifest.json"

    tensor_io.write_manifest([case], path)

    entry = json.loads(path.read_text())[0]
    assert entry["annotation_path"] == "ann.json"
    assert tensor_io.load_manifest(path) == [case]
