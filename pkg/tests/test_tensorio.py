import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rankforge.tensorio import (
    MAGIC,
    ManifestError,
    TensorFile,
    TensorFormatError,
    TensorLengthError,
    load_manifest,
    read_tensor,
    write_tensor,
)


def test_read_known_bytes(tmp_path):
    payload = MAGIC + bytes([1, 2]) + struct.pack("<2Q", 2, 2) + struct.pack("<4d", 1, 2, 3, 4)
    (tmp_path / "t.rnkt").write_bytes(payload)
    t = read_tensor(tmp_path / "t.rnkt")
    assert t.shape == (2, 2)
    assert t.data.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]
    assert t.data[0, 1] == 2.0  # row-major


def test_declared_shape_longer_than_payload(tmp_path):
    payload = MAGIC + bytes([1, 2]) + struct.pack("<2Q", 3, 3) + np.zeros(8).tobytes()
    (tmp_path / "t.rnkt").write_bytes(payload)
    with pytest.raises(TensorLengthError):
        read_tensor(tmp_path / "t.rnkt")


@pytest.mark.parametrize(
    "blob",
    [b"", b"NOTMAGIC\x01\x01", MAGIC + bytes([7, 1]) + bytes(8), MAGIC + bytes([1, 3]) + bytes(24)],
)
def test_malformed_header(tmp_path, blob):
    (tmp_path / "t.rnkt").write_bytes(blob)
    with pytest.raises(TensorFormatError):
        read_tensor(tmp_path / "t.rnkt")


def test_empty_tensor(tmp_path):
    write_tensor(tmp_path / "e.rnkt", TensorFile(np.zeros(0)))
    raw = (tmp_path / "e.rnkt").read_bytes()
    assert len(raw) == 8 + 2 + 8
    assert read_tensor(tmp_path / "e.rnkt").shape == (0,)


def test_single_float64_payload_size(tmp_path):
    write_tensor(tmp_path / "s.rnkt", TensorFile(np.array([7.5])))
    raw = (tmp_path / "s.rnkt").read_bytes()
    assert len(raw) - (8 + 2 + 8) == 8
    assert struct.unpack("<d", raw[-8:])[0] == 7.5


def test_float32_kept(tmp_path):
    t = TensorFile(np.arange(6, dtype=np.float32).reshape(2, 3))
    write_tensor(tmp_path / "f.rnkt", t)
    back = read_tensor(tmp_path / "f.rnkt")
    assert back.dtype_code == 0 and back == t


@pytest.mark.parametrize("shape", [(1000,), (128, 64)])
def test_random_round_trip(tmp_path, shape):
    rng = np.random.default_rng(0)
    t = TensorFile(rng.standard_normal(shape))
    write_tensor(tmp_path / "r.rnkt", t)
    assert read_tensor(tmp_path / "r.rnkt") == t


def test_rank_limits():
    with pytest.raises(TensorFormatError):
        TensorFile(np.zeros((2, 2, 2)))


@settings(max_examples=200, deadline=None)
@given(
    hnp.arrays(
        dtype=st.sampled_from([np.float32, np.float64]),
        shape=hnp.array_shapes(min_dims=1, max_dims=2, min_side=0, max_side=9),
        elements=st.floats(allow_nan=True, allow_infinity=True, width=32),
    )
)
def test_round_trip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "t.rnkt"
    t = TensorFile(arr)
    write_tensor(path, t)
    assert read_tensor(path) == t


def _write_manifest(tmp_path, n_img=1, n_cap=1, n_emb=None, pairs=((0, 0),), **extra):
    write_tensor(tmp_path / "img.rnkt", TensorFile(np.ones((n_img, 3))))
    write_tensor(tmp_path / "cap.rnkt", TensorFile(np.ones((n_cap, 2))))
    write_tensor(tmp_path / "emb.rnkt", TensorFile(np.ones((n_cap if n_emb is None else n_emb, 4))))
    doc = {
        "image_features": "img.rnkt",
        "caption_features": "cap.rnkt",
        "caption_embeddings": "emb.rnkt",
        "pairs": [list(p) for p in pairs],
        **extra,
    }
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    return tmp_path / "manifest.json"


def test_smallest_manifest(tmp_path):
    m = load_manifest(_write_manifest(tmp_path))
    assert m.pairs.tolist() == [[0, 0]]
    assert m.splits == ["train"]


def test_pair_out_of_range_names_pair(tmp_path):
    with pytest.raises(ManifestError, match="pair 0"):
        load_manifest(_write_manifest(tmp_path, n_img=3, pairs=((5, 0), (0, 0), (1, 0), (2, 0))))


def test_embedding_row_mismatch(tmp_path):
    with pytest.raises(ManifestError, match="caption_embeddings"):
        load_manifest(_write_manifest(tmp_path, n_cap=5, n_emb=4))


def test_image_without_pair(tmp_path):
    with pytest.raises(ManifestError, match="image 1"):
        load_manifest(_write_manifest(tmp_path, n_img=2))


def test_missing_tensor_file(tmp_path):
    path = _write_manifest(tmp_path)
    (tmp_path / "cap.rnkt").unlink()
    with pytest.raises(FileNotFoundError):
        load_manifest(path)


def test_split_labels(tmp_path):
    m = load_manifest(_write_manifest(tmp_path, n_img=2, n_cap=2, pairs=((0, 0, "val"), (1, 1, "test"))))
    assert m.split_pairs("val").tolist() == [[0, 0]]
    with pytest.raises(ManifestError):
        load_manifest(_write_manifest(tmp_path, n_img=1, pairs=((0, 0, "holdout"),)))


def test_acceptance_independent_of_pair_order(tmp_path):
    pairs = [(0, 0, "train"), (1, 1, "val"), (2, 2, "test"), (0, 3, "train")]
    a = load_manifest(_write_manifest(tmp_path, n_img=3, n_cap=4, pairs=pairs))
    b = load_manifest(_write_manifest(tmp_path, n_img=3, n_cap=4, pairs=pairs[::-1]))
    assert a.captions_by_image("train") == b.captions_by_image("train")
