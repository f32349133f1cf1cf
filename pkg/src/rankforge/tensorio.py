"""Binary tensor container and dataset manifest loading.

Container layout (all integers little-endian)::

    bytes 0-7   magic b"RNKTNSR0"
    byte  8     dtype code, 0 = float32, 1 = float64
    byte  9     rank (1 or 2)
    ...         rank x uint64 dimension sizes
    ...         row-major IEEE-754 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RNKTNSR0"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
SPLITS = ("train", "val", "test")


class TensorFormatError(ValueError):
    """Malformed magic bytes or header."""


class TensorLengthError(TensorFormatError):
    """Payload size disagrees with the declared shape."""


class ManifestError(ValueError):
    """A manifest violates one of its invariants."""


@dataclass(frozen=True, eq=False)
class TensorFile:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
            raise TensorFormatError(f"unsupported dtype {arr.dtype}")
        if arr.ndim not in (1, 2):
            raise TensorFormatError(f"rank must be 1 or 2, got {arr.ndim}")
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dtype_code(self) -> int:
        return 0 if self.data.dtype.itemsize == 4 else 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, TensorFile):
            return NotImplemented
        return (
            self.dtype_code == other.dtype_code
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def encode_tensor(t: TensorFile) -> bytes:
    header = MAGIC + bytes([t.dtype_code, t.data.ndim])
    header += struct.pack(f"<{t.data.ndim}Q", *t.shape)
    return header + t.data.tobytes(order="C")


def decode_tensor(buf: bytes) -> TensorFile:
    if len(buf) < 10 or buf[:8] != MAGIC:
        raise TensorFormatError("bad magic bytes")
    code, rank = buf[8], buf[9]
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if rank not in (1, 2):
        raise TensorFormatError(f"unsupported rank {rank}")
    end = 10 + 8 * rank
    if len(buf) < end:
        raise TensorFormatError("truncated header")
    shape = struct.unpack(f"<{rank}Q", buf[10:end])
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.uint64)) * dtype.itemsize
    payload = buf[end:]
    if len(payload) != expected:
        raise TensorLengthError(
            f"shape {list(shape)} needs {expected} payload bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return TensorFile(data)


def read_tensor(path) -> TensorFile:
    return decode_tensor(Path(path).read_bytes())


def write_tensor(path, t: TensorFile) -> None:
    if not isinstance(t, TensorFile):
        t = TensorFile(np.asarray(t))
    Path(path).write_bytes(encode_tensor(t))


@dataclass
class DatasetManifest:
    """Features, caption embeddings and positive pairs of one dataset.

    ``image_clusters`` is optional; when present it labels each image with a
    latent cluster id and widens the positive sets used by mAP@R and
    R-Precision to every same-cluster item.
    """

    image_features: np.ndarray
    caption_features: np.ndarray
    caption_embeddings: np.ndarray
    pairs: np.ndarray  # (P, 2) int64, (image, caption)
    splits: list[str]
    image_clusters: np.ndarray | None = None
    path: Path | None = None
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(self.splits) != len(self.pairs):
            raise ManifestError("one split label is required per pair")
        self.validate()

    @property
    def n_images(self) -> int:
        return self.image_features.shape[0]

    @property
    def n_captions(self) -> int:
        return self.caption_features.shape[0]

    def validate(self) -> None:
        for name in ("image_features", "caption_features", "caption_embeddings"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise ManifestError(f"{name} must be a matrix, got rank {arr.ndim}")
        if self.caption_embeddings.shape[0] != self.caption_features.shape[0]:
            raise ManifestError(
                f"caption_embeddings has {self.caption_embeddings.shape[0]} rows but "
                f"caption_features has {self.caption_features.shape[0]}"
            )
        n_img, n_cap = self.n_images, self.n_captions
        for k, (i, c) in enumerate(self.pairs):
            if not 0 <= i < n_img:
                raise ManifestError(f"pair {k}: image index {i} outside [0, {n_img})")
            if not 0 <= c < n_cap:
                raise ManifestError(f"pair {k}: caption index {c} outside [0, {n_cap})")
        for k, s in enumerate(self.splits):
            if s not in SPLITS:
                raise ManifestError(f"pair {k}: unknown split {s!r}")
        seen = np.zeros(n_img, dtype=bool)
        seen[self.pairs[:, 0]] = True
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0])
            raise ManifestError(f"image {missing} appears in no pair")
        if self.image_clusters is not None:
            self.image_clusters = np.asarray(self.image_clusters, dtype=np.int64)
            if self.image_clusters.shape != (n_img,):
                raise ManifestError("image_clusters needs one label per image")

    def split_pairs(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        mask = np.array([s == split for s in self.splits], dtype=bool)
        return self.pairs[mask] if len(mask) else self.pairs[:0]

    def captions_by_image(self, split: str) -> dict[int, list[int]]:
        """Positive captions of every image in ``split``, both sorted ascending."""
        out: dict[int, list[int]] = {}
        for i, c in self.split_pairs(split):
            out.setdefault(int(i), []).append(int(c))
        return {i: sorted(cs) for i, cs in sorted(out.items())}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    arrays = {}
    for key in ("image_features", "caption_features", "caption_embeddings"):
        if key not in doc:
            raise ManifestError(f"manifest lacks key {key!r}")
        arrays[key] = np.asarray(read_tensor(base / doc[key]).data, dtype=np.float64)
    pairs, splits = [], []
    for k, entry in enumerate(doc.get("pairs", [])):
        if len(entry) not in (2, 3):
            raise ManifestError(f"pair {k}: expected [image, caption] or [image, caption, split]")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in entry[:2]):
            raise ManifestError(f"pair {k}: indices must be integers")
        pairs.append(entry[:2])
        splits.append(entry[2] if len(entry) == 3 else "train")
    return DatasetManifest(
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        splits=splits,
        image_clusters=doc.get("image_clusters"),
        path=path,
        paths={k: doc[k] for k in arrays},
        **arrays,
    )


def save_manifest(path, manifest_doc: dict) -> None:
    Path(path).write_text(json.dumps(manifest_doc, indent=1) + "\n", encoding="utf-8")
