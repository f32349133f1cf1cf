"""Linear bi-encoder trained by plain mini-batch gradient descent.

Images and captions are mapped by one weight matrix each into a joint space,
normalized, and compared by cosine. Losses supply d loss / d S; this module
carries that gradient back through the normalization and the linear maps.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import SmoothConfig, compute_loss, has_relevance_ties, hard_ndcg_rows, smooth_ndcg_rows
from .metrics import MetricReport, approximation_error, retrieval_report
from .relevance import CaptionEmbeddings
from .synth import epoch_batches
from .tensorio import DatasetManifest, TensorFile, read_tensor, write_tensor

LOSS_ALIASES = {"triplet": "triplet", "sndcg": "s_ndcg", "s_ndcg": "s_ndcg", "joint": "joint"}


class DegenerateEmbeddingError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class EncoderParams:
    w_img: np.ndarray
    w_txt: np.ndarray

    def __post_init__(self):
        self.w_img = np.array(self.w_img, dtype=np.float64)
        self.w_txt = np.array(self.w_txt, dtype=np.float64)
        if self.w_img.ndim != 2 or self.w_txt.ndim != 2:
            raise ValueError("encoder weights must be matrices")
        if self.w_img.shape[1] != self.w_txt.shape[1]:
            raise ValueError("image and text encoders must share the joint dimension")
        if not (np.all(np.isfinite(self.w_img)) and np.all(np.isfinite(self.w_txt))):
            raise ValueError("encoder weights must be finite")

    @classmethod
    def init(cls, d_img: int, d_txt: int, joint_dim: int, rng) -> "EncoderParams":
        return cls(
            rng.standard_normal((d_img, joint_dim)) / np.sqrt(d_img),
            rng.standard_normal((d_txt, joint_dim)) / np.sqrt(d_txt),
        )

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.w_img.copy(), self.w_txt.copy())


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 1.0
    lr_decay_epoch: int | None = None
    loss_kind: str = "joint"
    smooth: SmoothConfig = field(default_factory=SmoothConfig)
    seed: int = 0
    joint_dim: int = 32

    def __post_init__(self):
        if isinstance(self.smooth, dict):
            self.smooth = SmoothConfig(**self.smooth)
        if self.loss_kind not in LOSS_ALIASES:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        self.loss_kind = LOSS_ALIASES[self.loss_kind]
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        # zero is allowed as a null-update control
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.joint_dim < 1:
            raise ValueError("joint_dim must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


TRACE_COLUMNS = (
    "epoch", "loss", "val_rsum", "val_ndcg",
    "batch_ndcg_hat_mean", "batch_ndcg_mean", "approx_error",
    "approx_error_max", "tied_batches",
)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_rsum: float
    val_ndcg: float
    batch_ndcg_hat_mean: float
    batch_ndcg_mean: float
    approx_error: float
    approx_error_max: float = 0.0
    tied_batches: int = 0
    seconds: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in TRACE_COLUMNS]


@dataclass
class TrainTrace:
    records: list[EpochRecord] = field(default_factory=list)
    initial_val_rsum: float | None = None
    best_epoch: int | None = None

    @property
    def best_val_rsum(self) -> float:
        return max(r.val_rsum for r in self.records)


def _normalize_rows(u):
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    bad = np.flatnonzero(~(np.isfinite(norms[:, 0]) & (norms[:, 0] > 0)))
    if len(bad):
        raise DegenerateEmbeddingError(f"row {int(bad[0])} encodes to a zero or non-finite vector")
    return u / norms, norms


def encode(params: EncoderParams, features, side: str) -> np.ndarray:
    w = params.w_img if side == "image" else params.w_txt if side == "text" else None
    if w is None:
        raise ValueError(f"side must be 'image' or 'text', got {side!r}")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"feature dim {x.shape[-1]} does not match {side} encoder input {w.shape[0]}")
    return _normalize_rows(x @ w)[0]


def batch_similarity(img_emb, txt_emb) -> np.ndarray:
    img_emb = np.asarray(img_emb, dtype=np.float64)
    txt_emb = np.asarray(txt_emb, dtype=np.float64)
    if img_emb.ndim != 2 or txt_emb.ndim != 2 or img_emb.shape[1] != txt_emb.shape[1]:
        raise ValueError(f"embedding shapes {img_emb.shape} and {txt_emb.shape} do not share a joint dim")
    return img_emb @ txt_emb.T


def _normalize_backward(a, norms, grad_a):
    # d(u/|u|)/du = (I - a a^T) / |u|
    return (grad_a - a * (a * grad_a).sum(axis=1, keepdims=True)) / norms


def similarity_backward(params: EncoderParams, x_img, x_txt, grad_s):
    """Gradients of a loss w.r.t. both weight matrices given d loss / d S."""
    a, na = _normalize_rows(x_img @ params.w_img)
    b, nb = _normalize_rows(x_txt @ params.w_txt)
    grad_a = grad_s @ b
    grad_b = grad_s.T @ a
    g_img = x_img.T @ _normalize_backward(a, na, grad_a)
    g_txt = x_txt.T @ _normalize_backward(b, nb, grad_b)
    return g_img, g_txt


def _batch_step(params, x_img, x_txt, r, kind, smooth):
    s = batch_similarity(encode(params, x_img, "image"), encode(params, x_txt, "text"))
    res = compute_loss(LOSS_ALIASES[kind], s, r, smooth)
    g_img, g_txt = similarity_backward(params, x_img, x_txt, res.grad)
    return res, g_img, g_txt, s


def batch_objective(params: EncoderParams, x_img, x_txt, r, kind: str, smooth: SmoothConfig):
    """Loss value, weight gradients, and the similarity matrix for one batch."""
    res, g_img, g_txt, s = _batch_step(params, x_img, x_txt, r, kind, smooth)
    return res.value, g_img, g_txt, s


def evaluate(
    params: EncoderParams,
    manifest: DatasetManifest,
    split: str,
    embeddings: CaptionEmbeddings | None = None,
    tau: float | None = None,
) -> MetricReport:
    """Full cross-split retrieval metrics.

    Each image is represented in relevance by its lowest-index caption in the
    split. ``tau`` additionally reports the smooth-NDCG approximation error on
    the square image x representative-caption matrix.
    """
    caps = manifest.captions_by_image(split)
    if not caps:
        raise ValueError(f"split {split!r} is empty")
    emb = embeddings or CaptionEmbeddings(manifest.caption_embeddings)
    images = np.array(list(caps), dtype=np.int64)
    captions = np.array([c for cs in caps.values() for c in cs], dtype=np.int64)
    owner = np.array([k for k, cs in enumerate(caps.values()) for _ in cs], dtype=np.int64)
    reps = np.array([cs[0] for cs in caps.values()], dtype=np.int64)

    a = encode(params, manifest.image_features[images], "image")
    b = encode(params, manifest.caption_features[captions], "text")
    sim = batch_similarity(a, b)
    relevance = emb.cross_relevance(reps, captions)
    clusters = None if manifest.image_clusters is None else manifest.image_clusters[images]
    report = retrieval_report(sim, relevance, owner, clusters, split=split)
    if tau is not None and len(images) > 1:
        rep_cols = np.concatenate([[0], np.cumsum([len(cs) for cs in caps.values()])[:-1]])
        report.approx_error = approximation_error(sim[:, rep_cols], emb.batch_relevance(reps), tau)
    return report


def train(manifest: DatasetManifest, cfg: TrainConfig, log=None) -> tuple[EncoderParams, TrainTrace]:
    rng = np.random.default_rng(cfg.seed)
    params = EncoderParams.init(
        manifest.image_features.shape[1], manifest.caption_features.shape[1], cfg.joint_dim, rng
    )
    emb = CaptionEmbeddings(manifest.caption_embeddings)
    train_caps = manifest.captions_by_image("train")
    if not train_caps:
        raise ValueError("train split is empty")
    has_val = bool(manifest.captions_by_image("val"))
    val_split = "val" if has_val else "train"

    trace = TrainTrace(initial_val_rsum=evaluate(params, manifest, val_split, emb).rsum)
    best = params.copy()
    best_rsum = -np.inf
    lr = cfg.learning_rate
    tau = cfg.smooth.tau

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.lr_decay_epoch and epoch == cfg.lr_decay_epoch + 1:
            lr /= 10.0
        losses, hat, hard, errs, err_max, tied = [], [], [], [], 0.0, 0
        for b_idx, batch in enumerate(epoch_batches(manifest, cfg.batch_size, rng, train_caps)):
            img_ids = np.array([i for i, _ in batch])
            cap_ids = np.array([c for _, c in batch])
            x_img = manifest.image_features[img_ids]
            x_txt = manifest.caption_features[cap_ids]
            r = emb.batch_relevance(cap_ids)
            res, g_img, g_txt, s = _batch_step(params, x_img, x_txt, r, cfg.loss_kind, cfg.smooth)
            value = res.value
            if not np.isfinite(value) or not (np.all(np.isfinite(g_img)) and np.all(np.isfinite(g_txt))):
                raise DivergenceError(epoch, b_idx, value)
            losses.append(value)

            tied += has_relevance_ties(r)
            if res.ndcg_hat is not None:
                sm_v, sm_t = res.ndcg_hat
            else:
                sm_v, _ = smooth_ndcg_rows(s, r, tau, with_grad=False)
                sm_t, _ = smooth_ndcg_rows(s.T, r.T, tau, with_grad=False)
            hd = np.concatenate([hard_ndcg_rows(s, r), hard_ndcg_rows(s.T, r.T)])
            sm = np.concatenate([sm_v, sm_t])
            hat.append(sm.mean())
            hard.append(hd.mean())
            diff = np.abs(sm - hd)
            errs.append(diff.mean())
            err_max = max(err_max, float(diff.max()))

            params.w_img -= lr * g_img
            params.w_txt -= lr * g_txt
            if not (np.all(np.isfinite(params.w_img)) and np.all(np.isfinite(params.w_txt))):
                raise DivergenceError(epoch, b_idx, value)

        val = evaluate(params, manifest, val_split, emb)
        rec = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            val_rsum=val.rsum,
            val_ndcg=val.ndcg["mean"],
            batch_ndcg_hat_mean=float(np.mean(hat)),
            batch_ndcg_mean=float(np.mean(hard)),
            approx_error=float(np.mean(errs)),
            approx_error_max=err_max,
            tied_batches=int(tied),
        )
        if val.rsum > best_rsum:
            best_rsum = val.rsum
            best = params.copy()
            trace.best_epoch = epoch
        rec.seconds = time.perf_counter() - t0
        trace.records.append(rec)
        if log is not None:
            log(rec)
    return (best if trace.records else params), trace


def save_checkpoint(out_dir, params: EncoderParams, cfg: TrainConfig, epoch, val_rsum) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "w_img.rnkt", TensorFile(params.w_img))
    write_tensor(out / "w_txt.rnkt", TensorFile(params.w_txt))
    header = {
        "w_img": "w_img.rnkt",
        "w_txt": "w_txt.rnkt",
        "config": cfg.to_dict(),
        "epoch": epoch,
        "val_rsum": val_rsum,
    }
    path = out / "checkpoint.json"
    path.write_text(json.dumps(header, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    header = json.loads(path.read_text(encoding="utf-8"))
    params = EncoderParams(
        read_tensor(path.parent / header["w_img"]).data,
        read_tensor(path.parent / header["w_txt"]).data,
    )
    return params, header
