"""Synthetic retrieval datasets with a latent cluster structure.

Each image has a latent vector drawn around one of ``cluster_count`` centers.
Its captions perturb that latent; image and caption features are independent
random linear views of the latents plus noise, and caption embeddings are the
caption latents under a fixed orthonormal map. Same-cluster items are
semantically close but annotated as negatives, which is the situation a
graded-relevance objective can exploit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .relevance import CaptionEmbeddings
from .tensorio import DatasetManifest, TensorFile, load_manifest, save_manifest, write_tensor


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 200
    captions_per_image: int = 5
    latent_dim: int = 16
    feature_dim_img: int = 128
    feature_dim_txt: int = 128
    embed_dim: int = 32
    noise_sigma: float = 0.6
    cluster_count: int = 20
    cluster_spread: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_images", "captions_per_image", "latent_dim", "feature_dim_img",
                     "feature_dim_txt", "embed_dim", "cluster_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0 or self.cluster_spread < 0:
            raise ValueError("noise_sigma and cluster_spread must be non-negative")
        if self.embed_dim < self.latent_dim:
            raise ValueError("embed_dim must be >= latent_dim")


def _orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((cols, rows)))
    return q[:, :rows].T


def split_labels(n_images: int, rng) -> np.ndarray:
    """80/10/10 train/val/test assignment over a random image order."""
    order = rng.permutation(n_images)
    n_train = int(round(0.8 * n_images))
    n_val = int(round(0.1 * n_images))
    labels = np.empty(n_images, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_val]] = "val"
    labels[order[n_train + n_val:]] = "test"
    return labels


def generate_arrays(spec: SynthSpec) -> dict:
    rng = np.random.default_rng(spec.seed)
    n, cpi, d = spec.n_images, spec.captions_per_image, spec.latent_dim

    centers = rng.standard_normal((spec.cluster_count, d))
    clusters = np.arange(n) % spec.cluster_count
    rng.shuffle(clusters)
    latents = centers[clusters] + spec.cluster_spread * rng.standard_normal((n, d))

    owner = np.repeat(np.arange(n), cpi)
    cap_latents = latents[owner] + spec.noise_sigma * rng.standard_normal((n * cpi, d))

    map_img = rng.standard_normal((d, spec.feature_dim_img)) / np.sqrt(d)
    map_txt = rng.standard_normal((d, spec.feature_dim_txt)) / np.sqrt(d)
    map_emb = _orthonormal(rng, d, spec.embed_dim)

    img_feat = latents @ map_img + spec.noise_sigma * rng.standard_normal((n, spec.feature_dim_img))
    txt_feat = cap_latents @ map_txt + spec.noise_sigma * rng.standard_normal(
        (n * cpi, spec.feature_dim_txt)
    )
    emb = cap_latents @ map_emb
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)

    labels = split_labels(n, rng)
    pairs = [[int(i), int(c), str(labels[i])] for c, i in enumerate(owner)]
    return {
        "image_features": img_feat,
        "caption_features": txt_feat,
        "caption_embeddings": emb,
        "latents": latents,
        "image_clusters": clusters,
        "pairs": pairs,
    }


def relevance_separation(embeddings, captions_per_image: int) -> tuple[float, float]:
    """Mean RSC relevance among same-image caption pairs and across images."""
    e = CaptionEmbeddings(embeddings)
    r = (1.0 + np.clip(e.matrix @ e.matrix.T, -1, 1)) / 2.0
    owner = np.arange(len(e)) // captions_per_image
    same = owner[:, None] == owner[None, :]
    np.fill_diagonal(same, False)
    cross = owner[:, None] != owner[None, :]
    within = float(r[same].mean()) if same.any() else float("nan")
    across = float(r[cross].mean()) if cross.any() else float("nan")
    return within, across


def generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write tensors and ``manifest.json`` into ``out_dir`` and load them back."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = generate_arrays(spec)
    within, across = relevance_separation(arrays["caption_embeddings"], spec.captions_per_image)
    if spec.captions_per_image > 1 and spec.n_images > 1 and spec.noise_sigma > 0 and not within > across:
        raise RuntimeError(
            f"generated relevance not separated: same-image {within:.4f} <= cross-image {across:.4f}"
        )
    doc = {}
    for key in ("image_features", "caption_features", "caption_embeddings"):
        fname = f"{key}.rnkt"
        write_tensor(out / fname, TensorFile(arrays[key]))
        doc[key] = fname
    doc["pairs"] = arrays["pairs"]
    doc["image_clusters"] = [int(c) for c in arrays["image_clusters"]]
    doc["synth_spec"] = asdict(spec)
    save_manifest(out / "manifest.json", doc)
    return load_manifest(out / "manifest.json")


def _train_captions(manifest: DatasetManifest) -> dict[int, list[int]]:
    return manifest.captions_by_image("train")


def sample_batch(manifest: DatasetManifest, n: int, rng, captions=None) -> list[tuple[int, int]]:
    """N distinct train images, each with one uniformly drawn caption."""
    captions = _train_captions(manifest) if captions is None else captions
    images = np.fromiter(captions, dtype=np.int64)
    if n < 1 or n > len(images):
        raise SamplingError(f"batch size {n} not in [1, {len(images)}] train images")
    chosen = rng.choice(images, size=n, replace=False)
    return [(int(i), int(rng.choice(captions[int(i)]))) for i in chosen]


def epoch_batches(manifest: DatasetManifest, n: int, rng, captions=None) -> list[list[tuple[int, int]]]:
    """One pass over all train images in shuffled batches of ``n``.

    The tail batch is kept if it has at least two images, since a single-pair
    batch carries no negatives.
    """
    captions = _train_captions(manifest) if captions is None else captions
    images = np.fromiter(captions, dtype=np.int64)
    if n < 1:
        raise SamplingError("batch size must be >= 1")
    order = rng.permutation(images)
    batches = []
    for start in range(0, len(order), n):
        chunk = order[start:start + n]
        if len(chunk) < 2 and batches:
            break
        batches.append([(int(i), int(rng.choice(captions[int(i)]))) for i in chunk])
    return batches
