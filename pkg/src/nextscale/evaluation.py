"""Distribution metrics over a fixed random feature map.

Features are a seeded random projection of the flattened input plus the
raw per-channel means, so two runs with the same seed and input shape
score against the identical feature space. The Frechet proxy compares
Gaussian fits of the features; precision/recall compare k-NN manifolds.
Both sides of a comparison must carry the same feature definition id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .pyramid import (
    Codebook,
    LatentPyramid,
    PatchEmbed,
    decode_latent,
    dequantize_grid,
    quantize_map,
    upsample,
)
from .training import RolloutTrace


# ---------------------------------------------------------------------------
# feature map


@dataclass
class FeatureMap:
    """Fixed projection [flat_dim, proj_width] plus channel means."""

    seed: int
    in_shape: tuple[int, int, int]  # (H, W, C)
    proj_width: int
    proj: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.proj_width + self.in_shape[2]

    @property
    def definition(self) -> str:
        h, w, c = self.in_shape
        return f"proj{self.proj_width}/{h}x{w}x{c}/seed{self.seed}"

    def __call__(self, x: np.ndarray | torch.Tensor) -> np.ndarray:
        if isinstance(x, torch.Tensor):
            x = x.detach().cpu().numpy()
        x = np.asarray(x, dtype=np.float64)
        h, w, c = self.in_shape
        if x.shape[-3:] != (h, w, c):
            raise ConfigurationError(
                f"feature input shaped {x.shape} does not match definition {self.definition}"
            )
        flat = x.reshape(*x.shape[:-3], h * w * c)
        projected = flat @ self.proj
        means = x.mean(axis=(-3, -2))
        return np.concatenate([projected, means], axis=-1)


def make_feature_map(in_shape: tuple[int, int, int], seed: int, proj_width: int = 32) -> FeatureMap:
    from .rng import numpy_stream

    h, w, c = in_shape
    rng = numpy_stream(seed, "features")
    flat = h * w * c
    proj = rng.normal(0.0, 1.0 / np.sqrt(flat), size=(flat, proj_width))
    return FeatureMap(seed=seed, in_shape=in_shape, proj_width=proj_width, proj=proj)


# ---------------------------------------------------------------------------
# feature statistics and the Frechet proxy


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int
    definition: str

    def __post_init__(self):
        f = self.mean.shape[0]
        if self.cov.shape != (f, f):
            raise ConfigurationError("covariance shape does not match mean length")


def compute_stats(features: np.ndarray, definition: str) -> FeatureStats:
    """Gaussian fit with the unbiased covariance estimator. Requires at
    least F + 1 samples so the estimate has full support."""
    features = np.asarray(features, dtype=np.float64)
    n, f = features.shape
    if n < f + 1:
        raise ConfigurationError(f"need at least {f + 1} samples for {f} features, got {n}")
    mean = features.mean(0)
    cov = np.cov(features, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return FeatureStats(mean=mean, cov=cov, count=n, definition=definition)


def sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric matrix square root; negative eigenvalues clamp to zero."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fd_proxy(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussian feature fits.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the cross
    term computed through the symmetric form (Sa^(1/2) Sb Sa^(1/2))^(1/2)
    so a single clamped eigendecomposition suffices.
    """
    if a.definition != b.definition:
        raise ConfigurationError(
            f"feature definitions differ: {a.definition!r} vs {b.definition!r}"
        )
    if a.mean.shape != b.mean.shape:
        raise ConfigurationError("feature dimensions differ")
    mu = a.mean - b.mean
    root_a = sqrt_psd(a.cov)
    cross = sqrt_psd(root_a @ b.cov @ root_a)
    return float(mu @ mu + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


# ---------------------------------------------------------------------------
# k-NN precision / recall


def _knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    n = points.shape[0]
    if k < 1 or k > n - 1:
        raise ConfigurationError(f"k must lie in 1..{n - 1}, got {k}")
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    d2.sort(axis=1)
    return np.sqrt(d2[:, k - 1])


def _covered(queries: np.ndarray, anchors: np.ndarray, radii: np.ndarray) -> float:
    d = np.sqrt(((queries[:, None, :] - anchors[None, :, :]) ** 2).sum(-1))
    return float((d <= radii[None, :]).any(axis=1).mean())


def pr_proxy(real: np.ndarray, gen: np.ndarray, k: int = 3) -> tuple[float, float]:
    """Manifold precision and recall under k-NN radii.

    A generated point counts as precise when it falls inside the k-NN
    ball of any real point, and vice versa for recall. Comparison is
    inclusive, so a radius of zero covers only exact duplicates.
    """
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    precision = _covered(gen, real, _knn_radii(real, k))
    recall = _covered(real, gen, _knn_radii(gen, k))
    return precision, recall


# ---------------------------------------------------------------------------
# model-level metrics


def reconstruct_references(
    images: torch.Tensor,
    schedule,
    supervision: str,
    embed: PatchEmbed,
    codebook: Codebook | None,
) -> LatentPyramid:
    """Ground-truth pyramids pushed through the tokenizer round trip.

    Evaluation compares generated latents to these reconstructions, not
    to raw pixels, so the scores isolate the generator from the fixed
    tokenizer's own reconstruction error.
    """
    from .pyramid import build_pyramid

    pyr = build_pyramid(images, schedule, supervision=supervision, embed=embed)
    if codebook is None:
        return pyr
    maps = [dequantize_grid(quantize_map(m, codebook), codebook) for m in pyr.maps]
    return LatentPyramid(schedule=schedule, maps=maps)


def scale_to_pixels(latent: torch.Tensor, top_side: int, embed: PatchEmbed) -> torch.Tensor:
    """Upsample a scale map to the finest side and decode to pixels."""
    return decode_latent(embed, upsample(latent, top_side))


def per_scale_fd(
    gen_latents: LatentPyramid,
    ref_latents: LatentPyramid,
    scale_i: int,
    embed: PatchEmbed,
    feature_map: FeatureMap,
) -> float:
    """Frechet proxy at one scale: both sides are upsampled to the finest
    side, decoded to pixels, and compared in the fixed feature space. At
    the finest scale this is exactly the whole-image score."""
    top = gen_latents.schedule.sides[-1]
    gen_px = scale_to_pixels(gen_latents.map(scale_i), top, embed)
    ref_px = scale_to_pixels(ref_latents.map(scale_i), top, embed)
    stats_gen = compute_stats(feature_map(gen_px), feature_map.definition)
    stats_ref = compute_stats(feature_map(ref_px), feature_map.definition)
    return fd_proxy(stats_ref, stats_gen)


def diff_maps(trace: RolloutTrace, targets: LatentPyramid, codebook: Codebook | None) -> list[torch.Tensor]:
    """Per-scale absolute deviation between ground-truth latents and the
    self-forced pass predictions, averaged over channels.

    Returns one [B, h_i, h_i] map per scale i >= 2. Discrete predictions
    are decoded through their argmax token before comparison.
    """
    out = []
    for idx, pred in enumerate(trace.sf_preds):
        i = idx + 2
        ref = targets.map(i)
        if pred.shape[-1] != ref.shape[-1]:
            if codebook is None:
                raise ConfigurationError("discrete diff maps need a codebook")
            pred_latent = dequantize_grid(pred.argmax(-1), codebook)
        else:
            pred_latent = pred
        out.append((ref - pred_latent).abs().mean(-1).detach())
    return out


def nfe_report(rows: list[dict]) -> list[dict]:
    """Aggregate per-step forward counts into one row per scheme.

    Input rows need ``scheme`` and ``nfe`` keys (metrics CSV rows). The
    report carries the min, max, and mean forwards per step plus totals,
    so constant-cost schemes show min == max.
    """
    by_scheme: dict[str, list[int]] = {}
    for row in rows:
        by_scheme.setdefault(str(row["scheme"]), []).append(int(float(row["nfe"])))
    report = []
    for scheme in sorted(by_scheme):
        counts = by_scheme[scheme]
        report.append({
            "scheme": scheme,
            "steps": len(counts),
            "nfe_min": min(counts),
            "nfe_max": max(counts),
            "nfe_mean": sum(counts) / len(counts),
            "nfe_total": sum(counts),
        })
    return report
