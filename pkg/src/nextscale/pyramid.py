"""Latent pyramids: resizing, patch embedding, and vector quantization.

A pyramid is the multi-scale decomposition of a single latent map. Scale
schedules list square map sides coarse to fine; the finest map always
equals the full-resolution latent, and coarser maps are produced either
by downsampling the latent (latent supervision) or by downsampling the
image before encoding (image supervision). Only the plain upsampling
decomposition is implemented here; residual-accumulation pyramids are a
different contract and deliberately out of scope.

Resizing conventions, pinned because tests hold them fixed:
  * Downsampling is exact area averaging. Each output cell averages the
    source cells it overlaps, weighted by fractional overlap. At integer
    ratios this reduces to plain block means.
  * Upsampling is bilinear under the half-pixel-center convention: output
    index j samples source coordinate (j + 0.5) * h_in / h_out - 0.5,
    clamped to the source range.
  * Resizing to the same side returns the input unchanged.
Both directions are separable, so they are applied as a pair of small
matrix products along the row and column axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, InvariantViolation
from .rng import numpy_stream, torch_stream


# ---------------------------------------------------------------------------
# scale schedules


@dataclass(frozen=True)
class ScaleSchedule:
    """Strictly increasing square map sides, coarse to fine."""

    sides: tuple[int, ...]

    def __post_init__(self):
        if len(self.sides) < 1:
            raise ConfigurationError("schedule needs at least one scale")
        for h in self.sides:
            if not isinstance(h, int) or h < 1:
                raise ConfigurationError(f"scale sides must be ints >= 1, got {self.sides}")
        for a, b in zip(self.sides, self.sides[1:]):
            if b <= a:
                raise ConfigurationError(f"scale sides must be strictly increasing, got {self.sides}")

    @property
    def num_scales(self) -> int:
        return len(self.sides)

    @property
    def token_count(self) -> int:
        return sum(h * h for h in self.sides)

    def side(self, i: int) -> int:
        """Side of scale i, 1-based."""
        return self.sides[i - 1]


# ---------------------------------------------------------------------------
# separable resizing


def _area_weights(h_in: int, h_out: int) -> np.ndarray:
    # Output cell j covers [j*r, (j+1)*r) in source coordinates, r = h_in/h_out.
    # Weight of source cell k is its overlap with that interval divided by r.
    w = np.zeros((h_out, h_in), dtype=np.float64)
    r = h_in / h_out
    for j in range(h_out):
        lo = j * r
        hi = (j + 1) * r
        k0 = int(np.floor(lo))
        k1 = min(int(np.ceil(hi)), h_in)
        for k in range(k0, k1):
            overlap = min(hi, k + 1) - max(lo, k)
            if overlap > 0:
                w[j, k] = overlap / r
        w[j] /= w[j].sum()
    return w


def _bilinear_weights(h_in: int, h_out: int) -> np.ndarray:
    w = np.zeros((h_out, h_in), dtype=np.float64)
    for j in range(h_out):
        s = (j + 0.5) * h_in / h_out - 0.5
        s = min(max(s, 0.0), float(h_in - 1))
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, h_in - 1)
        frac = s - i0
        w[j, i0] += 1.0 - frac
        w[j, i1] += frac
    return w


_WEIGHT_CACHE: dict[tuple[str, int, int, torch.dtype], torch.Tensor] = {}


def _weight_matrix(kind: str, h_in: int, h_out: int, dtype: torch.dtype) -> torch.Tensor:
    key = (kind, h_in, h_out, dtype)
    if key not in _WEIGHT_CACHE:
        build = _area_weights if kind == "area" else _bilinear_weights
        _WEIGHT_CACHE[key] = torch.from_numpy(build(h_in, h_out)).to(dtype)
    return _WEIGHT_CACHE[key]


def _apply_separable(x: torch.Tensor, kind: str, h_out: int) -> torch.Tensor:
    # x has shape [..., h, w, d]; rows and columns are resized independently.
    h_in = x.shape[-3]
    if x.shape[-2] != h_in:
        raise ConfigurationError(f"maps must be square, got {tuple(x.shape)}")
    if h_out == h_in:
        return x.clone()
    m = _weight_matrix(kind, h_in, h_out, x.dtype)
    x = torch.einsum("oi,...ijd->...ojd", m, x)
    x = torch.einsum("oj,...ijd->...iod", m, x)
    return x


def area_downsample(x: torch.Tensor, h_out: int) -> torch.Tensor:
    """Area-average a square channels-last map down to side h_out."""
    if h_out > x.shape[-3]:
        raise ConfigurationError(f"area_downsample target {h_out} exceeds input side {x.shape[-3]}")
    return _apply_separable(x, "area", h_out)


def upsample(x: torch.Tensor, h_out: int) -> torch.Tensor:
    """Bilinear-resize a square channels-last map up to side h_out."""
    if h_out < x.shape[-3]:
        raise ConfigurationError(f"upsample target {h_out} below input side {x.shape[-3]}")
    return _apply_separable(x, "bilinear", h_out)


# ---------------------------------------------------------------------------
# patch embedding (stand-in for a learned tokenizer encoder)


@dataclass
class PatchEmbed:
    """Fixed seeded linear map between pixel patches and latent vectors.

    Encoding splits the image into non-overlapping square patches and
    applies ``weight`` ([patch*patch*channels, dim]) to each flattened
    patch. There is no bias, so a zero image encodes to a zero latent.
    Decoding applies the pseudo-inverse, the least-squares linear
    reconstruction.
    """

    image_side: int
    channels: int
    patch: int
    weight: torch.Tensor
    decode_weight: torch.Tensor = field(init=False)

    def __post_init__(self):
        pdim = self.patch * self.patch * self.channels
        if tuple(self.weight.shape)[0] != pdim:
            raise ConfigurationError(
                f"patch weight rows {tuple(self.weight.shape)} do not match patch size {pdim}"
            )
        pinv = np.linalg.pinv(self.weight.detach().cpu().numpy().astype(np.float64))
        self.decode_weight = torch.from_numpy(pinv).to(self.weight.dtype)

    @property
    def latent_side(self) -> int:
        return self.image_side // self.patch

    @property
    def latent_dim(self) -> int:
        return self.weight.shape[1]


def make_patch_embed(image_side: int, channels: int, latent_side: int, latent_dim: int, seed: int) -> PatchEmbed:
    if image_side % latent_side != 0:
        raise ConfigurationError(
            f"image side {image_side} not divisible by finest scale side {latent_side}"
        )
    patch = image_side // latent_side
    pdim = patch * patch * channels
    gen = torch_stream(seed, "patch_embed")
    weight = torch.empty(pdim, latent_dim)
    weight.normal_(0.0, 1.0 / pdim ** 0.5, generator=gen)
    return PatchEmbed(image_side=image_side, channels=channels, patch=patch, weight=weight)


def _to_patches(image: torch.Tensor, patch: int) -> torch.Tensor:
    # [..., H, W, C] -> [..., H/p, W/p, p*p*C], raster order within each patch
    h, w, c = image.shape[-3:]
    lead = image.shape[:-3]
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    x = x.movedim(-4, -3)  # [..., gh, gw, patch, patch, c]
    return x.reshape(*lead, gh, gw, patch * patch * c)


def _from_patches(patches: torch.Tensor, patch: int, channels: int) -> torch.Tensor:
    lead = patches.shape[:-3]
    gh, gw = patches.shape[-3:-1]
    x = patches.reshape(*lead, gh, gw, patch, patch, channels)
    x = x.movedim(-3, -4)
    return x.reshape(*lead, gh * patch, gw * patch, channels)


def encode_image(embed: PatchEmbed, image: torch.Tensor) -> torch.Tensor:
    """Encode [..., H, W, C] pixels into a [..., h, h, D] latent map."""
    h, w, c = image.shape[-3:]
    if c != embed.channels or h != w or h % embed.patch != 0:
        raise ConfigurationError(
            f"image shape {tuple(image.shape)} incompatible with patch embed "
            f"(side {embed.image_side}, channels {embed.channels})"
        )
    return _to_patches(image, embed.patch) @ embed.weight.to(image.dtype)


def decode_latent(embed: PatchEmbed, latent: torch.Tensor) -> torch.Tensor:
    """Linear un-patchify of a [..., h, h, D] latent back to pixels."""
    patches = latent @ embed.decode_weight.to(latent.dtype)
    return _from_patches(patches, embed.patch, embed.channels)


# ---------------------------------------------------------------------------
# pyramids


@dataclass
class LatentPyramid:
    """Per-scale continuous maps, each [..., h_i, h_i, D]."""

    schedule: ScaleSchedule
    maps: list[torch.Tensor]

    def __post_init__(self):
        if len(self.maps) != self.schedule.num_scales:
            raise InvariantViolation(
                f"pyramid has {len(self.maps)} maps for {self.schedule.num_scales} scales"
            )
        dims = {m.shape[-1] for m in self.maps}
        if len(dims) != 1:
            raise InvariantViolation(f"latent dims differ across scales: {dims}")
        for h, m in zip(self.schedule.sides, self.maps):
            if m.shape[-3] != h or m.shape[-2] != h:
                raise InvariantViolation(
                    f"map shaped {tuple(m.shape)} does not match scale side {h}"
                )

    @property
    def latent_dim(self) -> int:
        return self.maps[0].shape[-1]

    def map(self, i: int) -> torch.Tensor:
        """Map of scale i, 1-based."""
        return self.maps[i - 1]


@dataclass
class TokenPyramid:
    """Per-scale integer token grids, each [..., h_i, h_i]."""

    schedule: ScaleSchedule
    grids: list[torch.Tensor]
    vocab: int

    def __post_init__(self):
        if len(self.grids) != self.schedule.num_scales:
            raise InvariantViolation(
                f"token pyramid has {len(self.grids)} grids for {self.schedule.num_scales} scales"
            )
        for h, g in zip(self.schedule.sides, self.grids):
            if g.shape[-2] != h or g.shape[-1] != h:
                raise InvariantViolation(
                    f"grid shaped {tuple(g.shape)} does not match scale side {h}"
                )
            if g.numel() and (g.min() < 0 or g.max() >= self.vocab):
                raise InvariantViolation("token ids out of codebook range")

    def grid(self, i: int) -> torch.Tensor:
        return self.grids[i - 1]


def build_pyramid(
    x: torch.Tensor,
    schedule: ScaleSchedule,
    supervision: str = "latent",
    embed: PatchEmbed | None = None,
) -> LatentPyramid:
    """Decompose an image or a latent into per-scale target maps.

    ``x`` is an image [..., H, W, C] when ``embed`` is given and its
    trailing shape matches the embed, otherwise a latent [..., h_N, h_N, D].
    Under latent supervision coarse maps are area-downsampled latents;
    under image supervision the image is downsampled first and each level
    encoded separately, which requires ``embed``. The finest map equals
    the encoded input in both modes.
    """
    if supervision not in ("latent", "image"):
        raise ConfigurationError(f"unknown supervision mode {supervision!r}")
    top = schedule.sides[-1]
    is_image = (
        embed is not None
        and x.shape[-1] == embed.channels
        and x.shape[-3] == x.shape[-2] == embed.image_side
    )
    if supervision == "image":
        if embed is None or not is_image:
            raise ConfigurationError("image supervision needs the raw image and a patch embed")
        if embed.latent_side != top:
            raise ConfigurationError(
                f"patch embed latent side {embed.latent_side} does not match finest scale {top}"
            )
        maps = []
        for h in schedule.sides:
            small = area_downsample(x, h * embed.patch)
            maps.append(encode_image(embed, small))
        return LatentPyramid(schedule=schedule, maps=maps)
    latent = encode_image(embed, x) if is_image else x
    if latent.shape[-3] != top or latent.shape[-2] != top:
        raise ConfigurationError(
            f"latent side {latent.shape[-3]} does not match finest scale {top}"
        )
    maps = [area_downsample(latent, h) for h in schedule.sides]
    return LatentPyramid(schedule=schedule, maps=maps)


# ---------------------------------------------------------------------------
# codebook


@dataclass
class Codebook:
    """Rows are code vectors. Rows must be distinct so nearest-neighbor
    lookup is unambiguous up to exact distance ties."""

    vectors: torch.Tensor  # [V, D]

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ConfigurationError(f"codebook must be [V, D], got {tuple(self.vectors.shape)}")
        if not torch.isfinite(self.vectors).all():
            raise InvariantViolation("codebook contains non-finite entries")
        v = self.vectors
        if v.shape[0] > 1:
            d2 = torch.cdist(v.double(), v.double()) ** 2
            d2.fill_diagonal_(float("inf"))
            if d2.min().item() < 1e-8:
                raise InvariantViolation("codebook has duplicate rows within 1e-8")

    @property
    def vocab(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def quantize_map(latent: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """Nearest codebook row per position under squared Euclidean distance.

    Exact distance ties resolve to the lowest row index (argmin returns
    the first minimum).
    """
    v = codebook.vectors.to(latent.dtype)
    diff = latent.unsqueeze(-2) - v  # [..., V, D]
    d2 = (diff * diff).sum(-1)
    return torch.argmin(d2, dim=-1)


def dequantize_grid(grid: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    return codebook.vectors[grid]


def quantize(p: LatentPyramid, codebook: Codebook) -> TokenPyramid:
    grids = [quantize_map(m, codebook) for m in p.maps]
    return TokenPyramid(schedule=p.schedule, grids=grids, vocab=codebook.vocab)


def dequantize(t: TokenPyramid, codebook: Codebook) -> LatentPyramid:
    maps = [dequantize_grid(g, codebook) for g in t.grids]
    return LatentPyramid(schedule=t.schedule, maps=maps)


def fit_codebook(vectors: torch.Tensor, vocab: int, seed: int, iters: int = 50) -> Codebook:
    """Seeded k-means over latent vectors.

    Initializes from ``vocab`` distinct samples, runs standard Lloyd
    iterations with a hard cap of ``iters``, and re-seeds any empty
    cluster at the point currently farthest from its assigned centroid.
    Assignment ties go to the lowest centroid index.
    """
    x = vectors.detach().cpu().double().numpy().reshape(-1, vectors.shape[-1])
    n = x.shape[0]
    if vocab < 1 or vocab > n:
        raise ConfigurationError(f"cannot fit {vocab} centroids from {n} vectors")
    rng = numpy_stream(seed, "codebook")
    centroids = x[rng.choice(n, size=vocab, replace=False)].copy()
    assign = np.full(n, -1)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        new_assign = d2.argmin(1)
        point_d2 = d2[np.arange(n), new_assign]
        for j in range(vocab):
            if not (new_assign == j).any():
                far = int(point_d2.argmax())
                centroids[j] = x[far]
                new_assign[far] = j
                point_d2[far] = 0.0
        if (new_assign == assign).all():
            break
        assign = new_assign
        for j in range(vocab):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(0)
    return Codebook(vectors=torch.from_numpy(centroids).float())
