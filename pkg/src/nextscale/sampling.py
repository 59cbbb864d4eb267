"""Token sampling and sequential generation.

Sampling from a logit map applies, in this order: classifier-free
guidance (when enabled), temperature, top-k filtering, then top-p
filtering on the renormalized survivors. The order is part of the
contract; tests enumerate it against a brute-force oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .errors import ConfigurationError, UnsupportedError
from .generator import Generator
from .pyramid import (
    Codebook,
    LatentPyramid,
    PatchEmbed,
    TokenPyramid,
    decode_latent,
    dequantize_grid,
)
from .rng import torch_stream


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "stochastic"     # stochastic | argmax
    top_k: int = 900             # clipped to the vocabulary size
    top_p: float = 0.95
    temperature: float = 1.0
    cfg: bool = False
    cfg_scale: float = 2.5

    def __post_init__(self):
        if self.kind not in ("stochastic", "argmax"):
            raise ConfigurationError(f"unknown sampler kind {self.kind!r}")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigurationError("top_p must lie in (0, 1]")
        if self.temperature <= 0.0:
            raise ConfigurationError("temperature must be > 0")


def filter_top_k_top_p(logits: torch.Tensor, top_k: int, top_p: float) -> torch.Tensor:
    """Mask logits outside the top-k/top-p set to -inf.

    Keeps the k largest logits (ties broken toward lower token index),
    renormalizes the survivors, then keeps the smallest prefix of them,
    in descending probability order, whose cumulative probability
    reaches top_p. The best token always survives; if rounding keeps the
    cumulative sum below top_p every survivor is retained. Surviving
    logits pass through unchanged.
    """
    v = logits.shape[-1]
    k = min(top_k, v)
    # stable sort so equal logits keep index order, making tie-breaks exact
    order = torch.argsort(logits, dim=-1, descending=True, stable=True)
    sorted_logits = torch.gather(logits, -1, order)
    ranks = torch.arange(v, device=logits.device).expand(sorted_logits.shape)
    keep = ranks < k
    masked = torch.where(keep, sorted_logits, torch.full_like(sorted_logits, float("-inf")))
    probs = torch.softmax(masked, dim=-1)
    cum_before = torch.cumsum(probs, dim=-1) - probs
    keep = keep & (cum_before < top_p)
    keep[..., 0] = True
    filtered = torch.where(keep, sorted_logits, torch.full_like(sorted_logits, float("-inf")))
    out = torch.empty_like(logits)
    out.scatter_(-1, order, filtered)
    return out


def cfg_combine(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided logits uncond + scale * (cond - uncond).

    The endpoints are special-cased so scale 0 returns the unconditional
    logits bitwise and scale 1 the conditional ones, which the float
    expression would only match approximately.
    """
    if scale == 0.0:
        return uncond.clone()
    if scale == 1.0:
        return cond.clone()
    return uncond + scale * (cond - uncond)


def sample_map(
    logits: torch.Tensor,
    sampler: SamplerConfig,
    gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw one token per position from a [..., V] logit map.

    Argmax sampling resolves exact ties toward the lowest token index.
    Stochastic sampling divides by temperature, filters, and draws from
    the renormalized survivors using ``gen``.
    """
    if sampler.kind == "argmax":
        return torch.argmax(logits, dim=-1)
    if gen is None:
        raise ConfigurationError("stochastic sampling needs an explicit generator")
    scaled = logits / sampler.temperature
    filtered = filter_top_k_top_p(scaled, sampler.top_k, sampler.top_p)
    probs = torch.softmax(filtered, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    draws = torch.multinomial(flat, 1, generator=gen).squeeze(-1)
    return draws.reshape(logits.shape[:-1])


@dataclass
class GenerationResult:
    images: torch.Tensor            # [B, H, W, C], decoded pixels
    tokens: TokenPyramid | None     # discrete mode only
    latents: LatentPyramid
    nfe: int                        # backbone forwards spent on this call


def _scale_logits(
    model: Generator,
    label: torch.Tensor,
    maps: list[torch.Tensor],
    sampler: SamplerConfig,
) -> torch.Tensor:
    if not sampler.cfg:
        return model.forward_prefix(label, maps)
    cond = model.forward_prefix(label, maps)
    drop = torch.ones(label.shape[0], dtype=torch.bool)
    uncond = model.forward_prefix(label, maps, drop=drop)
    return cfg_combine(cond, uncond, sampler.cfg_scale)


@torch.no_grad()
def generate(
    model: Generator,
    label: torch.Tensor,
    sampler: SamplerConfig,
    codebook: Codebook | None,
    embed: PatchEmbed,
    seed: int,
    item_offset: int = 0,
) -> GenerationResult:
    """Sequential scale-by-scale generation.

    One forward per scale, two with guidance enabled (conditional and
    unconditional invocations are counted separately). Each batch item
    draws from its own stream named by its global index ``item_offset + b``,
    so results do not depend on how items are grouped into batches.
    """
    label = torch.as_tensor(label, dtype=torch.long)
    if label.ndim == 0:
        label = label.unsqueeze(0)
    b = label.shape[0]
    schedule = model.schedule
    discrete = model.config.discrete
    if not discrete and codebook is not None:
        raise UnsupportedError("continuous generation does not use a codebook")
    if discrete and codebook is None:
        raise ConfigurationError("discrete generation needs a codebook")
    gens = [torch_stream(seed, f"sample/{item_offset + i}") for i in range(b)]

    start_nfe = model.nfe
    maps: list[torch.Tensor] = []
    grids: list[torch.Tensor] = []
    for i in range(1, schedule.num_scales + 1):
        logits = _scale_logits(model, label, maps, sampler)
        if discrete:
            rows = [sample_map(logits[j], sampler, gens[j]) for j in range(b)]
            grid = torch.stack(rows)
            grids.append(grid)
            maps.append(dequantize_grid(grid, codebook))
        else:
            maps.append(logits)

    latents = LatentPyramid(schedule=schedule, maps=maps)
    tokens = TokenPyramid(schedule=schedule, grids=grids, vocab=codebook.vocab) if discrete else None
    images = decode_latent(embed, maps[-1])
    return GenerationResult(
        images=images,
        tokens=tokens,
        latents=latents,
        nfe=model.nfe - start_nfe,
    )


def argmax_variant(sampler: SamplerConfig) -> SamplerConfig:
    return replace(sampler, kind="argmax", cfg=False)
