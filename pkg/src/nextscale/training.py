"""Training schemes: teacher forcing, naive student forcing, two-pass
self-refinement, and the masked-coarse-scale hybrid.

Conventions shared by every scheme:
  * Per-scale losses are means over batch and positions (and channels in
    continuous mode); the reported total is their unweighted sum.
  * Sampled bridges never carry gradient. Token draws are already
    non-differentiable; continuous bridges are detached explicitly.
  * Forward cost is counted on the model's ``nfe`` counter; each step
    helper returns the exact number of backbone invocations it spent.

The self-refinement step (``sar_step``) runs two passes. Pass 1 is a
plain teacher-forced forward; its per-scale predictions are sampled once
and the sampled maps are shifted into the inputs of the next scale. Pass
2 re-runs the model in parallel over these self-conditioned inputs. Each
scale i in pass 2 therefore reproduces exactly the prediction a one-step
sequential rollout would make after consuming the sampled scale i-1, so
every one-step student rollout is realized at the cost of one extra
forward. The consistency loss pulls pass-2 predictions toward a
stop-gradient target: the pass-1 samples (``teacher`` mode) or the
ground truth (``ground_truth`` mode).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, UnsupportedError
from .generator import Generator
from .pyramid import Codebook, LatentPyramid, TokenPyramid, dequantize_grid, upsample
from .rng import numpy_stream, torch_stream
from .sampling import SamplerConfig, cfg_combine, sample_map

SCHEDULE_KINDS = ("tf", "sf_full", "sf_alternate", "sf_interleave", "sf_hybrid", "sar", "mask_hybrid")


@dataclass(frozen=True)
class TrainConfig:
    schedule_kind: str = "tf"
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    # self-refinement
    gamma: float = 0.5
    csfl_target: str = "teacher"         # teacher | ground_truth
    csfl_detach_teacher: bool = True
    sf_scales: str = "all"               # all | single_random_k
    ssr_sampler: SamplerConfig = field(default_factory=SamplerConfig)
    # naive hybrid schedule: scales 1..hybrid_k keep ground-truth inputs;
    # 0 resolves to N-1 for the schedule in use (only the finest scale self-forced)
    hybrid_k: int = 0
    # masked-coarse hybrid
    mask_ratio_min: float = 0.5
    mask_ratio_max: float = 1.0
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.schedule_kind!r}")
        if self.csfl_target not in ("teacher", "ground_truth"):
            raise ConfigurationError(f"unknown consistency target {self.csfl_target!r}")
        if self.sf_scales not in ("all", "single_random_k"):
            raise ConfigurationError(f"unknown sf_scales mode {self.sf_scales!r}")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.hybrid_k < 0:
            raise ConfigurationError("hybrid_k must be >= 0 (0 resolves to N-1)")
        if not 0.0 <= self.mask_ratio_min <= self.mask_ratio_max <= 1.0:
            raise ConfigurationError("mask ratio range must satisfy 0 <= min <= max <= 1")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigurationError("lr and eps must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments.

    Update order per step, matching the closed form tested against:
        p <- p * (1 - lr * wd)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    Decay applies to every parameter, gradients absent count as zero.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.95,
                 weight_decay: float = 0.05, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "AdamW":
        return cls(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   weight_decay=cfg.weight_decay, eps=cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            p.mul_(1.0 - self.lr * self.weight_decay)
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt() + self.eps, value=-self.lr)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for idx, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt.m.{idx}"] = m
            out[f"opt.v.{idx}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], t: int) -> None:
        for idx in range(len(self.params)):
            self.m[idx] = tensors[f"opt.m.{idx}"].to(self.params[idx].dtype)
            self.v[idx] = tensors[f"opt.v.{idx}"].to(self.params[idx].dtype)
        self.t = t


# ---------------------------------------------------------------------------
# losses


def _scale_loss(pred: torch.Tensor, target: torch.Tensor, discrete: bool) -> torch.Tensor:
    if discrete:
        v = pred.shape[-1]
        return F.cross_entropy(pred.reshape(-1, v), target.reshape(-1))
    return F.mse_loss(pred, target)


def loss_tf(
    preds: list[torch.Tensor],
    targets: TokenPyramid | LatentPyramid,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Teacher-forcing loss: mean cross-entropy per scale for token
    targets, mean squared error for latent targets, summed over scales."""
    discrete = isinstance(targets, TokenPyramid)
    refs = targets.grids if discrete else targets.maps
    if len(preds) != len(refs):
        raise ConfigurationError("prediction/target scale counts differ")
    per_scale = [_scale_loss(p, r, discrete) for p, r in zip(preds, refs)]
    total = per_scale[0]
    for term in per_scale[1:]:
        total = total + term
    return total, per_scale


# ---------------------------------------------------------------------------
# two-pass self-refinement


@dataclass
class RolloutTrace:
    """Everything produced by one two-pass refinement rollout.

    ``tf_preds``/``sf_preds`` are per-scale predictions from pass 1 and
    pass 2 (pass 2 covers scales 2..N; index i-2 holds scale i).
    ``sampled`` holds the pass-1 samples per scale: token grids in
    discrete mode, detached latent maps otherwise. ``csf_per_scale`` is
    filled in by ``loss_csfl``.
    """

    tf_preds: list[torch.Tensor]
    sampled: list[torch.Tensor]
    sf_inputs: list[torch.Tensor]
    sf_preds: list[torch.Tensor]
    tf_loss: torch.Tensor
    tf_per_scale: list[torch.Tensor]
    nfe: int
    csf_per_scale: list[torch.Tensor] | None = None


def ssr_rollout(
    model: Generator,
    label: torch.Tensor,
    input_pyramid: LatentPyramid,
    targets: TokenPyramid | LatentPyramid,
    sampler: SamplerConfig,
    gen: torch.Generator,
    codebook: Codebook | None = None,
    drop: torch.Tensor | None = None,
    grad_pass2: bool = True,
) -> RolloutTrace:
    """Two forwards total: teacher-forced pass, sample every scale once,
    shift the samples into next-scale inputs, parallel self-forced pass.

    With guidance enabled the unconditional rows ride along in pass 1 as
    extra batch rows, keeping the invocation count at two. Pass 2 reuses
    the pass-1 label-drop realization. ``grad_pass2=False`` runs pass 2
    under no_grad (used when the consistency weight is zero).
    """
    discrete = model.config.discrete
    if discrete and codebook is None:
        raise ConfigurationError("discrete rollout needs a codebook")
    n = model.schedule.num_scales
    start_nfe = model.nfe
    b = label.shape[0]

    if sampler.cfg:
        wide_label = torch.cat([label, label])
        wide_drop = torch.cat([
            drop if drop is not None else torch.zeros(b, dtype=torch.bool),
            torch.ones(b, dtype=torch.bool),
        ])
        wide_maps = [torch.cat([m, m]) for m in input_pyramid.maps]
        wide_preds = model.forward_tf(wide_label, wide_maps, drop=wide_drop)
        tf_preds = [p[:b] for p in wide_preds]
        guided = [cfg_combine(p[:b], p[b:], sampler.cfg_scale) for p in wide_preds]
    else:
        tf_preds = model.forward_tf(label, input_pyramid, drop=drop)
        guided = tf_preds

    tf_total, tf_per_scale = loss_tf(tf_preds, targets)

    sampled: list[torch.Tensor] = []
    sampled_maps: list[torch.Tensor] = []
    with torch.no_grad():
        for i in range(1, n + 1):
            if discrete:
                grid = sample_map(guided[i - 1].detach(), sampler, gen)
                sampled.append(grid)
                sampled_maps.append(dequantize_grid(grid, codebook))
            else:
                latent = guided[i - 1].detach()
                sampled.append(latent)
                sampled_maps.append(latent)

    sf_inputs = [upsample(sampled_maps[i - 2], model.schedule.side(i)) for i in range(2, n + 1)]
    ctx = contextlib.nullcontext() if grad_pass2 else torch.no_grad()
    with ctx:
        sf_all = model.forward_tf(label, sampled_maps, drop=drop)
    sf_preds = sf_all[1:]  # scale 1 sees no sampled input; consistency starts at scale 2

    return RolloutTrace(
        tf_preds=tf_preds,
        sampled=sampled,
        sf_inputs=sf_inputs,
        sf_preds=sf_preds,
        tf_loss=tf_total,
        tf_per_scale=tf_per_scale,
        nfe=model.nfe - start_nfe,
    )


def loss_csfl(
    trace: RolloutTrace,
    model: Generator,
    targets: TokenPyramid | LatentPyramid,
    csfl_target: str = "teacher",
    detach_teacher: bool = True,
    sf_scales: str = "all",
    gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Consistency loss over the self-forced pass, scales 2..N.

    ``teacher`` targets are the pass-1 samples (token draws, or the
    pass-1 latent predictions in continuous mode, detached unless
    ``detach_teacher`` is False). ``ground_truth`` targets come from the
    supplied pyramid. ``single_random_k`` draws one scale k in 1..N-1
    and keeps only the term at scale k+1; ``all`` sums every term.
    """
    discrete = model.config.discrete
    n = model.schedule.num_scales
    per_scale = []
    for i in range(2, n + 1):
        pred = trace.sf_preds[i - 2]
        if csfl_target == "teacher":
            if discrete:
                ref = trace.sampled[i - 1]
            else:
                ref = trace.tf_preds[i - 1]
                ref = ref.detach() if detach_teacher else ref
        elif csfl_target == "ground_truth":
            ref = (targets.grids if discrete else targets.maps)[i - 1]
        else:
            raise ConfigurationError(f"unknown consistency target {csfl_target!r}")
        per_scale.append(_scale_loss(pred, ref, discrete))

    if sf_scales == "single_random_k":
        if gen is None:
            raise ConfigurationError("single_random_k needs a generator for the scale draw")
        k = int(torch.randint(1, n, (1,), generator=gen).item())
        total = per_scale[k - 1]
    else:
        total = per_scale[0]
        for term in per_scale[1:]:
            total = total + term
    trace.csf_per_scale = per_scale
    return total, per_scale


def sar_step(
    model: Generator,
    opt: AdamW,
    label: torch.Tensor,
    input_pyramid: LatentPyramid,
    targets: TokenPyramid | LatentPyramid,
    cfg: TrainConfig,
    step: int,
    codebook: Codebook | None = None,
    drop: torch.Tensor | None = None,
) -> dict:
    """One optimization step of teacher loss plus weighted consistency.

    At gamma == 0 pass 2 runs without gradient and the optimized loss is
    exactly the teacher-forcing loss, so trajectories match plain TF
    training bit for bit while the diagnostics still see both passes.
    """
    gen = torch_stream(cfg.seed, f"ssr/{step}")
    trace = ssr_rollout(
        model, label, input_pyramid, targets, cfg.ssr_sampler, gen,
        codebook=codebook, drop=drop, grad_pass2=cfg.gamma > 0,
    )
    csf_ctx = contextlib.nullcontext() if cfg.gamma > 0 else torch.no_grad()
    with csf_ctx:
        csf_total, _ = loss_csfl(
            trace, model, targets,
            csfl_target=cfg.csfl_target,
            detach_teacher=cfg.csfl_detach_teacher,
            sf_scales=cfg.sf_scales,
            gen=torch_stream(cfg.seed, f"ssr_k/{step}"),
        )
    loss = trace.tf_loss if cfg.gamma == 0 else trace.tf_loss + cfg.gamma * csf_total
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {
        "loss": float(loss.detach()),
        "loss_tf": float(trace.tf_loss.detach()),
        "loss_csf": float(csf_total.detach()),
        "nfe": trace.nfe,
        "trace": trace,
    }


# ---------------------------------------------------------------------------
# plain and naive-student schedules


def tf_step(
    model: Generator,
    opt: AdamW,
    label: torch.Tensor,
    input_pyramid: LatentPyramid,
    targets: TokenPyramid | LatentPyramid,
    drop: torch.Tensor | None = None,
) -> dict:
    start_nfe = model.nfe
    preds = model.forward_tf(label, input_pyramid, drop=drop)
    loss, _ = loss_tf(preds, targets)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {
        "loss": float(loss.detach()),
        "loss_tf": float(loss.detach()),
        "loss_csf": 0.0,
        "nfe": model.nfe - start_nfe,
    }


def resolve_hybrid_k(hybrid_k: int, n: int) -> int:
    k = n - 1 if hybrid_k == 0 else hybrid_k
    if not 1 <= k <= n:
        raise ConfigurationError(f"hybrid_k must lie in 1..{n} (or 0 for N-1), got {hybrid_k}")
    return k


def sf_input_scales(kind: str, n: int, hybrid_k: int, iteration: int) -> set[int]:
    """Scales whose inputs come from the model's own samples.

    full: every scale with an input (2..N). interleave: even scales.
    hybrid(k): scales above k. alternate: full on odd iterations, none on
    even ones (pure TF).
    """
    if kind == "sf_full":
        return set(range(2, n + 1))
    if kind == "sf_interleave":
        return {i for i in range(2, n + 1) if i % 2 == 0}
    if kind == "sf_hybrid":
        return set(range(resolve_hybrid_k(hybrid_k, n) + 1, n + 1))
    if kind == "sf_alternate":
        return set(range(2, n + 1)) if iteration % 2 == 1 else set()
    raise ConfigurationError(f"unknown naive student-forcing kind {kind!r}")


def naive_sf_step(
    model: Generator,
    opt: AdamW,
    label: torch.Tensor,
    input_pyramid: LatentPyramid,
    targets: TokenPyramid | LatentPyramid,
    cfg: TrainConfig,
    step: int,
    codebook: Codebook | None = None,
    drop: torch.Tensor | None = None,
) -> dict:
    """One step of a naive student-forcing schedule.

    The conditioning maps for the chosen scales are rolled out
    sequentially without gradient: scale j is predicted from the current
    mix of ground-truth and already-sampled maps, sampled once, and the
    sample replaces the ground-truth map. A final parallel pass with
    gradient computes every prediction from the mixed inputs, and the
    loss compares those predictions to the ground truth at all scales.
    Cost is one forward per rolled-out scale plus the final pass.
    """
    n = model.schedule.num_scales
    discrete = model.config.discrete
    sf_set = sf_input_scales(cfg.schedule_kind, n, cfg.hybrid_k, step)
    gen = torch_stream(cfg.seed, f"ssr/{step}")
    start_nfe = model.nfe

    if discrete and codebook is None:
        raise ConfigurationError("discrete rollout needs a codebook")
    maps = [m for m in input_pyramid.maps]
    # scales whose samples feed a later scale's input must be rolled out first
    need = sorted(i - 1 for i in sf_set)
    with torch.no_grad():
        for j in need:
            pred = model.forward_prefix(label, maps[: j - 1], drop=drop)
            if discrete:
                grid = sample_map(pred, cfg.ssr_sampler, gen)
                maps[j - 1] = dequantize_grid(grid, codebook)
            else:
                maps[j - 1] = pred.detach()

    preds = model.forward_tf(label, maps, drop=drop)
    loss, _ = loss_tf(preds, targets)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {
        "loss": float(loss.detach()),
        "loss_tf": float(loss.detach()),
        "loss_csf": 0.0,
        "nfe": model.nfe - start_nfe,
    }


def hybrid_mask_step(
    model: Generator,
    opt: AdamW,
    label: torch.Tensor,
    input_pyramid: LatentPyramid,
    targets: TokenPyramid,
    cfg: TrainConfig,
    step: int,
    drop: torch.Tensor | None = None,
) -> dict:
    """Masked bidirectional modeling at the coarsest scale, teacher
    forcing above it, in one forward.

    Each batch row draws a mask ratio uniformly from the configured range
    and masks ceil(ratio * h1^2) scale-1 positions (at least one). The
    scale-1 loss counts masked positions only; scales 2..N keep their
    usual teacher-forcing terms. Discrete mode only.
    """
    if not isinstance(targets, TokenPyramid):
        raise UnsupportedError("masked-coarse training is defined for the discrete pathway")
    n = model.schedule.num_scales
    h1 = model.schedule.side(1)
    b = label.shape[0]
    cells = h1 * h1
    rng = numpy_stream(cfg.seed, f"mask/{step}")
    ratios = rng.uniform(cfg.mask_ratio_min, cfg.mask_ratio_max, size=b)
    masked = torch.zeros(b, cells, dtype=torch.bool)
    for row in range(b):
        count = max(1, int(math.ceil(ratios[row] * cells)))
        idx = rng.permutation(cells)[:count]
        masked[row, idx] = True

    start_nfe = model.nfe
    preds = model.forward_masked(label, input_pyramid, masked, drop=drop)

    logits_one = preds[0].reshape(b * cells, -1)
    tokens_one = targets.grid(1).reshape(b * cells)
    keep = masked.reshape(b * cells)
    loss_mask = F.cross_entropy(logits_one[keep], tokens_one[keep])
    per_scale = [loss_mask]
    for i in range(2, n + 1):
        per_scale.append(_scale_loss(preds[i - 1], targets.grid(i), True))
    loss = per_scale[0]
    for term in per_scale[1:]:
        loss = loss + term
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {
        "loss": float(loss.detach()),
        "loss_tf": float(sum(float(t.detach()) for t in per_scale[1:])),
        "loss_csf": 0.0,
        "loss_mask": float(loss_mask.detach()),
        "nfe": model.nfe - start_nfe,
    }
