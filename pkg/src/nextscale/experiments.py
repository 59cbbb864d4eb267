"""Run orchestration: workspace setup, training loops, evaluation runs,
checkpoint round trips, and the two standard ablations.

A run directory is owned by exactly one process at a time (guarded by a
lock file) and accumulates:

    config.cfg      the fully resolved configuration
    metrics.csv     one row per optimization step
    eval.csv        one row per evaluation point
    model.ckpt      final checkpoint (params, optimizer, codebook, embed)
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, emit_config, flatten_config, parse_config
from .data import Dataset, make_dataset
from .errors import UsageError
from .evaluation import (
    FeatureMap,
    make_feature_map,
    per_scale_fd,
    pr_proxy,
    reconstruct_references,
)
from .generator import Generator, init_params
from .metrics import MetricsWriter, TRAIN_FIELDS, eval_fields
from .pyramid import (
    Codebook,
    LatentPyramid,
    PatchEmbed,
    ScaleSchedule,
    build_pyramid,
    decode_latent,
    dequantize,
    fit_codebook,
    make_patch_embed,
    quantize,
)
from .rng import numpy_stream, stream_seed, torch_stream
from .sampling import generate
from .training import (
    AdamW,
    TrainConfig,
    hybrid_mask_step,
    naive_sf_step,
    sar_step,
    tf_step,
)


# ---------------------------------------------------------------------------
# workspace


@dataclass
class Workspace:
    cfg: ExperimentConfig
    schedule: ScaleSchedule
    dataset: Dataset
    embed: PatchEmbed
    codebook: Codebook | None
    model: Generator
    features: FeatureMap


def prepare_workspace(cfg: ExperimentConfig) -> Workspace:
    cfg = cfg.validate()
    schedule = cfg.scale_schedule()
    dataset = make_dataset(cfg.dataset)
    embed = make_patch_embed(
        cfg.dataset.side, cfg.dataset.channels, schedule.sides[-1],
        cfg.model.latent_dim, seed=cfg.seed,
    )
    model = init_params(Generator(cfg.model, schedule), seed=cfg.seed)
    codebook = None
    if cfg.model.discrete:
        sample = dataset.images[: cfg.codebook_images]
        pyr = build_pyramid(sample, schedule, supervision=cfg.supervision, embed=embed)
        vectors = torch.cat([m.reshape(-1, cfg.model.latent_dim) for m in pyr.maps])
        codebook = fit_codebook(vectors, cfg.model.vocab, seed=cfg.seed)
    features = make_feature_map(
        (cfg.dataset.side, cfg.dataset.side, cfg.dataset.channels),
        seed=cfg.seed, proj_width=cfg.feature_width,
    )
    return Workspace(
        cfg=cfg, schedule=schedule, dataset=dataset, embed=embed,
        codebook=codebook, model=model, features=features,
    )


def batch_views(ws: Workspace, indices) -> tuple[torch.Tensor, LatentPyramid, object]:
    """Labels, conditioning pyramid, and loss targets for a batch.

    Discrete mode conditions on dequantized ground-truth tokens so the
    inputs the model learns from match what generation will feed back;
    targets are the token grids. Continuous mode uses the raw latent
    pyramid for both.
    """
    images = ws.dataset.images[indices]
    labels = ws.dataset.labels[indices]
    pyr = build_pyramid(images, ws.schedule, supervision=ws.cfg.supervision, embed=ws.embed)
    if ws.codebook is None:
        return labels, pyr, pyr
    tokens = quantize(pyr, ws.codebook)
    return labels, dequantize(tokens, ws.codebook), tokens


# ---------------------------------------------------------------------------
# lock file


class RunLock:
    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"{self.path} exists: another process owns this directory "
                "(remove the lock file if that run is dead)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except OSError:
            pass
        return False


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(ws: Workspace, step: int, scheme: str, samples: int | None = None) -> dict:
    """Generate a fixed panel of samples and score them against tokenizer
    reconstructions of the dataset. Returns one eval CSV row."""
    cfg = ws.cfg
    n = samples or cfg.eval_samples
    model = ws.model
    was_training = model.training
    model.eval()
    start_nfe = model.nfe
    labels = torch.arange(n, dtype=torch.long) % cfg.dataset.classes
    result = generate(
        model, labels, cfg.eval_sampler, ws.codebook, ws.embed,
        seed=stream_seed(cfg.seed, "eval"),
    )
    gen_nfe = model.nfe - start_nfe
    if was_training:
        model.train()

    refs = reconstruct_references(
        ws.dataset.images[:n], ws.schedule, cfg.supervision, ws.embed, ws.codebook,
    )
    row: dict = {"scheme": scheme, "step": step, "nfe": gen_nfe}
    for i in range(1, ws.schedule.num_scales + 1):
        row[f"fd_scale{i}"] = per_scale_fd(result.latents, refs, i, ws.embed, ws.features)
    # whole-image score: identical to the finest-scale score by construction
    row["fd"] = row[f"fd_scale{ws.schedule.num_scales}"]
    ref_px = refs.map(ws.schedule.num_scales)
    real_feats = ws.features(decode_latent(ws.embed, ref_px))
    gen_feats = ws.features(result.images)
    precision, recall = pr_proxy(real_feats, gen_feats, k=cfg.knn_k)
    row["precision"] = precision
    row["recall"] = recall
    return row


# ---------------------------------------------------------------------------
# checkpoints


def workspace_checkpoint(ws: Workspace, opt: AdamW, step: int) -> Checkpoint:
    meta = {f"cfg.{k}": v for k, v in flatten_config(ws.cfg).items()}
    meta["step"] = step
    meta["opt_t"] = opt.t
    meta["seed"] = ws.cfg.seed
    tensors: dict[str, torch.Tensor] = {}
    for name, value in ws.model.state_dict().items():
        tensors[f"param.{name}"] = value
    tensors.update(opt.state_tensors())
    tensors["embed.weight"] = ws.embed.weight
    if ws.codebook is not None:
        tensors["codebook.vectors"] = ws.codebook.vectors
    return Checkpoint(meta=meta, tensors=tensors)


def save_run_checkpoint(path: str, ws: Workspace, opt: AdamW, step: int) -> None:
    save_checkpoint(path, workspace_checkpoint(ws, opt, step))


def load_run(path: str) -> tuple[Workspace, AdamW, int]:
    """Rebuild a workspace, optimizer, and step counter from a checkpoint."""
    ckpt = load_checkpoint(path)
    cfg_lines = [
        f"{key[len('cfg.'):]} = {value}"
        for key, value in sorted(ckpt.meta.items())
        if key.startswith("cfg.")
    ]
    cfg = parse_config("\n".join(cfg_lines))
    ws = prepare_workspace(cfg)
    state = {}
    for key, tensor in ckpt.tensors.items():
        if key.startswith("param."):
            state[key[len("param."):]] = tensor
    ws.model.load_state_dict(state)
    if ws.codebook is not None:
        ws.codebook = Codebook(vectors=ckpt.tensors["codebook.vectors"])
    ws.embed = PatchEmbed(
        image_side=ws.embed.image_side, channels=ws.embed.channels,
        patch=ws.embed.patch, weight=ckpt.tensors["embed.weight"],
    )
    opt = AdamW.from_config(ws.model.parameters(), cfg.train)
    step = int(ckpt.require("step"))
    if any(k.startswith("opt.m.") for k in ckpt.tensors):
        opt.load_state_tensors(ckpt.tensors, t=int(ckpt.require("opt_t")))
    return ws, opt, step


# ---------------------------------------------------------------------------
# training loop


def _dispatch_step(ws: Workspace, opt: AdamW, tcfg: TrainConfig, step: int,
                   labels, inputs, targets, drop) -> dict:
    kind = tcfg.schedule_kind
    if kind == "tf":
        return tf_step(ws.model, opt, labels, inputs, targets, drop=drop)
    if kind == "sar":
        return sar_step(ws.model, opt, labels, inputs, targets, tcfg, step,
                        codebook=ws.codebook, drop=drop)
    if kind == "mask_hybrid":
        return hybrid_mask_step(ws.model, opt, labels, inputs, targets, tcfg, step, drop=drop)
    return naive_sf_step(ws.model, opt, labels, inputs, targets, tcfg, step,
                         codebook=ws.codebook, drop=drop)


def run_training(
    ws: Workspace,
    out_dir: str,
    opt: AdamW | None = None,
    start_step: int = 0,
    steps: int | None = None,
    scheme: str | None = None,
    eval_at_end: bool = True,
) -> tuple[AdamW, int, dict | None]:
    """Train for ``steps`` optimization steps, appending metrics and eval
    rows under ``out_dir`` and saving a checkpoint at the end. Returns
    the optimizer, the next step index, and the last eval row (if any).

    Step indices are global: a resumed run continues the same named
    randomness streams, so (pretrain k steps, resume for m) and a single
    (k+m)-step run consume identical batches.
    """
    cfg = ws.cfg
    tcfg = cfg.train
    total = tcfg.steps if steps is None else steps
    scheme = scheme or tcfg.schedule_kind
    os.makedirs(out_dir, exist_ok=True)
    with RunLock(out_dir):
        with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
            fh.write(emit_config(cfg))
        metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv"), TRAIN_FIELDS)
        evals = MetricsWriter(
            os.path.join(out_dir, "eval.csv"), eval_fields(ws.schedule.num_scales)
        )
        if opt is None:
            opt = AdamW.from_config(ws.model.parameters(), tcfg)
        n_data = ws.dataset.images.shape[0]
        drop_p = cfg.model.label_drop_prob
        end_step = start_step + total
        last_eval: dict | None = None
        for step in range(start_step, end_step):
            t0 = time.perf_counter()
            data_rng = numpy_stream(tcfg.seed, f"data/{step}")
            idx = data_rng.integers(0, n_data, size=tcfg.batch_size)
            labels, inputs, targets = batch_views(ws, torch.from_numpy(idx))
            if drop_p > 0:
                u = torch.rand(len(idx), generator=torch_stream(tcfg.seed, f"drop/{step}"))
                drop = u < drop_p
            else:
                drop = None
            stats = _dispatch_step(ws, opt, tcfg, step, labels, inputs, targets, drop)
            stats.pop("trace", None)
            metrics.write({
                "scheme": scheme,
                "step": step,
                "loss": stats["loss"],
                "loss_tf": stats["loss_tf"],
                "loss_csf": stats["loss_csf"],
                "nfe": stats["nfe"],
                "wall_time": time.perf_counter() - t0,
            })
            is_last = step == end_step - 1
            if (step + 1) % cfg.eval_every == 0 or (eval_at_end and is_last):
                last_eval = evaluate_model(ws, step + 1, scheme)
                evals.write(last_eval)
        save_run_checkpoint(os.path.join(out_dir, "model.ckpt"), ws, opt, end_step)
    return opt, end_step, last_eval


# ---------------------------------------------------------------------------
# ablations


SF_ABLATION_KINDS = ("tf", "sf_full", "sf_alternate", "sf_interleave", "sf_hybrid")

# guidance 1.5 for rollout bridges: the published 2.5 is tuned for large
# class-conditional models, and extrapolating that hard on a small synthetic
# task pushes sampled prefixes off-manifold, which the refinement inherits
SAMPLER_VARIANTS = {
    "argmax": {"kind": "argmax", "cfg": False},
    "stochastic": {"kind": "stochastic", "cfg": False},
    "stochastic_cfg": {"kind": "stochastic", "cfg": True, "cfg_scale": 1.5},
}


def _with_train(ws: Workspace, **overrides) -> Workspace:
    new_cfg = replace(ws.cfg, train=replace(ws.cfg.train, **overrides))
    ws.cfg = new_cfg
    return ws


def ablate_sf(ckpt_path: str, out_dir: str, steps: int | None = None) -> list[dict]:
    """Continue one pretrained checkpoint under each conditioning schedule
    and evaluate the results. One row per schedule."""
    rows = []
    for kind in SF_ABLATION_KINDS:
        ws, opt, step0 = load_run(ckpt_path)
        _with_train(ws, schedule_kind=kind)
        sub = os.path.join(out_dir, kind)
        _, _, row = run_training(ws, sub, opt=opt, start_step=step0, steps=steps, scheme=kind)
        rows.append(row)
    _write_rows(os.path.join(out_dir, "ablate_sf.csv"), rows)
    return rows


def ablate_sampling(ckpt_path: str, out_dir: str, steps: int | None = None,
                    gamma: float | None = None) -> list[dict]:
    """Self-refine one checkpoint under each rollout sampler variant.

    The evaluation sampler stays fixed across rows so the scores reflect
    only how the refinement bridges were sampled."""
    rows = []
    for name, overrides in SAMPLER_VARIANTS.items():
        ws, opt, step0 = load_run(ckpt_path)
        sampler = replace(ws.cfg.train.ssr_sampler, **overrides)
        train_overrides = {"schedule_kind": "sar", "ssr_sampler": sampler}
        if gamma is not None:
            train_overrides["gamma"] = gamma
        _with_train(ws, **train_overrides)
        sub = os.path.join(out_dir, name)
        _, _, row = run_training(ws, sub, opt=opt, start_step=step0, steps=steps,
                                 scheme=f"sar_{name}")
        rows.append(row)
    _write_rows(os.path.join(out_dir, "ablate_sampling.csv"), rows)
    return rows


def _write_rows(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    fields = tuple(rows[0].keys())
    writer = MetricsWriter(path, fields)
    for row in rows:
        writer.write(row)
