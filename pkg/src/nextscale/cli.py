"""Command line interface.

Subcommands: train, refine, sample, eval, ablate-sf, ablate-sampling,
report. Failures print a single machine-readable line to stderr,
``error: <code>: <message>``, and exit nonzero (2 for bad invocations,
1 for everything else).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import torch

from . import experiments
from .config import ExperimentConfig, load_config
from .errors import NextScaleError, UsageError
from .evaluation import nfe_report
from .imageio import write_image, write_token_grids
from .metrics import MetricsWriter, emit_plot, eval_fields, read_metrics
from .sampling import generate


def _load_experiment_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    train_over = {}
    for key in ("steps", "gamma", "schedule_kind"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            train_over[key] = value
    if train_over:
        cfg = replace(cfg, train=replace(cfg.train, **train_over))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    return cfg.validate()


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_experiment_config(args.config), args)
    # the destination stays out of cfg so saved artifacts are identical
    # no matter where the run lands
    out = args.out or cfg.out_dir
    ws = experiments.prepare_workspace(cfg)
    experiments.run_training(ws, out)
    print(f"trained {cfg.train.steps} steps ({cfg.train.schedule_kind}) -> {out}")
    return 0


def cmd_refine(args) -> int:
    ws, opt, step0 = experiments.load_run(args.from_ckpt)
    overrides = {"schedule_kind": args.schedule_kind or "sar"}
    if args.gamma is not None:
        overrides["gamma"] = args.gamma
    experiments._with_train(ws, **overrides)
    out = args.out or ws.cfg.out_dir + "-refined"
    steps = args.steps if args.steps is not None else 400
    experiments.run_training(ws, out, opt=opt, start_step=step0, steps=steps)
    print(f"refined {steps} steps ({overrides['schedule_kind']}) from step {step0} -> {out}")
    return 0


def cmd_sample(args) -> int:
    ws, _, _ = experiments.load_run(args.from_ckpt)
    os.makedirs(args.out, exist_ok=True)
    classes = ws.cfg.dataset.classes
    if args.label is not None and not 0 <= args.label < classes:
        raise UsageError(f"label must lie in 0..{classes - 1}")
    if args.label is None:
        labels = torch.arange(args.n, dtype=torch.long) % classes
    else:
        labels = torch.full((args.n,), args.label, dtype=torch.long)
    result = generate(
        ws.model, labels, ws.cfg.eval_sampler, ws.codebook, ws.embed, seed=args.seed,
    )
    for i in range(args.n):
        stem = os.path.join(args.out, f"sample_{i:03d}_class{int(labels[i])}")
        write_image(stem + (".ppm" if ws.cfg.dataset.channels == 3 else ".pgm"), result.images[i])
        if result.tokens is not None:
            single = type(result.tokens)(
                schedule=result.tokens.schedule,
                grids=[g[i] for g in result.tokens.grids],
                vocab=result.tokens.vocab,
            )
            write_token_grids(stem + ".tokens.txt", single)
    from .figures import fig_sample_grid

    fig_sample_grid(result.images, os.path.join(args.out, "samples.png"))
    print(f"wrote {args.n} samples to {args.out} (nfe {result.nfe})")
    return 0


def cmd_eval(args) -> int:
    ws, _, step = experiments.load_run(args.from_ckpt)
    row = experiments.evaluate_model(ws, step, scheme=args.scheme, samples=args.samples)
    os.makedirs(args.out, exist_ok=True)
    writer = MetricsWriter(os.path.join(args.out, "eval.csv"), eval_fields(ws.schedule.num_scales))
    writer.write(row)
    for key in ("fd", "precision", "recall", "nfe"):
        print(f"{key} = {row[key]}")
    return 0


def cmd_ablate_sf(args) -> int:
    rows = experiments.ablate_sf(args.from_ckpt, args.out, steps=args.steps)
    for row in rows:
        print(f"{row['scheme']}: fd = {row['fd']:.4f}")
    return 0


def cmd_ablate_sampling(args) -> int:
    rows = experiments.ablate_sampling(args.from_ckpt, args.out, steps=args.steps, gamma=args.gamma)
    for row in rows:
        print(f"{row['scheme']}: fd = {row['fd']:.4f}")
    return 0


def cmd_report(args) -> int:
    from .figures import fig_metric_bars, fig_training_curves

    run_dirs = list(args.runs) + list(args.dirs)
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    os.makedirs(args.out, exist_ok=True)
    all_metrics: list[dict] = []
    all_evals: list[dict] = []
    for run_dir in run_dirs:
        mpath = os.path.join(run_dir, "metrics.csv")
        epath = os.path.join(run_dir, "eval.csv")
        if not os.path.exists(mpath):
            raise UsageError(f"no metrics.csv under {run_dir}")
        all_metrics.extend(read_metrics(mpath))
        if os.path.exists(epath):
            all_evals.extend(read_metrics(epath))

    # byte-stable SVG curves
    series: dict[str, list[tuple[float, float]]] = {}
    for row in all_metrics:
        series.setdefault(row["scheme"], []).append((float(row["step"]), float(row["loss"])))
    for pts in series.values():
        pts.sort()
    emit_plot(os.path.join(args.out, "loss_curves.svg"), series,
              title="training loss", x_label="step", y_label="loss")

    # png figures
    fig_training_curves(all_metrics, os.path.join(args.out, "loss_curves.png"))
    if all_evals:
        finals: dict[str, dict] = {}
        for row in all_evals:
            key = row["scheme"]
            if key not in finals or float(row["step"]) >= float(finals[key]["step"]):
                finals[key] = row
        final_rows = [finals[k] for k in sorted(finals)]
        fields = tuple(final_rows[0].keys())
        summary = MetricsWriter(os.path.join(args.out, "summary.csv"), fields)
        for row in final_rows:
            summary.write(row)
        fig_metric_bars(final_rows, "fd", os.path.join(args.out, "fd_by_scheme.png"),
                        title="distribution distance by scheme")

    # forward-count accounting
    nfe_rows = nfe_report(all_metrics)
    if nfe_rows:
        writer = MetricsWriter(os.path.join(args.out, "nfe.csv"), tuple(nfe_rows[0].keys()))
        for row in nfe_rows:
            writer.write(row)
    print(f"report written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nextscale",
        description="Desk-scale lab for scale-wise autoregressive image generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--schedule-kind", dest="schedule_kind",
                   help="override train.schedule_kind (tf, sf_full, sar, ...)")
    p.add_argument("--gamma", type=float, help="override the consistency weight")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="continue a checkpoint with self-refinement")
    p.add_argument("--from", dest="from_ckpt", required=True, help="checkpoint path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int, help="refinement steps (default 400)")
    p.add_argument("--gamma", type=float, help="consistency weight")
    p.add_argument("--schedule-kind", dest="schedule_kind",
                   help="training scheme for the continuation (default sar)")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--from", "--ckpt", dest="from_ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--label", type=int, help="fixed class label (default: cycle classes)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint against its dataset")
    p.add_argument("--from", "--ckpt", dest="from_ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, help="evaluation panel size")
    p.add_argument("--scheme", default="eval", help="scheme tag for the CSV row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-sf", help="compare conditioning schedules from one checkpoint")
    p.add_argument("--from", "--ckpt", dest="from_ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="continuation steps per schedule")
    p.set_defaults(func=cmd_ablate_sf)

    p = sub.add_parser("ablate-sampling", help="compare rollout samplers for refinement")
    p.add_argument("--from", "--ckpt", dest="from_ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_ablate_sampling)

    p = sub.add_parser("report", help="aggregate run directories into tables and figures")
    p.add_argument("runs", nargs="*", help="run directories to aggregate")
    p.add_argument("--dir", dest="dirs", action="append", default=[],
                   help="run directory to aggregate (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NextScaleError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
