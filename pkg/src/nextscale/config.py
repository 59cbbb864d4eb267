"""Experiment configuration and its flat text representation.

Config files are plain ``key = value`` lines. Keys are dotted paths into
the config dataclass tree (``train.gamma = 0.5``), ``#`` starts a
comment, blank lines are ignored. Unknown keys are configuration errors;
missing keys keep their defaults. ``emit_config`` writes the fully
resolved config back in sorted key order, and parsing that output
reproduces the config exactly.

Seeds cascade: ``dataset.seed`` and ``train.seed`` follow the top-level
``seed`` unless a file sets them explicitly, and ``model.classes``
follows ``dataset.classes`` the same way.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

from .data import SyntheticDatasetSpec
from .errors import ConfigurationError
from .generator import GeneratorConfig
from .pyramid import ScaleSchedule
from .sampling import SamplerConfig
from .training import TrainConfig


def _default_dataset() -> SyntheticDatasetSpec:
    """Blobs whose class fixes the size while the position is a per-item
    latent: the coarse scales then carry item-specific content the finer
    scales must stay consistent with, which is the regime the
    conditioning-schedule comparisons are about. The narrow per-class
    position boxes of the family defaults make the coarse scales nearly
    label-redundant and wash those comparisons out; a box much wider than
    0.3 makes every teacher target so item-specific that teacher-anchored
    consistency training degrades alongside the naive schedules."""
    return SyntheticDatasetSpec(
        class_params=tuple((0.35, 0.65, 0.35, 0.65, s) for s in (0.06, 0.10, 0.15, 0.22)),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    schedule: tuple[int, ...] = (1, 2, 3, 4)
    supervision: str = "image"            # image | latent pyramid targets
    codebook_images: int = 256            # images whose pyramids seed the codebook fit
    feature_width: int = 32
    eval_every: int = 500
    eval_samples: int = 128
    knn_k: int = 3
    dataset: SyntheticDatasetSpec = field(default_factory=_default_dataset)
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(cfg=True))

    def scale_schedule(self) -> ScaleSchedule:
        return ScaleSchedule(sides=self.schedule)

    def validate(self) -> "ExperimentConfig":
        if len(self.schedule) < 2:
            raise ConfigurationError("experiments need at least two scales")
        ScaleSchedule(sides=self.schedule)
        if self.supervision not in ("image", "latent"):
            raise ConfigurationError(f"unknown supervision mode {self.supervision!r}")
        if self.dataset.side % self.schedule[-1] != 0:
            raise ConfigurationError(
                f"image side {self.dataset.side} not divisible by finest scale {self.schedule[-1]}"
            )
        if self.model.classes != self.dataset.classes:
            raise ConfigurationError(
                f"model classes {self.model.classes} != dataset classes {self.dataset.classes}"
            )
        if self.codebook_images < 1 or self.codebook_images > self.dataset.size:
            raise ConfigurationError("codebook_images must lie in 1..dataset.size")
        if self.eval_samples < self.feature_width + self.dataset.channels + 1:
            raise ConfigurationError(
                "eval_samples must exceed the feature dimension for covariance estimation"
            )
        if self.knn_k < 1 or self.knn_k >= self.eval_samples:
            raise ConfigurationError("knn_k must lie in 1..eval_samples-1")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        return self


# ---------------------------------------------------------------------------
# flat codec


def _parse_scalar(text: str, ftype) -> object:
    text = text.strip()
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"expected a boolean, got {text!r}")
    if ftype is str:
        return text
    raise ConfigurationError(f"unsupported config field type {ftype}")


def _parse_value(text: str, ftype) -> object:
    origin = getattr(ftype, "__origin__", None)
    if origin is tuple:
        args = ftype.__args__
        if args and args[0] is int:
            if not text.strip():
                return ()
            return tuple(int(v) for v in text.split(","))
        # nested float tuples use ';' between groups and ',' within
        if not text.strip():
            return ()
        return tuple(tuple(float(v) for v in group.split(",")) for group in text.split(";"))
    return _parse_scalar(text, ftype)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(repr(float(v)) for v in group) for group in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types(cls) -> dict[str, object]:
    # resolve string annotations from `from __future__ import annotations`
    import typing

    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def flatten_config(cfg) -> dict[str, str]:
    """Dataclass tree to sorted flat key/value strings."""
    out: dict[str, str] = {}

    def walk(obj, prefix: str):
        for f in fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                walk(value, key + ".")
            else:
                out[key] = _format_value(value)

    walk(cfg, "")
    return dict(sorted(out.items()))


def emit_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {v}" for k, v in flatten_config(cfg).items()]
    return "\n".join(lines) + "\n"


def _build(cls, values: dict[str, str], prefix: str, assigned: set[str]):
    kwargs = {}
    types = _field_types(cls)
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        ftype = types[f.name]
        if dataclasses.is_dataclass(ftype):
            # leave the parent's default factory in charge unless the file
            # actually touches this subtree
            if any(k.startswith(key + ".") for k in values):
                sub, _ = _build(ftype, values, key + ".", assigned)
                kwargs[f.name] = _carry_factory_defaults(f, ftype, sub, key, values, assigned)
        elif key in values:
            kwargs[f.name] = _parse_value(values[key], ftype)
            assigned.add(key)
    try:
        return cls(**kwargs), assigned
    except TypeError as exc:
        raise ConfigurationError(f"bad config for {cls.__name__}: {exc}") from exc


def _carry_factory_defaults(f, ftype, sub, key, values, assigned):
    """Keep the parent factory's customizations on partially set subtrees.

    A file that sets only some keys of a nested section must not reset
    the rest to the nested class defaults when the parent declares
    different ones (the default evaluation sampler enables guidance, for
    example). Fields the file assigned always win.
    """
    if f.default_factory is dataclasses.MISSING:
        return sub
    try:
        base, fresh = f.default_factory(), ftype()
    except TypeError:
        return sub
    carries = {}
    for sf in fields(ftype):
        sub_key = f"{key}.{sf.name}"
        touched = sub_key in assigned or any(k.startswith(sub_key + ".") for k in values)
        if not touched and getattr(base, sf.name) != getattr(fresh, sf.name):
            carries[sf.name] = getattr(base, sf.name)
    if not carries:
        return sub
    try:
        return dataclasses.replace(sub, **carries)
    except ConfigurationError:
        # the assigned keys contradict a carried customization (say a new
        # class count against carried per-class parameters): fall back to
        # the nested class defaults for the untouched fields
        return sub


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat key=value text into a validated ExperimentConfig."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()

    known = _known_keys()
    for key in values:
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")

    assigned: set[str] = set()
    try:
        cfg, assigned = _build(ExperimentConfig, values, "", assigned)
    except (ValueError, ConfigurationError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc

    # seed and class cascades for keys the file left unset
    if "dataset.seed" not in assigned:
        cfg = replace(cfg, dataset=replace(cfg.dataset, seed=cfg.seed))
    if "train.seed" not in assigned:
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    if "model.classes" not in assigned and "dataset.classes" in assigned:
        cfg = replace(cfg, model=replace(cfg.model, classes=cfg.dataset.classes))
    return cfg.validate()


def _known_keys() -> set[str]:
    keys: set[str] = set()

    def walk(cls, prefix: str):
        types = _field_types(cls)
        for f in fields(cls):
            ftype = types[f.name]
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(ftype):
                walk(ftype, key + ".")
            else:
                keys.add(key)

    walk(ExperimentConfig, "")
    return keys


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
