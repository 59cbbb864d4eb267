"""Flat config codec: emit/parse round trips, seed and class cascades,
and rejection of malformed input."""

import pytest

from nextscale.config import ExperimentConfig, emit_config, flatten_config, load_config, parse_config
from nextscale.data import SyntheticDatasetSpec
from nextscale.errors import ConfigurationError
from nextscale.generator import GeneratorConfig
from nextscale.sampling import SamplerConfig
from nextscale.training import TrainConfig


def _tiny_text(extra=""):
    return (
        "schedule = 1,2,4\n"
        "dataset.side = 8\n"
        "dataset.classes = 2\n"
        "dataset.size = 64\n"
        "codebook_images = 24\n"
        "feature_width = 8\n"
        "eval_samples = 16\n"
        "knn_k = 2\n"
        "model.depth = 2\n"
        "model.width = 32\n"
        "model.heads = 2\n"
        "model.vocab = 16\n"
        "model.latent_dim = 4\n"
        "train.steps = 2\n"
        "train.batch_size = 4\n" + extra
    )


def test_emit_parse_round_trip_default():
    cfg = ExperimentConfig()
    assert parse_config(emit_config(cfg)) == cfg


def test_emit_parse_round_trip_customized():
    cfg = ExperimentConfig(
        seed=9,
        schedule=(1, 3, 6),
        supervision="latent",
        out_dir="runs/x",
        dataset=SyntheticDatasetSpec(family="rings", side=12, classes=3, size=128, seed=9),
        model=GeneratorConfig(depth=2, width=32, heads=2, vocab=0, latent_dim=4, classes=3),
        train=TrainConfig(schedule_kind="sar", gamma=0.25, seed=9,
                          ssr_sampler=SamplerConfig(kind="argmax")),
        eval_sampler=SamplerConfig(cfg=True, cfg_scale=1.5, top_k=7),
        codebook_images=16,
        feature_width=8,
        eval_samples=32,
        knn_k=2,
    )
    cfg.validate()
    again = parse_config(emit_config(cfg))
    assert again == cfg
    assert emit_config(again) == emit_config(cfg)


def test_parse_tiny_text_and_flat_keys():
    cfg = parse_config(_tiny_text())
    assert cfg.schedule == (1, 2, 4)
    assert cfg.dataset.side == 8 and cfg.dataset.classes == 2
    assert cfg.model.vocab == 16
    flat = flatten_config(cfg)
    assert flat["schedule"] == "1,2,4"
    assert flat["train.steps"] == "2"
    assert list(flat) == sorted(flat)


def test_root_seed_cascades():
    cfg = parse_config(_tiny_text("seed = 7\n"))
    assert cfg.seed == 7 and cfg.dataset.seed == 7 and cfg.train.seed == 7


def test_explicit_seed_wins_over_cascade():
    cfg = parse_config(_tiny_text("seed = 7\ndataset.seed = 3\n"))
    assert cfg.dataset.seed == 3 and cfg.train.seed == 7


def test_model_classes_follow_dataset():
    cfg = parse_config(_tiny_text("dataset.classes = 2\n".replace("dataset.classes = 2\n", "")))
    assert cfg.model.classes == cfg.dataset.classes == 2
    explicit = parse_config(_tiny_text("model.classes = 2\n"))
    assert explicit.model.classes == 2


def test_partial_subtree_keeps_factory_defaults():
    # touching one sampler knob must not reset the others
    cfg = parse_config(_tiny_text("eval_sampler.top_k = 5\n"))
    assert cfg.eval_sampler.top_k == 5
    assert cfg.eval_sampler.cfg is True  # default eval sampler uses guidance
    untouched = parse_config(_tiny_text())
    assert untouched.eval_sampler == ExperimentConfig().eval_sampler


def test_partial_dataset_subtree_with_new_class_count():
    # the default experiment customizes per-class parameters; a file that
    # only changes the class count cannot inherit them, so the untouched
    # fields fall back to the family defaults for that count
    cfg = parse_config("dataset.classes = 2")
    assert cfg.model.classes == 2
    assert len(cfg.dataset.class_params) == 2


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("# leading comment\n\n" + _tiny_text("# trailing\n"))
    assert cfg.schedule == (1, 2, 4)


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="unknown config key"):
        parse_config(_tiny_text("model.hidden = 3\n"))


def test_duplicate_key_rejected():
    with pytest.raises(ConfigurationError, match="duplicate key"):
        parse_config(_tiny_text("seed = 1\nseed = 2\n"))


def test_missing_equals_rejected():
    with pytest.raises(ConfigurationError, match="key = value"):
        parse_config("seed 3\n")


def test_bad_int_rejected():
    with pytest.raises(ConfigurationError):
        parse_config(_tiny_text("train.steps = many\n").replace("train.steps = 2\n", ""))


def test_bool_spellings():
    assert parse_config(_tiny_text("eval_sampler.cfg = yes\n")).eval_sampler.cfg is True
    assert parse_config(_tiny_text("eval_sampler.cfg = 0\n")).eval_sampler.cfg is False
    with pytest.raises(ConfigurationError, match="boolean"):
        parse_config(_tiny_text("eval_sampler.cfg = maybe\n"))


def test_validation_failures_surface():
    with pytest.raises(ConfigurationError, match="two scales"):
        parse_config(_tiny_text().replace("schedule = 1,2,4", "schedule = 4"))
    with pytest.raises(ConfigurationError):
        # image side not divisible by the finest latent side
        parse_config(_tiny_text().replace("dataset.side = 8", "dataset.side = 10"))
    with pytest.raises(ConfigurationError, match="knn_k"):
        parse_config(_tiny_text("knn_k = 16\n").replace("knn_k = 2\n", ""))


def test_class_params_nested_tuple_round_trip():
    cfg = parse_config(_tiny_text(
        "dataset.class_params = 0.1,0.3,0.1,0.3,0.1;0.6,0.8,0.6,0.8,0.12\n"
    ))
    assert cfg.dataset.class_params == ((0.1, 0.3, 0.1, 0.3, 0.1), (0.6, 0.8, 0.6, 0.8, 0.12))
    assert parse_config(emit_config(cfg)) == cfg


def test_load_config_from_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(_tiny_text())
    cfg = load_config(str(path))
    assert cfg == parse_config(_tiny_text())
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(str(tmp_path / "absent.cfg"))
