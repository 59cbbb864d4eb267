"""Sampling: top-k/top-p filtering against a brute-force oracle,
guidance identities, and sequential generation."""

import math

import pytest
import torch

from conftest import tiny_model

from nextscale.errors import ConfigurationError, UnsupportedError
from nextscale.pyramid import Codebook, make_patch_embed
from nextscale.rng import torch_stream
from nextscale.sampling import (
    SamplerConfig,
    argmax_variant,
    cfg_combine,
    filter_top_k_top_p,
    generate,
    sample_map,
)


def oracle_filter(logits: list[float], top_k: int, top_p: float) -> list[bool]:
    """Keep/drop decision per token, written as a plain walk.

    Sort by logit descending (index ascending on ties), keep the first
    min(k, V), renormalize, then walk the survivors accumulating
    probability; the first survivor is always kept, and the walk stops
    admitting once the mass accumulated before a token reaches top_p.
    """
    v = len(logits)
    order = sorted(range(v), key=lambda i: (-logits[i], i))
    k = min(top_k, v)
    topk = order[:k]
    mx = max(logits[i] for i in topk)
    weights = [math.exp(logits[i] - mx) for i in topk]
    z = sum(weights)
    keep = [False] * v
    cum = 0.0
    for pos, i in enumerate(topk):
        if pos == 0 or cum < top_p:
            keep[i] = True
        cum += weights[pos] / z
    return keep


def test_filter_matches_oracle_enumeration():
    gen = torch_stream(0, "test/filter")
    cases = 0
    for trial in range(300):
        v = int(torch.randint(2, 9, (1,), generator=gen))
        logits = torch.randn(v, generator=gen, dtype=torch.float64) * 3
        if trial % 3 == 0:
            logits[0] = logits[-1]  # force occasional exact ties
        top_k = int(torch.randint(1, v + 2, (1,), generator=gen))
        top_p = float(torch.rand(1, generator=gen).clamp(0.05, 1.0))
        got = filter_top_k_top_p(logits, top_k, top_p)
        keep = oracle_filter(logits.tolist(), top_k, top_p)
        for i in range(v):
            if keep[i]:
                assert got[i] == logits[i], (trial, i)
            else:
                assert got[i] == float("-inf"), (trial, i)
        cases += 1
    assert cases == 300


def test_filter_no_op_when_unconstrained():
    gen = torch_stream(1, "test/filter")
    logits = torch.randn(4, 7, generator=gen)
    out = filter_top_k_top_p(logits, top_k=7, top_p=1.0)
    assert torch.equal(out, logits)
    out = filter_top_k_top_p(logits, top_k=99, top_p=1.0)  # k beyond V clips
    assert torch.equal(out, logits)


def test_filter_always_keeps_best():
    logits = torch.tensor([0.0, 5.0, 1.0])
    out = filter_top_k_top_p(logits, top_k=1, top_p=0.01)
    assert out[1] == 5.0 and out[0] == float("-inf") and out[2] == float("-inf")


def test_filter_tie_break_prefers_low_index():
    logits = torch.tensor([2.0, 2.0, 2.0, 0.0])
    out = filter_top_k_top_p(logits, top_k=2, top_p=1.0)
    assert out.tolist()[:2] == [2.0, 2.0] and out[2] == float("-inf")


def test_cfg_identities():
    gen = torch_stream(2, "test/cfg")
    cond = torch.randn(3, 5, generator=gen)
    uncond = torch.randn(3, 5, generator=gen)
    assert torch.equal(cfg_combine(cond, uncond, 0.0), uncond)
    assert torch.equal(cfg_combine(cond, uncond, 1.0), cond)
    got = cfg_combine(cond, uncond, 2.5)
    assert torch.equal(got, uncond + 2.5 * (cond - uncond))
    # returned endpoints are copies, not aliases
    assert cfg_combine(cond, uncond, 1.0).data_ptr() != cond.data_ptr()


def test_sampler_config_validation():
    with pytest.raises(ConfigurationError):
        SamplerConfig(kind="greedy")
    with pytest.raises(ConfigurationError):
        SamplerConfig(top_k=0)
    with pytest.raises(ConfigurationError):
        SamplerConfig(top_p=0.0)
    with pytest.raises(ConfigurationError):
        SamplerConfig(temperature=0.0)
    assert argmax_variant(SamplerConfig(cfg=True)).kind == "argmax"
    assert not argmax_variant(SamplerConfig(cfg=True)).cfg


def test_argmax_tie_break():
    logits = torch.tensor([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    got = sample_map(logits, SamplerConfig(kind="argmax"))
    assert got.tolist() == [0, 1]


def test_stochastic_needs_generator():
    with pytest.raises(ConfigurationError):
        sample_map(torch.zeros(3), SamplerConfig())


def test_multinomial_frequencies_within_3_sigma():
    probs = [0.5, 0.3, 0.2]
    logits = torch.log(torch.tensor(probs)).expand(100_000, 3).contiguous()
    sampler = SamplerConfig(top_k=3, top_p=1.0, temperature=1.0)
    draws = sample_map(logits, sampler, torch_stream(0, "test/freq"))
    n = draws.shape[0]
    counts = torch.bincount(draws, minlength=3).tolist()
    for i, p in enumerate(probs):
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(counts[i] - n * p) <= 3 * sigma, (i, counts[i], n * p, sigma)


def test_temperature_sharpens():
    # at very low temperature the stochastic sampler acts like argmax
    logits = torch.tensor([0.0, 1.0, 0.5]).expand(2000, 3).contiguous()
    sampler = SamplerConfig(temperature=1e-3, top_k=3, top_p=1.0)
    draws = sample_map(logits, sampler, torch_stream(1, "test/temp"))
    assert (draws == 1).all()


# ---------------------------------------------------------------------------
# sequential generation


def _gen_setup(vocab=16, seed=0):
    model = tiny_model(seed=seed, vocab=vocab)
    with torch.no_grad():
        for p in model.head.parameters():
            p.normal_(0, 0.1, generator=torch_stream(seed, "test/head"))
    embed = make_patch_embed(8, 1, 4, 4, seed=seed)
    codebook = None
    if vocab:
        codebook = Codebook(vectors=torch.randn(vocab, 4, generator=torch_stream(seed, "test/cb")))
    return model, embed, codebook


def test_generate_discrete_nfe_and_shapes():
    model, embed, codebook = _gen_setup()
    labels = torch.tensor([0, 1, 0])
    model.reset_nfe()
    result = generate(model, labels, SamplerConfig(), codebook, embed, seed=0)
    assert result.nfe == 3  # one forward per scale
    assert model.nfe == 3
    assert result.images.shape == (3, 8, 8, 1)
    assert result.tokens is not None
    assert [tuple(g.shape) for g in result.tokens.grids] == [(3, 1, 1), (3, 2, 2), (3, 4, 4)]
    assert result.latents.map(3).shape == (3, 4, 4, 4)


def test_generate_cfg_doubles_nfe():
    model, embed, codebook = _gen_setup()
    result = generate(model, torch.tensor([0]), SamplerConfig(cfg=True), codebook, embed, seed=0)
    assert result.nfe == 6  # conditional + unconditional per scale


def test_generate_reproducible_and_seed_sensitive():
    model, embed, codebook = _gen_setup()
    a = generate(model, torch.tensor([0, 1]), SamplerConfig(), codebook, embed, seed=5)
    b = generate(model, torch.tensor([0, 1]), SamplerConfig(), codebook, embed, seed=5)
    c = generate(model, torch.tensor([0, 1]), SamplerConfig(), codebook, embed, seed=6)
    assert all(torch.equal(x, y) for x, y in zip(a.tokens.grids, b.tokens.grids))
    assert any(not torch.equal(x, y) for x, y in zip(a.tokens.grids, c.tokens.grids))


def test_generate_batch_composition_stable():
    # item i draws from stream "sample/<item_offset + i>", so splitting a
    # batch in two reproduces the same tokens
    model, embed, codebook = _gen_setup(seed=2)
    both = generate(model, torch.tensor([0, 1]), SamplerConfig(), codebook, embed, seed=3)
    first = generate(model, torch.tensor([0]), SamplerConfig(), codebook, embed, seed=3)
    second = generate(model, torch.tensor([1]), SamplerConfig(), codebook, embed, seed=3, item_offset=1)
    for i, g in enumerate(both.tokens.grids):
        assert torch.equal(g[0], first.tokens.grids[i][0])
        assert torch.equal(g[1], second.tokens.grids[i][0])


def test_generate_continuous_path():
    model, embed, _ = _gen_setup(vocab=0)
    result = generate(model, torch.tensor([0]), SamplerConfig(kind="argmax"), None, embed, seed=0)
    assert result.tokens is None
    assert result.images.shape == (1, 8, 8, 1)
    with pytest.raises(UnsupportedError):
        generate(model, torch.tensor([0]), SamplerConfig(), Codebook(vectors=torch.randn(4, 4, generator=torch_stream(0, "t"))), embed, seed=0)


def test_generate_discrete_needs_codebook():
    model, embed, _ = _gen_setup()
    with pytest.raises(ConfigurationError):
        generate(model, torch.tensor([0]), SamplerConfig(), None, embed, seed=0)
