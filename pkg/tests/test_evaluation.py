"""Frechet proxy against closed forms and an independent square-root
iteration, k-NN precision/recall edge cases, and per-scale scoring."""

import numpy as np
import pytest
import torch

from conftest import random_latent_pyramid

from nextscale.errors import ConfigurationError
from nextscale.evaluation import (
    FeatureStats,
    _knn_radii,
    compute_stats,
    diff_maps,
    fd_proxy,
    make_feature_map,
    nfe_report,
    per_scale_fd,
    pr_proxy,
    reconstruct_references,
    scale_to_pixels,
    sqrt_psd,
)
from nextscale.pyramid import (
    Codebook,
    LatentPyramid,
    ScaleSchedule,
    build_pyramid,
    decode_latent,
    make_patch_embed,
)
from nextscale.rng import numpy_stream, torch_stream
from nextscale.training import RolloutTrace


# ---------------------------------------------------------------------------
# matrix square root


def denman_beavers_sqrt(a: np.ndarray, iters: int = 40) -> np.ndarray:
    """Independent square-root oracle: the coupled Newton iteration
    Y <- (Y + inv(Z))/2, Z <- (Z + inv(Y))/2 with Y0 = A, Z0 = I."""
    y = a.astype(np.float64).copy()
    z = np.eye(a.shape[0])
    for _ in range(iters):
        y_next = (y + np.linalg.inv(z)) / 2.0
        z = (z + np.linalg.inv(y)) / 2.0
        y = y_next
    return y


def _spd(n: int, seed: int = 0) -> np.ndarray:
    rng = numpy_stream(seed, "test/spd")
    b = rng.normal(size=(n, n))
    return b @ b.T + np.eye(n)


def test_sqrt_psd_matches_newton_iteration():
    for seed in range(3):
        a = _spd(5, seed=seed)
        root = sqrt_psd(a)
        oracle = denman_beavers_sqrt(a)
        assert np.abs(root - oracle).max() < 1e-6
        assert np.abs(root @ root - a).max() < 1e-8


def test_sqrt_psd_clamps_negative_eigenvalues():
    a = np.array([[1.0, 0.0], [0.0, -4.0]])
    root = sqrt_psd(a)
    assert np.allclose(root, np.diag([1.0, 0.0]))


def test_sqrt_psd_diagonal_exact():
    assert np.array_equal(sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


# ---------------------------------------------------------------------------
# Frechet proxy


def _stats(mean, cov, definition="unit-test"):
    return FeatureStats(
        mean=np.asarray(mean, dtype=np.float64),
        cov=np.atleast_2d(np.asarray(cov, dtype=np.float64)),
        count=10,
        definition=definition,
    )


def test_fd_proxy_one_dimensional_closed_form():
    # N(0, 1) vs N(1, 4): (0-1)^2 + (1 + 4 - 2 sqrt(4)) = 2, exactly
    assert fd_proxy(_stats([0.0], [[1.0]]), _stats([1.0], [[4.0]])) == 2.0


def test_fd_proxy_self_distance_is_zero():
    rng = numpy_stream(3, "test/fd")
    feats = rng.normal(size=(50, 6))
    a = compute_stats(feats, "unit-test")
    b = compute_stats(feats.copy(), "unit-test")
    assert abs(fd_proxy(a, b)) < 1e-8


def test_fd_proxy_mean_shift_only():
    cov = _spd(4, seed=7)
    a = _stats(np.zeros(4), cov)
    b = _stats(np.full(4, 0.5), cov)
    assert abs(fd_proxy(a, b) - 4 * 0.25) < 1e-9


def test_fd_proxy_symmetry_and_positivity():
    rng = numpy_stream(4, "test/fd2")
    a = compute_stats(rng.normal(size=(40, 5)), "unit-test")
    b = compute_stats(rng.normal(loc=0.3, size=(40, 5)), "unit-test")
    ab, ba = fd_proxy(a, b), fd_proxy(b, a)
    assert abs(ab - ba) < 1e-9
    assert ab > 0


def test_fd_proxy_definition_mismatch():
    a = _stats([0.0], [[1.0]], definition="proj4/8x8x1/seed0")
    b = _stats([0.0], [[1.0]], definition="proj4/8x8x1/seed1")
    with pytest.raises(ConfigurationError):
        fd_proxy(a, b)


def test_fd_proxy_dimension_mismatch():
    a = _stats([0.0], [[1.0]])
    b = _stats([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ConfigurationError):
        fd_proxy(a, b)


def test_compute_stats_sample_floor():
    rng = numpy_stream(5, "test/fd3")
    with pytest.raises(ConfigurationError):
        compute_stats(rng.normal(size=(6, 6)), "unit-test")
    stats = compute_stats(rng.normal(size=(7, 6)), "unit-test")
    assert stats.count == 7 and stats.cov.shape == (6, 6)


def test_feature_stats_shape_guard():
    with pytest.raises(ConfigurationError):
        FeatureStats(mean=np.zeros(3), cov=np.zeros((2, 2)), count=5, definition="x")


# ---------------------------------------------------------------------------
# feature map


def test_feature_map_definition_and_shapes():
    fm = make_feature_map((8, 8, 1), seed=3, proj_width=4)
    assert fm.definition == "proj4/8x8x1/seed3"
    assert fm.out_dim == 5
    x = torch.zeros(10, 8, 8, 1)
    out = fm(x)
    assert out.shape == (10, 5)
    assert np.array_equal(out, np.zeros((10, 5)))


def test_feature_map_channel_means_block():
    fm = make_feature_map((4, 4, 2), seed=0, proj_width=3)
    x = np.zeros((2, 4, 4, 2))
    x[0, ..., 0] = 1.0
    x[1, ..., 1] = 0.25
    out = fm(x)
    assert np.allclose(out[:, 3:], [[1.0, 0.0], [0.0, 0.25]])


def test_feature_map_rejects_wrong_shape():
    fm = make_feature_map((8, 8, 1), seed=0, proj_width=4)
    with pytest.raises(ConfigurationError):
        fm(torch.zeros(2, 4, 4, 1))


def test_feature_map_deterministic():
    a = make_feature_map((8, 8, 1), seed=1, proj_width=4)
    b = make_feature_map((8, 8, 1), seed=1, proj_width=4)
    assert np.array_equal(a.proj, b.proj)
    c = make_feature_map((8, 8, 1), seed=2, proj_width=4)
    assert not np.array_equal(a.proj, c.proj)


# ---------------------------------------------------------------------------
# precision / recall


def test_pr_identical_sets():
    rng = numpy_stream(6, "test/pr")
    pts = rng.normal(size=(12, 3))
    assert pr_proxy(pts, pts.copy(), k=2) == (1.0, 1.0)


def test_pr_disjoint_clusters():
    rng = numpy_stream(7, "test/pr2")
    real = rng.normal(size=(10, 2))
    gen = rng.normal(size=(10, 2)) + 100.0
    assert pr_proxy(real, gen, k=1) == (0.0, 0.0)


def test_pr_zero_radius_covers_exact_duplicates_only():
    real = np.zeros((4, 2))  # all duplicates: every k-NN radius is zero
    on_point = np.zeros((3, 2))
    precision, _ = pr_proxy(real, on_point, k=1)
    assert precision == 1.0
    off_point = np.full((3, 2), 1e-9)
    precision, _ = pr_proxy(real, off_point, k=1)
    assert precision == 0.0


def test_knn_radii_hand_case():
    pts = np.array([[0.0], [1.0], [3.0]])
    assert np.allclose(_knn_radii(pts, 1), [1.0, 1.0, 2.0])
    assert np.allclose(_knn_radii(pts, 2), [3.0, 2.0, 3.0])
    with pytest.raises(ConfigurationError):
        _knn_radii(pts, 3)


def test_pr_k_bound_error():
    pts = np.zeros((4, 2))
    with pytest.raises(ConfigurationError):
        pr_proxy(pts, pts, k=4)


# ---------------------------------------------------------------------------
# per-scale scoring


def _px_setup(seed=0):
    schedule = ScaleSchedule(sides=(1, 2, 4))
    embed = make_patch_embed(8, 1, 4, 4, seed=seed)
    fm = make_feature_map((8, 8, 1), seed=seed, proj_width=4)
    gen_lat = random_latent_pyramid((1, 2, 4), 4, batch=12, seed=seed)
    ref_lat = random_latent_pyramid((1, 2, 4), 4, batch=12, seed=seed + 1)
    return schedule, embed, fm, gen_lat, ref_lat


def test_per_scale_fd_finest_equals_whole_image():
    _, embed, fm, gen_lat, ref_lat = _px_setup()
    scored = per_scale_fd(gen_lat, ref_lat, 3, embed, fm)
    gen_px = decode_latent(embed, gen_lat.map(3))
    ref_px = decode_latent(embed, ref_lat.map(3))
    whole = fd_proxy(
        compute_stats(fm(ref_px), fm.definition),
        compute_stats(fm(gen_px), fm.definition),
    )
    assert scored == whole


def test_per_scale_fd_zero_on_matching_pyramids():
    _, embed, fm, gen_lat, _ = _px_setup(seed=2)
    for i in (1, 2, 3):
        assert abs(per_scale_fd(gen_lat, gen_lat, i, embed, fm)) < 1e-8


def test_scale_to_pixels_shape():
    _, embed, _, gen_lat, _ = _px_setup(seed=3)
    px = scale_to_pixels(gen_lat.map(1), 4, embed)
    assert px.shape == (12, 8, 8, 1)


def test_reconstruct_references_round_trip():
    schedule = ScaleSchedule(sides=(1, 2, 4))
    embed = make_patch_embed(8, 1, 4, 4, seed=4)
    images = torch.rand(6, 8, 8, 1, generator=torch_stream(4, "test/imgs"))
    raw = reconstruct_references(images, schedule, "image", embed, None)
    direct = build_pyramid(images, schedule, supervision="image", embed=embed)
    for a, b in zip(raw.maps, direct.maps):
        assert torch.equal(a, b)
    cb = Codebook(vectors=torch.randn(16, 4, generator=torch_stream(4, "test/cb")))
    quantized = reconstruct_references(images, schedule, "image", embed, cb)
    for m in quantized.maps:
        flat = m.reshape(-1, 4)
        dists = torch.cdist(flat, cb.vectors)
        assert (dists.min(-1).values < 1e-5).all()  # every cell is a codebook row


# ---------------------------------------------------------------------------
# diff maps and forward-count report


def _fake_trace(sf_preds):
    return RolloutTrace(
        tf_preds=[], sampled=[], sf_inputs=[], sf_preds=sf_preds,
        tf_loss=torch.tensor(0.0), tf_per_scale=[], nfe=2,
    )


def test_diff_maps_continuous_zero_and_scaled():
    targets = random_latent_pyramid((1, 2, 4), 4, batch=3, seed=5)
    trace = _fake_trace([targets.map(2).clone(), targets.map(3) + 0.5])
    maps = diff_maps(trace, targets, None)
    assert len(maps) == 2
    assert maps[0].shape == (3, 2, 2) and maps[1].shape == (3, 4, 4)
    assert torch.equal(maps[0], torch.zeros(3, 2, 2))
    assert torch.allclose(maps[1], torch.full((3, 4, 4), 0.5))


def test_diff_maps_discrete_argmax_decode():
    targets = random_latent_pyramid((1, 2), 4, batch=2, seed=6)
    cb = Codebook(vectors=torch.randn(8, 4, generator=torch_stream(6, "test/cb")))
    from nextscale.pyramid import dequantize_grid, quantize_map

    grid = quantize_map(targets.map(2), cb)
    logits = torch.nn.functional.one_hot(grid, 8).float() * 10.0
    exact = LatentPyramid(
        schedule=targets.schedule,
        maps=[targets.map(1), dequantize_grid(grid, cb)],
    )
    maps = diff_maps(_fake_trace([logits]), exact, cb)
    assert torch.allclose(maps[0], torch.zeros(2, 2, 2), atol=1e-6)
    with pytest.raises(ConfigurationError):
        diff_maps(_fake_trace([logits]), exact, None)


def test_nfe_report_aggregates_per_scheme():
    rows = [
        {"scheme": "tf", "nfe": "1"},
        {"scheme": "tf", "nfe": "1"},
        {"scheme": "sf_alternate", "nfe": "3"},
        {"scheme": "sf_alternate", "nfe": "1"},
        {"scheme": "sar", "nfe": "2"},
    ]
    report = nfe_report(rows)
    assert [r["scheme"] for r in report] == ["sar", "sf_alternate", "tf"]
    alt = report[1]
    assert alt["nfe_min"] == 1 and alt["nfe_max"] == 3
    assert alt["nfe_mean"] == 2.0 and alt["nfe_total"] == 4 and alt["steps"] == 2
    tf = report[2]
    assert tf["nfe_min"] == tf["nfe_max"] == 1 and tf["nfe_total"] == 2
