import csv
import math

import numpy as np
import pytest

from mvrestore import synth
from mvrestore.diagnostics import (
    distance_variance,
    fit_curves,
    param_variance_scan,
    residual_report,
    subsample,
    timing_linearity,
    write_fit_curves,
    write_param_scan,
    write_residual_report,
    write_timing,
)
from mvrestore.errors import DomainError
from mvrestore.pairing import ObservationSet, build_observations
from mvrestore.restore import run_restoration
from mvrestore.uifm import RestorationState, UifmParams, forward


@pytest.fixture(scope="module")
def truth_fit(two_plane_scene, two_plane_views):
    """Observations of view 0 with the state set to the ground truth (noiseless, quantized)."""
    views = [v.image for v in two_plane_views]
    obs = build_observations(views[0], views)
    pixels = obs.pixels
    J = two_plane_views[0].truth.reshape(-1, 3)[pixels] / 255.0
    return obs, RestorationState(J, pixels, obs.shape, two_plane_scene.params.copy())


def _gaussian_obs(n, sigma, seed=0):
    rng = np.random.default_rng(seed)
    p = UifmParams(beta=(0.5, 0.3, 0.15), B=(0.1, 0.15, 0.25), gamma=(0.6, 0.4, 0.2))
    pix = np.sort(rng.integers(0, 1000, n))
    J = rng.uniform(0.2, 0.8, (1000, 3))
    z = rng.uniform(1, 8, n)
    I = np.stack([forward(J[pix, c], z, p, c) for c in range(3)], axis=1) + rng.normal(0, sigma, (n, 3))
    used = np.unique(pix)
    obs = ObservationSet(0, (10, 100), pix, I, z, np.zeros(n, int))
    return obs, RestorationState(J[used], used, (10, 100), p)


# -- residuals -----------------------------------------------------------------


def test_gaussian_residual_moments():
    obs, state = _gaussian_obs(200_000, 0.02)
    rep = residual_report(obs, state)
    for ch in rep.channels:
        assert ch.n == 200_000
        assert abs(ch.skewness) < 0.1
        assert abs(ch.excess_kurtosis) < 0.2
        assert ch.qq_r2 >= 0.99


def test_qq_line_at_ten_thousand():
    obs, state = _gaussian_obs(10_000, 0.02, seed=1)
    for ch in residual_report(obs, state).channels:
        assert ch.qq_r2 >= 0.99
        assert np.all(np.diff(ch.qq_theoretical) > 0)
        assert np.all(np.diff(ch.qq_sample) >= 0)


def test_noiseless_residuals_within_half_step(truth_fit):
    obs, state = truth_fit
    own = obs.source_id == obs.target_id
    for ch in residual_report(obs, state, scatter_points=10**9).channels:
        # the target's own pixels differ from the model by quantization alone
        assert np.max(np.abs(ch.residual[own])) <= 1 / 510 + 1e-6
        # other views sample the textured albedo at slightly different points
        assert np.sqrt(np.mean(ch.residual**2)) < 0.005


@pytest.mark.parametrize("cap", [1, 500, 10**6])
def test_histogram_counts_sum(truth_fit, cap):
    obs, state = truth_fit
    for ch in residual_report(obs, state, sample_cap=cap).channels:
        assert ch.counts.sum() == min(len(obs), cap) == ch.n


def test_subsample_deterministic():
    a = subsample(1000, 100, seed=3)
    np.testing.assert_array_equal(a, subsample(1000, 100, seed=3))
    assert len(np.unique(a)) == 100 and np.all(np.diff(a) > 0)
    assert not np.array_equal(a, subsample(1000, 100, seed=4))
    np.testing.assert_array_equal(subsample(10, 100), np.arange(10))
    with pytest.raises(DomainError):
        subsample(10, 0)


def test_residual_files(tmp_path, truth_fit):
    obs, state = truth_fit
    write_residual_report(tmp_path, residual_report(obs, state, bins=20, quantiles=50))
    with open(tmp_path / "residual_hist.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 60
    assert sum(int(r["count"]) for r in rows if r["channel"] == "G") == len(obs)
    for name in ("residual_qq.csv", "residual_fitted.csv", "residual_moments.csv"):
        assert (tmp_path / name).is_file()


# -- fit curves ------------------------------------------------------------------


def test_fit_curves_exclude_single_distance():
    p = UifmParams(0.3, 0.1, 0.3)
    obs = ObservationSet(
        0, (1, 3), np.array([0, 0, 1, 2, 2]), np.full((5, 3), 0.5), np.array([1.0, 1.0, 2.0, 1.0, 3.0]),
        np.zeros(5, int),
    )
    state = RestorationState(np.full((3, 3), 0.4), [0, 1, 2], (1, 3), p)
    tracks = fit_curves(obs, state, n_tracks=5)
    assert [t.pixel for t in tracks] == [2]


def test_fit_curves_on_noiseless_data(truth_fit):
    obs, state = truth_fit
    tracks = fit_curves(obs, state, n_tracks=10)
    assert len(tracks) == 10
    spans = [np.ptp(t.z) for t in tracks]
    assert spans == sorted(spans, reverse=True)
    for t in tracks:
        np.testing.assert_array_equal(t.model[0], t.J)  # z = 0 gives J exactly
        assert t.model_z[0] == 0.0
        on_curve = np.stack([forward(t.J[c], t.z, state.params, c) for c in range(3)], axis=1)
        assert np.max(np.abs(on_curve - t.intensity)) <= 1 / 510 + 1e-6


def test_fit_curves_file(tmp_path, truth_fit):
    obs, state = truth_fit
    tracks = fit_curves(obs, state, n_tracks=2, samples=7)
    write_fit_curves(tmp_path / "c.csv", tracks)
    with open(tmp_path / "c.csv") as f:
        rows = list(csv.DictReader(f))
    assert sum(r["kind"] == "model" for r in rows) == 14


# -- timing ----------------------------------------------------------------------


def test_timing_perfect_line():
    log = [(n, 0.002 * n + 0.5) for n in (1000, 2000, 5000, 9000, 20000)]
    slope, intercept, r2 = timing_linearity(log)
    assert r2 == pytest.approx(1.0, abs=1e-12)
    assert slope == pytest.approx(0.002) and intercept == pytest.approx(0.5)


def test_timing_constant_time():
    with pytest.warns(UserWarning):
        slope, _, r2 = timing_linearity([(10, 1.0), (20, 1.0), (30, 1.0)])
    assert slope == 0.0 and r2 == 0.0


def test_timing_needs_three_points():
    with pytest.raises(DomainError):
        timing_linearity([(1, 1.0), (2, 2.0)])


def test_timing_file(tmp_path):
    log = [(1, 1.0), (2, 2.1), (3, 2.9)]
    write_timing(tmp_path / "t.csv", log, timing_linearity(log))
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "observations,seconds" and lines[5] == "slope,intercept,r2"


# -- parameter scan ----------------------------------------------------------------


def test_variance_matches_two_pass_oracle(small_corridor_views):
    im = small_corridor_views[2].image
    K = im.intrinsics
    vals = []
    for r in range(K.height):
        for c in range(K.width):
            if im.has_depth[r, c]:
                d = float(im.depth[r, c])
                x, y = (c + 0.5 - K.cx) / K.fx, (r + 0.5 - K.cy) / K.fy
                vals.append(d * math.sqrt(x * x + y * y + 1))
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    assert distance_variance(im) == pytest.approx(var, abs=1e-9)


def test_identical_targets_give_identical_rows(small_corridor_views):
    views = [v.image for v in small_corridor_views]
    p = UifmParams(0.2, 0.1, 0.3)
    rows = param_variance_scan(views + [], {1: p, 3: p})
    assert rows[0][2:] == rows[1][2:]
    twin = [views[1], type(views[1])(7, "twin", views[1].image, views[1].pose, views[1].intrinsics, views[1].depth)]
    rows = param_variance_scan(twin, {1: p, 7: p})
    assert rows[0][1:] == rows[1][1:]


def test_scan_unknown_target(small_corridor_views):
    with pytest.raises(DomainError):
        param_variance_scan([v.image for v in small_corridor_views], {42: UifmParams(0, 0, 0)})


@pytest.mark.slow
def test_low_variance_targets_spread_more(tmp_path):
    fits = {0: [], 9: []}
    variances = {}
    for seed in range(4):
        scene = synth.corridor(n_views=10, width=48, height=36, focal=40.0, seed=seed)
        views = [v.image for v in synth.render_all(scene)]
        targets = {t: run_restoration(views, t).params for t in fits}
        for row in param_variance_scan(views, targets):
            fits[row[0]].append(row[2:])
            variances[row[0]] = row[1]
    write_param_scan(tmp_path / "scan.csv", [[0, variances[0], *fits[0][0]]])
    assert variances[0] < variances[9] / 10
    spread = {t: np.std(np.array(f), axis=0).sum() for t, f in fits.items()}
    assert spread[0] > spread[9]
