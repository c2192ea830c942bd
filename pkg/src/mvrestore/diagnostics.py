"""Post-fit analyses: residual normality, distance curves, timing, parameter spread.

Every report can be written as plain CSV for plotting elsewhere.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import DomainError
from .ingest import PosedImage
from .optimizer import CHANNELS, observation_slots
from .pairing import ObservationSet, observation_distance
from .uifm import RestorationState, UifmParams, forward, residual_and_grads

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_CAP = 1_000_000


@dataclass
class ChannelResiduals:
    edges: np.ndarray  # (bins + 1,)
    counts: np.ndarray  # (bins,)
    qq_theoretical: np.ndarray  # standard normal quantiles, ascending
    qq_sample: np.ndarray  # standardized residual quantiles, ascending
    fitted: np.ndarray  # model predictions for a plotting sample
    residual: np.ndarray  # matching residuals
    skewness: float
    excess_kurtosis: float
    n: int

    @property
    def qq_r2(self) -> float:
        """R² of the straight-line fit through the quantile pairs."""
        return float(np.corrcoef(self.qq_theoretical, self.qq_sample)[0, 1] ** 2)


@dataclass
class ResidualReport:
    channels: list  # ChannelResiduals per channel, R, G, B


def subsample(n: int, cap: int, seed: int = 0) -> np.ndarray:
    """Deterministic sorted subset of ``range(n)`` of size ``min(n, cap)``."""
    if cap < 1:
        raise DomainError("sample_cap must be >= 1")
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


def residual_report(
    obs: ObservationSet,
    state: RestorationState,
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    bins: int = 50,
    quantiles: int = 1000,
    scatter_points: int = 5000,
    seed: int = 0,
) -> ResidualReport:
    """Residual statistics per channel, on a deterministic subsample of at most ``sample_cap`` observations."""
    idx = subsample(len(obs), sample_cap, seed)
    k = observation_slots(obs, state)[idx]
    I = obs.intensity[idx]
    z = obs.distance[idx]
    J = state.J[k]
    scatter = idx[:0] if len(idx) == 0 else np.linspace(0, len(idx) - 1, min(scatter_points, len(idx))).astype(int)
    out = []
    for c in range(3):
        r = residual_and_grads((I[:, c], z), J[:, c], state.params, c)[0]
        counts, edges = np.histogram(r, bins=bins)
        sd = r.std()
        zr = np.sort((r - r.mean()) / sd) if sd > 0 else np.zeros(len(r))
        nq = min(quantiles, len(r))
        probs = (np.arange(nq) + 0.5) / nq
        out.append(
            ChannelResiduals(
                edges=edges,
                counts=counts,
                qq_theoretical=stats.norm.ppf(probs),
                qq_sample=np.quantile(zr, probs),
                fitted=(I[:, c] - r)[scatter],
                residual=r[scatter],
                skewness=float(stats.skew(r)),
                excess_kurtosis=float(stats.kurtosis(r, fisher=True)),
                n=len(r),
            )
        )
    return ResidualReport(out)


def write_residual_report(out_dir, report: ResidualReport) -> None:
    """``residual_hist.csv``, ``residual_qq.csv``, ``residual_fitted.csv`` and ``residual_moments.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "residual_hist.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "bin_low", "bin_high", "count"])
        for name, ch in zip(CHANNELS, report.channels):
            for lo, hi, n in zip(ch.edges[:-1], ch.edges[1:], ch.counts):
                w.writerow([name, repr(float(lo)), repr(float(hi)), int(n)])
    with open(out_dir / "residual_qq.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "normal_quantile", "sample_quantile"])
        for name, ch in zip(CHANNELS, report.channels):
            for t, s in zip(ch.qq_theoretical, ch.qq_sample):
                w.writerow([name, repr(float(t)), repr(float(s))])
    with open(out_dir / "residual_fitted.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "fitted", "residual"])
        for name, ch in zip(CHANNELS, report.channels):
            for a, b in zip(ch.fitted, ch.residual):
                w.writerow([name, repr(float(a)), repr(float(b))])
    with open(out_dir / "residual_moments.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "n", "skewness", "excess_kurtosis", "qq_r2"])
        for name, ch in zip(CHANNELS, report.channels):
            w.writerow([name, ch.n, repr(ch.skewness), repr(ch.excess_kurtosis), repr(ch.qq_r2)])


# -- distance curves -------------------------------------------------------------


@dataclass
class Track:
    pixel: int
    z: np.ndarray  # observed distances
    intensity: np.ndarray  # (n, 3) observed intensities
    J: np.ndarray  # (3,) fitted clean value
    model_z: np.ndarray  # sample grid from 0 to the largest observed distance
    model: np.ndarray  # (len(model_z), 3) forward(J, model_z)


def fit_curves(obs: ObservationSet, state: RestorationState, n_tracks: int, samples: int = 50) -> list[Track]:
    """The ``n_tracks`` pixels with the widest distance span and their model curves.

    Pixels seen at a single distance are never selected; ties go to the lower
    pixel index.
    """
    if len(obs) == 0:
        return []
    pix = obs.pixel_index
    starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
    zmin = np.minimum.reduceat(obs.distance, starts)
    zmax = np.maximum.reduceat(obs.distance, starts)
    span = zmax - zmin
    order = np.lexsort((pix[starts], -span))
    order = order[span[order] > 0][:n_tracks]
    ends = np.r_[starts[1:], len(pix)]
    grid = np.linspace(0.0, float(obs.distance.max()), samples)
    slot = observation_slots(obs, state)
    tracks = []
    for g in order:
        s, e = starts[g], ends[g]
        J = state.J[slot[s]]
        model = np.stack([forward(J[c], grid, state.params, c) for c in range(3)], axis=1)
        tracks.append(Track(int(pix[s]), obs.distance[s:e].copy(), obs.intensity[s:e].copy(), J.copy(), grid, model))
    return tracks


def write_fit_curves(path, tracks: Sequence[Track]) -> None:
    """One row per point: ``track, pixel, kind (observed|model), z, R, G, B``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["track", "pixel", "kind", "z", "R", "G", "B"])
        for i, t in enumerate(tracks):
            for z, v in zip(t.z, t.intensity):
                w.writerow([i, t.pixel, "observed", repr(float(z)), *(repr(float(x)) for x in v)])
            for z, v in zip(t.model_z, t.model):
                w.writerow([i, t.pixel, "model", repr(float(z)), *(repr(float(x)) for x in v)])


# -- timing ----------------------------------------------------------------------


def timing_linearity(log) -> tuple[float, float, float]:
    """Least-squares line ``seconds = slope * observations + intercept`` and its R².

    R² is reported as 0 (with a warning) when it is undefined, i.e. when the
    times or the counts do not vary.
    """
    data = np.asarray(log, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) < 3:
        raise DomainError("timing_linearity needs at least 3 (observations, seconds) points")
    x, y = data[:, 0], data[:, 1]
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        warnings.warn("all runs have the same observation count; R² undefined", stacklevel=2)
        return 0.0, float(ym), 0.0
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    if ss_tot == 0:
        warnings.warn("constant timings; R² undefined, reported as 0", stacklevel=2)
        return slope, intercept, 0.0
    return slope, intercept, 1.0 - ss_res / ss_tot


def write_timing(path, log, fit=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["observations", "seconds"])
        for n, s in log:
            w.writerow([int(n), repr(float(s))])
        if fit is not None:
            w.writerow([])
            w.writerow(["slope", "intercept", "r2"])
            w.writerow([repr(float(v)) for v in fit])


# -- parameter spread --------------------------------------------------------------


PARAM_SCAN_FIELDS = (
    ["target_id", "distance_variance"]
    + [f"beta_{c}" for c in CHANNELS]
    + [f"B_{c}" for c in CHANNELS]
    + [f"gamma_{c}" for c in CHANNELS]
)


def distance_variance(image: PosedImage, distance_mode: str = "range") -> float:
    """Population variance of the distance map over pixels with depth."""
    flat = np.flatnonzero(image.has_depth.ravel())
    if flat.size == 0:
        raise DomainError(f"image {image.id} has no depth")
    return float(np.var(observation_distance(image, flat, distance_mode)))


def param_variance_scan(
    dataset: Sequence[PosedImage], targets: dict, distance_mode: str = "range"
) -> list[list[float]]:
    """Rows of (target id, distance-map variance, beta, B, gamma per channel).

    ``targets`` maps target id to its fitted :class:`UifmParams`; rows follow
    ascending target id.
    """
    by_id = {im.id: im for im in dataset}
    rows = []
    for tid in sorted(targets):
        if tid not in by_id:
            raise DomainError(f"target {tid} not in the dataset")
        p: UifmParams = targets[tid]
        var = distance_variance(by_id[tid], distance_mode)
        rows.append([tid, var, *p.beta.tolist(), *p.B.tolist(), *p.gamma.tolist()])
    return rows


def write_param_scan(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PARAM_SCAN_FIELDS)
        for r in rows:
            w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])
