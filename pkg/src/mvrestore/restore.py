"""End-to-end restoration of one target image and the nearest-view stitching baseline."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError, DomainError
from .ingest import PosedImage, write_png
from .optimizer import AdamConfig, fit, freeze, init_state
from .pairing import ObservationSet, build_observations
from .uifm import RestorationState, UifmParams, write_fit_report

logger = logging.getLogger(__name__)


@dataclass
class RestoredImage:
    """Per-pixel restored values; NaN where the target had no depth."""

    values: np.ndarray  # (H, W, 3) float64
    mask: np.ndarray  # (H, W) bool
    target_id: int

    def __post_init__(self):
        if self.values.shape[:2] != self.mask.shape:
            raise DomainError("values and mask shapes differ")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise DomainError("restored values must be finite on masked pixels")
        if not np.all(np.isnan(self.values[~self.mask])):
            raise DomainError("unmasked pixels must hold the NaN blank value")

    @classmethod
    def from_state(cls, state: RestorationState, target_id: int) -> RestoredImage:
        values = state.image(blank=np.nan)
        mask = np.zeros(state.shape[0] * state.shape[1], dtype=bool)
        mask[state.pixels] = True
        return cls(values, mask.reshape(state.shape), target_id)


@dataclass
class RestorationResult:
    image: RestoredImage
    params: UifmParams
    trace: list
    observations: ObservationSet
    state: RestorationState
    timings: dict = field(default_factory=dict)


def find_target(dataset: Sequence[PosedImage], target_id: int) -> PosedImage:
    for im in dataset:
        if im.id == target_id:
            return im
    raise DatasetError(f"target image {target_id} is not in the dataset")


def run_restoration(
    dataset: Sequence[PosedImage],
    target_id: int,
    cfg: AdamConfig = AdamConfig(),
    window: Optional[int] = None,
    distance_mode: str = "range",
    frozen=(),
    init_params: Optional[UifmParams] = None,
    jobs: int = 1,
) -> RestorationResult:
    """Pair, initialize and fit one target; returns everything a caller may want to save.

    ``frozen`` groups are held at their initial values: the defaults of
    :func:`init_state`, or ``init_params`` when given.
    """
    target = find_target(dataset, target_id)
    t0 = time.perf_counter()
    obs = build_observations(target, dataset, window=window, distance_mode=distance_mode, jobs=jobs)
    t1 = time.perf_counter()
    state = init_state(target)
    if init_params is not None:
        state.params = init_params.copy()
    if frozen:
        state = freeze(state, frozen)
    state, trace = fit(obs, state, cfg)
    t2 = time.perf_counter()
    timings = {"pairing_s": t1 - t0, "optimization_s": t2 - t1, "observations": len(obs)}
    logger.info(
        "image %d: pairing %.3f s, optimization %.3f s, %d observations",
        target_id, timings["pairing_s"], timings["optimization_s"], len(obs),
    )
    return RestorationResult(RestoredImage.from_state(state, target_id), state.params, trace, obs, state, timings)


def restore_image(
    dataset: Sequence[PosedImage], target_id: int, cfg: AdamConfig = AdamConfig(), window: Optional[int] = None
):
    """Restore one target; returns ``(RestoredImage, UifmParams, trace)``."""
    r = run_restoration(dataset, target_id, cfg, window)
    return r.image, r.params, r.trace


def normalize(img: RestoredImage, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Per-channel percentile stretch of the masked pixels to 8 bits.

    Each channel maps ``v -> clamp((v - p_low) / (p_high - p_low), 0, 1)``
    and is quantized rounding half away from zero. Unmasked pixels are 0.
    A constant channel (``p_high <= p_low``) keeps its values, clamped to
    [0, 1], and a warning is emitted.
    """
    if not (0 <= low_pct < high_pct <= 100):
        raise DomainError("percentiles must satisfy 0 <= low < high <= 100")
    out = np.zeros(img.values.shape, dtype=np.uint8)
    if not img.mask.any():
        return out
    vals = img.values[img.mask]
    res = np.empty_like(vals)
    for c in range(3):
        lo, hi = np.percentile(vals[:, c], [low_pct, high_pct])
        if hi <= lo:
            warnings.warn(f"channel {c} is constant; left unchanged", stacklevel=2)
            res[:, c] = np.clip(vals[:, c], 0.0, 1.0)
        else:
            res[:, c] = np.clip((vals[:, c] - lo) / (hi - lo), 0.0, 1.0)
    out[img.mask] = np.floor(res * 255.0 + 0.5).astype(np.uint8)  # non-negative, so half-up == half-away
    return out


def stitch_baseline(
    dataset: Sequence[PosedImage],
    target_id: int,
    window: Optional[int] = None,
    distance_mode: str = "range",
) -> RestoredImage:
    """Each masked pixel copies its closest observation; ties go to the lowest image id."""
    target = find_target(dataset, target_id)
    obs = build_observations(target, dataset, window=window, distance_mode=distance_mode)
    # sort by pixel, then distance, then id; the first entry per pixel wins
    order = np.lexsort((obs.source_id, obs.distance, obs.pixel_index))
    pix = obs.pixel_index[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    chosen = order[first]
    h, w = target.shape
    values = np.full((h * w, 3), np.nan)
    values[obs.pixel_index[chosen]] = obs.intensity[chosen]
    return RestoredImage(values.reshape(h, w, 3), target.has_depth.copy(), target_id)


# -- outputs -------------------------------------------------------------------


def write_f32(path, values: np.ndarray) -> None:
    """Raw float dump: row-major, R, G, B interleaved, little-endian float32."""
    Path(path).write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_f32(path, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    raw = Path(path).read_bytes()
    if len(raw) != 4 * h * w * 3:
        raise DatasetError(f"{path}: expected {h}x{w}x3 float32 values")
    return np.frombuffer(raw, "<f4").reshape(h, w, 3).astype(np.float64)


def save_outputs(
    out_dir,
    name: str,
    image: RestoredImage,
    params: Optional[UifmParams] = None,
    trace=(),
    low_pct: float = 1.0,
    high_pct: float = 99.0,
    extra: Optional[dict] = None,
) -> None:
    """Write ``NAME.png`` (normalized), ``NAME.f32`` (raw) and, with params, ``NAME.fit.txt``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_png(out_dir / f"{name}.png", normalize(image, low_pct, high_pct))
        write_f32(out_dir / f"{name}.f32", image.values)
        if params is not None:
            write_fit_report(out_dir / f"{name}.fit.txt", params, trace, extra)
    except OSError as e:
        raise DatasetError(f"cannot write outputs to {out_dir}: {e}") from e
