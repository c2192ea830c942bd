"""Full-batch Adam on the multi-view least-squares objective.

For each channel ``c`` the objective is the plain sum (not the mean) of
squared residuals over every observation::

    sum_i (I_i - J[p_i] exp(-beta_c z_i) - B_c (1 - exp(-gamma_c z_i)))^2

Channels share no parameters, so the three problems are solved side by side
in one vectorized loop; Adam is per-coordinate, which keeps them exactly
independent. Gradient sums are plain sequential numpy reductions over the
observation arrays in storage order, so results are bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError
from .ingest import PosedImage
from .pairing import ObservationSet
from .uifm import GROUPS, RestorationState, TraceRecord, UifmParams

logger = logging.getLogger(__name__)

INIT_PARAM = 0.1
CHANNELS = "RGB"


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.05
    steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    log_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if int(self.steps) < 1:
            raise DomainError("steps must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("Adam moment decays must lie in [0, 1)")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be > 0")
        if int(self.log_every) < 1:
            raise DomainError("log_every must be >= 1")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter group."""

    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, shapes: dict) -> AdamState:
        return cls({g: np.zeros(s) for g, s in shapes.items()}, {g: np.zeros(s) for g, s in shapes.items()})

    def update(self, values: dict, grads: dict, cfg: AdamConfig) -> None:
        """Apply one Adam step in place to every array in ``values``."""
        self.step += 1
        t = self.step
        c1 = 1.0 - cfg.beta1**t
        c2 = 1.0 - cfg.beta2**t
        for g, grad in grads.items():
            m = self.first_moment[g]
            v = self.second_moment[g]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            values[g] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


def init_state(target: PosedImage, pixels=None) -> RestorationState:
    """Naive start: J equal to the observed image, all parameters 0.1, nothing frozen."""
    if pixels is None:
        pixels = np.flatnonzero(target.has_depth.ravel())
    pixels = np.asarray(pixels, dtype=np.int64)
    J = target.intensities.reshape(-1, 3)[pixels]
    params = UifmParams(beta=INIT_PARAM, B=INIT_PARAM, gamma=INIT_PARAM)
    return RestorationState(J=J, pixels=pixels, shape=target.shape, params=params)


def freeze(state: RestorationState, groups) -> RestorationState:
    """Copy of ``state`` where ``groups`` (subset of J, beta, B, gamma) are held fixed."""
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise DomainError(f"unknown parameter groups {sorted(unknown)}")
    out = state.copy()
    out.frozen = frozenset(state.frozen | groups)
    if not out.free_groups():
        raise DomainError("no free parameters")
    return out


def observation_slots(obs: ObservationSet, state: RestorationState) -> np.ndarray:
    """Row of ``state.J`` for each observation."""
    k = np.searchsorted(state.pixels, obs.pixel_index)
    k = np.minimum(k, len(state.pixels) - 1)
    if len(obs) and not np.array_equal(state.pixels[k], obs.pixel_index):
        raise DomainError("observations reference pixels missing from the restoration state")
    return k


def _residuals(I, z, Jk, params: UifmParams):
    att = np.exp(-params.beta * z)
    bsc = np.exp(-params.gamma * z)
    r = I - Jk * att - params.B * (1.0 - bsc)
    return r, att, bsc


def objectives(obs: ObservationSet, state: RestorationState) -> np.ndarray:
    """Per-channel sum of squared residuals, shape (3,)."""
    k = observation_slots(obs, state)
    r, _, _ = _residuals(obs.intensity, obs.distance[:, None], state.J[k], state.params)
    return (r * r).sum(axis=0)


def objective(obs: ObservationSet, state: RestorationState, c: int) -> float:
    return float(objectives(obs, state)[c])


def fit(obs: ObservationSet, state: RestorationState, cfg: AdamConfig = AdamConfig()):
    """Run ``cfg.steps`` full-batch Adam updates; returns ``(state, trace)``.

    The trace holds the objective and parameters after 0, ``log_every``,
    ``2·log_every``, ... updates, plus the final state. Frozen groups are
    never touched. In tied mode gamma follows beta.
    """
    if len(obs) == 0:
        raise DomainError("no observations to fit")
    state = state.copy()
    groups = state.free_groups()
    if not groups:
        raise DomainError("no free parameters")
    k = observation_slots(obs, state)
    n = len(state.pixels)
    I = obs.intensity
    z = obs.distance[:, None]
    p = state.params
    tied = p.mode == "tied"

    values = {"J": state.J, "beta": p.beta, "B": p.B, "gamma": p.gamma}
    adam = AdamState.zeros({g: values[g].shape for g in groups})
    trace = []

    for step in range(cfg.steps + 1):
        Jk = state.J[k]
        r, att, bsc = _residuals(I, z, Jk, p)
        obj = (r * r).sum(axis=0)
        bad = ~np.isfinite(obj)
        if bad.any():
            c = int(np.flatnonzero(bad)[0])
            raise NumericalError(f"non-finite objective at step {step}, channel {CHANNELS[c]}")
        if step % cfg.log_every == 0 or step == cfg.steps:
            trace.append(TraceRecord(step, obj, p.copy()))
        if step == cfg.steps:
            break

        grads = {}
        if "J" in groups:
            w = -r * att
            grads["J"] = np.stack([np.bincount(k, weights=w[:, c], minlength=n) for c in range(3)], axis=1)
        if "B" in groups:
            grads["B"] = (-r * (1.0 - bsc)).sum(axis=0)
        need_gamma = "gamma" in groups or (tied and "beta" in groups)
        if need_gamma:
            g_gamma = (-r * p.B * z * bsc).sum(axis=0)
            if "gamma" in groups:
                grads["gamma"] = g_gamma
        if "beta" in groups:
            grads["beta"] = (r * Jk * z * att).sum(axis=0)
            if tied:
                grads["beta"] = grads["beta"] + g_gamma
        adam.update(values, grads, cfg)
        if tied:
            p.gamma[:] = p.beta

    for name in p.negative_groups():
        logger.warning("fitted %s has negative entries: %s", name, getattr(p, name))
    return state, trace
