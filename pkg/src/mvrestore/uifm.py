"""Underwater image formation model.

Per channel ``c``, an observation of clean intensity ``J`` at distance ``z``::

    I = J * exp(-beta_c * z) + B_c * (1 - exp(-gamma_c * z))

``beta`` is the attenuation coefficient, ``B`` the veiling light and
``gamma`` the backscatter coefficient. The ``tied`` mode forces
``gamma == beta``, which is the classic single-coefficient haze model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError

MODES = ("full", "tied")
GROUPS = ("J", "beta", "B", "gamma")


def _vec3(v) -> np.ndarray:
    a = np.array(v, dtype=np.float64)
    if a.ndim == 0:
        a = np.full(3, float(a))
    if a.shape != (3,):
        raise DomainError(f"expected 3 per-channel values, got shape {a.shape}")
    return a


@dataclass
class UifmParams:
    """Per-channel model parameters."""

    beta: np.ndarray
    B: np.ndarray
    gamma: np.ndarray
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.beta = _vec3(self.beta)
        self.B = _vec3(self.B)
        self.gamma = self.beta.copy() if self.mode == "tied" else _vec3(self.gamma)
        if not all(np.all(np.isfinite(a)) for a in (self.beta, self.B, self.gamma)):
            raise DomainError("model parameters must be finite")

    @classmethod
    def tied(cls, alpha, B) -> UifmParams:
        return cls(beta=alpha, B=B, gamma=alpha, mode="tied")

    def copy(self) -> UifmParams:
        return UifmParams(self.beta.copy(), self.B.copy(), self.gamma.copy(), self.mode)

    def channel(self, c: int) -> tuple[float, float, float]:
        return float(self.beta[c]), float(self.B[c]), float(self.gamma[c])

    def negative_groups(self) -> list[str]:
        """Names of parameter groups holding a negative value (allowed, but reported)."""
        return [n for n in ("beta", "B", "gamma") if np.any(getattr(self, n) < 0)]

    def as_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "B": self.B.tolist(),
            "gamma": self.gamma.tolist(),
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> UifmParams:
        return cls(beta=d["beta"], B=d["B"], gamma=d["gamma"], mode=d.get("mode", "full"))

    def allclose(self, other: UifmParams, atol=0.0, rtol=0.0) -> bool:
        return all(
            np.allclose(getattr(self, n), getattr(other, n), atol=atol, rtol=rtol) for n in ("beta", "B", "gamma")
        )


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DomainError("non-finite input")


def _check_z(z):
    if np.any(np.asarray(z) < 0):
        raise DomainError("distance must be non-negative")


def forward(J, z, params: UifmParams, c: int):
    """Observed intensity of clean intensity ``J`` seen through ``z`` metres of water."""
    beta, B, gamma = params.channel(c)
    _check_finite(J, z)
    _check_z(z)
    z = np.asarray(z, dtype=np.float64)
    return J * np.exp(-beta * z) + B * (1.0 - np.exp(-gamma * z))


def invert_single(I, z, params: UifmParams, c: int):
    """Clean intensity from one observation: ``(I - B(1 - e^{-γz})) e^{βz}``.

    Not clamped. ``e^{βz}`` amplifies float error quickly; beyond
    ``β·z ≈ 20`` the result is dominated by rounding of ``I``.
    """
    beta, B, gamma = params.channel(c)
    _check_z(z)
    z = np.asarray(z, dtype=np.float64)
    return (I - B * (1.0 - np.exp(-gamma * z))) * np.exp(beta * z)


def residual_and_grads(obs, J, params: UifmParams, c: int):
    """Residual of one observation ``(I, z)`` and gradients of ``r²/2``.

    Returns ``(r, dJ, dbeta, dB, dgamma)`` with ``r = I - model``. In tied mode
    ``dbeta`` already includes the backscatter contribution and ``dgamma`` is
    zero, since gamma is not an independent variable there.
    """
    I, z = obs
    _check_z(z)
    beta, B, gamma = params.channel(c)
    z = np.asarray(z, dtype=np.float64)
    att = np.exp(-beta * z)
    bsc = np.exp(-gamma * z)
    r = I - J * att - B * (1.0 - bsc)
    dJ = -r * att
    dbeta = r * J * z * att
    dB = -r * (1.0 - bsc)
    dgamma = -r * B * z * bsc
    if params.mode == "tied":
        dbeta = dbeta + dgamma
        dgamma = np.zeros_like(dgamma)
    return r, dJ, dbeta, dB, dgamma


@dataclass
class RestorationState:
    """Restored intensities for the target pixels that have depth, plus model parameters.

    ``pixels`` holds the flat (row-major) indices of those pixels in
    ascending order and ``J`` their per-channel values, shape (n, 3).
    """

    J: np.ndarray
    pixels: np.ndarray
    shape: tuple[int, int]
    params: UifmParams
    frozen: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.J = np.array(self.J, dtype=np.float64)
        self.pixels = np.asarray(self.pixels, dtype=np.int64)
        if self.J.shape != (len(self.pixels), 3):
            raise DomainError(f"J has shape {self.J.shape}, expected ({len(self.pixels)}, 3)")
        unknown = set(self.frozen) - set(GROUPS)
        if unknown:
            raise DomainError(f"unknown parameter groups {sorted(unknown)}")
        self.frozen = frozenset(self.frozen)

    @property
    def free_J(self) -> bool:
        return "J" not in self.frozen

    @property
    def free_params(self) -> bool:
        return bool({"beta", "B", "gamma"} - self.frozen)

    def free_groups(self) -> list[str]:
        groups = [g for g in GROUPS if g not in self.frozen]
        if self.params.mode == "tied" and "gamma" in groups:
            groups.remove("gamma")  # follows beta
        return groups

    def copy(self) -> RestorationState:
        return RestorationState(self.J.copy(), self.pixels.copy(), self.shape, self.params.copy(), self.frozen)

    def image(self, blank=np.nan) -> np.ndarray:
        """J scattered back to an (H, W, 3) image; pixels without depth get ``blank``."""
        h, w = self.shape
        out = np.full((h * w, 3), blank, dtype=np.float64)
        out[self.pixels] = self.J
        return out.reshape(h, w, 3)


# -- fit report ----------------------------------------------------------------


@dataclass
class TraceRecord:
    step: int
    objective: np.ndarray
    params: UifmParams

    def as_dict(self) -> dict:
        return {"step": self.step, "objective": [float(v) for v in self.objective], **self.params.as_dict()}


def write_fit_report(path, params: UifmParams, trace: Iterable[TraceRecord], extra: dict | None = None) -> None:
    """Write a fit report as JSON lines.

    One ``{"type": "trace", ...}`` record per logging interval, then a single
    ``{"type": "final", ...}`` record with the fitted parameters, the final
    per-channel objective (sum of squared residuals) and any ``extra`` fields.
    """
    trace = list(trace)
    lines = [json.dumps({"type": "trace", **t.as_dict()}, sort_keys=True) for t in trace]
    final = {"type": "final", **params.as_dict()}
    if trace:
        final["objective"] = [float(v) for v in trace[-1].objective]
    final["negative"] = params.negative_groups()
    if extra:
        final.update(extra)
    lines.append(json.dumps(final, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_fit_report(path) -> tuple[UifmParams, list[TraceRecord], dict]:
    trace, final = [], None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["type"] == "trace":
            trace.append(TraceRecord(rec["step"], np.array(rec["objective"]), UifmParams.from_dict(rec)))
        elif rec["type"] == "final":
            final = rec
    if final is None:
        raise ValueError(f"{path}: no final record")
    return UifmParams.from_dict(final), trace, final
