"""Full-reference image metrics and colour-chart angular error.

All metrics take float images in [0, 1] (values outside are allowed where
noted) and a boolean mask; pixels outside the mask never contribute.
"""

from __future__ import annotations

import colorsys
import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DatasetError, DomainError

PSNR_INF = math.inf  # identical images

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# D65 reference white (2° observer), sRGB primaries
D65_WHITE = np.array([0.95047, 1.0, 1.08883])
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)


def _mask_for(a: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return np.ones(a.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise DomainError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    return mask


def psnr(a: np.ndarray, b: np.ndarray, mask=None) -> float:
    """Peak signal-to-noise ratio in dB for data range 1; ``inf`` when the images agree exactly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    m = _mask_for(a, mask)
    if not m.any():
        raise DomainError("empty mask")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_filter(x: np.ndarray) -> np.ndarray:
    # radius 5 -> 11 taps at sigma 1.5
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=(SSIM_WIN // 2) / SSIM_SIGMA, mode="reflect")


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-channel images (population statistics, data range 1)."""
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _gaussian_filter(a)
    mu_b = _gaussian_filter(b)
    saa = _gaussian_filter(a * a) - mu_a * mu_a
    sbb = _gaussian_filter(b * b) - mu_b * mu_b
    sab = _gaussian_filter(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, mask=None) -> float:
    """Mean SSIM over 11×11 Gaussian windows lying fully inside the image and the mask.

    Colour images are scored per channel and the channel scores averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if h < SSIM_WIN or w < SSIM_WIN:
        raise DomainError(f"image smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    m = _mask_for(a, mask)
    # window centres whose whole footprint is masked and inside the image
    valid = ndimage.binary_erosion(m, np.ones((SSIM_WIN, SSIM_WIN), bool), border_value=0)
    if not valid.any():
        raise DomainError("no SSIM window fits inside the mask")
    # blank pixels may hold NaN; they never reach a valid window, so zero them
    a = np.where(m[..., None] if a.ndim == 3 else m, a, 0.0)
    b = np.where(m[..., None] if b.ndim == 3 else m, b, 0.0)
    chans = [a[..., c] for c in range(a.shape[2])] if a.ndim == 3 else [a]
    chans_b = [b[..., c] for c in range(b.shape[2])] if b.ndim == 3 else [b]
    scores = [float(ssim_map(x, y)[valid].mean()) for x, y in zip(chans, chans_b)]
    return float(np.mean(scores))


# -- colour ----------------------------------------------------------------------


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] (D65) to CIE L*a*b*. Inputs are clipped to [0, 1] first."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ SRGB_TO_XYZ.T / D65_WHITE
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def ciede2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0) -> np.ndarray:
    """CIEDE2000 colour difference of Lab triples (vectorized over leading axes)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    Cbar = 0.5 * (C1 + C2)
    Cbar7 = Cbar**7
    G = 0.5 * (1.0 - np.sqrt(Cbar7 / (Cbar7 + 25.0**7)))
    a1p = (1.0 + G) * a1
    a2p = (1.0 + G) * a2
    C1p = np.hypot(a1p, b1)
    C2p = np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h1p = np.where(C1p == 0, 0.0, h1p)
    h2p = np.where(C2p == 0, 0.0, h2p)

    dLp = L2 - L1
    dCp = C2p - C1p
    zero = C1p * C2p == 0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dh = np.where(zero, 0.0, dh)
    dHp = 2.0 * np.sqrt(C1p * C2p) * np.sin(np.radians(dh) / 2.0)

    Lbarp = 0.5 * (L1 + L2)
    Cbarp = 0.5 * (C1p + C2p)
    hsum = h1p + h2p
    hbarp = np.where(
        np.abs(h1p - h2p) <= 180.0,
        hsum / 2.0,
        np.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0),
    )
    hbarp = np.where(zero, hsum, hbarp)

    T = (
        1.0
        - 0.17 * np.cos(np.radians(hbarp - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbarp))
        + 0.32 * np.cos(np.radians(3.0 * hbarp + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbarp - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbarp - 275.0) / 25.0) ** 2))
    Cbarp7 = Cbarp**7
    RC = 2.0 * np.sqrt(Cbarp7 / (Cbarp7 + 25.0**7))
    SL = 1.0 + 0.015 * (Lbarp - 50.0) ** 2 / np.sqrt(20.0 + (Lbarp - 50.0) ** 2)
    SC = 1.0 + 0.045 * Cbarp
    SH = 1.0 + 0.015 * Cbarp * T
    RT = -np.sin(np.radians(2.0 * dtheta)) * RC

    tL = dLp / (kL * SL)
    tC = dCp / (kC * SC)
    tH = dHp / (kH * SH)
    return np.sqrt(tL * tL + tC * tC + tH * tH + RT * tC * tH)


def mean_ciede2000(a: np.ndarray, b: np.ndarray, mask=None) -> float:
    """Mean CIEDE2000 between two sRGB images over masked pixels."""
    m = _mask_for(np.asarray(a), mask)
    if not m.any():
        raise DomainError("empty mask")
    return float(ciede2000(srgb_to_lab(np.asarray(a)[m]), srgb_to_lab(np.asarray(b)[m])).mean())


# -- colour charts ---------------------------------------------------------------


@dataclass
class ColorChartSpec:
    """Twelve patch regions ``(x, y, w, h)`` with expected colours in [0, 1]."""

    chart_id: str
    patches: list  # 12 × ((x, y, w, h), (Er, Eg, Eb))
    mean_distance: Optional[float] = None

    def __post_init__(self):
        if len(self.patches) != 12:
            raise DomainError(f"chart {self.chart_id}: expected 12 patches, got {len(self.patches)}")
        cells = set()
        for (x, y, w, h), _ in self.patches:
            if w <= 0 or h <= 0:
                raise DomainError(f"chart {self.chart_id}: empty patch region")
            block = {(r, c) for r in range(y, y + h) for c in range(x, x + w)}
            if cells & block:
                raise DomainError(f"chart {self.chart_id}: patch regions overlap")
            cells |= block

    def region_mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        for (x, y, w, h), _ in self.patches:
            m[y : y + h, x : x + w] = True
        return m

    def with_distance(self, depth: np.ndarray) -> ColorChartSpec:
        """Copy with ``mean_distance`` set from a depth map over the patch regions."""
        d = np.asarray(depth, dtype=np.float64)[self.region_mask(depth.shape)]
        d = d[np.isfinite(d) & (d > 0)]
        return ColorChartSpec(self.chart_id, self.patches, float(d.mean()) if d.size else None)


def patch_mean(img: np.ndarray, region) -> np.ndarray:
    x, y, w, h = region
    if w <= 0 or h <= 0:
        raise DomainError("empty patch region")
    if x < 0 or y < 0 or y + h > img.shape[0] or x + w > img.shape[1]:
        raise DomainError(f"patch region {region} outside image {img.shape[:2]}")
    return np.asarray(img[y : y + h, x : x + w], dtype=np.float64).reshape(-1, 3).mean(axis=0)


def _angle(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Angle between RGB vectors along the last axis; pi/2 where either has zero norm."""
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    den = nu * nv
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.clip(np.sum(u * v, axis=-1) / den, -1.0, 1.0)
    ang = np.arccos(cos)
    zero = den == 0
    if np.any(zero):
        warnings.warn("zero-norm colour in angular error; counted as 90 degrees", stacklevel=3)
        ang = np.where(zero, np.pi / 2, ang)
    return ang


def psi_bar(img: np.ndarray, chart: ColorChartSpec, order: str = "mean_first") -> float:
    """Mean angle in degrees between observed and expected colours over the 12 patches.

    ``mean_first`` (default) averages each patch's RGB before taking the angle;
    ``pixel_first`` averages per-pixel angles within each patch.
    """
    img = np.asarray(img, dtype=np.float64)
    angles = []
    for region, E in chart.patches:
        E = np.asarray(E, dtype=np.float64)
        if order == "mean_first":
            angles.append(float(_angle(patch_mean(img, region), E)))
        elif order == "pixel_first":
            x, y, w, h = region
            patch_mean(img, region)  # bounds check
            px = img[y : y + h, x : x + w].reshape(-1, 3)
            angles.append(float(_angle(px, np.broadcast_to(E, px.shape)).mean()))
        else:
            raise DomainError(f"unknown order {order!r}")
    return math.degrees(sum(angles) / len(angles))


def hue_of_patch(img: np.ndarray, region) -> float:
    """HSV hue in degrees [0, 360) of the mean patch colour; NaN for a gray patch."""
    r, g, b = patch_mean(img, region)
    if max(r, g, b) == min(r, g, b):
        return math.nan
    h, _, _ = colorsys.rgb_to_hsv(r, g, b)
    return (h * 360.0) % 360.0


def parse_charts(path) -> dict[str, list[ColorChartSpec]]:
    """Read ``charts.txt``: ``NAME CHART_ID`` then 12 × ``x y w h Er Eg Eb`` per line."""
    out: dict[str, list[ColorChartSpec]] = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"cannot read chart file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 2 + 12 * 7:
            raise DatasetError(f"{path}:{lineno}: expected {2 + 12 * 7} fields, got {len(f)}")
        try:
            patches = []
            for p in range(12):
                v = f[2 + 7 * p : 9 + 7 * p]
                patches.append((tuple(int(x) for x in v[:4]), tuple(float(x) for x in v[4:])))
            out.setdefault(f[0], []).append(ColorChartSpec(f[1], patches))
        except (ValueError, DomainError) as e:
            raise DatasetError(f"{path}:{lineno}: {e}") from e
    return out


# -- report --------------------------------------------------------------------

REPORT_FIELDS = ("method", "image", "metric", "value")


def write_report(path, rows) -> None:
    """Write ``(method, image, metric, value)`` rows as CSV, in the order given."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for method, image, metric, value in rows:
            w.writerow([method, image, metric, repr(float(value))])


def read_report(path) -> list[tuple[str, str, str, float]]:
    with open(path, newline="") as f:
        return [(r["method"], r["image"], r["metric"], float(r["value"])) for r in csv.DictReader(f)]
