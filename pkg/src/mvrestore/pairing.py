"""Dense multi-view pixel pairing and observation assembly."""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError, DomainError, NothingToRestoreError
from .geometry import backproject, cell_centers, match_cells
from .ingest import PosedImage

logger = logging.getLogger(__name__)

DISTANCE_MODES = ("range", "depth")


@dataclass
class ObservationSet:
    """Every tracked observation of the target's pixels, sorted by pixel.

    Struct-of-arrays, one entry per observation. Within a pixel, entries
    follow candidate order: the target's own observation first, then other
    images by ascending id.
    """

    target_id: int
    shape: tuple[int, int]
    pixel_index: np.ndarray  # (n,) int64 flat target pixel
    intensity: np.ndarray  # (n, 3) float64 in [0, 1]
    distance: np.ndarray  # (n,) float64 metres
    source_id: np.ndarray  # (n,) int64 image the observation came from

    def __post_init__(self):
        n = len(self.pixel_index)
        if not (len(self.intensity) == len(self.distance) == len(self.source_id) == n):
            raise DomainError("observation arrays have different lengths")

    def __len__(self) -> int:
        return len(self.pixel_index)

    @property
    def pixels(self) -> np.ndarray:
        """Distinct target pixels, ascending."""
        return np.unique(self.pixel_index)

    @property
    def counts(self) -> np.ndarray:
        """Observation count per entry of :attr:`pixels`."""
        return np.unique(self.pixel_index, return_counts=True)[1]

    def count_map(self) -> np.ndarray:
        h, w = self.shape
        return np.bincount(self.pixel_index, minlength=h * w).reshape(h, w)

    def equals(self, other: ObservationSet) -> bool:
        return (
            self.target_id == other.target_id
            and tuple(self.shape) == tuple(other.shape)
            and np.array_equal(self.pixel_index, other.pixel_index)
            and np.array_equal(self.intensity, other.intensity)
            and np.array_equal(self.distance, other.distance)
            and np.array_equal(self.source_id, other.source_id)
        )


def pair_images(target: PosedImage, other: PosedImage) -> np.ndarray:
    """Pixel pairs passing the bidirectional consistency check.

    Returns an (m, 2) int64 array of flat indices ``(target_pixel,
    other_pixel)`` sorted by target pixel. Both columns are duplicate-free.
    """
    src, dst, ok = match_cells(target, other)
    return np.stack([src[ok], dst[ok]], axis=1)


def observation_distance(image: PosedImage, flat_index: np.ndarray, mode: str = "range") -> np.ndarray:
    """Distance of the scene point seen at each cell of ``image``.

    ``range`` is the Euclidean distance to the camera centre, ``depth`` the
    axial depth stored in the depth map.
    """
    d = image.depth.ravel()[flat_index].astype(np.float64)
    if mode == "depth":
        return d
    if mode != "range":
        raise DomainError(f"distance_mode must be one of {DISTANCE_MODES}, got {mode!r}")
    p = backproject(cell_centers(flat_index, image.intrinsics.width), d, image.intrinsics)
    return np.linalg.norm(p, axis=-1)


def select_candidates(
    target: PosedImage, candidates: Sequence[PosedImage], window: Optional[int] = None
) -> list[PosedImage]:
    """Candidates other than the target, optionally within ``±window`` ids, by ascending id."""
    out = [c for c in candidates if c.id != target.id]
    if window is not None:
        if window < 0:
            raise DomainError("window must be non-negative")
        out = [c for c in out if abs(c.id - target.id) <= window]
    return sorted(out, key=lambda c: c.id)


def build_observations(
    target: PosedImage,
    candidates: Sequence[PosedImage],
    window: Optional[int] = None,
    distance_mode: str = "range",
    jobs: int = 1,
) -> ObservationSet:
    """Assemble all observations of the target pixels that have depth.

    Each such pixel contributes its own intensity at its own distance, plus
    one observation per candidate it pairs with. Pixels without any pair keep
    that single self-observation. The target itself is skipped if present in
    ``candidates``.
    """
    h, w = target.shape
    own = np.flatnonzero(target.has_depth.ravel())
    if own.size == 0:
        raise NothingToRestoreError(f"image {target.id} has no pixel with depth: nothing to restore")

    cands = select_candidates(target, candidates, window)

    def one(other: PosedImage):
        pairs = pair_images(target, other)
        cells = pairs[:, 1]
        return (
            pairs[:, 0],
            other.intensities.reshape(-1, 3)[cells],
            observation_distance(other, cells, distance_mode),
            np.full(len(pairs), other.id, dtype=np.int64),
        )

    if jobs > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(one, cands))  # map preserves candidate order
    else:
        parts = [one(c) for c in cands]

    pieces = [
        (
            own,
            target.intensities.reshape(-1, 3)[own],
            observation_distance(target, own, distance_mode),
            np.full(own.size, target.id, dtype=np.int64),
        )
    ] + parts
    pix = np.concatenate([p[0] for p in pieces])
    order = np.argsort(pix, kind="stable")
    obs = ObservationSet(
        target_id=target.id,
        shape=(h, w),
        pixel_index=pix[order],
        intensity=np.concatenate([p[1] for p in pieces])[order],
        distance=np.concatenate([p[2] for p in pieces])[order],
        source_id=np.concatenate([p[3] for p in pieces])[order],
    )
    logger.info(
        "image %d: %d pixels with depth, %d candidates, %d observations", target.id, own.size, len(cands), len(obs)
    )
    return obs


# -- binary cache ----------------------------------------------------------------
#
# Little-endian. Header: magic b"MVOBS001", then int64 target_id, count,
# height, width. Body: pixel_index int64[count], source_id int64[count],
# intensity float64[count, 3] (row-major), distance float64[count].

_MAGIC = b"MVOBS001"
_HEADER = struct.Struct("<8sqqqq")


def save_observations(path, obs: ObservationSet) -> None:
    n = len(obs)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, obs.target_id, n, obs.shape[0], obs.shape[1]))
        f.write(obs.pixel_index.astype("<i8").tobytes())
        f.write(obs.source_id.astype("<i8").tobytes())
        f.write(np.ascontiguousarray(obs.intensity, dtype="<f8").tobytes())
        f.write(obs.distance.astype("<f8").tobytes())


def load_observations(path) -> ObservationSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated observation cache")
    magic, target_id, n, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DatasetError(f"{path}: not an observation cache")
    if len(raw) != _HEADER.size + n * 8 * 6:
        raise DatasetError(f"{path}: observation cache size mismatch")
    off = _HEADER.size
    pix = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
    off += 8 * n
    src = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
    off += 8 * n
    inten = np.frombuffer(raw, "<f8", 3 * n, off).astype(np.float64).reshape(n, 3)
    off += 24 * n
    dist = np.frombuffer(raw, "<f8", n, off).astype(np.float64)
    return ObservationSet(int(target_id), (int(h), int(w)), pix, inten, dist, src)
