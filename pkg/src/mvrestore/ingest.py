"""Dataset I/O in a reconstruction-style text layout.

Layout of a dataset root::

    cameras.txt          CAMERA_ID PINHOLE WIDTH HEIGHT fx fy cx cy
    images.txt           IMAGE_ID qw qx qy qz tx ty tz CAMERA_ID NAME
    images/NAME.png      8-bit RGB
    depths/NAME.pfm      float32 axial depth, PFM grayscale

Poses in ``images.txt`` are world-to-camera. Lines starting with ``#`` are
comments. Depth values that are non-finite or <= 0 mean "no depth".
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, DomainError
from .geometry import CameraPose, Intrinsics, normalize_quaternion

logger = logging.getLogger(__name__)

__all__ = [
    "CameraPose",
    "Intrinsics",
    "PosedImage",
    "depth_mask",
    "load_dataset",
    "write_dataset",
    "read_pfm",
    "write_pfm",
    "read_png",
    "write_png",
]


def depth_mask(depth: np.ndarray) -> np.ndarray:
    """True where a depth value is usable (finite and strictly positive)."""
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & (depth > 0)


@dataclass(frozen=True, eq=False)
class PosedImage:
    """An 8-bit RGB image with its pose, intrinsics and depth map.

    ``image`` is ``uint8`` of shape (H, W, 3); ``depth`` is ``float32`` of
    shape (H, W). Arrays are made read-only on construction.
    """

    id: int
    name: str
    image: np.ndarray
    pose: CameraPose
    intrinsics: Intrinsics
    depth: np.ndarray
    has_depth: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
            raise DatasetError(f"image {self.id}: expected uint8 (H, W, 3), got {img.dtype} {img.shape}")
        depth = np.asarray(self.depth, dtype=np.float32)
        shape = self.intrinsics.shape
        if img.shape[:2] != shape or depth.shape != shape:
            raise DatasetError(
                f"image {self.id}: dimension mismatch (image {img.shape[:2]}, depth {depth.shape}, "
                f"intrinsics {shape})"
            )
        img = img.copy()
        depth = depth.copy()
        img.flags.writeable = False
        depth.flags.writeable = False
        mask = depth_mask(depth)
        mask.flags.writeable = False
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "has_depth", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.shape

    @property
    def intensities(self) -> np.ndarray:
        """Image as float64 in [0, 1]."""
        return self.image.astype(np.float64) / 255.0

    def equals(self, other: PosedImage) -> bool:
        """Exact equality of every field (depth compared bitwise, NaN-aware)."""
        return (
            self.id == other.id
            and self.name == other.name
            and self.intrinsics == other.intrinsics
            and self.pose.same_as(other.pose)
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.depth.view(np.uint32), other.depth.view(np.uint32))
        )


# -- PFM ---------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write a single-channel float map. Rows are stored bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise DomainError("write_pfm expects a 2-D array")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM as float32 (H, W), top row first."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read depth map {path}: {e}") from e
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if m is None:
        raise DatasetError(f"{path}: not a PFM file")
    if m.group(1) != b"Pf":
        raise DatasetError(f"{path}: expected grayscale PFM ('Pf'), got color")
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    if len(body) < 4 * w * h:
        raise DatasetError(f"{path}: truncated PFM data")
    data = np.frombuffer(body[: 4 * w * h], dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


# -- PNG ---------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except (OSError, FileNotFoundError) as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# -- text files --------------------------------------------------------------


def _records(path: Path):
    try:
        text = path.read_text()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line.split()


def _read_cameras(path: Path) -> dict[int, Intrinsics]:
    cameras = {}
    for lineno, f in _records(path):
        if len(f) != 8 or f[1] != "PINHOLE":
            raise DatasetError(f"{path}:{lineno}: expected 'ID PINHOLE W H fx fy cx cy'")
        try:
            cam_id = int(f[0])
            cameras[cam_id] = Intrinsics(
                fx=float(f[4]), fy=float(f[5]), cx=float(f[6]), cy=float(f[7]), width=int(f[2]), height=int(f[3])
            )
        except (ValueError, DomainError) as e:
            raise DatasetError(f"{path}:{lineno}: {e}") from e
    return cameras


def load_dataset(root) -> list[PosedImage]:
    """Load every registered image under ``root``, sorted by id.

    Quaternions are normalized on load; a zero quaternion is an error.
    """
    root = Path(root)
    cameras_path, images_path = root / "cameras.txt", root / "images.txt"
    for p in (cameras_path, images_path):
        if not p.is_file():
            raise DatasetError(f"missing dataset file: {p}")
    cameras = _read_cameras(cameras_path)

    images = []
    seen = set()
    for lineno, f in _records(images_path):
        if len(f) != 10:
            raise DatasetError(f"{images_path}:{lineno}: expected 10 fields, got {len(f)}")
        try:
            image_id = int(f[0])
            q = [float(v) for v in f[1:5]]
            t = [float(v) for v in f[5:8]]
            cam_id = int(f[8])
        except ValueError as e:
            raise DatasetError(f"{images_path}:{lineno}: {e}") from e
        name = f[9]
        if image_id in seen:
            raise DatasetError(f"{images_path}:{lineno}: duplicate image id {image_id}")
        seen.add(image_id)
        if cam_id not in cameras:
            raise DatasetError(f"{images_path}:{lineno}: unknown camera id {cam_id}")
        try:
            pose = CameraPose(normalize_quaternion(q), t)
        except DomainError as e:
            raise DatasetError(f"image {image_id}: invalid pose: {e}") from e

        img_path = root / "images" / f"{name}.png"
        depth_path = root / "depths" / f"{name}.pfm"
        if not img_path.is_file():
            raise DatasetError(f"missing image file: {img_path}")
        if not depth_path.is_file():
            raise DatasetError(f"missing depth file: {depth_path}")
        images.append(
            PosedImage(
                id=image_id,
                name=name,
                image=read_png(img_path),
                pose=pose,
                intrinsics=cameras[cam_id],
                depth=read_pfm(depth_path),
            )
        )
    images.sort(key=lambda im: im.id)
    logger.debug("loaded %d images from %s", len(images), root)
    return images


def write_dataset(root, images: list[PosedImage]) -> None:
    """Write ``images`` under ``root`` in the layout read by :func:`load_dataset`.

    Images sharing identical intrinsics share one camera record.
    """
    root = Path(root)
    ids = [im.id for im in images]
    if len(set(ids)) != len(ids):
        raise DatasetError("image ids must be unique")
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "depths").mkdir(parents=True, exist_ok=True)
        cam_ids: dict[Intrinsics, int] = {}
        for im in sorted(images, key=lambda im: im.id):
            cam_ids.setdefault(im.intrinsics, len(cam_ids) + 1)
        lines = ["# CAMERA_ID MODEL WIDTH HEIGHT fx fy cx cy"]
        for K, cid in cam_ids.items():
            lines.append(f"{cid} PINHOLE {K.width} {K.height} {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}")
        (root / "cameras.txt").write_text("\n".join(lines) + "\n")

        lines = ["# IMAGE_ID qw qx qy qz tx ty tz CAMERA_ID NAME (world-to-camera)"]
        for im in sorted(images, key=lambda im: im.id):
            vals = " ".join(repr(float(v)) for v in (*im.pose.qvec, *im.pose.tvec))
            lines.append(f"{im.id} {vals} {cam_ids[im.intrinsics]} {im.name}")
            write_png(root / "images" / f"{im.name}.png", im.image)
            write_pfm(root / "depths" / f"{im.name}.pfm", im.depth)
        (root / "images.txt").write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {root}: {e}") from e
