"""Rigid transforms, pinhole projection and cross-view pixel transfer.

Pixel convention: continuous pixel coordinates put the centre of the top-left
pixel at (0.5, 0.5), as in the usual reconstruction text formats. The integer
cell containing a continuous coordinate (u, v) is (floor(u), floor(v)), and a
cell (col, row) is represented by its centre (col + 0.5, row + 0.5).

Poses are stored world-to-camera (``cam_from_world``). The camera-to-world
transform used to lift a back-projected point into the world frame is obtained
by inverting it, see :attr:`CameraPose.world_from_cam`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import DomainError

if TYPE_CHECKING:
    from .ingest import PosedImage

_ORTHO_TOL = 1e-9


def normalize_quaternion(q) -> np.ndarray:
    """Return ``q`` scaled to unit norm.

    Normalization is repeated until it reaches a fixed point, so applying this
    function to its own output returns the identical bits. That keeps
    write/load round trips exact.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(q)):
        raise DomainError(f"non-finite quaternion {q}")
    n = np.sqrt(np.dot(q, q))
    if n == 0.0:
        raise DomainError("cannot normalize a zero quaternion")
    q = q / n
    for _ in range(4):
        nq = q / np.sqrt(np.dot(q, q))
        if np.array_equal(nq, q):
            break
        q = nq
    return q


def quaternion_to_rotation(q) -> np.ndarray:
    qw, qx, qy, qz = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * qy * qy - 2 * qz * qz, 2 * qx * qy - 2 * qz * qw, 2 * qx * qz + 2 * qy * qw],
            [2 * qx * qy + 2 * qz * qw, 1 - 2 * qx * qx - 2 * qz * qz, 2 * qy * qz - 2 * qx * qw],
            [2 * qx * qz - 2 * qy * qw, 2 * qy * qz + 2 * qx * qw, 1 - 2 * qx * qx - 2 * qy * qy],
        ]
    )


def rotation_to_quaternion(R) -> np.ndarray:
    """Convert a rotation matrix to a unit quaternion (qw, qx, qy, qz), qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return normalize_quaternion(q)


@dataclass(frozen=True, eq=False)
class Transform:
    """Rigid transform ``p -> R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("non-finite transform")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation is not orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Transform:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        R, t = self.rotation, self.translation
        # elementwise rather than matmul: BLAS summation order depends on the
        # batch size, and single-pixel and batched transfers must agree bitwise
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return np.stack(
            [
                R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0],
                R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1],
                R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2],
            ],
            axis=-1,
        )

    def compose(self, other: Transform) -> Transform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Transform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> Transform:
        Rt = self.rotation.T
        return Transform(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def allclose(self, other: Transform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera pose as a unit quaternion (qw, qx, qy, qz) and translation."""

    qvec: np.ndarray
    tvec: np.ndarray
    _cam_from_world: Transform = field(init=False, repr=False)

    def __post_init__(self):
        q = np.array(self.qvec, dtype=np.float64).reshape(4)
        t = np.array(self.tvec, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise DomainError("non-finite pose")
        if abs(np.sqrt(np.dot(q, q)) - 1.0) > 1e-6:
            raise DomainError(f"pose quaternion is not unit norm: {q}")
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "qvec", q)
        object.__setattr__(self, "tvec", t)
        object.__setattr__(self, "_cam_from_world", Transform(quaternion_to_rotation(q), t))

    @classmethod
    def from_transform(cls, cam_from_world: Transform) -> CameraPose:
        return cls(rotation_to_quaternion(cam_from_world.rotation), cam_from_world.translation)

    @classmethod
    def look_at(cls, center, target, up=(0.0, -1.0, 0.0)) -> CameraPose:
        """Pose of a camera at ``center`` whose optical axis (+z) points at ``target``.

        Camera axes: +x right, +y down, +z forward.
        """
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R_wc = np.stack([x, y, z], axis=1)  # columns: camera axes in world
        q = rotation_to_quaternion(R_wc.T)
        R = quaternion_to_rotation(q)
        return cls(q, -R @ center)

    @property
    def cam_from_world(self) -> Transform:
        return self._cam_from_world

    @property
    def world_from_cam(self) -> Transform:
        return self._cam_from_world.inverse()

    @property
    def center(self) -> np.ndarray:
        return self.world_from_cam.translation

    def same_as(self, other: CameraPose) -> bool:
        return bool(np.array_equal(self.qvec, other.qvec) and np.array_equal(self.tvec, other.tvec))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (int(self.width) > 0 and int(self.height) > 0):
            raise DomainError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [[1.0 / self.fx, 0.0, -self.cx / self.fx], [0.0, 1.0 / self.fy, -self.cy / self.fy], [0.0, 0.0, 1.0]]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


def _as_uv(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 3:
        w = x[..., 2:3]
        if np.any(w == 0):
            raise DomainError("homogeneous pixel at infinity")
        return x[..., :2] / w
    if x.shape[-1] != 2:
        raise DomainError(f"expected pixel coordinates of length 2 or 3, got shape {x.shape}")
    return x


def homogeneous(uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    return np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)


def backproject(x, d, K: Intrinsics) -> np.ndarray:
    """Camera-frame point ``K⁻¹ · d · x`` for pixel(s) ``x`` at axial depth ``d``.

    The third coordinate of the result is ``d`` exactly.
    """
    uv = _as_uv(x)
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise DomainError("depth must be strictly positive")
    X = (uv[..., 0] - K.cx) / K.fx * d
    Y = (uv[..., 1] - K.cy) / K.fy * d
    return np.stack(np.broadcast_arrays(X, Y, d), axis=-1)


def project(points, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points; returns (uv, z). uv is NaN where z <= 0."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z > 0, z, np.nan)
        u = K.fx * (p[..., 0] / safe) + K.cx
        v = K.fy * (p[..., 1] / safe) + K.cy
    return np.stack([u, v], axis=-1), z


def range_of(x, d, K: Intrinsics) -> np.ndarray | float:
    """Euclidean distance from the camera centre to the back-projected point."""
    r = np.linalg.norm(backproject(x, d, K), axis=-1)
    return float(r) if np.ndim(r) == 0 else r


def cell_of(uv) -> np.ndarray:
    """Integer (col, row) cell containing continuous coordinates ``uv``."""
    return np.floor(np.asarray(uv, dtype=np.float64)).astype(np.int64)


def cell_centers(flat_index, width: int) -> np.ndarray:
    flat_index = np.asarray(flat_index, dtype=np.int64)
    row, col = np.divmod(flat_index, width)
    return np.stack([col + 0.5, row + 0.5], axis=-1)


def same_camera(src: PosedImage, dst: PosedImage) -> bool:
    return src.pose.same_as(dst.pose) and src.intrinsics == dst.intrinsics


def relative_transform(src: PosedImage, dst: PosedImage) -> Transform:
    """``dst_from_world ∘ world_from_src``."""
    return dst.pose.cam_from_world.compose(src.pose.world_from_cam)


def transfer_points(uv, depth, src: PosedImage, dst: PosedImage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pixel transfer from ``src`` to ``dst``.

    Returns ``(uv_dst, points_dst, ok)`` where ``ok`` is False for points
    behind the destination camera or outside its image. Identical cameras
    short-circuit to the identity so that self-transfer is exact.
    """
    p_src = backproject(uv, depth, src.intrinsics)
    if same_camera(src, dst):
        uv2 = np.array(uv, dtype=np.float64)
        return uv2, p_src, dst.intrinsics.contains(uv2)
    p_dst = relative_transform(src, dst).apply(p_src)
    uv2, z = project(p_dst, dst.intrinsics)
    ok = (z > 0) & dst.intrinsics.contains(uv2)
    return uv2, p_dst, ok


def transfer_pixel(x1, src: PosedImage, dst: PosedImage) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Transfer pixel ``x1`` of ``src`` into ``dst`` using ``src``'s depth at ``x1``.

    Returns ``(x2, point_in_dst_cam)`` with ``x2`` homogeneous (w = 1), or None
    when the point falls behind ``dst`` or outside its image.
    """
    uv1 = _as_uv(x1)
    if not src.intrinsics.contains(uv1):
        raise DomainError(f"pixel {uv1} outside the source image")
    col, row = cell_of(uv1)
    if not src.has_depth[row, col]:
        raise DomainError(f"no depth at pixel {uv1}")
    d1 = float(src.depth[row, col])
    uv2, p, ok = transfer_points(uv1[None], np.array([d1]), src, dst)
    if not ok[0]:
        return None
    return homogeneous(uv2[0]), p[0]


def match_cells(src: PosedImage, dst: PosedImage, flat_index=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bidirectional consistency check for ``src`` cells against ``dst``.

    Each ``src`` cell centre is transferred with its own depth, the depth of
    ``dst`` is read at the cell containing the transferred point, and the
    centre of that ``dst`` cell is transferred back. A pair is kept when the
    back-transferred point lands in the starting cell. Because the backward
    step starts from a cell centre, each ``dst`` cell can only ever map back to
    one ``src`` cell, so matches are one-to-one.

    Returns ``(src_index, dst_index, ok)``; ``dst_index`` is -1 where not ok.
    Cells without depth are never ok.
    """
    if flat_index is None:
        flat_index = np.flatnonzero(src.has_depth.ravel())
    flat_index = np.asarray(flat_index, dtype=np.int64)
    w1 = src.intrinsics.width
    dst_index = np.full(flat_index.shape, -1, dtype=np.int64)
    has1 = src.has_depth.ravel()[flat_index]
    ok = has1.copy()
    if not ok.any():
        return flat_index, dst_index, ok

    idx = flat_index[ok]
    uv1 = cell_centers(idx, w1)
    d1 = src.depth.ravel()[idx].astype(np.float64)
    uv2, _, fwd = transfer_points(uv1, d1, src, dst)

    w2 = dst.intrinsics.width
    c2 = np.zeros((len(idx), 2), dtype=np.int64)
    c2[fwd] = cell_of(uv2[fwd])
    j2 = c2[:, 1] * w2 + c2[:, 0]
    good = fwd & dst.has_depth.ravel()[j2]

    uvb = cell_centers(j2[good], w2)
    d2 = dst.depth.ravel()[j2[good]].astype(np.float64)
    uv1b, _, back = transfer_points(uvb, d2, dst, src)
    cb = np.zeros((len(uvb), 2), dtype=np.int64)
    cb[back] = cell_of(uv1b[back])
    same = back & (cb[:, 1] * w1 + cb[:, 0] == idx[good])
    good[good] = same

    sub = np.flatnonzero(ok)
    ok[sub] = good
    dst_index[sub[good]] = j2[good]
    return flat_index, dst_index, ok


def roundtrip_consistent(x1, i1: PosedImage, i2: PosedImage) -> bool:
    """True iff pixel ``x1`` of ``i1`` and its transfer into ``i2`` match both ways.

    The forward step uses ``x1`` as given; the backward step starts from the
    centre of the ``i2`` cell containing the transferred point and reads
    ``i2``'s depth there (nearest-cell lookup). Any failing step gives False.
    """
    uv1 = _as_uv(x1)
    if not i1.intrinsics.contains(uv1):
        return False
    col, row = cell_of(uv1)
    if not i1.has_depth[row, col]:
        raise DomainError(f"no depth at pixel {uv1}")
    res = transfer_pixel(uv1, i1, i2)
    if res is None:
        return False
    c2, r2 = cell_of(res[0][:2])
    if not i2.has_depth[r2, c2]:
        return False
    back = transfer_pixel((c2 + 0.5, r2 + 0.5), i2, i1)
    if back is None:
        return False
    return bool(np.array_equal(cell_of(back[0][:2]), cell_of(uv1)))
