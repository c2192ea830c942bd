"""Synthetic underwater scenes rendered through the image formation model.

Scenes are height fields: the world is split into square cells on the
(x, y) plane, each cell is a column filling ``z >= height``, so the visible
surface is ``z = height(x, y)`` seen by cameras at smaller z looking towards
+z. Every cell also carries an albedo (the clean colour ``J``). Rays are
cast by walking the cells they cross, which is exact for this geometry,
including step edges and the vertical walls between columns.

Rendering of a pixel: cast the ray through its centre, read the albedo of
the hit cell, compute the range ``z`` to the hit point, apply the model,
add Gaussian noise, clamp to [0, 1] and quantize to 8 bits. Depth maps store
axial depth.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, DomainError
from .geometry import CameraPose, Intrinsics
from .ingest import PosedImage, write_dataset, write_png
from .uifm import UifmParams

logger = logging.getLogger(__name__)

PRESETS = ("corridor", "two_plane", "flat_chart", "plane")

# 12 chart patches, values on the 8-bit grid so truth images reproduce them exactly
CHART_COLORS = {
    "red": (191, 38, 38),
    "yellow": (217, 204, 51),
    "green": (51, 153, 64),
    "light_blue": (115, 178, 217),
    "dark_blue": (38, 51, 153),
    "magenta": (191, 64, 153),
    "brick": (153, 77, 51),
    "orange": (230, 128, 38),
    "turquoise": (64, 178, 166),
    "purple": (102, 51, 140),
    "beige": (204, 178, 140),
    "brown": (102, 69, 38),
}


@dataclass
class ChartLayout:
    """A 12-patch chart lying on the surface: patch rectangles in world (x, y)."""

    chart_id: str
    rects: list  # 12 × (x0, y0, x1, y1)
    colors: np.ndarray  # (12, 3) float in [0, 1]


@dataclass
class SceneSpec:
    """Everything needed to render a synthetic dataset."""

    height_field: np.ndarray  # (ny, nx) surface z per cell
    albedo: np.ndarray  # (ny, nx, 3) clean colour per cell, in [0, 1]
    trajectory: list  # CameraPose per view
    intrinsics: Intrinsics
    params: UifmParams
    noise_sigma: float = 0.0
    seed: int = 0
    origin: tuple = (0.0, 0.0)  # world (x, y) of the grid corner
    cell_size: float = 1.0
    name: str = "scene"
    charts: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.height_field = np.asarray(self.height_field, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.albedo.shape != self.height_field.shape + (3,):
            raise DomainError("albedo must have shape height_field.shape + (3,)")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise DomainError("albedo must lie in [0, 1]")
        if not self.trajectory:
            raise DomainError("trajectory must not be empty")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if not self.cell_size > 0:
            raise DomainError("cell_size must be positive")

    def view_name(self, i: int) -> str:
        return f"view_{i:03d}"


# -- ray casting -----------------------------------------------------------------


def pixel_rays(K: Intrinsics, pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World origin and per-pixel world directions for rays through pixel centres.

    Directions are scaled so the camera-frame z component is 1: the ray
    parameter of a hit point is its axial depth. Also returns the camera-frame
    direction norms (range = depth * norm).
    """
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    dc = np.stack([(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, np.ones(u.shape)], axis=-1).reshape(-1, 3)
    world_from_cam = pose.world_from_cam
    d = _rotate(world_from_cam.rotation, dc)
    return world_from_cam.translation, d, np.linalg.norm(dc, axis=-1)


def _rotate(R: np.ndarray, v: np.ndarray) -> np.ndarray:
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    return np.stack([R[i, 0] * x + R[i, 1] * y + R[i, 2] * z for i in range(3)], axis=-1)


def raycast(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray, max_iter: int = 100_000):
    """Cast rays ``origin + t·dirs`` against the column height field.

    Returns ``(t, iy, ix)``; ``t`` is NaN for rays that miss, ``iy``/``ix``
    index the hit cell (-1 on miss).
    """
    hf = scene.height_field
    ny, nx = hf.shape
    s = scene.cell_size
    x0, y0 = scene.origin
    n = len(dirs)
    ox, oy, oz = (float(c) for c in origin)
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]

    t_hit = np.full(n, np.nan)
    hit_iy = np.full(n, -1, dtype=np.int64)
    hit_ix = np.full(n, -1, dtype=np.int64)

    hmin, hmax = float(hf.min()), float(hf.max())
    live = dz > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_in = np.where(live, np.maximum(0.0, (hmin - oz) / dz), np.inf)
        t_end = np.where(live, (hmax - oz) / dz, -np.inf)
    live &= t_end >= 0

    idx = np.flatnonzero(live)
    dx, dy, dz = dx[idx], dy[idx], dz[idx]
    t_in, t_end = t_in[idx], t_end[idx]
    px = ox + t_in * dx
    py = oy + t_in * dy
    ix = np.floor((px - x0) / s).astype(np.int64)
    iy = np.floor((py - y0) / s).astype(np.int64)
    step_x = np.where(dx > 0, 1, -1)
    step_y = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_x = np.where(dx > 0, x0 + (ix + 1) * s, x0 + ix * s)
        next_y = np.where(dy > 0, y0 + (iy + 1) * s, y0 + iy * s)
        tmax_x = np.where(dx != 0, (next_x - ox) / dx, np.inf)
        tmax_y = np.where(dy != 0, (next_y - oy) / dy, np.inf)
        tdelta_x = np.where(dx != 0, s / np.abs(dx), np.inf)
        tdelta_y = np.where(dy != 0, s / np.abs(dy), np.inf)

    for _ in range(max_iter):
        if idx.size == 0:
            break
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        h = np.where(inside, hf[np.clip(iy, 0, ny - 1), np.clip(ix, 0, nx - 1)], np.inf)
        t_out = np.minimum(tmax_x, tmax_y)
        th = np.maximum(t_in, (h - oz) / dz)
        hit = inside & (th <= t_out)
        if hit.any():
            j = idx[hit]
            t_hit[j] = th[hit]
            hit_iy[j] = iy[hit]
            hit_ix[j] = ix[hit]
        # rays past the top of the field without a hit left the grid for good
        keep = ~hit & (t_out <= t_end)
        idx, ix, iy = idx[keep], ix[keep], iy[keep]
        dx, dy, dz, t_end = dx[keep], dy[keep], dz[keep], t_end[keep]
        tmax_x, tmax_y = tmax_x[keep], tmax_y[keep]
        tdelta_x, tdelta_y = tdelta_x[keep], tdelta_y[keep]
        step_x, step_y = step_x[keep], step_y[keep]
        go_x = tmax_x < tmax_y
        t_in = np.where(go_x, tmax_x, tmax_y)
        ix = ix + np.where(go_x, step_x, 0)
        iy = iy + np.where(go_x, 0, step_y)
        tmax_x = tmax_x + np.where(go_x, tdelta_x, 0.0)
        tmax_y = tmax_y + np.where(go_x, 0.0, tdelta_y)
    else:  # pragma: no cover
        raise RuntimeError("ray walk did not terminate")
    return t_hit, hit_iy, hit_ix


def quantize(x: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding half up."""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


@dataclass
class RenderedView:
    image: PosedImage
    truth: np.ndarray  # uint8 (H, W, 3), clean albedo
    distance: np.ndarray  # float64 (H, W) range to the hit point, NaN on miss
    empty: bool


def render_view(scene: SceneSpec, index: int) -> RenderedView:
    """Render view ``index`` of the scene trajectory."""
    K = scene.intrinsics
    pose = scene.trajectory[index]
    origin, dirs, norms = pixel_rays(K, pose)
    t, iy, ix = raycast(scene, origin, dirs)
    hit = np.isfinite(t)
    h, w = K.height, K.width

    J = np.zeros((h * w, 3))
    J[hit] = scene.albedo[iy[hit], ix[hit]]
    z = np.where(hit, t * norms, 0.0)
    p = scene.params
    att = np.exp(-p.beta * z[:, None])
    I = J * att + p.B * (1.0 - np.exp(-p.gamma * z[:, None]))
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(scene.seed), int(index)]))
        I = I + rng.normal(0.0, scene.noise_sigma, size=I.shape)
    image = quantize(I)
    image[~hit] = 0
    truth = quantize(J)
    truth[~hit] = 0

    depth = np.where(hit, t, np.nan).astype(np.float32)
    empty = not hit.any()
    if empty:
        warnings.warn(f"view {index} sees none of the height field", stacklevel=2)
    posed = PosedImage(
        id=index,
        name=scene.view_name(index),
        image=image.reshape(h, w, 3),
        pose=pose,
        intrinsics=K,
        depth=depth.reshape(h, w),
    )
    return RenderedView(posed, truth.reshape(h, w, 3), np.where(hit, z, np.nan).reshape(h, w), empty)


def render_all(scene: SceneSpec) -> list[RenderedView]:
    return [render_view(scene, i) for i in range(len(scene.trajectory))]


# -- charts --------------------------------------------------------------------


def chart_regions(scene: SceneSpec, chart: ChartLayout, index: int, margin: float = 0.1):
    """Pixel rectangles ``(x, y, w, h)`` inside each patch, as seen from view ``index``.

    Each patch is shrunk by ``margin`` (fraction of its size) in world units,
    its corners projected, and the largest pixel rectangle whose cells lie
    within the projected corners' inner bounds is returned. None for patches
    not fully in view.
    """
    K = scene.intrinsics
    cam = scene.trajectory[index].cam_from_world
    out = []
    for x0, y0, x1, y1 in chart.rects:
        mx, my = margin * (x1 - x0), margin * (y1 - y0)
        xs = (x0 + mx, x1 - mx)
        ys = (y0 + my, y1 - my)
        pts = []
        for x in xs:
            for y in ys:
                yi = int(np.floor((y - scene.origin[1]) / scene.cell_size))
                xi = int(np.floor((x - scene.origin[0]) / scene.cell_size))
                pts.append((x, y, scene.height_field[yi, xi]))
        pc = cam.apply(np.array(pts))
        if np.any(pc[:, 2] <= 0):
            out.append(None)
            continue
        u = K.fx * pc[:, 0] / pc[:, 2] + K.cx
        v = K.fy * pc[:, 1] / pc[:, 2] + K.cy
        us, vs = np.sort(u), np.sort(v)
        # inner bounds of the projected quad: second smallest / second largest
        left, right = int(np.ceil(us[1])), int(np.floor(us[2])) - 1
        top, bottom = int(np.ceil(vs[1])), int(np.floor(vs[2])) - 1
        if right < left or bottom < top or left < 0 or top < 0 or right >= K.width or bottom >= K.height:
            out.append(None)
            continue
        out.append((left, top, right - left + 1, bottom - top + 1))
    return out


def chart_lines(scene: SceneSpec) -> list[str]:
    """Lines of a ``charts.txt`` file for every view/chart with all 12 patches visible."""
    lines = []
    for i in range(len(scene.trajectory)):
        for chart in scene.charts:
            regions = chart_regions(scene, chart, i)
            if any(r is None for r in regions):
                continue
            fields = [scene.view_name(i), chart.chart_id]
            for (x, y, w, h), col in zip(regions, chart.colors):
                fields += [str(x), str(y), str(w), str(h)] + [repr(float(c)) for c in col]
            lines.append(" ".join(fields))
    return lines


# -- export ----------------------------------------------------------------------


def format_params(params: UifmParams) -> str:
    lines = [f"mode = {params.mode}"]
    for n in ("beta", "B", "gamma"):
        lines.append(f"{n} = " + " ".join(repr(float(v)) for v in getattr(params, n)))
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> UifmParams:
    kv = parse_key_values(text)
    try:
        return UifmParams(
            beta=[float(v) for v in kv["beta"].split()],
            B=[float(v) for v in kv["B"].split()],
            gamma=[float(v) for v in kv["gamma"].split()],
            mode=kv.get("mode", "full"),
        )
    except KeyError as e:
        raise DatasetError(f"params file lacks {e}") from e


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def export(scene: SceneSpec, out_root) -> list[RenderedView]:
    """Render every view and write the dataset plus ground truth under ``out_root``.

    Adds ``truth/NAME.png`` clean images, ``truth/params.txt``, ``scene.txt``
    (the scene settings) and, for scenes with charts, ``charts.txt``.
    """
    out_root = Path(out_root)
    views = render_all(scene)
    write_dataset(out_root, [v.image for v in views])
    try:
        (out_root / "truth").mkdir(parents=True, exist_ok=True)
        for v in views:
            write_png(out_root / "truth" / f"{v.image.name}.png", v.truth)
        (out_root / "truth" / "params.txt").write_text(format_params(scene.params))
        if scene.meta:
            (out_root / "scene.txt").write_text(format_scene_file(scene.meta))
        if scene.charts:
            (out_root / "charts.txt").write_text(
                "# NAME CHART_ID 12 x (x y w h Er Eg Eb)\n" + "\n".join(chart_lines(scene)) + "\n"
            )
    except OSError as e:
        raise DatasetError(f"cannot write to {out_root}: {e}") from e
    return views


def load_truth_params(root) -> UifmParams:
    return parse_params((Path(root) / "truth" / "params.txt").read_text())


# -- presets ---------------------------------------------------------------------


def _smooth_texture(xc: np.ndarray, yc: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Smooth colour field from a few random sinusoids, values in about [0.15, 0.85]."""
    out = np.empty(xc.shape + (3,))
    for c in range(3):
        acc = np.zeros(xc.shape)
        for _ in range(4):
            fx, fy = rng.uniform(-1, 1, 2) / scale
            ph = rng.uniform(0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (fx * xc + fy * yc) + ph)
        out[..., c] = 0.5 + 0.35 * acc / 4.0
    return np.round(out * 255.0) / 255.0


def _grid(x_range, y_range, cell):
    nx = int(round((x_range[1] - x_range[0]) / cell))
    ny = int(round((y_range[1] - y_range[0]) / cell))
    xc = x_range[0] + (np.arange(nx) + 0.5) * cell
    yc = y_range[0] + (np.arange(ny) + 0.5) * cell
    return np.meshgrid(xc, yc)


def _params(kw, beta, B, gamma) -> UifmParams:
    return UifmParams(
        beta=kw.pop("beta", beta),
        B=kw.pop("B", B),
        gamma=kw.pop("gamma", gamma),
        mode=kw.pop("mode", "full"),
    )


CORRIDOR_PARAMS = dict(beta=(0.5, 0.3, 0.15), B=(0.10, 0.15, 0.25), gamma=(0.6, 0.4, 0.2))


def corridor(
    n_views: int = 20,
    near: float = 1.0,
    far: float = 8.0,
    width: int = 96,
    height: int = 72,
    focal: float = 80.0,
    relief: float = 0.03,
    noise_sigma: float = 0.01,
    seed: int = 0,
    **kw,
) -> SceneSpec:
    """Camera dollying away from a textured wall, view 0 nearest.

    View ``i`` sits ``near + i (far - near) / (n_views - 1)`` metres from the
    wall, with a small deterministic lateral drift, looking at the wall centre.
    """
    params = _params(kw, **CORRIDOR_PARAMS)
    if kw:
        raise DomainError(f"unknown corridor settings {sorted(kw)}")
    cell = 1.0 / 64.0
    half_w = far * width / focal / 2 + 1.0
    half_h = far * height / focal / 2 + 1.0
    xr = (-np.ceil(half_w), np.ceil(half_w))
    yr = (-np.ceil(half_h), np.ceil(half_h))
    xc, yc = _grid(xr, yr, cell)
    heights = relief * np.sin(2 * np.pi * xc / 1.7) * np.cos(2 * np.pi * yc / 1.3)
    tex_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_001]))
    albedo = _smooth_texture(xc, yc, tex_rng, scale=1.5)

    K = Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    dists = np.linspace(near, far, n_views)
    traj = []
    for i, d in enumerate(dists):
        c = (0.15 * np.sin(0.7 * i), 0.1 * np.cos(0.9 * i), -float(d))
        traj.append(CameraPose.look_at(c, (0.0, 0.0, 0.0)))
    meta = dict(
        preset="corridor", n_views=n_views, near=near, far=far, width=width, height=height, focal=focal,
        relief=relief, noise_sigma=noise_sigma, seed=seed, **params.as_dict(),
    )
    return SceneSpec(
        heights, albedo, traj, K, params, noise_sigma, seed, (xr[0], yr[0]), cell, "corridor", meta=meta
    )


def two_plane(
    width: int = 80,
    height: int = 60,
    focal: float = 60.0,
    near_z: float = 3.0,
    far_z: float = 6.0,
    step_x: float = 1.25,
    camera_x=(0.5, 0.0, -0.5),
    noise_sigma: float = 0.0,
    seed: int = 0,
    **kw,
) -> SceneSpec:
    """Near half-plane (x < step_x, z = near_z) in front of a far one (z = far_z).

    Cameras translate along x with identity rotation. With the defaults each
    plane shifts by a whole number of pixels between views (focal·baseline /
    depth), so pixel centres map onto pixel centres and the set of pairs
    surviving the consistency check equals the set of visible points, which
    :func:`two_plane_visible_pairs` enumerates analytically.
    """
    params = _params(kw, (0.3, 0.2, 0.1), (0.1, 0.15, 0.2), (0.35, 0.25, 0.15))
    if kw:
        raise DomainError(f"unknown two_plane settings {sorted(kw)}")
    cell = 1.0 / 16.0
    xr, yr = (-8.0, 12.0), (-8.0, 8.0)
    xc, yc = _grid(xr, yr, cell)
    heights = np.where(xc < step_x, near_z, far_z)
    tex_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_002]))
    albedo = _smooth_texture(xc, yc, tex_rng, scale=1.0)
    K = Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    traj = [CameraPose(np.array([1.0, 0, 0, 0]), np.array([-float(x), 0.0, 0.0])) for x in camera_x]
    meta = dict(
        preset="two_plane", width=width, height=height, focal=focal, near_z=near_z, far_z=far_z, step_x=step_x,
        camera_x=" ".join(repr(float(x)) for x in camera_x), noise_sigma=noise_sigma, seed=seed, **params.as_dict(),
    )
    scene = SceneSpec(heights, albedo, traj, K, params, noise_sigma, seed, (xr[0], yr[0]), cell, "two_plane", meta=meta)
    scene.meta["_geometry"] = (near_z, far_z, step_x)
    return scene


def flat_chart(
    n_views: int = 8,
    near: float = 2.5,
    far: float = 7.0,
    width: int = 128,
    height: int = 96,
    focal: float = 100.0,
    noise_sigma: float = 0.01,
    seed: int = 0,
    **kw,
) -> SceneSpec:
    """Flat textured wall carrying one 12-patch colour chart, viewed from several distances."""
    params = _params(kw, **CORRIDOR_PARAMS)
    if kw:
        raise DomainError(f"unknown flat_chart settings {sorted(kw)}")
    cell = 1.0 / 64.0
    half_w = far * width / focal / 2 + 1.0
    half_h = far * height / focal / 2 + 1.0
    xr = (-np.ceil(half_w), np.ceil(half_w))
    yr = (-np.ceil(half_h), np.ceil(half_h))
    xc, yc = _grid(xr, yr, cell)
    heights = np.zeros(xc.shape)
    tex_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_003]))
    albedo = _smooth_texture(xc, yc, tex_rng, scale=1.5)

    patch, gap = 0.5, 0.0625
    cols, rows = 4, 3
    cw = cols * patch + (cols - 1) * gap
    ch = rows * patch + (rows - 1) * gap
    x_start = -np.round(cw / 2 * 64) / 64
    y_start = -np.round(ch / 2 * 64) / 64
    colors = np.array(list(CHART_COLORS.values()), dtype=np.float64) / 255.0
    rects = []
    for r in range(rows):
        for c in range(cols):
            x0 = x_start + c * (patch + gap)
            y0 = y_start + r * (patch + gap)
            rects.append((x0, y0, x0 + patch, y0 + patch))
            sel = (xc >= x0) & (xc < x0 + patch) & (yc >= y0) & (yc < y0 + patch)
            albedo[sel] = colors[len(rects) - 1]
    chart = ChartLayout("chart0", rects, colors)

    K = Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    traj = []
    for i, d in enumerate(np.linspace(near, far, n_views)):
        c = (0.2 * np.sin(1.3 * i), 0.15 * np.cos(1.1 * i), -float(d))
        traj.append(CameraPose.look_at(c, (0.0, 0.0, 0.0)))
    meta = dict(
        preset="flat_chart", n_views=n_views, near=near, far=far, width=width, height=height, focal=focal,
        noise_sigma=noise_sigma, seed=seed, **params.as_dict(),
    )
    return SceneSpec(
        heights, albedo, traj, K, params, noise_sigma, seed, (xr[0], yr[0]), cell, "flat_chart", [chart], meta
    )


def plane(
    distance: float = 2.0,
    width: int = 41,
    height: int = 31,
    focal: float = 40.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    **kw,
) -> SceneSpec:
    """One fronto-parallel textured plane seen by a single camera; odd sizes put a pixel centre on axis."""
    params = _params(kw, **CORRIDOR_PARAMS)
    if kw:
        raise DomainError(f"unknown plane settings {sorted(kw)}")
    cell = 1.0 / 32.0
    xr, yr = (-4.0, 4.0), (-4.0, 4.0)
    xc, yc = _grid(xr, yr, cell)
    heights = np.full(xc.shape, float(distance))
    tex_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1_000_004]))
    albedo = _smooth_texture(xc, yc, tex_rng, scale=0.8)
    K = Intrinsics(focal, focal, width / 2.0, height / 2.0, width, height)
    traj = [CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3))]
    meta = dict(
        preset="plane", distance=distance, width=width, height=height, focal=focal, noise_sigma=noise_sigma,
        seed=seed, **params.as_dict(),
    )
    return SceneSpec(heights, albedo, traj, K, params, noise_sigma, seed, (xr[0], yr[0]), cell, "plane", meta=meta)


_BUILDERS = {"corridor": corridor, "two_plane": two_plane, "flat_chart": flat_chart, "plane": plane}


def make_preset(name: str, **overrides) -> SceneSpec:
    if name not in _BUILDERS:
        raise DomainError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return _BUILDERS[name](**overrides)


# -- scene files ---------------------------------------------------------------


_INT_KEYS = {"n_views", "width", "height", "seed"}
_VEC_KEYS = {"beta", "B", "gamma", "camera_x"}


def format_scene_file(meta: dict) -> str:
    lines = ["# synthetic scene settings (key = value)"]
    for k, v in meta.items():
        if k.startswith("_"):
            continue
        if isinstance(v, (list, tuple)):
            v = " ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def scene_from_settings(kv: dict) -> SceneSpec:
    kv = dict(kv)
    preset = kv.pop("preset", None)
    if preset is None:
        raise DatasetError("scene file must name a preset")
    overrides = {}
    for k, v in kv.items():
        if k in _INT_KEYS:
            overrides[k] = int(v)
        elif k in _VEC_KEYS:
            overrides[k] = tuple(float(x) for x in str(v).split())
        elif k == "mode":
            overrides[k] = v
        else:
            overrides[k] = float(v)
    try:
        return make_preset(preset, **overrides)
    except TypeError as e:
        raise DatasetError(f"bad scene settings: {e}") from e


def load_scene_file(path) -> SceneSpec:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"cannot read scene file {path}: {e}") from e
    return scene_from_settings(parse_key_values(text))


# -- analytic oracle for the two-plane scene ----------------------------------


def two_plane_visible_pairs(scene: SceneSpec, i: int, j: int) -> set[tuple[int, int]]:
    """Analytic pixel pairs between views ``i`` and ``j`` of a two-plane scene.

    Works from the plane equations alone (no ray walking, no depth maps): a
    pixel of ``i`` is paired when the surface point under its centre lies
    in front of ``j``, projects inside ``j``, and the segment from ``j`` to it
    does not pass through the solid. Requires the pixel-aligned camera layout
    of the :func:`two_plane` preset.
    """
    near_z, far_z, step = scene.meta["_geometry"]
    K = scene.intrinsics
    ci = scene.trajectory[i].center
    cj = scene.trajectory[j].center
    x_lo = scene.origin[0]
    x_hi = x_lo + scene.height_field.shape[1] * scene.cell_size
    y_lo = scene.origin[1]
    y_hi = y_lo + scene.height_field.shape[0] * scene.cell_size
    pairs = set()
    for v in range(K.height):
        for u in range(K.width):
            dx = (u + 0.5 - K.cx) / K.fx
            dy = (v + 0.5 - K.cy) / K.fy
            # first surface along the ray from camera i
            X = ci[0] + dx * (near_z - ci[2])
            if X < step:
                P = np.array([X, ci[1] + dy * (near_z - ci[2]), near_z])
            else:
                Xf = ci[0] + dx * (far_z - ci[2])
                if Xf < step:  # wall facing -x; not reachable with the preset layout
                    continue
                P = np.array([Xf, ci[1] + dy * (far_z - ci[2]), far_z])
            if not (x_lo <= P[0] < x_hi and y_lo <= P[1] < y_hi):
                continue
            q = P - cj
            if q[2] <= 0:
                continue
            u2 = K.fx * q[0] / q[2] + K.cx
            v2 = K.fy * q[1] / q[2] + K.cy
            if not (0 <= u2 < K.width and 0 <= v2 < K.height):
                continue
            if P[2] == far_z:
                # where the segment j -> P crosses the near plane's height
                xm = cj[0] + q[0] * (near_z - cj[2]) / q[2]
                if xm < step:
                    continue
            pairs.add((v * K.width + u, int(np.floor(v2)) * K.width + int(np.floor(u2))))
    return pairs
