"""Cone-beam projection rendering.

Geometry convention (fixed, the basis for every test):
  * yaw angle beta is measured about +z (patient superior-inferior axis);
  * the source sits at (-sod*sin(beta), -sod*cos(beta), 0) relative to the
    isocenter, so beta = 0 is the frontal pose with the source on -y;
  * the detector is centered on the ray through the isocenter, perpendicular
    to it, at distance sdd from the source, with
        u axis = (cos(beta), -sin(beta), 0),  v axis = (0, 0, 1).

Two renderers share this geometry: a fixed-step trilinear ray marcher
(production) and an exact per-voxel chord-length traversal (test oracle,
exact for piecewise-constant volumes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .phantoms import VoxelVolume


class GeometryError(ValueError):
    pass


class ActionBoundError(ValueError):
    pass


@dataclass(frozen=True)
class ConeBeamGeometry:
    sod: float  # source-to-isocenter distance, mm
    sdd: float  # source-to-detector distance, mm
    nu: int  # detector columns
    nv: int  # detector rows
    pitch: float  # detector pixel size, mm
    beta: float = 0.0  # yaw, degrees
    pitch_angle: float = 0.0  # degrees, tilt about the rig u axis
    roll_angle: float = 0.0  # degrees, roll about the central ray

    def __post_init__(self):
        if not (0.0 < self.sod < self.sdd):
            raise GeometryError("need 0 < sod < sdd")
        if self.nu < 8 or self.nv < 8:
            raise GeometryError("detector needs >= 8 pixels per side")
        if self.pitch <= 0:
            raise GeometryError("pitch must be positive")

    def pose(self):
        """Source position, detector center, and unit axes (u, v) in mm.

        Angles are reduced mod 360 with fmod before the trig so poses at
        beta and beta + 360 are bit-identical.
        """
        rig = _rotz(-math.fmod(self.beta, 360.0))
        if self.pitch_angle != 0.0:
            rig = rig @ _rotx(math.fmod(self.pitch_angle, 360.0))
        if self.roll_angle != 0.0:
            rig = rig @ _roty(math.fmod(self.roll_angle, 360.0))
        src = rig @ np.array([0.0, -self.sod, 0.0])
        direction = rig @ np.array([0.0, 1.0, 0.0])
        u_axis = rig @ np.array([1.0, 0.0, 0.0])
        v_axis = rig @ np.array([0.0, 0.0, 1.0])
        det_center = src + self.sdd * direction
        return src, det_center, u_axis, v_axis

    def pixel_centers(self):
        """(nv, nu, 3) world coordinates of detector pixel centers."""
        src, det_center, u_axis, v_axis = self.pose()
        iu = (np.arange(self.nu) + 0.5 - self.nu / 2.0) * self.pitch
        iv = (np.arange(self.nv) + 0.5 - self.nv / 2.0) * self.pitch
        return (
            det_center[None, None, :]
            + iu[None, :, None] * u_axis[None, None, :]
            + iv[:, None, None] * v_axis[None, None, :]
        )


def _rotz(deg):
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rotx(deg):
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _roty(deg):
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Action:
    """Relative rotation of the X-ray source: yaw angle k * delta_phi."""

    k: int
    delta_phi: float  # degrees per step
    pitch: float = 0.0  # degrees, three-angle variant only
    roll: float = 0.0

    @property
    def angle_deg(self) -> float:
        return self.k * self.delta_phi

    @property
    def angle_rad(self) -> float:
        return math.radians(self.angle_deg)

    def check_bound(self, bound_deg: float = 90.0) -> "Action":
        if abs(self.angle_deg) > bound_deg + 1e-9:
            raise ActionBoundError(
                f"action angle {self.angle_deg} deg exceeds +-{bound_deg} deg"
            )
        return self


BASE_BETAS = {"frontal": 0.0, "lateral": 90.0}


def pose_from_action(
    base_view: str, action: Action, rig: ConeBeamGeometry, bound_deg: float = 90.0
) -> ConeBeamGeometry:
    """Geometry for the pose reached by applying an action to a base view."""
    if base_view not in BASE_BETAS:
        raise GeometryError(f"base_view must be one of {sorted(BASE_BETAS)}")
    action.check_bound(bound_deg)
    return replace(
        rig,
        beta=BASE_BETAS[base_view] + action.angle_deg,
        pitch_angle=rig.pitch_angle + action.pitch,
        roll_angle=rig.roll_angle + action.roll,
    )


@dataclass
class ProjectionImage:
    """nu x nv grid of line integrals (dimensionless), row-major [v, u]."""

    data: np.ndarray
    geometry: ConeBeamGeometry | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError("projection data must be 2D [v, u]")

    @property
    def nu(self) -> int:
        return self.data.shape[1]

    @property
    def nv(self) -> int:
        return self.data.shape[0]


def _ray_box_clip(src, dirs, bmin, bmax):
    """Slab clipping of rays src + t*dirs against an axis-aligned box.

    Returns (t0, t1) per ray with t0 >= 0; rays that miss get t0 = t1 = 0.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (bmin[None, :] - src[None, :]) * inv
        tb = (bmax[None, :] - src[None, :]) * inv
    # Rays parallel to a slab: +-inf propagates correctly through min/max
    # unless src is exactly on a face (0 * inf = nan); treat nan as no bound.
    tmin = np.fmin(ta, tb)
    tmax = np.fmax(ta, tb)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t0 = np.maximum(tmin.max(axis=1), 0.0)
    t1 = tmax.min(axis=1)
    miss = t1 <= t0
    t0 = np.where(miss, 0.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return t0, t1


def _source_inside_box(src, bmin, bmax) -> bool:
    return bool(np.all(src >= bmin) and np.all(src <= bmax))


def _trilinear(vol: VoxelVolume, pts):
    """Clamp-to-edge trilinear interpolation at (M, 3) mm points."""
    org = np.asarray(vol.origin)
    sp = np.asarray(vol.spacing)
    g = (pts - org[None, :]) / sp[None, :]
    dims = (vol.nx, vol.ny, vol.nz)
    idx0 = []
    frac = []
    for ax in range(3):
        n = dims[ax]
        ga = np.clip(g[:, ax], 0.0, n - 1.0)
        if n == 1:
            i0 = np.zeros(len(ga), dtype=np.intp)
            f = np.zeros(len(ga))
        else:
            i0 = np.minimum(ga.astype(np.intp), n - 2)
            f = ga - i0
        idx0.append(i0)
        frac.append(f)
    data = vol.data
    x0, y0, z0 = idx0
    fx, fy, fz = frac
    x1 = np.minimum(x0 + 1, vol.nx - 1)
    y1 = np.minimum(y0 + 1, vol.ny - 1)
    z1 = np.minimum(z0 + 1, vol.nz - 1)
    c00 = data[z0, y0, x0] * (1 - fx) + data[z0, y0, x1] * fx
    c01 = data[z0, y1, x0] * (1 - fx) + data[z0, y1, x1] * fx
    c10 = data[z1, y0, x0] * (1 - fx) + data[z1, y0, x1] * fx
    c11 = data[z1, y1, x0] * (1 - fx) + data[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return out


def render_drr(
    vol: VoxelVolume,
    geom: ConeBeamGeometry,
    step_mm: float | None = None,
    row_block: int = 16,
) -> ProjectionImage:
    """Fixed-step trilinear ray marching (midpoint rule).

    step_mm is the maximum sample spacing; each ray's in-box segment is
    divided into ceil(len/step) equal steps so the accumulated value is
    sum(mu_mid) * h with h <= step_mm. Defaults to half the smallest voxel
    spacing. Pixels whose ray misses the volume box are 0. Per-pixel work
    is independent; row_block only controls vectorization chunking and has
    no effect on the output.
    """
    if step_mm is None:
        step_mm = 0.5 * min(vol.spacing)
    if step_mm <= 0:
        raise ValueError("step_mm must be positive")
    bmin, bmax = vol.bounds()
    src, _, _, _ = geom.pose()
    if _source_inside_box(src, bmin, bmax):
        raise GeometryError("source lies inside the volume bounding box")

    pix = geom.pixel_centers()
    out = np.zeros((geom.nv, geom.nu), dtype=np.float64)
    for r0 in range(0, geom.nv, row_block):
        r1 = min(r0 + row_block, geom.nv)
        p = pix[r0:r1].reshape(-1, 3)
        d = p - src[None, :]
        seg = np.linalg.norm(d, axis=1)
        d_unit = d / seg[:, None]
        t0, t1 = _ray_box_clip(src, d_unit, bmin, bmax)
        length = t1 - t0
        n_steps = np.maximum(np.ceil(length / step_mm).astype(np.intp), 1)
        n_max = int(n_steps.max())
        h = length / n_steps
        j = np.arange(n_max)[None, :]
        t_mid = t0[:, None] + (j + 0.5) * h[:, None]
        valid = j < n_steps[:, None]
        pts = src[None, None, :] + t_mid[:, :, None] * d_unit[:, None, :]
        mu = _trilinear(vol, pts.reshape(-1, 3)).reshape(t_mid.shape)
        vals = (mu * valid).sum(axis=1) * h
        out[r0:r1] = vals.reshape(r1 - r0, geom.nu)
    return ProjectionImage(np.maximum(out, 0.0).astype(np.float32), geom)


def line_integral_exact(vol: VoxelVolume, src, dst) -> float:
    """Exact line integral from src to dst (mm points) via voxel traversal."""
    vals = _siddon_batch(
        vol, np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)[None, :]
    )
    return float(vals[0])


def _siddon_batch(vol: VoxelVolume, src, dst):
    """Per-voxel chord-length integrals for rays src -> dst[i].

    Parameterizes p(a) = src + a*(dst-src) for a in [0, 1], collects every
    voxel-boundary crossing, and sums mu * chord over the segments between
    consecutive crossings. Exact for piecewise-constant volumes.
    """
    bmin, bmax = vol.bounds()
    d = dst - src[None, :]
    seg = np.linalg.norm(d, axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (bmin[None, :] - src[None, :]) * inv
        tb = (bmax[None, :] - src[None, :]) * inv
    tmin = np.fmin(ta, tb)
    tmax = np.fmax(ta, tb)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    a0 = np.maximum(tmin.max(axis=1), 0.0)
    a1 = np.minimum(tmax.min(axis=1), 1.0)
    miss = a1 <= a0
    a0 = np.where(miss, 0.0, a0)
    a1 = np.where(miss, 0.0, a1)

    # All candidate crossing parameters: per axis, planes at bmin + i*spacing.
    sp = np.asarray(vol.spacing)
    dims = (vol.nx, vol.ny, vol.nz)
    alpha_parts = [a0[:, None], a1[:, None]]
    for ax in range(3):
        planes = bmin[ax] + sp[ax] * np.arange(dims[ax] + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            al = (planes[None, :] - src[ax]) / d[:, ax : ax + 1]
        al = np.where(np.isfinite(al), al, a0[:, None])
        alpha_parts.append(al)
    alphas = np.concatenate(alpha_parts, axis=1)
    # Clip everything into the in-box window; out-of-window crossings
    # collapse to zero-length segments and contribute nothing.
    alphas = np.clip(alphas, a0[:, None], a1[:, None])
    alphas.sort(axis=1)

    lengths = np.diff(alphas, axis=1) * seg[:, None]
    mid = (alphas[:, :-1] + alphas[:, 1:]) / 2.0
    pts = src[None, None, :] + mid[:, :, None] * d[:, None, :]
    g = (pts - (bmin)[None, None, :]) / sp[None, None, :]
    ix = np.clip(g[:, :, 0].astype(np.intp), 0, vol.nx - 1)
    iy = np.clip(g[:, :, 1].astype(np.intp), 0, vol.ny - 1)
    iz = np.clip(g[:, :, 2].astype(np.intp), 0, vol.nz - 1)
    mu = vol.data[iz, iy, ix]
    return (mu * lengths).sum(axis=1)


def render_drr_exact(vol: VoxelVolume, geom: ConeBeamGeometry, row_block: int = 8) -> ProjectionImage:
    """Exact-traversal renderer (test oracle for render_drr)."""
    bmin, bmax = vol.bounds()
    src, _, _, _ = geom.pose()
    if _source_inside_box(src, bmin, bmax):
        raise GeometryError("source lies inside the volume bounding box")
    pix = geom.pixel_centers()
    out = np.zeros((geom.nv, geom.nu), dtype=np.float64)
    for r0 in range(0, geom.nv, row_block):
        r1 = min(r0 + row_block, geom.nv)
        dst = pix[r0:r1].reshape(-1, 3)
        out[r0:r1] = _siddon_batch(vol, src, dst).reshape(r1 - r0, geom.nu)
    return ProjectionImage(np.maximum(out, 0.0).astype(np.float32), geom)


def intensity_from_integral(p: np.ndarray) -> np.ndarray:
    """Beer-Lambert detector intensity for line integrals p: exp(-p)."""
    return np.exp(-np.asarray(p, dtype=np.float64))


def normalize01(img: np.ndarray) -> np.ndarray:
    """Min-max normalization to [0, 1]; constant input maps to all zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def to_display(img: ProjectionImage) -> ProjectionImage:
    """Display transform: exp(-p), then min-max normalized to [0, 1].

    The result is what the networks consume, sharing range with
    pseudo-real images.
    """
    disp = normalize01(intensity_from_integral(img.data))
    return ProjectionImage(disp.astype(np.float32), img.geometry)
