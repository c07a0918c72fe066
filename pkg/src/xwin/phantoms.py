"""Synthetic chest-like voxel phantoms with task labels.

Phantoms are additive unions of analytic shapes (ellipsoids and spheres)
sampled on a regular attenuation grid in mm^-1. Analytic membership keeps
exact line-integral oracles possible downstream. Attenuation bands: body
~0.02, bone-like shells ~0.05 (body + 0.03 shell), lungs body - 0.015,
lesion inclusions +0.015.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASKS = ("lesion_present", "multi_lesion", "largest_lesion_left")


class PhantomError(ValueError):
    """Invalid phantom specification (e.g. inclusion outside the body)."""


@dataclass
class VoxelVolume:
    """3D attenuation grid with physical spacing.

    data is indexed [z, y, x] (x fastest when flattened in C order) and
    holds attenuation in mm^-1. origin is the mm offset of the center of
    voxel (0, 0, 0) from the isocenter.
    """

    nx: int
    ny: int
    nz: int
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != (self.nz, self.ny, self.nx):
            raise ValueError(
                f"data shape {self.data.shape} != (nz, ny, nx) = "
                f"({self.nz}, {self.ny}, {self.nx})"
            )
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("voxel counts must be >= 1")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")

    def validate(self):
        """Check the full phantom invariants (>= 8 voxels per axis, mu >= 0)."""
        if min(self.nx, self.ny, self.nz) < 8:
            raise ValueError("phantom volumes need >= 8 voxels per axis")
        if float(self.data.min()) < 0:
            raise ValueError("attenuation must be non-negative")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    def axis_coords(self, axis: int) -> np.ndarray:
        """Voxel-center coordinates (mm) along axis 0=x, 1=y, 2=z."""
        n = (self.nx, self.ny, self.nz)[axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-boundary bounding box (mm): voxel centers +- half spacing."""
        n = np.array([self.nx, self.ny, self.nz], dtype=np.float64)
        sp = np.array(self.spacing, dtype=np.float64)
        org = np.array(self.origin, dtype=np.float64)
        bmin = org - 0.5 * sp
        bmax = org + (n - 0.5) * sp
        return bmin, bmax


def centered_volume(nx, ny, nz, spacing, data=None) -> VoxelVolume:
    """Volume whose voxel grid is centered on the isocenter."""
    sp = spacing if isinstance(spacing, tuple) else (spacing,) * 3
    origin = tuple(-(n - 1) / 2.0 * s for n, s in zip((nx, ny, nz), sp))
    if data is None:
        data = np.zeros((nz, ny, nx), dtype=np.float32)
    return VoxelVolume(nx, ny, nz, sp, origin, data)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    attenuation: float

    def membership(self, x, y, z):
        cx, cy, cz = self.center
        ax, ay, az = self.semi_axes
        d = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2
        return d <= 1.0


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    attenuation: float
    kind: str = "lesion"

    def membership(self, x, y, z):
        cx, cy, cz = self.center
        d2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
        return d2 <= self.radius**2


@dataclass(frozen=True)
class PhantomSpec:
    """Analytic phantom description. Attenuations are additive."""

    seed: int
    body: Ellipsoid | None = None
    organs: tuple[Ellipsoid, ...] = ()
    lesions: tuple[Sphere, ...] = ()

    def validate(self):
        if self.body is None:
            if self.organs or self.lesions:
                raise PhantomError("organs/lesions require a body ellipsoid")
            return self
        for les in self.lesions:
            if not _strictly_inside(les, self.body):
                raise PhantomError(
                    f"lesion at {les.center} r={les.radius} is not strictly "
                    "inside the body ellipsoid"
                )
        return self


def _strictly_inside(sphere: Sphere, body: Ellipsoid) -> bool:
    # Conservative criterion: normalized center distance plus the radius
    # scaled by the smallest semi-axis must stay below 1.
    c = np.asarray(sphere.center, dtype=np.float64)
    b = np.asarray(body.center, dtype=np.float64)
    ax = np.asarray(body.semi_axes, dtype=np.float64)
    d = float(np.linalg.norm((c - b) / ax))
    return d + sphere.radius / float(ax.min()) < 1.0


@dataclass(frozen=True)
class LabelSet:
    """Binary downstream-task labels, all derivable from the spec."""

    lesion_present: bool
    multi_lesion: bool
    largest_lesion_left: bool

    def as_dict(self) -> dict[str, bool]:
        return {t: getattr(self, t) for t in TASKS}


def labels_from_spec(spec: PhantomSpec) -> LabelSet:
    lesions = spec.lesions
    present = len(lesions) > 0
    multi = len(lesions) >= 2
    left = False
    if present:
        largest = max(lesions, key=lambda s: (s.radius, -lesions.index(s)))
        left = bool(largest.center[0] < 0.0)
    return LabelSet(present, multi, left)


def generate_phantom(
    spec: PhantomSpec,
    nx: int = 64,
    ny: int = 64,
    nz: int = 64,
    spacing: float = 4.0,
) -> tuple[VoxelVolume, LabelSet]:
    """Rasterize a phantom spec onto a centered grid.

    Each voxel's value is the sum of attenuations of all shapes whose
    analytic membership contains the voxel center. Pure function of the
    spec and grid; bit-identical across runs.
    """
    spec.validate()
    if min(nx, ny, nz) < 8:
        raise ValueError("phantom grids need >= 8 voxels per axis")
    grid = centered_volume(nx, ny, nz, spacing)
    x = grid.axis_coords(0)[None, None, :]
    y = grid.axis_coords(1)[None, :, None]
    z = grid.axis_coords(2)[:, None, None]

    acc = np.zeros((nz, ny, nx), dtype=np.float64)
    shapes = ([] if spec.body is None else [spec.body]) + list(spec.organs) + list(spec.lesions)
    for shape in shapes:
        acc += shape.attenuation * shape.membership(x, y, z)
    if acc.min() < 0:
        raise PhantomError("additive attenuations must stay non-negative everywhere")
    vol = VoxelVolume(nx, ny, nz, grid.spacing, grid.origin, acc.astype(np.float32))
    return vol.validate(), labels_from_spec(spec)


def random_phantom_spec(seed: int, lesion_prob: float = 0.5, max_lesions: int = 3) -> PhantomSpec:
    """Draw a randomized chest-like spec: body, lungs, spine, heart, lesions.

    Deterministic in the seed. Lesions sit strictly inside a lung so the
    additive sum stays in [0, ~0.06] mm^-1 everywhere.
    """
    rng = np.random.default_rng(seed)
    body_ax = (rng.uniform(100, 118), rng.uniform(70, 85), rng.uniform(100, 118))
    body = Ellipsoid((0.0, 0.0, 0.0), body_ax, 0.02)

    organs = []
    # Spine: thin bony ellipsoid at the back (+y), attenuation on top of body.
    organs.append(
        Ellipsoid(
            (0.0, 0.55 * body_ax[1], 0.0),
            (rng.uniform(12, 18), rng.uniform(12, 18), 0.9 * body_ax[2]),
            0.03,
        )
    )
    # Two lungs: low attenuation pockets left/right of the midline.
    lungs = []
    for sx in (-1.0, +1.0):
        lung = Ellipsoid(
            (sx * 0.45 * body_ax[0], -0.1 * body_ax[1], 0.05 * body_ax[2]),
            (0.38 * body_ax[0], 0.55 * body_ax[1], 0.6 * body_ax[2]),
            -0.015,
        )
        lungs.append(lung)
        organs.append(lung)
    # Heart-like blob, slightly left of center.
    organs.append(
        Ellipsoid(
            (-0.15 * body_ax[0], 0.05 * body_ax[1], -0.15 * body_ax[2]),
            (rng.uniform(25, 35), rng.uniform(25, 35), rng.uniform(30, 40)),
            0.005,
        )
    )

    lesions = []
    if rng.random() < lesion_prob:
        n_les = int(rng.integers(1, max_lesions + 1))
        for _ in range(n_les):
            lung = lungs[int(rng.integers(0, 2))]
            r = float(rng.uniform(10.0, 18.0))
            for _attempt in range(64):
                u = rng.uniform(-0.6, 0.6, size=3)
                c = tuple(
                    float(lc + ui * la) for lc, ui, la in zip(lung.center, u, lung.semi_axes)
                )
                cand = Sphere(c, r, 0.015)
                if _strictly_inside(cand, body):
                    lesions.append(cand)
                    break
    return PhantomSpec(seed=seed, body=body, organs=tuple(organs), lesions=tuple(lesions))


def random_oracle_phantom(
    seed: int,
    n: int = 48,
    spacing: float = 4.0,
    base: float = 0.02,
    amp: float = 0.005,
    n_bumps: int = 6,
) -> VoxelVolume:
    """Random field for renderer-vs-traversal agreement checks.

    A constant background filling the whole grid plus a few broad gaussian
    bumps, floored at 0.002. The field is piecewise constant per voxel (so
    the exact traversal integrates it exactly) but varies slowly relative
    to the grid, which keeps the trilinear-vs-nearest integration gap well
    below the agreement tolerance; sharp high-contrast silhouettes would
    measure the interpolation model, not the geometry. Box-corner grazing
    rays see a constant field and agree exactly.
    """
    rng = np.random.default_rng(seed)
    grid = centered_volume(n, n, n, spacing)
    x = grid.axis_coords(0)[None, None, :]
    y = grid.axis_coords(1)[None, :, None]
    z = grid.axis_coords(2)[:, None, None]
    data = np.full((n, n, n), base, dtype=np.float64)
    half = (n - 1) / 2.0 * spacing
    for _ in range(n_bumps):
        c = rng.uniform(-0.65 * half, 0.65 * half, size=3)
        sig = rng.uniform(16.0, 28.0)
        a = rng.uniform(-amp, amp)
        r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        data += a * np.exp(-r2 / (2 * sig**2))
    data = np.maximum(data, 0.002)
    return VoxelVolume(n, n, n, grid.spacing, grid.origin, data.astype(np.float32))


def cylinder_volume(
    radius_mm: float,
    height_mm: float,
    attenuation: float = 0.02,
    n: int = 64,
    spacing: float = 4.0,
    supersample: int = 1,
) -> VoxelVolume:
    """Uniform z-axis cylinder on a centered cubic grid.

    supersample > 1 averages membership over a sub-voxel lattice, giving an
    anti-aliased voxelization of the continuous cylinder (the fair target
    for band-limited reconstructions).
    """
    grid = centered_volume(n, n, n, spacing)
    s = int(supersample)
    offs = (np.arange(s) - (s - 1) / 2.0) / s * spacing
    acc = np.zeros((n, n, n), dtype=np.float64)
    base_x = grid.axis_coords(0)
    base_y = grid.axis_coords(1)
    base_z = grid.axis_coords(2)
    for oz in offs:
        inside_z = (np.abs(base_z + oz) <= height_mm / 2.0).astype(np.float64)
        for oy in offs:
            for ox in offs:
                r2 = (base_x + ox)[None, :] ** 2 + (base_y + oy)[:, None] ** 2
                inside_xy = (r2 <= radius_mm**2).astype(np.float64)
                acc += inside_z[:, None, None] * inside_xy[None, :, :]
    data = (attenuation * acc / s**3).astype(np.float32)
    return VoxelVolume(n, n, n, grid.spacing, grid.origin, data)
