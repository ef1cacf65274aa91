"""Radiance-field maps: voxel grids, procedural fields and synthetic scenes.

Every field answers ``query_many(points) -> (colors, densities)`` for an
``(m, 3)`` array of points.  Grid fields are Lambertian: the viewing direction
is accepted by :func:`query` but ignored.

Voxel grids are vertex sampled.  Node ``(i, j, k)`` sits at
``bbox_min + (i, j, k) * spacing`` with ``spacing = (bbox_max - bbox_min) /
(dims - 1)``, so the grid spans the bbox exactly and trilinear interpolation
reproduces affine fields everywhere inside it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._hash import hash01

EXTERIOR_MODES = ("zero", "noise")


class FieldFormatError(ValueError):
    """Base class for map file errors."""


class BadMagicError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


class DimensionMismatchError(FieldFormatError):
    pass


@dataclass(frozen=True)
class FieldSample:
    color: tuple
    density: float


def _readonly(a, dtype, shape) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(a, dtype=dtype).reshape(shape))
    if arr is a:
        arr = arr.copy()
    arr.setflags(write=False)
    return arr


class VoxelField:
    """Dense vertex-sampled grid of densities and RGB colors.

    ``density`` has shape ``(nx, ny, nz)`` and ``color`` ``(nx, ny, nz, 3)``;
    both are stored as float32.  Points outside the bbox get the exterior
    behaviour: ``"zero"`` (empty space) or ``"noise"`` (seeded value noise of
    amplitude ``noise_amplitude`` on the grid's own lattice).
    """

    def __init__(self, bbox_min, bbox_max, density, color, exterior="zero", noise_amplitude=0.0, noise_seed=0):
        density = np.asarray(density)
        if density.ndim != 3:
            raise DimensionMismatchError("density must be a 3-D array")
        dims = density.shape
        if min(dims) < 2:
            raise DimensionMismatchError(f"every grid dimension must be >= 2, got {dims}")
        color = np.asarray(color)
        if color.shape != dims + (3,):
            raise DimensionMismatchError(f"color shape {color.shape} does not match dims {dims}")
        self.bbox_min = _readonly(bbox_min, np.float64, (3,))
        self.bbox_max = _readonly(bbox_max, np.float64, (3,))
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox min must be < max componentwise")
        self.density = _readonly(density, np.float32, dims)
        self.color = _readonly(color, np.float32, dims + (3,))
        if np.any(self.density < 0) or not np.all(np.isfinite(self.density)):
            raise ValueError("densities must be finite and non-negative")
        if exterior not in EXTERIOR_MODES:
            raise ValueError(f"exterior must be one of {EXTERIOR_MODES}")
        if noise_amplitude < 0:
            raise ValueError("noise amplitude must be >= 0")
        self.exterior = exterior
        self.noise_amplitude = float(noise_amplitude)
        self.noise_seed = int(noise_seed)
        self.dims = dims
        self.spacing = (self.bbox_max - self.bbox_min) / (np.array(dims) - 1)
        packed = np.empty(dims + (4,), dtype=np.float32)
        packed[..., :3] = self.color
        packed[..., 3] = self.density
        packed.setflags(write=False)
        self.packed = packed

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bbox_min, self.bbox_max

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))

    def node_position(self, i, j, k) -> np.ndarray:
        return self.bbox_min + np.array([i, j, k]) * self.spacing

    def query_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite query point")
        colors = np.zeros((len(p), 3))
        dens = np.zeros(len(p))
        inside = np.all((p >= self.bbox_min) & (p <= self.bbox_max), axis=1)
        if np.any(inside):
            c, s = _trilinear(self.packed, (p[inside] - self.bbox_min) / self.spacing)
            colors[inside], dens[inside] = c, s
        if self.exterior == "noise" and self.noise_amplitude > 0 and not np.all(inside):
            out = ~inside
            c, s = lattice_noise((p[out] - self.bbox_min) / self.spacing, self.noise_seed, self.noise_amplitude)
            colors[out], dens[out] = c, s
        return colors, dens

    def lipschitz_bound(self) -> float:
        """Upper bound on the gradient norm of the interpolated density."""
        d = self.density.astype(np.float64)
        per_axis = [np.abs(np.diff(d, axis=a)).max() / self.spacing[a] for a in range(3)]
        return float(np.sqrt(np.sum(np.square(per_axis))))

    def same_data(self, other: "VoxelField") -> bool:
        return (
            self.dims == other.dims
            and self.bbox_min.tobytes() == other.bbox_min.tobytes()
            and self.bbox_max.tobytes() == other.bbox_max.tobytes()
            and self.density.tobytes() == other.density.tobytes()
            and self.color.tobytes() == other.color.tobytes()
        )


def _trilinear(packed: np.ndarray, f: np.ndarray):
    """Interpolate packed (rgb, sigma) nodes at fractional lattice coordinates."""
    n = np.array(packed.shape[:3])
    i0 = np.clip(np.floor(f).astype(np.int64), 0, n - 2)
    t = f - i0
    acc = np.zeros((len(f), 4))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                v = packed[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz].astype(np.float64)
                acc += (wx * wy * wz)[:, None] * v
    return acc[:, :3], acc[:, 3]


def lattice_noise(f: np.ndarray, seed: int, amplitude: float):
    """Trilinear value noise over the integer lattice at fractional coords ``f``."""
    i0 = np.floor(f).astype(np.int64)
    t = f - i0
    acc = np.zeros((len(f), 4))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                w = wx * wy * wz
                ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                for ch in range(4):
                    acc[:, ch] += w * hash01(ix, iy, iz, seed, ch)
    return acc[:, :3], amplitude * acc[:, 3]


class ProceduralField:
    """Field defined by Python callables over ``(m, 3)`` point arrays.

    ``density_fn(points) -> (m,)`` and ``color_fn(points) -> (m, 3)``.
    """

    def __init__(self, density_fn: Callable, color_fn: Callable | None = None, bbox=None):
        self.density_fn = density_fn
        self.color_fn = color_fn
        self.bbox = None if bbox is None else (np.asarray(bbox[0], float), np.asarray(bbox[1], float))

    def query_many(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite query point")
        dens = np.broadcast_to(np.asarray(self.density_fn(p), dtype=np.float64), (len(p),)).copy()
        if self.color_fn is None:
            colors = np.ones((len(p), 3))
        else:
            colors = np.broadcast_to(np.asarray(self.color_fn(p), dtype=np.float64), (len(p), 3)).copy()
        return colors, dens

    def diagonal(self) -> float:
        if self.bbox is None:
            raise ValueError("unbounded procedural field has no diagonal; pass z_far explicitly")
        return float(np.linalg.norm(self.bbox[1] - self.bbox[0]))


def constant_field(density: float, color=(1.0, 1.0, 1.0)) -> ProceduralField:
    c = np.asarray(color, dtype=np.float64)
    return ProceduralField(lambda p: np.full(len(p), float(density)), lambda p: np.tile(c, (len(p), 1)))


def slab_field(start: float, density: float, axis: int = 2, color=(1.0, 1.0, 1.0), end: float = np.inf) -> ProceduralField:
    """Empty space up to ``start`` along ``axis``, constant density in [start, end)."""
    c = np.asarray(color, dtype=np.float64)
    return ProceduralField(
        lambda p: np.where((p[:, axis] >= start) & (p[:, axis] < end), float(density), 0.0),
        lambda p: np.tile(c, (len(p), 1)),
    )


def query(field, point, direction=(0.0, 0.0, 1.0)) -> FieldSample:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("direction must be unit norm")
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("point must be a finite 3-vector")
    c, s = field.query_many(p[None])
    return FieldSample(tuple(float(x) for x in c[0]), float(s[0]))


# ---------------------------------------------------------------------------
# synthetic scenes

EXTERIOR_COLORS = ("extruded", "random")
SCENE_KINDS = ("box-room", "textured-slab", "noise-exterior")

_KIND_DEFAULTS = {
    "box-room": dict(room_half=1.5, wall_thickness=0.3, exterior_margin=0.0, noise_amplitude=0.0),
    "noise-exterior": dict(room_half=0.6, wall_thickness=0.15, exterior_margin=0.5, noise_amplitude=0.3),
    "textured-slab": dict(room_half=1.5, wall_thickness=0.3, exterior_margin=0.0, noise_amplitude=0.0),
}

_FACE_COLORS = np.array(
    [
        [0.80, 0.25, 0.20],  # -x
        [0.20, 0.65, 0.30],  # +x
        [0.85, 0.80, 0.25],  # -y (ceiling)
        [0.35, 0.30, 0.25],  # +y (floor)
        [0.25, 0.35, 0.85],  # -z
        [0.75, 0.35, 0.75],  # +z
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic scene.

    ``room_half`` is the half-extent of the empty interior cube (or the slab
    half-width); walls are ``wall_thickness`` thick.  ``exterior_margin`` adds
    grid space beyond the walls that is filled with seeded noise of
    ``noise_amplitude`` density; its colors continue the wall texture
    (``"extruded"``) or are random.  Unset fields take the kind's defaults.
    """

    kind: str = "box-room"
    resolution: int = 32
    room_half: float | None = None
    wall_thickness: float | None = None
    exterior_margin: float | None = None
    wall_density: float = 50.0
    noise_amplitude: float | None = None
    texture_wavelength: float = 0.9
    texture_amplitude: float = 0.18
    slab_depth: float = 1.0
    exterior_colors: str = "extruded"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        for name, value in _KIND_DEFAULTS[self.kind].items():
            if getattr(self, name) is None:
                if name == "exterior_margin" and self.kind == "box-room" and (self.noise_amplitude or 0) > 0:
                    value = 0.5
                object.__setattr__(self, name, value)
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if self.room_half <= 0 or self.wall_thickness <= 0:
            raise ValueError("room and wall sizes must be positive")
        if self.exterior_margin < 0 or self.noise_amplitude < 0 or self.wall_density < 0:
            raise ValueError("margin, noise amplitude and wall density must be >= 0")
        if self.exterior_colors not in EXTERIOR_COLORS:
            raise ValueError(f"exterior_colors must be one of {EXTERIOR_COLORS}")
        if self.texture_wavelength <= 0 or self.slab_depth <= 0:
            raise ValueError("texture wavelength and slab depth must be positive")
        if self.kind == "noise-exterior" and (self.exterior_margin <= 0 or self.noise_amplitude <= 0):
            raise ValueError("noise-exterior scenes need a positive margin and noise amplitude")

    @property
    def outer_half(self) -> float:
        return self.room_half + self.wall_thickness + self.exterior_margin

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _texture(u: np.ndarray, v: np.ndarray, face: np.ndarray, rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    """Smooth per-face color pattern as a sum of random plane waves."""
    n_waves = 4
    angles = rng.uniform(0, np.pi, size=(6, n_waves))
    lengths = spec.texture_wavelength * rng.uniform(0.6, 1.4, size=(6, n_waves))
    phases = rng.uniform(0, 2 * np.pi, size=(6, n_waves, 3))
    amps = spec.texture_amplitude * rng.uniform(0.5, 1.0, size=(6, n_waves, 3))
    col = _FACE_COLORS[face].copy()
    for w in range(n_waves):
        k = 2 * np.pi / lengths[face, w]
        arg = k * (np.cos(angles[face, w]) * u + np.sin(angles[face, w]) * v)
        col += amps[face, w] * np.sin(arg[:, None] + phases[face, w])
    return np.clip(col, 0.02, 0.98)


def generate_scene(spec: SceneSpec) -> VoxelField:
    """Build the voxel grid for ``spec``; deterministic for a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    n = spec.resolution
    if spec.kind == "textured-slab":
        h = spec.room_half
        lo = np.array([-h, -h, 0.0])
        hi = np.array([h, h, spec.slab_depth + spec.wall_thickness])
    else:
        h = spec.outer_half
        lo, hi = np.full(3, -h), np.full(3, h)
    spacing = (hi - lo) / (n - 1)
    if spacing.max() > spec.wall_thickness:
        raise ValueError(
            f"grid spacing {spacing.max():.3f} exceeds wall thickness {spec.wall_thickness}; raise the resolution"
        )
    axes = [lo[a] + spacing[a] * np.arange(n) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    p = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    if spec.kind == "textured-slab":
        inside_wall = p[:, 2] >= spec.slab_depth
        density = np.where(inside_wall, spec.wall_density, 0.0)
        face = np.full(len(p), 5)
        color = _texture(p[:, 0], p[:, 1], face, rng, spec)
    else:
        a = np.abs(p)
        axis = np.argmax(a, axis=1)
        extent = a[np.arange(len(p)), axis]
        sign = p[np.arange(len(p)), axis] > 0
        face = 2 * axis + sign
        uv_axes = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        u = p[np.arange(len(p)), uv_axes[:, 0]]
        v = p[np.arange(len(p)), uv_axes[:, 1]]
        color = _texture(u, v, face, rng, spec)
        wall_outer = spec.room_half + spec.wall_thickness
        is_wall = (extent >= spec.room_half) & (extent <= wall_outer + 1e-12)
        density = np.where(is_wall, spec.wall_density, 0.0)
        exterior = extent > wall_outer + 1e-12
        if spec.noise_amplitude > 0:
            # exterior density is meaningless noise; colors either continue the
            # nearest wall's texture outward or are random as well
            m = int(exterior.sum())
            density[exterior] = spec.noise_amplitude * rng.uniform(0.0, 1.0, size=m)
            if spec.exterior_colors == "random":
                color[exterior] = rng.uniform(0.0, 1.0, size=(m, 3))
    ext_mode = "noise" if spec.noise_amplitude > 0 else "zero"
    return VoxelField(
        lo,
        hi,
        density.reshape(n, n, n),
        color.reshape(n, n, n, 3),
        exterior=ext_mode,
        noise_amplitude=spec.noise_amplitude,
        noise_seed=spec.seed,
    )


def in_valid_region(spec: SceneSpec, points) -> np.ndarray:
    """True for points inside the empty interior of a room scene."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.all(np.abs(p) < spec.room_half, axis=1)


def in_invalid_region(spec: SceneSpec, points) -> np.ndarray:
    """True for points in the noise exterior beyond the walls (the "untrained" part)."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.abs(p).max(axis=1) > spec.room_half + spec.wall_thickness


# ---------------------------------------------------------------------------
# VRF1 map files

MAGIC = b"VRF1"
_HEADER = struct.Struct("<4s3I6d")


def encode_field(f: VoxelField) -> bytes:
    nx, ny, nz = f.dims
    header = _HEADER.pack(MAGIC, nx, ny, nz, *f.bbox_min.tolist(), *f.bbox_max.tolist())
    dens = np.ascontiguousarray(f.density.transpose(2, 1, 0)).astype("<f4").tobytes()
    col = np.ascontiguousarray(f.color.transpose(2, 1, 0, 3)).astype("<f4").tobytes()
    return header + dens + col


def decode_field(data: bytes, exterior="zero", noise_amplitude=0.0, noise_seed=0) -> VoxelField:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not a VRF1 map file")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("truncated payload: header incomplete")
    _, nx, ny, nz, *bb = _HEADER.unpack_from(data)
    if min(nx, ny, nz) < 2:
        raise DimensionMismatchError(f"dimension mismatch: grid dims must be >= 2, got {(nx, ny, nz)}")
    count = nx * ny * nz
    expected = _HEADER.size + 16 * count
    if len(data) < expected:
        raise TruncatedPayloadError(f"truncated payload: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise DimensionMismatchError(f"dimension mismatch: {len(data) - expected} bytes beyond the declared grid")
    off = _HEADER.size
    dens = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(nz, ny, nx).transpose(2, 1, 0)
    col = np.frombuffer(data, dtype="<f4", count=3 * count, offset=off + 4 * count)
    col = col.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    return VoxelField(bb[:3], bb[3:], dens, col, exterior=exterior, noise_amplitude=noise_amplitude, noise_seed=noise_seed)


def save_field(f: VoxelField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_field(f))


def load_field(path, **exterior) -> VoxelField:
    """Read a VRF1 file.  The exterior behaviour is not stored in the format
    and can be supplied as keyword arguments (see :class:`VoxelField`)."""
    with open(path, "rb") as fh:
        return decode_field(fh.read(), **exterior)
