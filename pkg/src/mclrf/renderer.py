"""Volume rendering with per-ray opacity statistics.

Each ray is split into ``samples_per_ray`` uniform bins over
``[z_near, z_far]`` and sampled at bin midpoints (optionally jittered).
With ``d = (z_far - z_near) / n`` the discrete rendering is::

    T_k   = exp(-sum_{j<k} sigma_j d)
    C     = sum_k T_k (1 - exp(-sigma_k d)) c_k          (over black)
    A(b)  = 1 - exp(-sum_{j<k} sigma_j d)                (at bin boundary b_k)

``A`` is the accumulated opacity, the CDF of the ray termination depth.
``z_trans`` is the depth where ``A`` first reaches ``alpha`` and ``z_opaque``
where it first exceeds ``1 - alpha``, both linearly interpolated between
bin boundaries.  The rejection penalty is ``F = max(z_opaque - z_trans, tau)``
with two fallbacks for rays that never terminate:

* ``A`` never reaches ``alpha``: ``F = max(z_far - z_near, tau)``.
* ``A`` reaches ``alpha`` but never exceeds ``1 - alpha``: ``z_opaque = z_far``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .field import VoxelField
from .geometry import Camera, Pose, Ray

DEFAULT_ALPHA = 0.01
DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class QuadratureConfig:
    samples_per_ray: int = 64
    stratified: bool = False
    z_near: float = 0.05
    z_far: float | None = None  # None: the field's bbox diagonal

    def __post_init__(self):
        if int(self.samples_per_ray) != self.samples_per_ray or self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be an integer >= 2")
        if self.z_near < 0:
            raise ValueError("z_near must be >= 0")
        if self.z_far is not None and self.z_far <= self.z_near:
            raise ValueError("z_far must exceed z_near")

    def depth_range(self, field) -> tuple[float, float]:
        z_far = self.z_far if self.z_far is not None else field.diagonal()
        if z_far <= self.z_near:
            raise ValueError("z_far must exceed z_near")
        return float(self.z_near), float(z_far)


@dataclass(frozen=True)
class RayStats:
    color: tuple
    accumulated_opacity: float
    z_trans: float | None
    z_opaque: float | None
    F: float


@dataclass
class RayBatch:
    """Array form of many :class:`RayStats`; undefined depths are NaN."""

    color: np.ndarray  # (n, 3)
    accumulated_opacity: np.ndarray  # (n,)
    z_trans: np.ndarray
    z_opaque: np.ndarray
    F: np.ndarray
    z_near: float
    z_far: float

    def __len__(self):
        return len(self.F)

    def __getitem__(self, i) -> RayStats:
        zt, zo = self.z_trans[i], self.z_opaque[i]
        return RayStats(
            tuple(float(c) for c in self.color[i]),
            float(self.accumulated_opacity[i]),
            None if np.isnan(zt) else float(zt),
            None if np.isnan(zo) else float(zo),
            float(self.F[i]),
        )

    def to_list(self) -> list[RayStats]:
        return [self[i] for i in range(len(self))]


def rejection_penalty(z_trans, z_opaque, z_near, z_far, tau) -> np.ndarray:
    """``F`` per ray from the (possibly NaN) threshold depths."""
    z_trans = np.asarray(z_trans, dtype=np.float64)
    z_opaque = np.where(np.isnan(z_opaque), z_far, z_opaque)
    gap = np.where(np.isnan(z_trans), z_far - z_near, z_opaque - z_trans)
    return np.maximum(gap, tau)


def _composite(colors, sigma, z_near, z_far, alpha):
    """Reference compositing for (n, s, 3) colors and (n, s) densities."""
    n, s = sigma.shape
    delta = (z_far - z_near) / s
    tau_steps = sigma * delta
    depth = np.cumsum(tau_steps, axis=1)
    prev_depth = depth - tau_steps
    weights = np.exp(-prev_depth) * (1.0 - np.exp(-tau_steps))
    color = np.einsum("ns,nsc->nc", weights, colors)
    acc = 1.0 - np.exp(-depth)
    acc_prev = np.concatenate([np.zeros((n, 1)), acc[:, :-1]], axis=1)
    bounds = z_near + np.arange(s) * delta

    def crossing(mask, level):
        hit = mask.any(axis=1)
        k = np.argmax(mask, axis=1)
        rows = np.arange(n)
        a1, a0 = acc[rows, k], acc_prev[rows, k]
        with np.errstate(invalid="ignore", divide="ignore"):
            z = bounds[k] + (level - a0) / (a1 - a0) * delta
        return np.where(hit, z, np.nan)

    z_trans = crossing(acc >= alpha, alpha)
    z_opaque = crossing(acc > 1.0 - alpha, 1.0 - alpha)
    return color, 1.0 - np.exp(-depth[:, -1]), z_trans, z_opaque


def _sample_offsets(n_rays, q: QuadratureConfig, seed):
    if not q.stratified:
        return None
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n_rays, q.samples_per_ray))


def render_rays(
    field,
    origins,
    dirs,
    q: QuadratureConfig = QuadratureConfig(),
    alpha: float = DEFAULT_ALPHA,
    tau: float = DEFAULT_TAU,
    depth_range: tuple[float, float] | None = None,
    seed=0,
    workers: int = 1,
    fused: bool = True,
) -> RayBatch:
    """Render ``(n, 3)`` ray origins and unit directions.

    Voxel fields go through the fused numba kernel unless ``fused`` is false;
    every other field uses the numpy reference path.  ``seed`` only matters
    for stratified sampling.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    z_near, z_far = depth_range if depth_range is not None else q.depth_range(field)
    n = len(origins)
    s = q.samples_per_ray
    jitter = _sample_offsets(n, q, seed)
    if isinstance(field, VoxelField) and fused:
        color = np.empty((n, 3))
        acc = np.empty(n)
        zt = np.empty(n)
        zo = np.empty(n)
        jit = jitter if jitter is not None else np.empty((max(n, 1), 1))
        noise = field.exterior == "noise" and field.noise_amplitude > 0

        def run(lo, hi):
            _kernels.march_voxel(
                origins[lo:hi], dirs[lo:hi], z_near, z_far, s, jit[lo:hi], jitter is not None,
                field.packed, field.bbox_min, field.bbox_max, field.spacing,
                noise, field.noise_seed, field.noise_amplitude, alpha,
                color[lo:hi], acc[lo:hi], zt[lo:hi], zo[lo:hi],
            )  # fmt: skip

        if workers > 1 and n > 1:
            bounds = np.linspace(0, n, workers + 1).astype(int)
            with ThreadPoolExecutor(workers) as ex:
                list(ex.map(run, bounds[:-1], bounds[1:]))
        elif n:
            run(0, n)
    else:
        offs = np.full((n, s), 0.5) if jitter is None else jitter
        delta = (z_far - z_near) / s
        z = z_near + (np.arange(s)[None, :] + offs) * delta
        pts = origins[:, None, :] + z[..., None] * dirs[:, None, :]
        cs, sig = field.query_many(pts.reshape(-1, 3))
        color, acc, zt, zo = _composite(cs.reshape(n, s, 3), sig.reshape(n, s), z_near, z_far, alpha)
    F = rejection_penalty(zt, zo, z_near, z_far, tau)
    return RayBatch(color, acc, zt, zo, F, z_near, z_far)


def render_ray(field, ray: Ray, q: QuadratureConfig = QuadratureConfig(), alpha=DEFAULT_ALPHA, tau=DEFAULT_TAU, seed=0) -> RayStats:
    """Render one ray over its own ``[z_near, z_far]``."""
    batch = render_rays(field, ray.origin[None], ray.direction[None], q, alpha, tau, (ray.z_near, ray.z_far), seed)
    return batch[0]


def pixel_directions(cam: Camera, pose: Pose, pixels) -> np.ndarray:
    return cam.camera_directions(pixels) @ pose.rotation.T


def render_pixels(
    field,
    cam: Camera,
    pose: Pose,
    pixels: Sequence,
    q: QuadratureConfig = QuadratureConfig(),
    alpha=DEFAULT_ALPHA,
    tau=DEFAULT_TAU,
    seed=0,
    workers: int = 1,
) -> RayBatch:
    """Render continuous pixel coordinates from one camera pose, order kept."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z_near, z_far = q.depth_range(field)
    if len(pixels) == 0:
        e = np.empty(0)
        return RayBatch(np.empty((0, 3)), e, e, e, e, z_near, z_far)
    dirs = pixel_directions(cam, pose, pixels)
    origins = np.broadcast_to(pose.translation, dirs.shape)
    return render_rays(field, origins, dirs, q, alpha, tau, (z_near, z_far), seed, workers)


def render_image(field, cam: Camera, pose: Pose, q: QuadratureConfig = QuadratureConfig(), workers: int = 1) -> np.ndarray:
    """Full frame as an (height, width, 3) array."""
    batch = render_pixels(field, cam, pose, cam.pixel_centers(), q, workers=workers)
    return batch.color.reshape(cam.height, cam.width, 3)


def render_images_stats(field, cam, pose, q=QuadratureConfig(), alpha=DEFAULT_ALPHA, tau=DEFAULT_TAU):
    """Full-frame color and penalty maps, handy for debugging."""
    batch = render_pixels(field, cam, pose, cam.pixel_centers(), q, alpha, tau)
    return batch.color.reshape(cam.height, cam.width, 3), batch.F.reshape(cam.height, cam.width)


# ---------------------------------------------------------------------------
# PPM debug images


def encode_ppm(pixels) -> bytes:
    """Binary P6 bytes; channels clamped to [0, 1] then rounded half up."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError("expected an (height, width, 3) array")
    h, w, _ = px.shape
    q = np.floor(np.clip(px, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_ppm(path, pixels) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(pixels))


def decode_ppm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM files are supported")
    pos += 1
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())
