"""Monte Carlo localization on a radiance-field map.

One filter step runs prediction, importance weighting, systematic
resampling and the coarse-to-fine phase controller.  Particles are stored
as arrays (``rotations`` (n, 3, 3), ``translations`` (n, 3), ``weights``
(n,)) so a step over thousands of particles stays vectorized.

Random streams are keyed by ``(seed, step, purpose)`` and every draw is made
up front, before any parallel rendering, so results do not depend on the
number of workers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Camera, Pose, se3_exp_batch, so3_exp_batch
from .image import Image, downscale
from .renderer import QuadratureConfig, render_rays

MODES = ("baseline", "rejection")
DENOMINATOR_FLOOR = 1e-12

_PREDICT, _PIXELS, _RESAMPLE, _REFINE = range(4)


class DegenerateBeliefError(ValueError):
    pass


def _rng(seed, step, purpose) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), purpose])


# ---------------------------------------------------------------------------
# particle sets


@dataclass(frozen=True)
class Particle:
    pose: Pose
    weight: float


class ParticleSet:
    def __init__(self, rotations, translations, weights=None, step: int = 0):
        rot = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        trans = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        if len(rot) == 0 or len(rot) != len(trans):
            raise ValueError("particle set must be non-empty with matching arrays")
        if weights is None:
            weights = np.full(len(rot), 1.0 / len(rot))
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(w) != len(rot):
            raise ValueError("one weight per particle")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and >= 0")
        self.rotations, self.translations, self.weights = rot, trans, w
        self.step = int(step)

    @classmethod
    def from_particles(cls, particles: Sequence[Particle], step: int = 0) -> "ParticleSet":
        return cls(
            [p.pose.rotation for p in particles],
            [p.pose.translation for p in particles],
            [p.weight for p in particles],
            step,
        )

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i) -> Particle:
        return Particle(Pose(self.rotations[i], self.translations[i]), float(self.weights[i]))

    @property
    def particles(self) -> list[Particle]:
        return [self[i] for i in range(len(self))]

    def with_weights(self, weights) -> "ParticleSet":
        return ParticleSet(self.rotations, self.translations, weights, self.step)

    def normalized(self) -> "ParticleSet":
        total = self.weights.sum()
        if not total > 0:
            raise DegenerateBeliefError("degenerate belief: all weights are zero")
        return self.with_weights(self.weights / total)

    def take(self, idx) -> "ParticleSet":
        idx = np.asarray(idx)
        return ParticleSet(self.rotations[idx], self.translations[idx], np.full(len(idx), 1.0 / len(idx)), self.step)

    def position_variance(self) -> float:
        """Trace of the weighted positional covariance."""
        w = self.weights / self.weights.sum()
        mean = w @ self.translations
        return float(w @ np.sum((self.translations - mean) ** 2, axis=1))


def weight_entropy(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    w = w[w > 0] / w.sum()
    return float(max(0.0, -(w * np.log(w)).sum()))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MotionConfig:
    """Prediction model ``x_t = x_{t-1} * O_t * Exp(delta)``, ``delta ~ N(0, diag(std^2))``.

    ``noise_std`` is ordered like twists: three rotational std-devs (rad)
    then three translational ones.  The std-devs are multiplied by
    ``annealing`` after every step.
    """

    odometry: Pose = dc_field(default_factory=Pose.identity)
    noise_std: tuple = (0.03, 0.03, 0.03, 0.04, 0.04, 0.04)
    annealing: float = 0.97

    def __post_init__(self):
        std = tuple(float(s) for s in self.noise_std)
        if len(std) != 6 or any(s < 0 or not math.isfinite(s) for s in std):
            raise ValueError("noise_std needs six finite non-negative entries")
        object.__setattr__(self, "noise_std", std)
        if not 0 < self.annealing <= 1:
            raise ValueError("annealing factor must lie in (0, 1]")


@dataclass(frozen=True)
class WeightingConfig:
    mode: str = "rejection"
    exponent: float = 4.0
    tau: float = 0.1
    alpha: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"weighting mode must be one of {MODES}")
        if not self.exponent > 0:
            raise ValueError("exponent must be > 0")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")


@dataclass(frozen=True)
class Phase:
    R: float  # rendering scale, a reciprocal of an integer
    B: int  # rays per particle
    N: int  # particles kept after resampling

    def __post_init__(self):
        if not 0 < self.R <= 1:
            raise ValueError("R must lie in (0, 1]")
        if int(self.B) != self.B or self.B < 1 or int(self.N) != self.N or self.N < 1:
            raise ValueError("B and N must be positive integers")


@dataclass(frozen=True)
class ScheduleConfig:
    """Three coarse-to-fine phases and the two positional-variance triggers.

    ``refine_thresholds[k]`` moves the filter from phase ``k`` to ``k + 1``
    once the trace of the particle position covariance drops below it.
    """

    phases: tuple = (Phase(0.25, 8, 9600), Phase(0.5, 16, 600), Phase(1.0, 32, 100))
    refine_thresholds: tuple = (0.15**2, 0.05**2)

    def __post_init__(self):
        phases = tuple(p if isinstance(p, Phase) else Phase(*p) for p in self.phases)
        object.__setattr__(self, "phases", phases)
        if len(phases) != 3:
            raise ValueError("exactly three phases are required")
        for a, b in zip(phases, phases[1:]):
            if b.R < a.R or b.B < a.B or b.N > a.N:
                raise ValueError("R and B must be non-decreasing and N non-increasing across phases")
        th = tuple(float(t) for t in self.refine_thresholds)
        if len(th) != 2 or any(not t > 0 for t in th):
            raise ValueError("two positive refinement thresholds are required")
        object.__setattr__(self, "refine_thresholds", th)

    @classmethod
    def for_range(cls, pos_range: float = 1.0) -> "ScheduleConfig":
        """Default phases with the triggers scaled to the initial position range."""
        return cls(refine_thresholds=((0.15 * pos_range) ** 2, (0.05 * pos_range) ** 2))

    @classmethod
    def single(cls, N: int = 600, B: int = 32, R: float = 1.0, pos_range: float = 1.0) -> "ScheduleConfig":
        """A fixed schedule: three identical phases, so refinement changes nothing."""
        p = Phase(R, B, N)
        return cls((p, p, p), ((0.15 * pos_range) ** 2, (0.05 * pos_range) ** 2))

    def with_initial_count(self, n: int) -> "ScheduleConfig":
        p0 = replace(self.phases[0], N=int(n))
        return replace(self, phases=(p0,) + self.phases[1:])


@dataclass(frozen=True)
class FilterConfig:
    motion: MotionConfig = MotionConfig()
    weighting: WeightingConfig = WeightingConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    quadrature: QuadratureConfig = QuadratureConfig()
    workers: int = 1

    def __post_init__(self):
        if int(self.workers) != self.workers or self.workers < 1:
            raise ValueError("workers must be a positive integer")


# ---------------------------------------------------------------------------
# filter operations


def init_particles(n: int, center: Pose, pos_range, rot_range, seed) -> ParticleSet:
    """Uniform box around ``center``; rotations ``center.R @ Exp(u)`` with ``u``
    uniform in +-``rot_range`` (radians) per axis."""
    if n < 1:
        raise ValueError("need at least one particle")
    pos_range = np.broadcast_to(np.asarray(pos_range, dtype=np.float64), (3,))
    rot_range = np.broadcast_to(np.asarray(rot_range, dtype=np.float64), (3,))
    if np.any(pos_range < 0) or np.any(rot_range < 0):
        raise ValueError("ranges must be >= 0")
    # six draws per particle, so a smaller set is a prefix of a larger one
    u = np.random.default_rng([int(seed), 0, 99]).uniform(-1.0, 1.0, size=(n, 6))
    pos = center.translation + u[:, :3] * pos_range
    rv = u[:, 3:] * rot_range
    rot = center.rotation @ so3_exp_batch(rv)
    return ParticleSet(rot, pos, np.full(n, 1.0 / n), step=0)


def predict(s: ParticleSet, m: MotionConfig, seed, scale: float = 1.0) -> ParticleSet:
    """Right-multiply every pose by the odometry and a Gaussian twist."""
    std = np.asarray(m.noise_std) * scale
    o_rot, o_t = m.odometry.rotation, m.odometry.translation
    rot = s.rotations @ o_rot
    trans = s.rotations @ o_t + s.translations
    if np.any(std > 0):
        delta = _rng(seed, s.step, _PREDICT).standard_normal((len(s), 6)) * std
        e_rot, e_t = se3_exp_batch(delta)
        trans = np.einsum("nij,nj->ni", rot, e_t) + trans
        rot = rot @ e_rot
    return ParticleSet(rot, trans, s.weights, s.step)


def likelihood_weights(errors_sq, F=None, exponent: float = 4.0, log: bool = False):
    """Per-particle weight ``(B / sum_j e_j F_j) ** exponent``.

    ``errors_sq`` is (n, B) squared RGB error summed over channels; ``F``
    the matching rejection penalties, or None for the baseline heuristic.
    Denominators are floored at 1e-12 so a perfect match stays finite.
    """
    e = np.atleast_2d(np.asarray(errors_sq, dtype=np.float64))
    b = e.shape[1]
    terms = e if F is None else e * np.atleast_2d(F)
    denom = np.maximum(terms.sum(axis=1), DENOMINATOR_FLOOR)
    logw = exponent * (np.log(b) - np.log(denom))
    return logw if log else np.exp(logw)


def sample_pixels(cam: Camera, count: int, seed, step: int) -> np.ndarray:
    """``count`` distinct pixel centers of ``cam``, shared by all particles."""
    n_pix = cam.width * cam.height
    if count > n_pix:
        raise ValueError(f"cannot sample {count} distinct pixels from a {cam.width}x{cam.height} image")
    flat = _rng(seed, step, _PIXELS).choice(n_pix, size=count, replace=False)
    return np.stack([flat % cam.width + 0.5, flat // cam.width + 0.5], axis=1).astype(np.float64)


@dataclass
class WeighResult:
    particles: ParticleSet  # normalized weights
    log_weights: np.ndarray  # unnormalized log weights
    pixels: np.ndarray
    colors: np.ndarray  # (n, B, 3)
    F: np.ndarray  # (n, B)


def weigh_detailed(
    s: ParticleSet,
    field,
    cam: Camera,
    observation: Image,
    phase: Phase,
    w: WeightingConfig,
    seed,
    q: QuadratureConfig = QuadratureConfig(),
    workers: int = 1,
) -> WeighResult:
    if observation.width != cam.width or observation.height != cam.height:
        raise ValueError("observation size does not match the camera")
    small_cam = cam.scaled(phase.R)
    obs = downscale(observation, phase.R)
    px = sample_pixels(small_cam, phase.B, seed, s.step)
    target = obs.at(px)  # (B, 3)
    d_cam = small_cam.camera_directions(px)
    dirs = np.einsum("nij,bj->nbi", s.rotations, d_cam).reshape(-1, 3)
    origins = np.repeat(s.translations, phase.B, axis=0)
    batch = render_rays(field, origins, dirs, q, w.alpha, w.tau, workers=workers, seed=[int(seed), s.step, 5])
    colors = batch.color.reshape(len(s), phase.B, 3)
    F = batch.F.reshape(len(s), phase.B)
    e2 = np.sum((colors - target[None]) ** 2, axis=2)
    logw = likelihood_weights(e2, F if w.mode == "rejection" else None, w.exponent, log=True)
    norm = np.exp(logw - logw.max())
    norm /= norm.sum()
    return WeighResult(ParticleSet(s.rotations, s.translations, norm, s.step), logw, px, colors, F)


def weigh(s, field, cam, observation, phase, w, seed, q=QuadratureConfig(), workers=1) -> ParticleSet:
    """Importance weights against ``observation`` downscaled by ``phase.R``."""
    return weigh_detailed(s, field, cam, observation, phase, w, seed, q, workers).particles


def systematic_indices(weights, n_out: int, offset: float) -> np.ndarray:
    """Low-variance resampling comb ``(offset + k) / n_out`` over the weight CDF."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise DegenerateBeliefError("degenerate belief: all weights are zero")
    if not 0 <= offset < 1:
        raise ValueError("offset must lie in [0, 1)")
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    comb = (offset + np.arange(n_out)) / n_out
    idx = np.searchsorted(cdf, comb, side="right")
    return np.minimum(idx, len(w) - 1)


def resample(s: ParticleSet, n_out: int, seed) -> ParticleSet:
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    offset = _rng(seed, s.step, _RESAMPLE).uniform()
    return s.take(systematic_indices(s.weights, n_out, offset))


def estimate(s: ParticleSet) -> Pose:
    """Weighted mean position and chordal (quaternion eigenvector) mean rotation."""
    w = s.weights / s.weights.sum()
    t = w @ s.translations
    if len(s) == 1 or np.allclose(s.rotations, s.rotations[0], atol=0, rtol=0):
        return Pose(s.rotations[0], t)
    r = Rotation.from_matrix(s.rotations).mean(weights=w).as_matrix()
    return Pose(r, t)


# ---------------------------------------------------------------------------
# coarse-to-fine controller


@dataclass
class FilterState:
    particles: ParticleSet
    phase: int = 0
    noise_scale: float = 1.0
    history: list = dc_field(default_factory=list)  # one StepRecord per step

    @property
    def step(self) -> int:
        return self.particles.step

    def active_phase(self, schedule: ScheduleConfig) -> Phase:
        return schedule.phases[self.phase]


@dataclass(frozen=True)
class StepRecord:
    step: int
    phase: int
    N: int
    B: int
    R: float
    weight_entropy: float
    prior_entropy: float
    wall_time_seconds: float
    estimate: Pose
    position_variance: float


def maybe_refine(state: FilterState, schedule: ScheduleConfig, seed=0) -> FilterState:
    """Advance at most one phase when the position variance is below the trigger.

    On advance the (uniformly weighted) set is thinned to the new phase's
    particle count with the systematic comb.
    """
    if state.phase >= 2:
        return state
    if state.particles.position_variance() >= schedule.refine_thresholds[state.phase]:
        return state
    nxt = state.phase + 1
    n_new = schedule.phases[nxt].N
    s = state.particles
    if n_new != len(s):
        offset = _rng(seed, s.step, _REFINE).uniform()
        s = s.take(systematic_indices(s.weights, n_new, offset))
    return FilterState(s, nxt, state.noise_scale, state.history)


def step(
    state: FilterState,
    field,
    cam: Camera,
    observation: Image,
    config: FilterConfig,
    seed,
    clock: Callable[[], float] = time.perf_counter,
) -> FilterState:
    """predict -> weigh -> resample to the phase's N -> maybe_refine."""
    t0 = clock()
    phase = config.schedule.phases[state.phase]
    prior = weight_entropy(state.particles.weights)
    s = predict(state.particles, config.motion, seed, state.noise_scale)
    s = weigh(s, field, cam, observation, phase, config.weighting, seed, config.quadrature, config.workers)
    entropy = weight_entropy(s.weights)
    s = resample(s, phase.N, seed)
    s = ParticleSet(s.rotations, s.translations, s.weights, s.step + 1)
    elapsed = clock() - t0
    record = StepRecord(
        step=s.step,
        phase=state.phase,
        N=phase.N,
        B=phase.B,
        R=phase.R,
        weight_entropy=entropy,
        prior_entropy=prior,
        wall_time_seconds=elapsed,
        estimate=estimate(s),
        position_variance=s.position_variance(),
    )
    new = FilterState(s, state.phase, state.noise_scale * config.motion.annealing, state.history + [record])
    return maybe_refine(new, config.schedule, seed)


def converged(state: FilterState, schedule: ScheduleConfig, motion: MotionConfig | None = None) -> bool:
    """Final phase reached and position variance below a quarter of the last trigger.

    With ``motion`` given, the annealed prediction spread (the positional
    variance one predict step would add) must also be below that bound;
    otherwise resampling collapse can stop the filter before it has settled.
    """
    limit = schedule.refine_thresholds[1] / 4.0
    if state.phase != 2 or state.particles.position_variance() >= limit:
        return False
    if motion is None:
        return True
    spread = float(np.sum((np.asarray(motion.noise_std[3:]) * state.noise_scale) ** 2))
    return spread < limit
