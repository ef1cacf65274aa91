"""Experiment orchestration: observations, brute-force oracle, trials and ablations."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import filter as mcl
from .field import SceneSpec, VoxelField, generate_scene
from .geometry import Camera, Pose, position_error, rotation_error, yaw_pose
from .image import Image, add_noise, downscale
from .renderer import QuadratureConfig, render_image, render_pixels

__all__ = [
    "Image",
    "downscale",
    "make_observation",
    "photometric_error",
    "pose_grid",
    "oracle_search",
    "ExperimentSpec",
    "TrialResult",
    "run_trial",
    "run_trials",
    "run_ablation",
]

CSV_COLUMNS = ["trial_seed", "final_pos_err", "final_rot_err", "pos_success", "rot_success", "steps", "mean_step_seconds"]
ABLATION_AXES = ("rejection", "coarse-to-fine", "tau", "init-count")


def default_camera() -> Camera:
    return Camera.from_fov(32, 24, 70.0)


def make_observation(field, cam: Camera, gt_pose: Pose, q: QuadratureConfig = QuadratureConfig(), workers=1) -> Image:
    """Full-resolution render from the ground-truth pose."""
    return Image(np.clip(render_image(field, cam, gt_pose, q, workers), 0.0, 1.0))


def photometric_error(field, cam: Camera, observation: Image, pose: Pose, q: QuadratureConfig = QuadratureConfig()) -> float:
    """Full-frame sum of squared RGB errors (the baseline objective)."""
    batch = render_pixels(field, cam, pose, cam.pixel_centers(), q)
    return float(np.sum((batch.color - observation.pixels.reshape(-1, 3)) ** 2))


def pose_grid(center: Pose, xs: Sequence[float], zs: Sequence[float], yaws_deg: Sequence[float]) -> list[Pose]:
    """Poses on a horizontal (x, z) grid around ``center`` with absolute yaws."""
    c = center.translation
    return [yaw_pose(c[0] + x, c[1], c[2] + z, yaw) for x in xs for z in zs for yaw in yaws_deg]


def oracle_search(field, cam: Camera, observation: Image, grid: Sequence[Pose], q: QuadratureConfig = QuadratureConfig()) -> Pose:
    """Exhaustive argmin of the full-frame photometric error over ``grid``."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty pose grid")
    errs = [photometric_error(field, cam, observation, p, q) for p in grid]
    return grid[int(np.argmin(errs))]


# ---------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class ExperimentSpec:
    scene: SceneSpec = SceneSpec()
    camera: Camera = dc_field(default_factory=default_camera)
    gt_pose: Pose = dc_field(default_factory=Pose.identity)
    filter: mcl.FilterConfig = mcl.FilterConfig()
    pos_range: float = 1.0
    rot_range_deg: tuple = (15.0, 180.0, 15.0)
    trials: int = 20
    seed: int = 0
    pos_threshold: float | None = None  # default: 5% of pos_range
    rot_threshold_deg: float = 5.0
    max_steps: int = 60
    observation_noise: float = 0.0
    field: VoxelField | None = None  # overrides ``scene`` when given

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if self.pos_range < 0 or self.max_steps < 1 or self.observation_noise < 0:
            raise ValueError("invalid experiment ranges")
        if self.pos_threshold is None:
            object.__setattr__(self, "pos_threshold", 0.05 * self.pos_range if self.pos_range > 0 else 0.05)
        if not (self.pos_threshold > 0 and self.rot_threshold_deg > 0):
            raise ValueError("success thresholds must be positive")

    @property
    def trial_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.trials)]

    def build_field(self):
        return self.field if self.field is not None else generate_scene(self.scene)


@dataclass(frozen=True)
class TrialResult:
    trial_seed: int
    final_pos_err: float
    final_rot_err: float
    pos_success: bool
    rot_success: bool
    steps: int
    mean_step_seconds: float
    total_seconds: float
    final_pose: Pose | None = None
    trace: tuple = ()

    @property
    def success(self) -> bool:
        return self.pos_success and self.rot_success

    def row(self) -> list:
        return [
            self.trial_seed,
            f"{self.final_pos_err:.9g}",
            f"{self.final_rot_err:.9g}",
            int(self.pos_success),
            int(self.rot_success),
            self.steps,
            f"{self.mean_step_seconds:.9g}",
        ]


def trace_record(rec: mcl.StepRecord, gt: Pose | None, mode: str) -> dict:
    return {
        "step": rec.step,
        "phase": rec.phase,
        "N": rec.N,
        "B": rec.B,
        "R": rec.R,
        "position_error": None if gt is None else position_error(rec.estimate, gt),
        "rotation_error": None if gt is None else rotation_error(rec.estimate, gt),
        "weight_entropy": rec.weight_entropy,
        "wall_time_seconds": rec.wall_time_seconds,
        "mode": mode,
    }


def localize(
    field,
    cam: Camera,
    observation: Image,
    config: mcl.FilterConfig,
    init: mcl.ParticleSet,
    seed: int,
    max_steps: int = 60,
    clock: Callable[[], float] = time.perf_counter,
    callback: Callable | None = None,
) -> mcl.FilterState:
    """Run filter steps until convergence or ``max_steps``."""
    state = mcl.FilterState(init)
    for _ in range(max_steps):
        state = mcl.step(state, field, cam, observation, config, seed, clock)
        if callback is not None:
            callback(state)
        if mcl.converged(state, config.schedule, config.motion):
            break
    return state


def run_trial(spec: ExperimentSpec, trial_seed: int, field=None, observation: Image | None = None, clock=time.perf_counter) -> TrialResult:
    field = field if field is not None else spec.build_field()
    if observation is None:
        observation = make_observation(field, spec.camera, spec.gt_pose, spec.filter.quadrature)
    observation = add_noise(observation, spec.observation_noise, [trial_seed, 7])
    n0 = spec.filter.schedule.phases[0].N
    init = mcl.init_particles(n0, spec.gt_pose, spec.pos_range, np.radians(spec.rot_range_deg), trial_seed)
    state = localize(field, spec.camera, observation, spec.filter, init, trial_seed, spec.max_steps, clock)
    est = state.history[-1].estimate
    pe, re = position_error(est, spec.gt_pose), rotation_error(est, spec.gt_pose)
    if not (math.isfinite(pe) and math.isfinite(re)):
        pe, re = math.inf, 180.0
    times = [r.wall_time_seconds for r in state.history]
    mode = spec.filter.weighting.mode
    return TrialResult(
        trial_seed=trial_seed,
        final_pos_err=pe,
        final_rot_err=re,
        pos_success=pe < spec.pos_threshold,
        rot_success=re < spec.rot_threshold_deg,
        steps=len(state.history),
        mean_step_seconds=float(np.mean(times)),
        total_seconds=float(np.sum(times)),
        final_pose=est,
        trace=tuple(trace_record(r, spec.gt_pose, mode) for r in state.history),
    )


def _failed_trial(seed: int) -> TrialResult:
    return TrialResult(seed, math.inf, 180.0, False, False, 1, 0.0, 0.0)


def aggregate(results: Sequence[TrialResult]) -> dict:
    pe = np.array([r.final_pos_err for r in results])
    re = np.array([r.final_rot_err for r in results])
    return {
        "mean_pos_err": float(np.mean(pe)),
        "mean_rot_err": float(np.mean(re)),
        "pos_acc": float(np.mean([r.pos_success for r in results])),
        "rot_acc": float(np.mean([r.rot_success for r in results])),
        "mean_step_seconds": float(np.mean([r.mean_step_seconds for r in results])),
    }


@dataclass
class TrialBatch:
    results: list
    aggregates: dict

    def success_rate(self) -> float:
        return float(np.mean([r.success for r in self.results]))

    def mean_trial_seconds(self) -> float:
        return float(np.mean([r.total_seconds for r in self.results]))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.results:
            w.writerow(r.row())
        return buf.getvalue()

    def json_text(self) -> str:
        return json.dumps(self.aggregates, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, stem: str = "trials") -> None:
        import pathlib

        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.csv_text())
        (out / f"{stem}.json").write_text(self.json_text())


def run_trials(spec: ExperimentSpec, clock=time.perf_counter, progress: Callable | None = None) -> TrialBatch:
    """Independent seeded trials against one observation; sorted by seed."""
    field = spec.build_field()
    observation = make_observation(field, spec.camera, spec.gt_pose, spec.filter.quadrature)
    results = []
    for seed in spec.trial_seeds:
        try:
            res = run_trial(spec, seed, field, observation, clock)
        except (mcl.DegenerateBeliefError, FloatingPointError):
            res = _failed_trial(seed)
        results.append(res)
        if progress is not None:
            progress(res)
    results.sort(key=lambda r: r.trial_seed)
    return TrialBatch(results, aggregate(results))


# ---------------------------------------------------------------------------
# ablations


def ablation_variants(base: ExperimentSpec, axis: str, values: Iterable | None = None) -> list[tuple[str, ExperimentSpec]]:
    f = base.filter
    if axis == "rejection":
        return [
            ("rejection-on", replace(base, filter=replace(f, weighting=replace(f.weighting, mode="rejection")))),
            ("rejection-off", replace(base, filter=replace(f, weighting=replace(f.weighting, mode="baseline")))),
        ]
    if axis == "coarse-to-fine":
        single = mcl.ScheduleConfig.single(600, 32, 1.0, base.pos_range)
        return [("coarse-to-fine", base), ("single-phase", replace(base, filter=replace(f, schedule=single)))]
    if axis == "tau":
        vals = list(values) if values is not None else [0.05, 0.1, 0.2, 0.4]
        w = replace(f.weighting, mode="rejection")
        return [(f"tau={v:g}", replace(base, filter=replace(f, weighting=replace(w, tau=float(v))))) for v in vals]
    if axis == "init-count":
        vals = list(values) if values is not None else [1200, 2400, 4800, 9600]
        out = []
        for v in vals:
            sched = f.schedule.with_initial_count(int(v))
            out.append((f"n_init={int(v)}", replace(base, filter=replace(f, schedule=sched))))
        return out
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


@dataclass
class AblationTable:
    axis: str
    rows: list  # dicts
    batches: dict  # variant -> TrialBatch

    COLUMNS = (
        "variant",
        "success_rate",
        "pos_acc",
        "rot_acc",
        "mean_pos_err",
        "mean_rot_err",
        "mean_steps",
        "mean_step_seconds",
        "mean_trial_seconds",
        "mean_phase0_seconds",
    )

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], str) else f"{r[c]:.9g}" for c in self.COLUMNS])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        import pathlib

        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{self.axis}.csv").write_text(self.csv_text())
        (out / f"ablation_{self.axis}.json").write_text(json.dumps(self.rows, indent=2) + "\n")


def _phase0_seconds(r: TrialResult) -> float:
    return float(sum(t["wall_time_seconds"] for t in r.trace if t["phase"] == 0))


def run_ablation(base: ExperimentSpec, axis: str, values=None, clock=time.perf_counter, progress=None) -> AblationTable:
    """Run every variant of ``axis`` on the same trial seeds."""
    rows, batches = [], {}
    for name, spec in ablation_variants(base, axis, values):
        batch = run_trials(spec, clock, progress)
        batches[name] = batch
        agg = batch.aggregates
        rows.append(
            {
                "variant": name,
                "success_rate": batch.success_rate(),
                **agg,
                "mean_steps": float(np.mean([r.steps for r in batch.results])),
                "mean_trial_seconds": batch.mean_trial_seconds(),
                "mean_phase0_seconds": float(np.mean([_phase0_seconds(r) for r in batch.results])),
            }
        )
    return AblationTable(axis, rows, batches)
