"""Command-line entry point: ``mclrf {scene gen,render,localize,bench,ablate}``.

Exit codes: 0 when a run completes (whatever the localization outcome),
1 for unreadable or unwritable files, 2 for invalid arguments or configs.
"""

from __future__ import annotations

import argparse
import json
import os
import pathlib
import sys
import time

import numpy as np

from . import filter as mcl
from . import harness
from .field import SCENE_KINDS, FieldFormatError, SceneSpec, generate_scene, load_field, save_field
from .geometry import Pose, load_camera, pose_to_list, save_camera, so3_exp, yaw_pose
from .image import Image
from .renderer import DEFAULT_ALPHA, DEFAULT_TAU, QuadratureConfig, render_image, write_ppm

MAP_NAME = "map.vrf1"
CAMERA_NAME = "camera.json"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument parsing helpers


def _floats(text: str, n: int | None = None) -> tuple:
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _triple(text):
    return _floats(text, 3)


def _sextuple(text):
    return _floats(text, 6)


def _pair(text):
    return _floats(text, 2)


def _range3(text):
    """A single value for every axis, or three per-axis values."""
    vals = _floats(text)
    if len(vals) == 1:
        return vals * 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated numbers, got {text!r}")
    return vals


def parse_pose(text: str) -> Pose:
    """``x,y,z,identity`` | ``x,y,z,yaw:DEG`` | ``x,y,z,rx,ry,rz`` (rotation vector, rad)."""
    parts = [p.strip() for p in text.split(",")]
    try:
        x, y, z = (float(p) for p in parts[:3])
        rest = parts[3:]
        if rest in ([], ["identity"]):
            return Pose.from_translation(x, y, z)
        if len(rest) == 1 and rest[0].startswith("yaw:"):
            return yaw_pose(x, y, z, float(rest[0][4:]))
        if len(rest) == 3:
            return Pose(so3_exp([float(r) for r in rest]), [x, y, z])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"bad pose {text!r}; expected x,y,z,identity | x,y,z,yaw:DEG | x,y,z,rx,ry,rz")


def _workers_default() -> int:
    env = os.environ.get("MCLRF_WORKERS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MCLRF_WORKERS must be an integer, got {env!r}") from None


def _add_scene_args(p, with_map=True):
    g = p.add_argument_group("scene")
    if with_map:
        g.add_argument("--map", help="VRF1 map file; when omitted a scene is generated from the flags below")
        g.add_argument("--exterior-noise", type=float, default=0.0, help="noise density beyond the map bbox (loaded maps)")
        g.add_argument("--exterior-seed", type=int, default=0, help="noise seed beyond the map bbox (loaded maps)")
    g.add_argument("--kind", choices=SCENE_KINDS, default="box-room", help="synthetic scene kind")
    g.add_argument("--scene-seed", type=int, default=0, help="scene generation seed")
    g.add_argument("--resolution", type=int, default=32, help="grid nodes per axis")
    g.add_argument(
        "--noise-exterior", type=float, default=None, help="exterior noise density (default: the kind's default)"
    )
    g.add_argument("--wall-density", type=float, default=50.0, help="wall density")


def _add_camera_args(p):
    g = p.add_argument_group("camera")
    g.add_argument("--camera", help="camera JSON; default is a 32x24 pinhole with a 70 degree horizontal FOV")


def _add_quadrature_args(p):
    g = p.add_argument_group("quadrature")
    g.add_argument("--samples", type=int, default=64, help="samples per ray")
    g.add_argument("--z-near", type=float, default=0.05, help="near depth")
    g.add_argument("--z-far", type=float, default=None, help="far depth (default: map bbox diagonal)")
    g.add_argument("--stratified", action="store_true", help="jitter samples within their bins")


def _add_filter_args(p):
    g = p.add_argument_group("filter")
    g.add_argument("--weighting", choices=("rejection", "baseline"), default="rejection", help="particle weighting")
    g.add_argument("--tau", type=float, default=DEFAULT_TAU, help="rejection penalty floor")
    g.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="opacity threshold for z_trans / z_opaque")
    g.add_argument("--exponent", type=float, default=4.0, help="likelihood exponent")
    g.add_argument("--R", type=_triple, default="0.25,0.5,1", help="per-phase resolution scales")
    g.add_argument("--B", type=_triple, default="8,16,32", help="per-phase rays per particle")
    g.add_argument("--N", type=_triple, default="9600,600,100", help="per-phase particle counts")
    g.add_argument(
        "--n-particles", type=int, default=None, help="initial particle count; later phase counts are capped by it"
    )
    g.add_argument(
        "--refine", type=_pair, default=None, help="position-variance triggers (default: (0.15 s)^2,(0.05 s)^2, s = pos range)"
    )
    g.add_argument(
        "--noise-std",
        type=_sextuple,
        default=None,
        help="prediction std-devs, rot rad x3 then trans x3 (default: 0.03 x rot range / 180 deg, 0.04 x pos range)",
    )
    g.add_argument("--annealing", type=float, default=mcl.MotionConfig().annealing, help="per-step noise factor")
    g.add_argument("--pos-range", type=float, default=1.0, help="initial position spread, +- per axis")
    g.add_argument("--rot-range", type=_range3, default="15,180,15", help="initial rotation spread in degrees")
    g.add_argument("--max-steps", type=int, default=60, help="step budget")
    g.add_argument("--seed", type=int, default=0, help="filter seed")
    g.add_argument("--no-timing", action="store_true", help="write zero wall times so outputs are byte-identical")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mclrf", description="Particle-filter localization in radiance fields.")
    parser.add_argument("--workers", type=int, default=None, help="thread cap (default: $MCLRF_WORKERS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_workers(p):
        p.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="thread cap ($MCLRF_WORKERS or 1)")

    scene = sub.add_parser("scene", help="scene utilities", formatter_class=fmt)
    scene_sub = scene.add_subparsers(dest="scene_command", required=True)
    gen = scene_sub.add_parser("gen", help="generate a synthetic map and camera", formatter_class=fmt)
    _add_scene_args(gen, with_map=False)
    gen.add_argument("--seed", type=int, default=None, help="alias for --scene-seed")
    gen.add_argument("--out-dir", default=".", help="output directory")
    add_workers(gen)
    gen.set_defaults(func=cmd_scene_gen)

    render = sub.add_parser("render", help="render a PPM image", formatter_class=fmt)
    _add_scene_args(render)
    _add_camera_args(render)
    _add_quadrature_args(render)
    render.add_argument("--pose", type=parse_pose, default=None, help="camera pose (default: the camera file's)")
    render.add_argument("--out", default="render.ppm", help="output PPM")
    add_workers(render)
    render.set_defaults(func=cmd_render)

    loc = sub.add_parser("localize", help="localize one image", formatter_class=fmt)
    _add_scene_args(loc)
    _add_camera_args(loc)
    _add_quadrature_args(loc)
    _add_filter_args(loc)
    loc.add_argument("--observation", help="observed PPM image")
    loc.add_argument("--self-render", action="store_true", help="render the observation from --gt")
    loc.add_argument("--gt", type=parse_pose, default=None, help="ground-truth pose")
    loc.add_argument("--out-dir", default="localize_out", help="output directory")
    add_workers(loc)
    loc.set_defaults(func=cmd_localize)

    parser.spec_targets = {}
    helps = {"bench": "run seeded localization trials", "ablate": "compare variants along one ablation axis"}
    for name, func in (("bench", cmd_bench), ("ablate", cmd_ablate)):
        p = parser.spec_targets[name] = sub.add_parser(name, help=helps[name], formatter_class=fmt)
        p.add_argument("--spec", help="JSON file of flag defaults (keys are flag names with underscores)")
        _add_scene_args(p)
        _add_camera_args(p)
        _add_quadrature_args(p)
        _add_filter_args(p)
        p.add_argument("--gt", type=parse_pose, default="0,0,0,identity", help="ground-truth pose")
        p.add_argument("--trials", type=int, default=20, help="trial count")
        p.add_argument("--observation-noise", type=float, default=0.0, help="additive pixel noise std")
        p.add_argument("--out-dir", default=f"{name}_out", help="output directory")
        if name == "ablate":
            p.add_argument("--axis", choices=harness.ABLATION_AXES, required=True, help="ablation axis")
            p.add_argument("--values", type=_floats, default=None, help="sweep values for tau / init-count")
        add_workers(p)
        p.set_defaults(func=func)
    return parser


# ---------------------------------------------------------------------------
# config assembly (all validation happens here, before any work)


def _scene_spec(a) -> SceneSpec:
    seed = a.scene_seed if getattr(a, "seed", None) is None or a.command != "scene" else a.seed
    return SceneSpec(
        kind=a.kind, resolution=a.resolution, noise_amplitude=a.noise_exterior, wall_density=a.wall_density, seed=seed
    )


def _load_map(a):
    if getattr(a, "map", None):
        if a.exterior_noise < 0:
            raise UsageError("--exterior-noise must be >= 0")
        ext = "noise" if a.exterior_noise > 0 else "zero"
        return load_field(a.map, exterior=ext, noise_amplitude=a.exterior_noise, noise_seed=a.exterior_seed), None
    spec = _scene_spec(a)
    return None, spec


def _camera(a):
    if a.camera:
        return load_camera(a.camera)
    return harness.default_camera(), None


def _quadrature(a) -> QuadratureConfig:
    return QuadratureConfig(samples_per_ray=a.samples, stratified=a.stratified, z_near=a.z_near, z_far=a.z_far)


def _count(v, name):
    if v != int(v):
        raise UsageError(f"{name} entries must be integers")
    return int(v)


def _noise_std(a) -> tuple:
    """Prediction noise scaled with the initial spread; zero spread means zero noise."""
    if a.noise_std is not None:
        return a.noise_std
    rot = tuple(0.03 * max(a.rot_range) / 180.0 for _ in range(3))
    return rot + (0.04 * a.pos_range,) * 3


def _filter_config(a, workers: int) -> mcl.FilterConfig:
    counts = [_count(n, "--N") for n in a.N]
    if a.n_particles is not None:
        if a.n_particles < 1:
            raise UsageError("--n-particles must be >= 1")
        counts = [a.n_particles] + [min(n, a.n_particles) for n in counts[1:]]
    phases = tuple(mcl.Phase(float(r), _count(b, "--B"), n) for r, b, n in zip(a.R, a.B, counts))
    if a.refine is not None:
        thresholds = tuple(a.refine)
    else:
        s = a.pos_range if a.pos_range > 0 else 1.0
        thresholds = mcl.ScheduleConfig.for_range(s).refine_thresholds
    schedule = mcl.ScheduleConfig(phases, thresholds)
    return mcl.FilterConfig(
        motion=mcl.MotionConfig(noise_std=_noise_std(a), annealing=a.annealing),
        weighting=mcl.WeightingConfig(mode=a.weighting, exponent=a.exponent, tau=a.tau, alpha=a.alpha),
        schedule=schedule,
        quadrature=_quadrature(a),
        workers=workers,
    )


def _experiment(a, workers) -> tuple[harness.ExperimentSpec, object]:
    field, scene = _load_map(a)
    cam, _ = _camera(a)
    spec = harness.ExperimentSpec(
        scene=scene if scene is not None else SceneSpec(),
        camera=cam,
        gt_pose=a.gt,
        filter=_filter_config(a, workers),
        pos_range=a.pos_range,
        rot_range_deg=tuple(a.rot_range),
        trials=a.trials,
        seed=a.seed,
        max_steps=a.max_steps,
        observation_noise=a.observation_noise,
        field=field,
    )
    return spec, field


def _clock(a):
    return (lambda: 0.0) if a.no_timing else time.perf_counter


# ---------------------------------------------------------------------------
# subcommands


def cmd_scene_gen(a, workers) -> int:
    spec = _scene_spec(a)
    field = generate_scene(spec)
    out = pathlib.Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = Pose.identity()
    save_field(field, out / MAP_NAME)
    save_camera(out / CAMERA_NAME, harness.default_camera(), gt)
    lo, hi = field.bbox
    print(f"map: {out / MAP_NAME}")
    print(f"camera: {out / CAMERA_NAME}")
    print(f"bbox min: {' '.join(f'{v:g}' for v in lo)}")
    print(f"bbox max: {' '.join(f'{v:g}' for v in hi)}")
    print("suggested gt: 0,0,0,identity")
    if spec.noise_amplitude > 0:
        print(f"load with: --exterior-noise {spec.noise_amplitude:g} --exterior-seed {spec.seed}")
    return 0


def cmd_render(a, workers) -> int:
    q = _quadrature(a)
    field, scene = _load_map(a)
    cam, cam_pose = _camera(a)
    pose = a.pose if a.pose is not None else (cam_pose if cam_pose is not None else Pose.identity())
    if field is None:
        field = generate_scene(scene)
    write_ppm(a.out, np.clip(render_image(field, cam, pose, q, workers), 0.0, 1.0))
    return 0


def cmd_localize(a, workers) -> int:
    config = _filter_config(a, workers)
    if a.max_steps < 1 or a.pos_range < 0:
        raise UsageError("--max-steps must be >= 1 and --pos-range >= 0")
    if a.self_render == bool(a.observation):
        raise UsageError("give exactly one of --observation or --self-render")
    field, scene = _load_map(a)
    cam, cam_pose = _camera(a)
    gt = a.gt if a.gt is not None else cam_pose
    if a.self_render and gt is None:
        raise UsageError("--self-render needs --gt (or a camera file with a transform)")
    obs = Image.load_ppm(a.observation) if a.observation else None
    if obs is not None and (obs.width, obs.height) != (cam.width, cam.height):
        raise UsageError(f"observation is {obs.width}x{obs.height}, camera is {cam.width}x{cam.height}")
    if field is None:
        field = generate_scene(scene)
    if obs is None:
        obs = harness.make_observation(field, cam, gt, config.quadrature, workers)
    center = gt if gt is not None else Pose.identity()
    init = mcl.init_particles(config.schedule.phases[0].N, center, a.pos_range, np.radians(a.rot_range), a.seed)
    state = harness.localize(field, cam, obs, config, init, a.seed, a.max_steps, _clock(a))

    out = pathlib.Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.jsonl", "w") as f:
        for rec in state.history:
            row = harness.trace_record(rec, gt, a.weighting)
            row["estimate"] = pose_to_list(rec.estimate)
            f.write(json.dumps(row, sort_keys=True) + "\n")
    final = state.history[-1]
    summary = harness.trace_record(final, gt, a.weighting)
    summary["transform"] = pose_to_list(final.estimate)
    summary["converged"] = mcl.converged(state, config.schedule, config.motion)
    (out / "final_pose.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    msg = f"steps {len(state.history)}  phase {final.phase}"
    if gt is not None:
        msg += f"  position error {summary['position_error']:.4g}  rotation error {summary['rotation_error']:.4g} deg"
    print(msg)
    return 0


def cmd_bench(a, workers) -> int:
    spec, _ = _experiment(a, workers)
    batch = harness.run_trials(spec, _clock(a))
    batch.write(a.out_dir, "bench")
    print(json.dumps(batch.aggregates, sort_keys=True))
    return 0


def cmd_ablate(a, workers) -> int:
    spec, _ = _experiment(a, workers)
    harness.ablation_variants(spec, a.axis, a.values)  # validate before running
    table = harness.run_ablation(spec, a.axis, a.values, _clock(a))
    table.write(a.out_dir)
    sys.stdout.write(table.csv_text())
    return 0


# ---------------------------------------------------------------------------


def _apply_spec_file(parser, argv):
    """Load ``--spec`` JSON into the bench / ablate subparser defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--spec")
    known, _ = pre.parse_known_args(argv)
    command = next((t for t in argv if t in parser.spec_targets), None)
    if not known.spec or command is None:
        return
    with open(known.spec) as f:
        overrides = json.load(f)
    if not isinstance(overrides, dict):
        raise UsageError("--spec file must hold a JSON object")
    sp = parser.spec_targets[command]
    actions = {act.dest: act for act in sp._actions}
    unknown = sorted(set(overrides) - set(actions) - {"spec", "help"})
    if unknown:
        raise UsageError(f"unknown keys in --spec file: {', '.join(unknown)}")
    sp.set_defaults(**{k: _coerce(actions[k], v) for k, v in overrides.items()})


def _coerce(act, value):
    if act.type is None or isinstance(value, bool):
        return value
    text = ",".join(str(v) for v in value) if isinstance(value, list) else str(value)
    return act.type(text)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_spec_file(parser, argv)
        args = parser.parse_args(argv)
        workers = args.workers if args.workers is not None else _workers_default()
        if workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args, workers)
    except SystemExit as e:  # argparse usage errors
        return int(e.code) if isinstance(e.code, int) else 2
    except FieldFormatError as e:
        print(f"mclrf: unreadable map: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"mclrf: {e}", file=sys.stderr)
        return 1
    except (ValueError, argparse.ArgumentTypeError, mcl.DegenerateBeliefError) as e:
        print(f"mclrf: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
