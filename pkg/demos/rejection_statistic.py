"""How the ray-uncertainty penalty separates valid and invalid map regions.

Renders the penalty map from a viewpoint inside the room and from one in the
noise beyond the walls, then compares how much weight particles outside the
room receive with and without rejection weighting.
"""

import numpy as np

import mclrf.filter as mcl
from mclrf import harness
from mclrf.field import SceneSpec, generate_scene, in_valid_region
from mclrf.geometry import Pose, yaw_pose
from mclrf.renderer import render_images_stats

spec = SceneSpec(kind="noise-exterior")
field = generate_scene(spec)
cam = harness.default_camera()

inside = Pose.identity()
outside = yaw_pose(0.0, 0.0, -(spec.room_half + spec.wall_thickness + 0.2), 180.0)
for name, pose in [("inside the room", inside), ("in the noise shell", outside)]:
    _, F = render_images_stats(field, cam, pose)
    print(f"{name:20s} F mean {F.mean():.3f}  median {np.median(F):.3f}  max {F.max():.3f}")

obs = harness.make_observation(field, cam, inside)
for seed in range(3):
    s = mcl.init_particles(9600, inside, 1.0, np.radians((15, 180, 15)), seed)
    out = ~in_valid_region(spec, s.translations)
    masses = []
    for mode in mcl.MODES:
        w = mcl.weigh(s, field, cam, obs, mcl.Phase(0.25, 8, 9600), mcl.WeightingConfig(mode=mode), seed).weights
        masses.append(w[out].sum())
    print(f"seed {seed}: weight outside the room  baseline {masses[0]:.4f}  rejection {masses[1]:.4f}")
