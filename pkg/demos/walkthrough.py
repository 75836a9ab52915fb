"""End-to-end tour: simulate, label contacts, perturb, re-render, augment.

Run with ``python3 demos/walkthrough.py``; it takes well under a minute and
writes nothing to disk.
"""

import json
from pathlib import Path

import numpy as np

from bimaug.contact import label_trajectory
from bimaug.dataset.augment import AugmentConfig, augment_trajectory
from bimaug.geometry import Pose
from bimaug.sampler import ContactContext, PerturbationSampler, violated_constraint
from bimaug.sim import DemoScript, render, run_demo
from bimaug.sim.scenario import scene_from_dict
from bimaug.synth.base import ImagePair
from bimaug.synth.reprojection import ReprojectionSynthesizer

HERE = Path(__file__).parent


def psnr(a, b, mask):
    mse = np.mean((a[mask] - b[mask]) ** 2)
    return 10 * np.log10(1.0 / max(mse, 1e-12))


# 1. One scripted lift-ball demonstration from the checked-in setup.
setup = json.loads((HERE / "lift_ball_setup.json").read_text())
demo = run_demo(scene_from_dict(setup["scene"]), DemoScript.from_dict(setup["script"]))
traj = demo.trajectory
gt_onset = int(np.flatnonzero(demo.contact)[0])
print(f"{len(traj)} steps, geometric contact from step {gt_onset}")

# 2. Contact phases from depth + gripper masks.
labels = label_trajectory(traj)
print(f"depth-path onset: {labels.onset_index}")

# 3. A shared, constraint-checked translation for one contact-rich step.
t = gt_onset + 4
step = traj.steps[t]
ctx = ContactContext({n: step.arm(n).camera for n in ("left", "right")},
                     {n: step.arm(n).eef for n in ("left", "right")},
                     {n: step.arm(n).joints for n in ("left", "right")})
sampler = PerturbationSampler()
pert = sampler.contact(ctx, traj.arms, np.random.default_rng(0))
print(f"contact perturbation: t = {np.round(pert.left.translation, 4)} m, cost {pert.cost}")
c = pert.left.translation / sampler.cfg.bounds.scale
print("violated constraint on re-check:", violated_constraint(c, ctx, traj.arms, sampler.cfg.bounds,
                                                               sampler.cfg.constraints))

# 4. Reproject the left wrist view 1 cm sideways and compare with a fresh render.
T = Pose.from_translation([0.01, 0.0, 0.0])
synth = ReprojectionSynthesizer(traj.intrinsics)
src = ImagePair(step.left.image, step.right.image, step.left.depth, step.right.depth)
res = synth.synthesize(src, T, T)
truth = render(demo.scenes[t], step.left.camera @ T, traj.intrinsics["left"]).rgb
print(f"reprojection PSNR {psnr(res.images.left, truth, res.valid_left):.1f} dB "
      f"on {res.valid_left.mean():.0%} of pixels")

# 5. Every-6th-step replacement over the whole demo.
aug, outcomes, report = augment_trajectory(traj, labels, AugmentConfig(k=6), sampler, synth)
for o in outcomes:
    kind = o.perturbation.kind.value if o.perturbation else "-"
    print(f"  step {o.index:2d}: {o.status.value:13s} {kind}")
print(json.dumps(report.to_dict(), indent=2))
