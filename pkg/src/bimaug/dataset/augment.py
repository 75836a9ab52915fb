"""Every-k-steps state replacement and dataset union.

For each attempted timestep a perturbation is drawn according to the
timestep's contact phase, the end effectors are moved with the camera
(``E' = C T C^-1 E``), new joint targets are solved by IK seeded at the
recorded joints, and both wrist images are re-synthesized. Any failure keeps
the original step and records why.

A replaced step stores the synthesized images, the perturbed camera and
end-effector poses and the perturbed joints as its state, while its action is
the original demonstration action, so the pair teaches the policy to return
to the demonstrated motion. Depth and masks are not synthesized and are
dropped on replaced steps.

Randomness is derived per (run seed, episode index, timestep), so results do
not depend on processing order or on the number of worker processes.
"""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..contact import ContactLabel, Phase
from ..errors import BimaugError, LabelLengthMismatch, SchemaMismatch
from ..geometry import Pose, perturb_eef
from ..kinematics import ik_lm
from ..sampler import CONSTRAINTS, ContactContext, Infeasible, Perturbation, PerturbationSampler, SamplerConfig
from ..synth.base import ImagePair, Synthesizer
from .model import ARMS, ArmObs, Dataset, TimeStep, Trajectory, rgb_to_uint8

log = logging.getLogger(__name__)


class StepStatus(str, Enum):
    REPLACED = "replaced"
    KEPT_ORIGINAL = "kept_original"


class KeepReason(str, Enum):
    IK_INVALID = "ik_invalid"
    SAMPLER_INFEASIBLE = "sampler_infeasible"
    SYNTH_ERROR = "synth_error"


@dataclass(frozen=True)
class AugmentConfig:
    k: int = 6
    offset: int = 0
    run_seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    synth: str = "reproject"  # "reproject" | "diffusion"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")
        if self.synth not in ("reproject", "diffusion"):
            raise ValueError(f"unknown synthesizer {self.synth!r}")

    def attempt_indices(self, n: int) -> list[int]:
        return list(range(self.offset, n, self.k))

    def to_dict(self) -> dict:
        return {"k": self.k, "offset": self.offset, "run_seed": self.run_seed,
                "sampler": self.sampler.to_dict(), "synth": self.synth}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        extra = set(d) - {"k", "offset", "run_seed", "sampler", "synth"}
        if extra:
            raise ValueError(f"unknown augment config keys: {sorted(extra)}")
        d = dict(d)
        d["sampler"] = SamplerConfig.from_dict(d.get("sampler", {}))
        return cls(**d)


@dataclass
class AugmentedStep:
    index: int
    status: StepStatus
    reason: KeepReason | None = None
    perturbation: Perturbation | None = None
    joints: dict | None = None  # arm -> perturbed joint vector
    images: ImagePair | None = None
    detail: str = ""

    def __post_init__(self):
        if self.status is StepStatus.REPLACED:
            if self.joints is None or self.images is None or self.perturbation is None:
                raise ValueError("a replaced step needs joints, images and a perturbation")
        elif self.reason is None:
            raise ValueError("a kept step needs a reason")

    def to_dict(self) -> dict:
        d = {"index": self.index, "status": self.status.value,
             "reason": None if self.reason is None else self.reason.value}
        if self.perturbation is not None:
            d["perturbation"] = self.perturbation.to_dict()
        if self.joints is not None:
            d["joints"] = {n: self.joints[n].tolist() for n in ARMS}
        if self.detail:
            d["detail"] = self.detail
        return d


@dataclass
class AugmentReport:
    """Counts that add up across episodes (``a + b`` is associative)."""

    episodes: int = 0
    steps: int = 0
    attempts: int = 0
    replaced: int = 0
    kept: Counter = field(default_factory=Counter)  # reason -> count
    by_kind: Counter = field(default_factory=Counter)  # perturbation kind -> replaced count
    rejections: Counter = field(default_factory=Counter)  # constraint -> rejected candidates

    def __add__(self, other: "AugmentReport") -> "AugmentReport":
        return AugmentReport(self.episodes + other.episodes, self.steps + other.steps,
                             self.attempts + other.attempts, self.replaced + other.replaced,
                             self.kept + other.kept, self.by_kind + other.by_kind,
                             self.rejections + other.rejections)

    @property
    def kept_total(self) -> int:
        return sum(self.kept.values())

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "steps": self.steps,
            "attempts": self.attempts,
            "replaced": self.replaced,
            "kept_original": {r.value: self.kept.get(r.value, 0) for r in KeepReason},
            "replaced_by_kind": dict(sorted(self.by_kind.items())),
            "constraint_rejections": {c: self.rejections.get(c, 0) for c in CONSTRAINTS},
        }

    def rows(self) -> list[tuple[str, int]]:
        """Flat (key, count) rows for CSV output."""
        d = self.to_dict()
        out = [(k, d[k]) for k in ("episodes", "steps", "attempts", "replaced")]
        for group in ("kept_original", "replaced_by_kind", "constraint_rejections"):
            out += [(f"{group}.{k}", v) for k, v in d[group].items()]
        return out


def step_rng(run_seed: int, episode: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([run_seed, episode, t]))


def source_pair(step: TimeStep) -> ImagePair:
    return ImagePair(step.left.image, step.right.image, step.left.depth, step.right.depth)


def augment_step(traj: Trajectory, t: int, phase: int, rng: np.random.Generator,
                 sampler: PerturbationSampler, synth: Synthesizer, ik=ik_lm) -> tuple[AugmentedStep, dict]:
    """Try to replace timestep ``t``; returns the outcome and per-constraint rejections."""
    step = traj.steps[t]
    if phase == Phase.CONTACT_RICH:
        ctx = ContactContext({n: step.arm(n).camera for n in ARMS},
                             {n: step.arm(n).eef for n in ARMS},
                             {n: step.arm(n).joints for n in ARMS})
        pert = sampler.contact(ctx, traj.arms, rng)
    else:
        pert = sampler.contactless(rng)
    if isinstance(pert, Infeasible):
        return (AugmentedStep(t, StepStatus.KEPT_ORIGINAL, KeepReason.SAMPLER_INFEASIBLE, detail=pert.reason),
                dict(pert.rejections))
    rejections = {}

    joints = {}
    for n in ARMS:
        obs = step.arm(n)
        target = perturb_eef(obs.camera, pert.arm(n), obs.eef)
        q = ik(traj.arms[n], target, obs.joints)
        if q is None:
            return (AugmentedStep(t, StepStatus.KEPT_ORIGINAL, KeepReason.IK_INVALID, pert,
                                  detail=f"{n} arm"), rejections)
        joints[n] = np.asarray(q, dtype=np.float64)

    try:
        res = synth.synthesize(source_pair(step), pert.left, pert.right, rng)
    except (BimaugError, ValueError, FloatingPointError) as exc:
        return (AugmentedStep(t, StepStatus.KEPT_ORIGINAL, KeepReason.SYNTH_ERROR, pert,
                              detail=f"{type(exc).__name__}: {exc}"), rejections)
    return AugmentedStep(t, StepStatus.REPLACED, None, pert, joints, res.images), rejections


def replaced_obs(obs: ArmObs, T: Pose, joints: np.ndarray, image: np.ndarray) -> ArmObs:
    return ArmObs(rgb_to_uint8(image), obs.camera @ T, perturb_eef(obs.camera, T, obs.eef),
                  joints, obs.action.copy(), obs.gripper)


def augment_trajectory(traj: Trajectory, labels: ContactLabel, cfg: AugmentConfig,
                       sampler: PerturbationSampler, synth: Synthesizer, ik=ik_lm,
                       episode: int = 0) -> tuple[Trajectory, list[AugmentedStep], AugmentReport]:
    """Replace every ``cfg.k``-th state (from ``cfg.offset``) with a perturbed one.

    ``episode`` is the trajectory's position in its dataset; it only feeds
    the per-step seed.
    """
    n = len(traj)
    if len(labels) != n:
        raise LabelLengthMismatch(f"{len(labels)} labels for {n} timesteps")
    steps = list(traj.steps)
    outcomes = []
    report = AugmentReport(episodes=1, steps=n)
    for t in cfg.attempt_indices(n):
        out, rej = augment_step(traj, t, int(labels.labels[t]), step_rng(cfg.run_seed, episode, t),
                                sampler, synth, ik)
        outcomes.append(out)
        report.attempts += 1
        report.rejections.update(rej)
        if out.status is StepStatus.REPLACED:
            report.replaced += 1
            report.by_kind[out.perturbation.kind.value] += 1
            src = steps[t]
            steps[t] = TimeStep(*(replaced_obs(src.arm(a), out.perturbation.arm(a), out.joints[a],
                                               out.images.arm(a)) for a in ARMS))
        else:
            report.kept[out.reason.value] += 1
            log.debug("episode %d step %d kept: %s %s", episode, t, out.reason.value, out.detail)

    meta = {k: v for k, v in traj.metadata.items() if k != "gt_contact"}
    meta.update({
        "provenance": "augmented",
        "source_episode": episode,
        "augmentation": {
            "k": cfg.k, "offset": cfg.offset, "run_seed": cfg.run_seed, "synth": synth.name,
            "steps": [o.to_dict() for o in outcomes],
        },
    })
    return Trajectory(steps, traj.arms, traj.intrinsics, meta), outcomes, report


def _augment_one(args):
    i, traj, labels, cfg, sampler, synth, ik = args
    out, _, report = augment_trajectory(traj, labels, cfg, sampler, synth, ik, episode=i)
    return out, report


def augment_dataset(trajs, labels, cfg: AugmentConfig, sampler: PerturbationSampler, synth: Synthesizer,
                    ik=ik_lm, workers: int = 1) -> tuple[Dataset, AugmentReport]:
    """Augment every episode; output is identical for any ``workers``."""
    trajs = list(trajs)
    labels = list(labels)
    if len(labels) != len(trajs):
        raise LabelLengthMismatch(f"{len(labels)} label sets for {len(trajs)} episodes")
    jobs = [(i, t, l, cfg, sampler, synth, ik) for i, (t, l) in enumerate(zip(trajs, labels))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_augment_one, jobs))
    else:
        results = [_augment_one(j) for j in jobs]
    report = AugmentReport()
    for _, r in results:
        report = report + r
    return Dataset([t for t, _ in results]), report


def merge(original: Dataset, augmented: Dataset) -> Dataset:
    """Union of the two datasets; every episode is tagged with its provenance."""
    if original.schema_version != augmented.schema_version:
        raise SchemaMismatch(f"schema {original.schema_version} vs {augmented.schema_version}")
    episodes = []
    for default, ds in (("original", original), ("augmented", augmented)):
        for traj in ds:
            meta = dict(traj.metadata)
            meta.setdefault("provenance", default)
            episodes.append(Trajectory(traj.steps, traj.arms, traj.intrinsics, meta))
    return Dataset(episodes, original.schema_version)
