"""Camera-pose perturbations for augmentation.

Contactless timesteps get an independent random rigid perturbation per arm.
Contact-rich timesteps get one shared pure translation, found by dual
annealing over a normalized box ``c in [-1, 1]^3`` (meters = ``scale * c``,
expressed in each arm's camera frame) subject to hard constraints:

* ``||scale * c|| >= m_lb``;
* both perturbed end effectors at least ``d_table`` above the table;
* perturbed end effectors at least ``d_eff`` apart;
* inverse kinematics succeeds for both perturbed end-effector poses.

Infeasible candidates get infinite energy, so the annealer never keeps them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.optimize import dual_annealing as _scipy_dual_annealing

from .dataset.model import ARMS
from .geometry import Pose, axis_angle, perturb_eef
from .kinematics import ArmModel, ik_lm


@dataclass(frozen=True)
class SamplerBounds:
    m_lb: float = 0.01  # m
    m_ub: float = 0.02  # m
    r_lb: float = -28.7  # deg
    r_ub: float = 28.7  # deg
    scale: float = 0.02  # m per normalized unit

    def __post_init__(self):
        if not 0 < self.m_lb <= self.m_ub:
            raise ValueError("need 0 < m_lb <= m_ub")
        if self.r_lb > self.r_ub:
            raise ValueError("need r_lb <= r_ub")
        if self.scale < self.m_ub:
            raise ValueError("scale must be at least m_ub")


@dataclass(frozen=True)
class ConstraintParams:
    d_table: float = 0.03  # m
    d_eff: float = 0.05  # m
    table_height: float = 0.0  # world z

    def __post_init__(self):
        if self.d_table <= 0 or self.d_eff <= 0:
            raise ValueError("d_table and d_eff must be positive")


@dataclass(frozen=True)
class CostWeights:
    magnitude: float = 1.0
    table: float = 1.0
    separation: float = 1.0


@dataclass(frozen=True)
class AnnealConfig:
    max_iter: int = 1000
    initial_temp: float = 5230.0
    visit: float = 2.62
    accept: float = -5.0
    restart_temp_ratio: float = 2e-5
    local_maxfev: int = 50
    stop_cost: float = 0.0
    max_evals: int = 10_000_000


class PerturbationKind(str, Enum):
    CONTACTLESS_RANDOM = "contactless_random"
    CONTACT_OPTIMIZED = "contact_optimized"


@dataclass(frozen=True)
class Perturbation:
    left: Pose
    right: Pose
    kind: PerturbationKind
    cost: float | None = None

    def arm(self, name: str) -> Pose:
        return self.left if name == "left" else self.right

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "cost": self.cost,
                "left": self.left.matrix().tolist(), "right": self.right.matrix().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Perturbation":
        return cls(Pose.from_matrix(d["left"]), Pose.from_matrix(d["right"]),
                   PerturbationKind(d["kind"]), d.get("cost"))


CONSTRAINTS = ("magnitude", "table", "separation", "ik")


@dataclass(frozen=True)
class Infeasible:
    """No admissible point was found; callers keep the original state."""

    reason: str = "no feasible point found"
    rejections: dict = field(default_factory=dict)  # constraint name -> rejected candidates

    def __bool__(self):
        return False


@dataclass(frozen=True)
class AnnealResult:
    x: np.ndarray
    cost: float
    n_evals: int


# --- contactless --------------------------------------------------------------

def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def _random_transform(rng: np.random.Generator, bounds: SamplerBounds) -> Pose:
    t = random_unit_vector(rng) * rng.uniform(bounds.m_lb, bounds.m_ub)
    R = axis_angle(random_unit_vector(rng), rng.uniform(bounds.r_lb, bounds.r_ub))
    return Pose(R, t)


def sample_contactless(rng: np.random.Generator, bounds: SamplerBounds = SamplerBounds()) -> Perturbation:
    """Independent random rigid perturbations for the two arms."""
    left = _random_transform(rng, bounds)
    right = _random_transform(rng, bounds)
    return Perturbation(left, right, PerturbationKind.CONTACTLESS_RANDOM)


# --- contact-rich -------------------------------------------------------------

@dataclass(frozen=True)
class ContactContext:
    """World-frame camera and EEF poses plus current joints, keyed by arm name."""

    cameras: dict
    eefs: dict
    joints: dict


def perturbed_eefs(ctx: ContactContext, t: np.ndarray) -> dict:
    T = Pose.from_translation(t)
    return {name: perturb_eef(ctx.cameras[name], T, ctx.eefs[name]) for name in ARMS}


def perturbation_cost(c_trans, ctx: ContactContext, bounds: SamplerBounds = SamplerBounds(),
                      constraints: ConstraintParams = ConstraintParams(),
                      weights: CostWeights = CostWeights()) -> float:
    """Soft penalty for small perturbations, low EEFs and EEFs close together."""
    t = bounds.scale * np.asarray(c_trans, dtype=np.float64)
    eefs = perturbed_eefs(ctx, t)
    pl, pr = eefs["left"].translation, eefs["right"].translation
    h_min = min(pl[2], pr[2]) - constraints.table_height
    d_pair = float(np.linalg.norm(pl - pr))
    return (
        weights.magnitude * max(0.0, bounds.m_lb - float(np.linalg.norm(t))) / bounds.m_lb
        + weights.table * max(0.0, constraints.d_table - h_min) / constraints.d_table
        + weights.separation * max(0.0, constraints.d_eff - d_pair) / constraints.d_eff
    )


class _EarlyStop(Exception):
    pass


class _Tracker:
    """Wraps cost + feasibility into an energy and remembers the best feasible point."""

    def __init__(self, cost, feasible, stop_cost, max_evals):
        self.cost, self.feasible = cost, feasible
        self.stop_cost, self.max_evals = stop_cost, max_evals
        self.best_x, self.best_cost, self.n_evals = None, np.inf, 0

    def __call__(self, x):
        if self.n_evals >= self.max_evals:
            raise _EarlyStop
        self.n_evals += 1
        x = np.asarray(x, dtype=np.float64)
        if not self.feasible(x):
            return np.inf
        c = float(self.cost(x))
        if c < self.best_cost:
            self.best_cost, self.best_x = c, x.copy()
        if c <= self.stop_cost:
            raise _EarlyStop
        return c


def dual_annealing(cost: Callable, feasible: Callable | None = None, bounds=None,
                   rng: np.random.Generator | None = None, cfg: AnnealConfig = AnnealConfig(),
                   x0=None) -> AnnealResult | Infeasible:
    """Minimize ``cost`` over a box, keeping only points where ``feasible`` holds.

    Generalized simulated annealing with Nelder-Mead refinement (at most
    ``cfg.local_maxfev`` evaluations per local search). Stops early at the
    first feasible point with cost <= ``cfg.stop_cost``.
    """
    bounds = [(-1.0, 1.0)] * 3 if bounds is None else [tuple(b) for b in bounds]
    feasible = feasible or (lambda x: True)
    rng = rng if rng is not None else np.random.default_rng()
    track = _Tracker(cost, feasible, cfg.stop_cost, cfg.max_evals)
    try:
        _scipy_dual_annealing(
            track, bounds, maxiter=cfg.max_iter, initial_temp=cfg.initial_temp,
            restart_temp_ratio=cfg.restart_temp_ratio, visit=cfg.visit, accept=cfg.accept,
            minimizer_kwargs={"method": "Nelder-Mead", "bounds": bounds,
                              "options": {"maxfev": cfg.local_maxfev}},
            rng=rng, x0=x0,
        )
    except _EarlyStop:
        pass
    except ValueError:
        # raised when no finite-energy starting point can be drawn
        pass
    if track.best_x is None:
        return Infeasible(f"no feasible point in {track.n_evals} evaluations")
    return AnnealResult(track.best_x, track.best_cost, track.n_evals)


IKFn = Callable[[ArmModel, Pose, np.ndarray], "np.ndarray | None"]


def violated_constraint(c, ctx: ContactContext, arms: dict, bounds: SamplerBounds,
                        constraints: ConstraintParams, ik: IKFn = ik_lm) -> str | None:
    """Name of the first hard constraint ``c`` violates (cheap checks first), or None."""
    t = bounds.scale * np.asarray(c, dtype=np.float64)
    if np.linalg.norm(t) < bounds.m_lb:
        return "magnitude"
    eefs = perturbed_eefs(ctx, t)
    pl, pr = eefs["left"].translation, eefs["right"].translation
    if min(pl[2], pr[2]) - constraints.table_height < constraints.d_table:
        return "table"
    if np.linalg.norm(pl - pr) < constraints.d_eff:
        return "separation"
    if any(ik(arms[n], eefs[n], ctx.joints[n]) is None for n in ARMS):
        return "ik"
    return None


def contact_feasibility(ctx: ContactContext, arms: dict, bounds: SamplerBounds, constraints: ConstraintParams,
                        ik: IKFn = ik_lm, tally: dict | None = None) -> Callable:
    """Hard-constraint predicate on normalized translations.

    If ``tally`` is given, rejections are counted per constraint name.
    """

    def feasible(c) -> bool:
        bad = violated_constraint(c, ctx, arms, bounds, constraints, ik)
        if bad is not None and tally is not None:
            tally[bad] = tally.get(bad, 0) + 1
        return bad is None

    return feasible


def sample_contact(ctx: ContactContext, arms: dict, rng: np.random.Generator,
                   bounds: SamplerBounds = SamplerBounds(), constraints: ConstraintParams = ConstraintParams(),
                   weights: CostWeights = CostWeights(), anneal: AnnealConfig = AnnealConfig(),
                   ik: IKFn = ik_lm) -> Perturbation | Infeasible:
    """Shared pure-translation perturbation for a contact-rich timestep."""
    tally = {name: 0 for name in CONSTRAINTS}
    res = dual_annealing(
        lambda c: perturbation_cost(c, ctx, bounds, constraints, weights),
        contact_feasibility(ctx, arms, bounds, constraints, ik, tally),
        rng=rng, cfg=anneal,
    )
    if isinstance(res, Infeasible):
        return Infeasible(res.reason, tally)
    T = Pose(np.eye(3), bounds.scale * res.x)
    return Perturbation(T, T, PerturbationKind.CONTACT_OPTIMIZED, res.cost)


# --- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    bounds: SamplerBounds = field(default_factory=SamplerBounds)
    constraints: ConstraintParams = field(default_factory=ConstraintParams)
    weights: CostWeights = field(default_factory=CostWeights)
    anneal: AnnealConfig = field(default_factory=AnnealConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = {"bounds", "constraints", "weights", "anneal"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown sampler config keys: {sorted(extra)}")
        return cls(
            SamplerBounds(**d.get("bounds", {})),
            ConstraintParams(**d.get("constraints", {})),
            CostWeights(**d.get("weights", {})),
            AnnealConfig(**d.get("anneal", {})),
        )


class PerturbationSampler:
    """Default sampler used by the augmentation pipeline.

    Subclass and override :meth:`contactless` / :meth:`contact` to inject
    custom behaviour (e.g. forced infeasibility in tests).
    """

    def __init__(self, cfg: SamplerConfig = SamplerConfig(), ik: IKFn = ik_lm):
        self.cfg = cfg
        self.ik = ik

    def contactless(self, rng: np.random.Generator) -> Perturbation:
        return sample_contactless(rng, self.cfg.bounds)

    def contact(self, ctx: ContactContext, arms: dict, rng: np.random.Generator) -> Perturbation | Infeasible:
        c = self.cfg
        return sample_contact(ctx, arms, rng, c.bounds, c.constraints, c.weights, c.anneal, self.ik)
