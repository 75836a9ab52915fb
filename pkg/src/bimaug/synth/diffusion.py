"""Toy pose-conditioned latent diffusion for paired wrist-camera views.

Images are encoded by a fixed linear patch encoder (average-pool each
``patch x patch`` block, then map the 3 color channels to ``channels``
latent channels with a fixed matrix with orthonormal columns). The denoiser
is a two-hidden-layer SiLU MLP that predicts the noise on both arms'
target latents from

* the noisy target latents of both arms,
* a sinusoidal embedding of the diffusion step,
* the conditioning vector: the top 3x4 blocks of ``dp_l``, ``dp_l^-1``,
  ``dp_r``, ``dp_r^-1`` followed by both source latents.

Training minimizes ``||eps_l - eps_l_hat||^2 + ||eps_r - eps_r_hat||^2``
(batch mean) by SGD with momentum, with hand-written backpropagation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatch, InsufficientLength
from ..geometry import Pose, invert, relative_pose
from .base import ImagePair, SynthResult, Synthesizer

MODEL_MAGIC = b"BMDN"
MODEL_VERSION = 1


# --- autoencoder stand-in -----------------------------------------------------

@dataclass(frozen=True)
class PatchEncoder:
    patch: int = 16
    channels: int = 4
    seed: int = 0

    @property
    def basis(self) -> np.ndarray:
        """``channels x 3`` matrix with orthonormal columns."""
        rng = np.random.default_rng(self.seed)
        q, r = np.linalg.qr(rng.standard_normal((self.channels, 3)))
        return q * np.sign(np.diag(r))

    def grid(self, h: int, w: int) -> tuple[int, int]:
        if h % self.patch or w % self.patch:
            raise DimensionMismatch(f"image {h}x{w} not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch

    def encode(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != 3:
            raise DimensionMismatch(f"expected (H, W, 3), got {x.shape}")
        gh, gw = self.grid(*x.shape[:2])
        p = self.patch
        pooled = x.reshape(gh, p, gw, p, 3).mean(axis=(1, 3))
        return pooled @ self.basis.T

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != self.channels:
            raise DimensionMismatch(f"expected (g, g, {self.channels}) latent, got {z.shape}")
        pooled = z @ self.basis
        return np.repeat(np.repeat(pooled, self.patch, axis=0), self.patch, axis=1)


def encode(image: np.ndarray, encoder: PatchEncoder = PatchEncoder()) -> np.ndarray:
    return encoder.encode(image)


def decode(latent: np.ndarray, encoder: PatchEncoder = PatchEncoder()) -> np.ndarray:
    return encoder.decode(latent)


# --- noise schedule -----------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def betas(self) -> np.ndarray:
        """``betas[t]`` for t = 1..steps at index t; index 0 holds 0."""
        return np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.steps)])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products; ``alpha_bars[0] = 1``."""
        return np.cumprod(self.alphas)


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DimensionMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# --- conditioning -------------------------------------------------------------

POSE_UNIT = 0.01  # m; translations enter the network in centimeters


def pose_features(dp_left: Pose, dp_right: Pose, unit: float = POSE_UNIT) -> np.ndarray:
    """Flattened top 3x4 blocks of dp_l, dp_l^-1, dp_r, dp_r^-1 (48 values).

    Translation columns are divided by ``unit`` so that centimeter-scale
    camera motion is not drowned out by the unit-scale rotation entries.
    """
    blocks = []
    for p in (dp_left, invert(dp_left), dp_right, invert(dp_right)):
        m = p.matrix()[:3].copy()
        m[:, 3] /= unit
        blocks.append(m.ravel())
    return np.concatenate(blocks)


def time_embedding(t, steps: int, dim: int = 16) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) / steps
    freqs = 2.0 ** np.arange(dim // 2)
    ang = np.pi * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --- denoiser -----------------------------------------------------------------

def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


@dataclass
class DenoiserModel:
    """Two-hidden-layer MLP plus two skip paths.

    ``eps_hat = MLP(x) + skip * z_t + g(t) * (z_t - sqrt(abar_t) z_src) / sqrt(1 - abar_t)``

    * the diagonal skip lets every latent coordinate reach its own noise
      estimate directly, which the 256-wide hidden layers cannot do for all
      512 output coordinates at once;
    * the anchored term is the noise implied by taking the source view as
      the clean target; its gate ``g(t)`` is linear in the time embedding,
      so the model can express the Gaussian shrinkage estimator
      ``b (z_t - a m) / (a^2 s^2 + b^2)`` exactly.

    Parameters live in one flat float64 vector.
    """

    latent_shape: tuple = (8, 8, 4)
    hidden: int = 256
    time_dim: int = 16
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    encoder: PatchEncoder = field(default_factory=PatchEncoder)
    params: np.ndarray | None = None

    def __post_init__(self):
        self.latent_shape = tuple(int(s) for s in self.latent_shape)
        if self.params is None:
            self.params = self._init_params()
        else:
            self.params = np.array(self.params, dtype=np.float64)
        if self.params.size != self.n_params:
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {self.params.size}")

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape))

    @property
    def in_dim(self) -> int:
        # noisy latents (2 arms) + time embedding + poses (48) + source latents (2 arms)
        return 2 * self.latent_dim + self.time_dim + 48 + 2 * self.latent_dim

    @property
    def out_dim(self) -> int:
        return 2 * self.latent_dim

    @property
    def gate_scale(self) -> float:
        # the gate multiplies out_dim coordinates at once; shrink its step size accordingly
        return 1.0 / np.sqrt(self.out_dim)

    def shapes(self) -> dict:
        h = self.hidden
        return {"W1": (self.in_dim, h), "b1": (h,), "W2": (h, h), "b2": (h,),
                "W3": (h, self.out_dim), "b3": (self.out_dim,), "skip": (self.out_dim,),
                "gate_w": (self.time_dim,), "gate_b": (1,)}

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def views(self, flat: np.ndarray | None = None) -> dict:
        flat = self.params if flat is None else flat
        out, off = {}, 0
        for name, shape in self.shapes().items():
            n = int(np.prod(shape))
            out[name] = flat[off : off + n].reshape(shape)
            off += n
        return out

    def _init_params(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        flat = np.zeros(self.n_params)
        v = self.views(flat)
        for w, fan_in in (("W1", self.in_dim), ("W2", self.hidden), ("W3", self.hidden)):
            v[w][...] = rng.standard_normal(v[w].shape) / np.sqrt(fan_in)
        v["W3"] *= 0.1
        return flat

    # inputs ------------------------------------------------------------------
    def features(self, zt_l, zt_r, t, cond) -> tuple[np.ndarray, np.ndarray]:
        """Network input ``x`` and anchored noise estimate for a batch.

        Latents are (B, g, g, c); ``cond`` is (B, 48 + 2 * latent_dim).
        """
        b = zt_l.shape[0]
        zt = np.concatenate([zt_l.reshape(b, -1), zt_r.reshape(b, -1)], axis=1)
        t = np.broadcast_to(np.asarray(t), (b,))
        x = np.concatenate([zt, time_embedding(t, self.schedule.steps, self.time_dim), cond], axis=1)
        ab = self.schedule.alpha_bars[t][:, None]
        src = cond[:, 48:]
        anchor = (zt - np.sqrt(ab) * src) / np.sqrt(1.0 - ab)
        return x, anchor

    def conditioning(self, src_l, src_r, dp_left, dp_right) -> np.ndarray:
        """Per-sample conditioning vector from source latents and pose pairs."""
        return np.concatenate([pose_features(dp_left, dp_right), np.ravel(src_l), np.ravel(src_r)])

    # network -----------------------------------------------------------------
    def forward(self, x: np.ndarray, anchor: np.ndarray, params: np.ndarray | None = None, keep: bool = False):
        v = self.views(params)
        a1 = x @ v["W1"] + v["b1"]
        h1, s1 = _silu(a1)
        a2 = h1 @ v["W2"] + v["b2"]
        h2, s2 = _silu(a2)
        n, td = self.out_dim, self.time_dim
        zt, emb = x[:, :n], x[:, n : n + td]
        gate = self.gate_scale * (emb @ v["gate_w"] + v["gate_b"])
        out = h2 @ v["W3"] + v["b3"] + zt * v["skip"] + gate[:, None] * anchor
        if keep:
            return out, (x, anchor, a1, h1, s1, a2, h2, s2)
        return out

    def backward(self, dout: np.ndarray, cache, params: np.ndarray | None = None) -> np.ndarray:
        v = self.views(params)
        x, anchor, a1, h1, s1, a2, h2, s2 = cache
        n, td = self.out_dim, self.time_dim
        grad = np.zeros(self.n_params)
        g = self.views(grad)
        g["W3"][...] = h2.T @ dout
        g["b3"][...] = dout.sum(axis=0)
        g["skip"][...] = np.sum(dout * x[:, :n], axis=0)
        dgate = self.gate_scale * np.sum(dout * anchor, axis=1)
        g["gate_w"][...] = x[:, n : n + td].T @ dgate
        g["gate_b"][...] = dgate.sum()
        dh2 = dout @ v["W3"].T
        da2 = dh2 * (s2 * (1.0 + a2 * (1.0 - s2)))
        g["W2"][...] = h1.T @ da2
        g["b2"][...] = da2.sum(axis=0)
        dh1 = da2 @ v["W2"].T
        da1 = dh1 * (s1 * (1.0 + a1 * (1.0 - s1)))
        g["W1"][...] = x.T @ da1
        g["b1"][...] = da1.sum(axis=0)
        return grad

    def predict(self, zt_l, zt_r, t, cond) -> tuple[np.ndarray, np.ndarray]:
        out = self.forward(*self.features(zt_l, zt_r, t, cond))
        n = self.latent_dim
        shape = (out.shape[0],) + self.latent_shape
        return out[:, :n].reshape(shape), out[:, n:].reshape(shape)

    # serialization -----------------------------------------------------------
    def header(self) -> dict:
        return {
            "format": "bimaug-denoiser", "version": MODEL_VERSION,
            "latent_shape": list(self.latent_shape), "hidden": self.hidden, "time_dim": self.time_dim,
            "seed": self.seed, "n_params": self.n_params,
            "shapes": {k: list(s) for k, s in self.shapes().items()},
            "schedule": {"steps": self.schedule.steps, "beta_start": self.schedule.beta_start,
                         "beta_end": self.schedule.beta_end},
            "encoder": {"patch": self.encoder.patch, "channels": self.encoder.channels, "seed": self.encoder.seed},
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(head)) + head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DenoiserModel":
        if buf[:4] != MODEL_MAGIC:
            raise ValueError("not a denoiser model file")
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"model version {version}, expected {MODEL_VERSION}")
        head = json.loads(buf[12 : 12 + hlen])
        params = np.frombuffer(buf, dtype="<f8", offset=12 + hlen).astype(np.float64)
        return cls(tuple(head["latent_shape"]), head["hidden"], head["time_dim"], head["seed"],
                   NoiseSchedule(**head["schedule"]), PatchEncoder(**head["encoder"]), params)


# --- objective ----------------------------------------------------------------

@dataclass
class Batch:
    z_l: np.ndarray  # clean target latents (B, g, g, c)
    z_r: np.ndarray
    cond: np.ndarray  # (B, 48 + 2 * latent_dim)
    t: np.ndarray  # (B,) ints in 1..T
    eps_l: np.ndarray
    eps_r: np.ndarray


def batch_inputs(model: DenoiserModel, batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Network input, anchored estimate and target noise for a training batch."""
    ab = model.schedule.alpha_bars[batch.t][:, None, None, None]
    zt_l = np.sqrt(ab) * batch.z_l + np.sqrt(1 - ab) * batch.eps_l
    zt_r = np.sqrt(ab) * batch.z_r + np.sqrt(1 - ab) * batch.eps_r
    x, anchor = model.features(zt_l, zt_r, batch.t, batch.cond)
    b = batch.t.shape[0]
    target = np.concatenate([batch.eps_l.reshape(b, -1), batch.eps_r.reshape(b, -1)], axis=1)
    return x, anchor, target


def loss(model: DenoiserModel, batch: Batch, params: np.ndarray | None = None) -> float:
    """Batch mean of ``||eps_l - eps_l_hat||^2 + ||eps_r - eps_r_hat||^2``."""
    x, anchor, target = batch_inputs(model, batch)
    out = model.forward(x, anchor, params)
    return float(np.sum((out - target) ** 2) / x.shape[0])


def loss_and_grad(model: DenoiserModel, batch: Batch, params: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    x, anchor, target = batch_inputs(model, batch)
    out, cache = model.forward(x, anchor, params, keep=True)
    b = x.shape[0]
    diff = out - target
    return float(np.sum(diff**2) / b), model.backward(2.0 * diff / b, cache, params)


# --- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    momentum: float = 0.9
    batch: int = 16
    gap: tuple = (5, 15)  # inclusive range of b - a
    seed: int = 0


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: list
    pairs: list  # (trajectory index, a, b) for every sampled pair

    def loss_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{l!r}\n" for i, l in enumerate(self.losses))


class _EncodedTrajectory:
    def __init__(self, traj, encoder: PatchEncoder):
        self.lat = {n: np.stack([encoder.encode(s.arm(n).image) for s in traj.steps]) for n in ("left", "right")}
        self.cams = {n: [s.arm(n).camera for s in traj.steps] for n in ("left", "right")}
        self.n = len(traj.steps)


def sample_batch(model: DenoiserModel, data: list, cfg: TrainConfig, rng: np.random.Generator):
    lo, hi = cfg.gap
    zl, zr, cond, pairs = [], [], [], []
    for _ in range(cfg.batch):
        i = int(rng.integers(len(data)))
        d = data[i]
        gap = int(rng.integers(lo, hi + 1))
        a = int(rng.integers(0, d.n - gap))
        b = a + gap
        dpl = relative_pose(d.cams["left"][a], d.cams["left"][b])
        dpr = relative_pose(d.cams["right"][a], d.cams["right"][b])
        cond.append(model.conditioning(d.lat["left"][a], d.lat["right"][a], dpl, dpr))
        zl.append(d.lat["left"][b])
        zr.append(d.lat["right"][b])
        pairs.append((i, a, b))
    t = rng.integers(1, model.schedule.steps + 1, size=cfg.batch)
    eps_l = rng.standard_normal((cfg.batch,) + model.latent_shape)
    eps_r = rng.standard_normal((cfg.batch,) + model.latent_shape)
    return Batch(np.stack(zl), np.stack(zr), np.stack(cond), t, eps_l, eps_r), pairs


def train(model: DenoiserModel, trajectories, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """SGD with momentum on the two-arm noise-prediction objective.

    The model passed in is not modified; a trained copy is returned.
    """
    lo, hi = cfg.gap
    if not 1 <= lo <= hi:
        raise ValueError("gap range must satisfy 1 <= lo <= hi")
    trajectories = list(trajectories)
    if not trajectories:
        raise InsufficientLength("no trajectories to train on")
    for i, tr in enumerate(trajectories):
        if len(tr.steps) < hi + 1:
            raise InsufficientLength(f"trajectory {i} has {len(tr.steps)} steps, need at least {hi + 1}")
    data = [_EncodedTrajectory(tr, model.encoder) for tr in trajectories]
    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    vel = np.zeros_like(params)
    losses, pairs = [], []
    for _ in range(cfg.steps):
        batch, bp = sample_batch(model, data, cfg, rng)
        pairs.extend(bp)
        l, g = loss_and_grad(model, batch, params)
        losses.append(l)
        vel = cfg.momentum * vel - cfg.lr * g
        params = params + vel
    trained = DenoiserModel(model.latent_shape, model.hidden, model.time_dim, model.seed,
                            model.schedule, model.encoder, params)
    return TrainResult(trained, losses, pairs)


def smooth_curve(losses, window: int = 25) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if x.size < window:
        return x.copy()
    return np.convolve(x, np.ones(window) / window, mode="valid")


# --- sampling -----------------------------------------------------------------

def synthesize_diffusion(model: DenoiserModel, src: ImagePair, dp_left: Pose, dp_right: Pose,
                         rng: np.random.Generator) -> ImagePair:
    """Ancestral reverse diffusion from unit Gaussian latents, decoded and clamped to [0, 1]."""
    enc = model.encoder
    cond = model.conditioning(enc.encode(src.left), enc.encode(src.right), dp_left, dp_right)[None]
    sched = model.schedule
    betas, alphas, abar = sched.betas, sched.alphas, sched.alpha_bars
    z_l = rng.standard_normal((1,) + model.latent_shape)
    z_r = rng.standard_normal((1,) + model.latent_shape)
    for t in range(sched.steps, 0, -1):
        e_l, e_r = model.predict(z_l, z_r, np.array([t]), cond)
        coef = betas[t] / np.sqrt(1.0 - abar[t])
        z_l = (z_l - coef * e_l) / np.sqrt(alphas[t])
        z_r = (z_r - coef * e_r) / np.sqrt(alphas[t])
        if t > 1:
            # posterior variance of q(z_{t-1} | z_t, z_0)
            var = betas[t] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            z_l = z_l + np.sqrt(var) * rng.standard_normal(z_l.shape)
            z_r = z_r + np.sqrt(var) * rng.standard_normal(z_r.shape)
    left = np.clip(enc.decode(z_l[0]), 0.0, 1.0)
    right = np.clip(enc.decode(z_r[0]), 0.0, 1.0)
    return ImagePair(left, right)


class DiffusionSynthesizer(Synthesizer):
    name = "diffusion"
    needs_depth = False

    def __init__(self, model: DenoiserModel):
        self.model = model

    def synthesize(self, src, dp_left, dp_right, rng=None) -> SynthResult:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = synthesize_diffusion(self.model, src, dp_left, dp_right, rng)
        full = np.ones(out.left.shape[:2], dtype=bool)
        return SynthResult(out, full, full.copy())


def save_model(model: DenoiserModel, path) -> None:
    from ..dataset.io import atomic_write

    atomic_write(path, model.to_bytes())


def load_model(path) -> DenoiserModel:
    with open(path, "rb") as f:
        return DenoiserModel.from_bytes(f.read())
