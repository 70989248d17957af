"""Noise schedule, v-prediction algebra, deterministic DDIM stepping,
per-channel condition dropout, and the momentum-SGD training step.

The training target is v = sqrt(abar_t) * eps - sqrt(1 - abar_t) * x0 and
the forward process is x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionMode
from .errors import ConfigError, ShapeError, TrainingDivergenceError
from .kernel import Rng
from .layers import Param


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with cumulative products; abar[0] = 1."""

    t_max: int
    betas: np.ndarray      # betas[t] for t in 1..t_max; betas[0] unused (0)
    alpha_bar: np.ndarray  # length t_max + 1

    @staticmethod
    def linear(t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if t_max < 1:
            raise ConfigError("t_max must be >= 1")
        betas = np.zeros(t_max + 1, dtype=np.float64)
        betas[1:] = np.linspace(beta_start, beta_end, t_max)
        abar = np.cumprod(1.0 - betas)
        return NoiseSchedule(t_max, betas, abar)


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= schedule.t_max:
        raise ConfigError(f"timestep {t} outside [0, {schedule.t_max}]")
    return float(schedule.alpha_bar[t])


def _coeffs(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    ab = alpha_bar(schedule, t)
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes disagree {a.shape} vs {b.shape}")


def add_noise(x0: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Forward process sample x_t."""
    _check_same_shape(x0, eps, "add_noise")
    sa, sb = _coeffs(schedule, t)
    return sa * x0 + sb * eps


def v_target(x0: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Training target: sqrt(abar) eps - sqrt(1 - abar) x0."""
    _check_same_shape(x0, eps, "v_target")
    sa, sb = _coeffs(schedule, t)
    return sa * eps - sb * x0


def x0_from_v(x_t: np.ndarray, v: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the v parameterization to the clean-signal estimate."""
    _check_same_shape(x_t, v, "x0_from_v")
    sa, sb = _coeffs(schedule, t)
    return sa * x_t - sb * v


def eps_from_v(x_t: np.ndarray, v: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the v parameterization to the noise estimate."""
    _check_same_shape(x_t, v, "eps_from_v")
    sa, sb = _coeffs(schedule, t)
    return sa * v + sb * x_t


def ddim_step(x_t: np.ndarray, v_pred: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic (eta = 0) DDIM update from t to t_prev < t."""
    if t_prev >= t:
        raise ConfigError(f"t_prev {t_prev} must be < t {t}")
    x0_hat = x0_from_v(x_t, v_pred, t, schedule)
    eps_hat = eps_from_v(x_t, v_pred, t, schedule)
    sa, sb = _coeffs(schedule, t_prev)
    return sa * x0_hat + sb * eps_hat


def ddim_timesteps(num_steps: int, t_max: int) -> list[int]:
    """Uniformly spaced integer timesteps t_max -> 0 (num_steps transitions)."""
    if num_steps < 1 or num_steps > t_max:
        raise ConfigError(f"num_steps {num_steps} outside [1, {t_max}]")
    ts = np.linspace(t_max, 0, num_steps + 1)
    out = [int(round(t)) for t in ts]
    if len(set(out)) != len(out):
        raise ConfigError("timesteps collide; reduce num_steps")
    return out


def dropout_conditions(intrinsics, rate: float, rng: Rng):
    """Independently zero-fill each of the five channels with probability
    `rate`, clearing the matching availability flag. Pure; draws one uniform
    per channel regardless of rate."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1]")
    dropped = {}
    for name in intrinsics.CHANNEL_NAMES:
        u = rng.uniform()
        dropped[name] = bool(u < rate)
    return intrinsics.with_dropped(dropped)


class MomentumSGD:
    """Plain gradient descent with momentum over named parameters.

    grad_clip, when set, rescales the whole gradient to that global L2 norm
    before the momentum update (keeps SGD stable on the toy net)."""

    def __init__(self, named_params: Sequence[tuple[str, Param]],
                 lr: float = 5e-5, momentum: float = 0.9,
                 grad_clip: Optional[float] = None):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.named_params
        }

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def _clip_scale(self) -> float:
        if self.grad_clip is None:
            return 1.0
        sq = 0.0
        for _, p in self.named_params:
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        if norm <= self.grad_clip or norm == 0.0:
            return 1.0
        return self.grad_clip / norm

    def step(self) -> None:
        scale = self._clip_scale()
        for name, p in self.named_params:
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += scale * p.grad
            p.data -= self.lr * v
            p.zero_grad()

    def state_entries(self) -> dict:
        return {f"v/{name}": v for name, v in self.velocity.items()}


class Adam(MomentumSGD):
    """Adam with the same stepping interface; used when plain momentum SGD
    cannot overfit the toy set within budget."""

    def __init__(self, named_params: Sequence[tuple[str, Param]], lr: float = 2e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 grad_clip: Optional[float] = None):
        super().__init__(named_params, lr=lr, momentum=beta1, grad_clip=grad_clip)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.second: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.named_params
        }
        self.t = 0

    def step(self) -> None:
        scale = self._clip_scale()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = scale * p.grad
            m = self.velocity[name]
            v = self.second[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def state_entries(self) -> dict:
        out = {f"m/{name}": m for name, m in self.velocity.items()}
        out.update({f"v/{name}": v for name, v in self.second.items()})
        return out


@dataclass
class DiffusionBatch:
    """One training window: clean frames, noise, timestep, and conditioning."""

    x0: np.ndarray
    eps: np.ndarray
    t: int
    intrinsics: object = None
    reference: object = None
    masks: list = field(default_factory=list)
    global_tokens: list = field(default_factory=list)
    local_tokens: list = field(default_factory=list)
    mode: Optional[AttentionMode] = None

    def __post_init__(self):
        _check_same_shape(self.x0, self.eps, "DiffusionBatch")


def training_step(model, batch: DiffusionBatch, opt: MomentumSGD) -> float:
    """One optimization step of the mean-squared v loss.

    `model` must expose a .schedule, predict(t, x_t, batch) -> v_pred
    (train-mode forward), and backward(dloss_dv). Raises
    TrainingDivergenceError on non-finite loss.
    """
    schedule = getattr(model, "schedule", None)
    if schedule is None:
        raise ConfigError("model must carry a .schedule for training_step")
    x_t = add_noise(batch.x0, batch.eps, batch.t, schedule)
    v = v_target(batch.x0, batch.eps, batch.t, schedule)
    v_pred = model.predict(batch.t, x_t, batch)
    diff = v_pred - v
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not math.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss at t={batch.t}")
    model.backward((2.0 / diff.size) * diff)
    opt.step()
    return loss
