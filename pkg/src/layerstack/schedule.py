"""Noise schedule, forward noising, x0 recovery and deterministic DDIM updates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. ``alpha_bar[0] == 1`` so index ``t`` is step ``t``."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def coef(self, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(abar_t), sqrt(1 - abar_t)) broadcastable against ``like``.

        ``t`` is an int or an integer tensor whose shape is a prefix of
        ``like.shape`` (e.g. per-layer timesteps of shape (B, L)).
        """
        ab = torch.as_tensor(self.alpha_bar, dtype=torch.float64)
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) > self.T):
            raise ScheduleError(f"timestep outside [0, {self.T}]")
        a = ab[t]
        a = a.reshape(a.shape + (1,) * (like.dim() - a.dim()))
        return a.sqrt().to(like.dtype), (1.0 - a).sqrt().to(like.dtype)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T, beta, alpha_bar)


def _check_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ScheduleError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(sched: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    _check_shape(x0, eps)
    sa, s1a = sched.coef(t, x0)
    return sa * x0 + s1a * eps


def predict_x0(sched: NoiseSchedule, x_t: torch.Tensor, t, eps_pred: torch.Tensor) -> torch.Tensor:
    _check_shape(x_t, eps_pred)
    sa, s1a = sched.coef(t, x_t)
    if torch.any(sa == 0):
        raise ScheduleError("alpha_bar_t is zero; x0 is unrecoverable")
    return (x_t - s1a * eps_pred) / sa


def ddim_step(
    sched: NoiseSchedule,
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    t_prev: int,
    x0_pred: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    ``x0_pred`` substitutes the clean-data estimate before recombination;
    it is how edits pin non-target layers to their originals.
    """
    if not t > t_prev >= 0:
        raise ScheduleError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if x0_pred is None:
        x0_pred = predict_x0(sched, x_t, t, eps_pred)
    if t_prev == 0:
        return x0_pred
    sa, s1a = sched.coef(t_prev, x_t)
    return sa * x0_pred + s1a * eps_pred


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """``steps + 1`` strictly decreasing integers from T down to 0."""
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    if steps > T:
        raise ScheduleError(f"cannot take {steps} steps over T={T}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int).tolist()
    return ts


@dataclass(frozen=True)
class TimestepAssignment:
    timesteps: tuple[int, ...]
    shared: bool


def draw_timesteps(
    num_layers: int, T: int, rng: np.random.Generator, force: str | None = None
) -> TimestepAssignment:
    """Mixed per-layer timestep draw used in training.

    With probability 1/2 every layer gets one shared uniform t in [1, T];
    otherwise each layer draws its own. ``force`` ("shared"/"independent")
    pins the branch.
    """
    if num_layers < 2:
        raise ScheduleError("need at least two layers")
    if force is None:
        shared = bool(rng.random() < 0.5)
    elif force in ("shared", "independent"):
        shared = force == "shared"
    else:
        raise ValueError(f"unknown branch {force!r}")
    if shared:
        t = int(rng.integers(1, T + 1))
        return TimestepAssignment((t,) * num_layers, True)
    return TimestepAssignment(tuple(int(v) for v in rng.integers(1, T + 1, size=num_layers)), False)
