"""AdamW with decoupled weight decay, warmup/cosine schedules and EMA updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    weight_decay: float = 0.0


def adamw_step(state: AdamWState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-decay Adam update; returns new parameters and mutates ``state``.

    w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w
    """
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, m {state.m.shape}")
    if not np.isfinite(grads).all():
        raise NonFiniteGradient("non-finite gradient passed to adamw_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * params
    new = params - state.lr * update
    return new.astype(params.dtype, copy=False), state


class AdamW:
    """AdamW over a name -> array parameter dict.

    Parameters with fewer than two dimensions (biases, norm gains, tokens)
    are excluded from weight decay. ``lr_scale`` lets a group of names run
    at a scaled learning rate (used to slow down a pretrained predictor).
    """

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8, lr_scale: dict[str, float] | None = None):
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale or {})
        self.states = {
            name: AdamWState(np.zeros_like(p), np.zeros_like(p), 0, betas[0], betas[1], eps)
            for name, p in params.items()
        }

    def decays(self, name: str, p: np.ndarray) -> bool:
        return p.ndim >= 2

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, p in params.items():
            st = self.states[name]
            st.lr = self.lr * self.lr_scale.get(name, 1.0)
            st.weight_decay = self.weight_decay if self.decays(name, p) else 0.0
            out[name], _ = adamw_step(st, p, grads[name])
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, st in self.states.items():
            arrays[f"m.{name}"] = st.m
            arrays[f"v.{name}"] = st.v
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name, st in self.states.items():
            st.m = arrays[f"m.{name}"].copy()
            st.v = arrays[f"v.{name}"].copy()
            st.t = t


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "warmup-cosine"  # or "cosine"
    warmup_steps: int = 0
    total_steps: int = 1
    stretch: float = 1.25
    start: float = 0.0
    peak: float = 1e-3
    end: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("warmup-cosine", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup steps exceed total steps")
        if min(self.start, self.peak, self.end) < 0:
            raise ValueError("schedule values must be non-negative")

    @property
    def horizon(self) -> float:
        return self.stretch * self.total_steps


def schedule_value(spec: ScheduleSpec, step: int) -> float:
    """Value of the schedule at ``step``; clamps to ``end`` past the stretched horizon."""
    if spec.kind == "cosine":
        warmup, peak = 0, spec.start
    else:
        warmup, peak = spec.warmup_steps, spec.peak
    if step < warmup:
        return spec.start + (peak - spec.start) * step / warmup
    span = spec.horizon - warmup
    if span <= 0 or step >= spec.horizon:
        return spec.end
    progress = (step - warmup) / span
    return spec.end + (peak - spec.end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], momentum: float) -> dict[str, np.ndarray]:
    """teacher <- momentum * teacher + (1 - momentum) * student, per array."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    if teacher.keys() != student.keys():
        raise KeyError("teacher and student parameter trees differ")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise KeyError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        if momentum == 1.0:
            out[name] = t
        elif momentum == 0.0:
            out[name] = s.copy()
        else:
            out[name] = (momentum * t + (1.0 - momentum) * s).astype(t.dtype, copy=False)
    return out


@dataclass
class Schedules:
    lr: ScheduleSpec
    wd: ScheduleSpec
    ema: ScheduleSpec

    def at(self, step: int) -> dict[str, float]:
        return {
            "lr": schedule_value(self.lr, step),
            "wd": schedule_value(self.wd, step),
            "ema_momentum": min(1.0, schedule_value(self.ema, step)),
        }


def default_schedules(total_steps: int, warmup_steps: int, lr: float = 1e-3,
                      wd_start: float = 0.04, wd_end: float = 0.4,
                      ema_start: float = 0.996, ema_end: float = 1.0,
                      stretch: float = 1.25, lr_end: float = 1e-6) -> Schedules:
    return Schedules(
        lr=ScheduleSpec("warmup-cosine", warmup_steps, total_steps, stretch, 0.0, lr, lr_end),
        wd=ScheduleSpec("cosine", 0, total_steps, stretch, wd_start, wd_start, wd_end),
        ema=ScheduleSpec("cosine", 0, total_steps, stretch, ema_start, ema_start, ema_end),
    )
