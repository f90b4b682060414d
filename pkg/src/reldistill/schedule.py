"""Continuous-time noise schedule, DDIM stepping and the progressive-distillation target.

Time runs from ``t=0`` (clean data) to ``t=1`` (pure noise). All samplers here are
deterministic: the only randomness is the initial noise drawn in :func:`ddim_sample`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

# A denoiser maps (z_t, t, y) -> predicted clean image with the shape of z_t.
Denoiser = Callable[..., torch.Tensor]
TimeLike = Union[float, torch.Tensor]


class SingularTargetError(ValueError):
    """Raised when the distillation target cannot be recovered from the teacher's two steps."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule, ``alpha(t)**2 + sigma(t)**2 == 1``.

    Only the cosine schedule ``alpha = cos(pi t / 2)``, ``sigma = sin(pi t / 2)``
    is provided.
    """

    kind: str = "cosine"

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unknown schedule kind: {self.kind!r}")

    def alpha(self, t: TimeLike) -> TimeLike:
        if isinstance(t, torch.Tensor):
            return torch.cos(0.5 * math.pi * t)
        return math.cos(0.5 * math.pi * t)

    def sigma(self, t: TimeLike) -> TimeLike:
        if isinstance(t, torch.Tensor):
            return torch.sin(0.5 * math.pi * t)
        return math.sin(0.5 * math.pi * t)

    def snr(self, t: TimeLike) -> TimeLike:
        return self.alpha(t) ** 2 / self.sigma(t) ** 2


COSINE = NoiseSchedule()


def step_grid(n_steps: int) -> list[float]:
    """The sampling times ``{i / n_steps : i = 1..n_steps}`` in increasing order."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    return [i / n_steps for i in range(1, n_steps + 1)]


def _as_batch_time(t: TimeLike, batch: int, like: torch.Tensor) -> torch.Tensor:
    """Return ``t`` as a float64 tensor of shape ``(batch,)``."""
    t = torch.as_tensor(t, dtype=torch.float64, device=like.device)
    if t.ndim == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise ValueError(f"time must be a scalar or shape ({batch},), got {tuple(t.shape)}")
    return t


def _bcast(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    # (B,) float64 -> (B, 1, ..., 1) in x's dtype
    return coef.to(x.dtype).reshape(-1, *([1] * (x.ndim - 1)))


def forward_diffuse(x: torch.Tensor, t: TimeLike, eps: torch.Tensor,
                    sched: NoiseSchedule = COSINE) -> torch.Tensor:
    """``z_t = alpha(t) x + sigma(t) eps``; ``t`` is a scalar or one time per sample."""
    if x.shape != eps.shape:
        raise ValueError(f"x and eps shapes differ: {tuple(x.shape)} vs {tuple(eps.shape)}")
    tb = _as_batch_time(t, x.shape[0], x)
    if torch.any(tb < 0) or torch.any(tb > 1):
        raise ValueError("t must lie in [0, 1]")
    return _bcast(sched.alpha(tb), x) * x + _bcast(sched.sigma(tb), x) * eps


def _call(model: Denoiser, z: torch.Tensor, t: torch.Tensor, y: Optional[torch.Tensor]) -> torch.Tensor:
    out = model(z, t.to(z.dtype), y)
    if out.shape != z.shape:
        raise ValueError(f"denoiser output shape {tuple(out.shape)} != input shape {tuple(z.shape)}")
    return out


def ddim_update(x_pred: torch.Tensor, z_t: torch.Tensor, t: TimeLike, s: TimeLike,
                sched: NoiseSchedule = COSINE) -> torch.Tensor:
    """DDIM move from ``t`` to ``s`` given a clean-image prediction ``x_pred``.

    Samples with ``sigma(t) == 0`` are returned unchanged.
    """
    tb = _as_batch_time(t, z_t.shape[0], z_t)
    sb = _as_batch_time(s, z_t.shape[0], z_t)
    if torch.any(sb > tb):
        raise ValueError("ddim step requires s <= t")
    sig_t = sched.sigma(tb)
    degenerate = sig_t == 0
    safe_sig_t = torch.where(degenerate, torch.ones_like(sig_t), sig_t)
    eps_hat = (z_t - _bcast(sched.alpha(tb), z_t) * x_pred) / _bcast(safe_sig_t, z_t)
    z_s = _bcast(sched.alpha(sb), z_t) * x_pred + _bcast(sched.sigma(sb), z_t) * eps_hat
    if torch.any(degenerate):
        z_s = torch.where(_bcast(degenerate, z_t).bool(), z_t, z_s)
    return z_s


def ddim_step(model: Denoiser, z_t: torch.Tensor, t: TimeLike, s: TimeLike,
              sched: NoiseSchedule = COSINE, y: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One deterministic DDIM step of ``model`` from time ``t`` down to ``s``."""
    tb = _as_batch_time(t, z_t.shape[0], z_t)
    sb = _as_batch_time(s, z_t.shape[0], z_t)
    if torch.any(sb > tb):
        raise ValueError("ddim step requires s <= t")
    if torch.all(tb == sb):
        return z_t
    x_pred = _call(model, z_t, tb, y)
    return ddim_update(x_pred, z_t, tb, sb, sched)


@torch.no_grad()
def ddim_sample(model: Denoiser, n_steps: int, shape: Optional[tuple] = None, *,
                seed: Optional[int] = None, noise: Optional[torch.Tensor] = None,
                y: Optional[torch.Tensor] = None, sched: NoiseSchedule = COSINE) -> torch.Tensor:
    """Generate images with ``n_steps`` DDIM steps on the uniform grid from 1 to 0.

    Either pass the starting noise ``z_1`` directly or a ``shape`` and ``seed``
    from which it is drawn.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if noise is None:
        if shape is None:
            raise ValueError("either noise or shape is required")
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        noise = torch.randn(shape, generator=gen)
    z = noise
    for i in range(n_steps, 0, -1):
        z = ddim_step(model, z, i / n_steps, (i - 1) / n_steps, sched, y)
    return z


def pd_teacher_target(teacher: Denoiser, z_t: torch.Tensor, t: TimeLike, n_student: int,
                      sched: NoiseSchedule = COSINE, y: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Clean-image target for a student with ``n_student`` steps.

    The teacher takes two DDIM steps of size ``1/(2 n_student)`` from ``t`` to
    ``t'' = t - 1/n_student``. The returned ``x_T`` is the clean image whose single
    DDIM step from ``t`` to ``t''`` lands exactly on the teacher's result.
    """
    tb = _as_batch_time(t, z_t.shape[0], z_t)
    t_mid = tb - 0.5 / n_student
    t_end = tb - 1.0 / n_student
    if torch.any(t_end < -1e-12):
        raise ValueError(f"t - 1/{n_student} must be >= 0")
    t_end = t_end.clamp_min(0.0)
    t_mid = t_mid.clamp_min(0.0)
    with torch.no_grad():
        z_mid = ddim_step(teacher, z_t, tb, t_mid, sched, y)
        z_end = ddim_step(teacher, z_mid, t_mid, t_end, sched, y)

    ratio = sched.sigma(t_end) / sched.sigma(tb)
    denom = sched.alpha(t_end) - ratio * sched.alpha(tb)
    at_zero = t_end == 0
    bad = (~at_zero) & (denom.abs() < 1e-12)
    if torch.any(bad):
        i = int(torch.nonzero(bad)[0])
        raise SingularTargetError(
            f"singular distillation target at t={float(tb[i])}, t''={float(t_end[i])}")
    denom = torch.where(at_zero, torch.ones_like(denom), denom)
    x_target = (z_end - _bcast(ratio, z_t) * z_t) / _bcast(denom, z_t)
    return torch.where(_bcast(at_zero, z_t).bool(), z_end, x_target)
