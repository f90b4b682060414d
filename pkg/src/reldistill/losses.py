"""Distillation objectives.

Every loss takes teacher-side quantities first and student-side second. Teacher
inputs are detached: the teacher and the feature extractor are frozen, so only
the student (and its projection head) receive gradients.

Reductions are means in a fixed order (pair index ``(i, j)`` row-major, then
rows ascending), so results are reproducible for a fixed input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Union

import torch

from .schedule import COSINE, NoiseSchedule, _as_batch_time

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)

Scalar = Union[float, torch.Tensor]


@dataclass
class LossWeights:
    """Weights and temperatures of the relational objective.

    ``alpha`` scales the intra-sample term, ``beta`` the memory-based term.
    ``omega_clip`` selects the pixel-loss weighting: ``"truncated_snr"`` is
    ``max(snr, 1)``, ``"none"`` is a constant 1.
    """

    alpha: float = 1.0
    beta: float = 0.1
    tau_cfd: float = 0.9
    tau_isp2p: float = 1.0
    tau_mp2p: float = 0.1
    omega_clip: str = "truncated_snr"

    def __post_init__(self):
        for name in ("tau_cfd", "tau_isp2p", "tau_mp2p"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if self.omega_clip not in ("truncated_snr", "none"):
            raise ValueError(f"unknown omega_clip rule: {self.omega_clip!r}")


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


def softmax_temp(v: torch.Tensor, tau: float = 1.0, dim: int = -1) -> torch.Tensor:
    """``softmax(v / tau)`` along ``dim`` (max-subtracted internally by torch)."""
    _check_tau(tau)
    if not torch.isfinite(v).all():
        raise ValueError("softmax input must be finite")
    return torch.softmax(v / tau, dim=dim)


def _log_softmax_floored(v: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.log_softmax(v / tau, dim=-1).clamp_min(_LOG_FLOOR)


def kl_divergence(q: torch.Tensor, p: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``sum_i q_i log(q_i / p_i)`` along ``dim``; ``0 log 0 = 0``, ``p`` floored at 1e-12."""
    if q.shape != p.shape:
        raise ValueError(f"distribution shapes differ: {tuple(q.shape)} vs {tuple(p.shape)}")
    log_p = torch.log(p.clamp_min(PROB_FLOOR))
    return (torch.special.xlogy(q, q) - q * log_p).sum(dim=dim)


def _row_kl(logits_t: torch.Tensor, logits_s: torch.Tensor, tau_t: float, tau_s: float) -> torch.Tensor:
    # KL(softmax(t / tau_t) || softmax(s / tau_s)) per row; teacher side is constant
    q = torch.softmax(logits_t.detach() / tau_t, dim=-1)
    log_q = torch.log_softmax(logits_t.detach() / tau_t, dim=-1)
    return (q * (log_q - _log_softmax_floored(logits_s, tau_s))).sum(dim=-1)


def truncated_snr_weight(t: torch.Tensor, sched: NoiseSchedule = COSINE) -> torch.Tensor:
    return torch.clamp(sched.snr(t), min=1.0)


def pd_loss(x_teacher: torch.Tensor, x_student: torch.Tensor, t, sched: NoiseSchedule = COSINE,
            omega_clip: str = "truncated_snr") -> torch.Tensor:
    """Pixel loss ``omega_t * mse(x_teacher, x_student)`` averaged over the batch."""
    if x_teacher.shape != x_student.shape:
        raise ValueError("teacher and student images must have the same shape")
    tb = _as_batch_time(t, x_student.shape[0], x_student)
    if torch.any(tb <= 0) or torch.any(tb > 1):
        raise ValueError("pd_loss requires t in (0, 1]")
    if omega_clip == "truncated_snr":
        omega = truncated_snr_weight(tb, sched)
    else:
        omega = torch.ones_like(tb)
    mse = ((x_teacher.detach() - x_student) ** 2).flatten(1).mean(dim=1)
    return (omega.to(mse.dtype) * mse).mean()


def cfd_loss(pooled_teacher: torch.Tensor, pooled_student: torch.Tensor, tau: float) -> torch.Tensor:
    """KL between the temperature-softened teacher and the plain student distribution.

    Only the teacher side is divided by ``tau``. Batched inputs ``(B, C)`` are
    averaged over the batch.
    """
    _check_tau(tau)
    if pooled_teacher.shape != pooled_student.shape:
        raise ValueError("pooled feature shapes differ")
    return _row_kl(pooled_teacher, pooled_student, tau, 1.0).mean()


def spatial_relation(f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Dot products between rows of ``f`` (``..., A_f, C``) and ``g`` (``..., A_g, C``)."""
    if f.shape[-1] != g.shape[-1]:
        raise ValueError(f"channel dims differ: {f.shape[-1]} vs {g.shape[-1]}")
    return f @ g.transpose(-1, -2)


def ii_p2p_loss(rel_teacher: torch.Tensor, rel_student: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean over rows of the KL between row distributions, both sides softened by ``tau``.

    Any leading batch dimensions are averaged as well.
    """
    _check_tau(tau)
    if rel_teacher.shape != rel_student.shape:
        raise ValueError("relation matrices must have equal shapes")
    return _row_kl(rel_teacher, rel_student, tau, tau).mean()


def is_p2p_loss(maps_teacher: torch.Tensor, maps_student: torch.Tensor, tau: float) -> torch.Tensor:
    """Intra-sample relational loss over all ordered pairs ``(i, j)`` of the batch.

    ``maps_*`` are ``(N, A, C)`` l2-normalized rows. The relation of sample ``i``
    against sample ``j`` is ``F_i F_j^T``; the loss is the mean of
    :func:`ii_p2p_loss` over the ``N**2`` pairs, including ``i == j``.
    """
    if maps_teacher.shape != maps_student.shape:
        raise ValueError(
            f"teacher/student batches differ: {tuple(maps_teacher.shape)} vs {tuple(maps_student.shape)}")
    rel_t = torch.einsum("iac,jbc->ijab", maps_teacher, maps_teacher)
    rel_s = torch.einsum("iac,jbc->ijab", maps_student, maps_student)
    return ii_p2p_loss(rel_t, rel_s, tau)


def m_p2p_loss(maps_teacher: torch.Tensor, maps_student: torch.Tensor, contrast: torch.Tensor,
               tau: float) -> torch.Tensor:
    """Memory-based relational loss against ``V`` contrastive embeddings ``(V, C)``.

    Teacher rows and projected student rows are compared to the same queue
    sample; batched ``(B, A, C)`` inputs are averaged over the batch.
    """
    if maps_teacher.shape != maps_student.shape:
        raise ValueError("teacher and student maps must have equal shapes")
    if contrast.ndim != 2 or contrast.shape[-1] != maps_student.shape[-1]:
        raise ValueError(f"contrast matrix must be (V, {maps_student.shape[-1]}), got {tuple(contrast.shape)}")
    contrast = contrast.detach()
    return ii_p2p_loss(spatial_relation(maps_teacher, contrast),
                       spatial_relation(maps_student, contrast), tau)


def rdd_loss(components: Mapping[str, Scalar], weights: LossWeights, tol: float = 1e-6) -> Scalar:
    """``cfd + alpha * is_p2p + beta * m_p2p``; missing components count as 0.

    A component below ``-tol`` means an upstream bug and raises.
    """
    for name in ("cfd", "is_p2p", "m_p2p"):
        value = components.get(name, 0.0)
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise ValueError(f"{name} component is not finite: {v}")
        if v < -tol:
            raise ValueError(f"{name} component is negative: {v}")
    return (components.get("cfd", 0.0)
            + weights.alpha * components.get("is_p2p", 0.0)
            + weights.beta * components.get("m_p2p", 0.0))
