"""Base-model training, classifier pretraining and progressive distillation."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .data import split_holdout
from .features import FeatureExtractor, ProjectionHead, extract, l2_normalize_rows, project_student
from .losses import (LossWeights, cfd_loss, ii_p2p_loss, is_p2p_loss, m_p2p_loss, pd_loss,
                     spatial_relation)
from .memory import PixelQueue
from .schedule import COSINE, NoiseSchedule, forward_diffuse, pd_teacher_target

log = logging.getLogger(__name__)

COMPONENTS = ("pd", "cfd", "ii_p2p", "is_p2p", "m_p2p")
METHODS = ("pd", "cfd", "rdd")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Settings for base denoiser training and classifier pretraining."""

    iterations: int = 800_000
    batch_size: int = 128
    lr: float = 2e-4
    warmup_iters: int = 5000
    lr_schedule: str = "constant"
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    grad_clip: float = 1.0
    loss_weighting: str = "truncated_snr"
    seed: int = 0
    metrics_path: Optional[str] = None

    def __post_init__(self):
        _check_common(self)


@dataclass
class DistillConfig:
    """One distillation stage.

    ``method`` picks the base objective (``pd``, ``cfd`` or ``rdd``); the
    ``no_*`` flags drop individual terms, ``ii_p2p`` adds the intra-image
    relational term and ``pd_mse`` adds the pixel loss to a feature method.
    """

    method: str = "rdd"
    alpha: float = 1.0
    beta: float = 0.1
    tau_cfd: float = 0.9
    tau_isp2p: float = 1.0
    tau_mp2p: float = 0.1
    omega_clip: str = "truncated_snr"
    no_cfd: bool = False
    no_isp2p: bool = False
    no_mp2p: bool = False
    ii_p2p: bool = False
    pd_mse: bool = False
    queue_size: int = 20_000
    queue_sample: int = 2048
    queue_push: int = 8
    batch_size: int = 128
    lr: float = 5e-5
    lr_schedule: str = "cosine"
    warmup_iters: int = 0
    iterations: int = 20_000
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    grad_clip: float = 1.0
    export: str = "ema"
    seed: int = 0
    metrics_path: Optional[str] = None

    def __post_init__(self):
        _check_common(self)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.export not in ("ema", "live"):
            raise ValueError("export must be 'ema' or 'live'")
        if min(self.queue_size, self.queue_sample, self.queue_push) < 1:
            raise ValueError("queue settings must be positive")
        self.weights  # validates temperatures and weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.tau_cfd, self.tau_isp2p, self.tau_mp2p, self.omega_clip)

    @property
    def terms(self) -> frozenset:
        on = set()
        if self.method == "pd" or self.pd_mse:
            on.add("pd")
        if self.method in ("cfd", "rdd") and not self.no_cfd:
            on.add("cfd")
        if self.method == "rdd" and not self.no_isp2p:
            on.add("is_p2p")
        if self.method == "rdd" and not self.no_mp2p:
            on.add("m_p2p")
        if self.ii_p2p:
            on.add("ii_p2p")
        return frozenset(on)

    def total(self, comps: dict):
        """Combined objective: ``pd + cfd + alpha * (is_p2p + ii_p2p) + beta * m_p2p``."""
        return (comps["pd"] + comps["cfd"] + self.alpha * (comps["is_p2p"] + comps["ii_p2p"])
                + self.beta * comps["m_p2p"])


def _check_common(cfg):
    if cfg.iterations <= 0:
        raise ValueError("iterations must be > 0")
    if cfg.batch_size <= 0:
        raise ValueError("batch_size must be > 0")
    if not 0.0 <= cfg.ema_decay < 1.0:
        raise ValueError("ema_decay must lie in [0, 1)")
    if not cfg.grad_clip > 0:
        raise ValueError("grad_clip must be > 0")
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule: {cfg.lr_schedule!r}")


@dataclass
class StageReport:
    """Per-iteration log of one training run."""

    records: list = field(default_factory=list)
    seed: int = 0
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def series(self, key: str = "total") -> list:
        return [r[key] for r in self.records]

    def window_means(self, n: int = 100, key: str = "total") -> tuple[float, float]:
        s = self.series(key)
        n = min(n, len(s))
        return sum(s[:n]) / n, sum(s[-n:]) / n


class EMA:
    """Exponential moving average of a model's parameters and buffers.

    With ``warmup`` the effective decay is ``min(decay, (1 + k) / (10 + k))``
    after ``k`` updates.
    """

    def __init__(self, model: nn.Module, decay: float, warmup: bool = True):
        self.model = copy.deepcopy(model).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.decay = decay
        self.warmup = warmup
        self.updates = 0

    @torch.no_grad()
    def update(self, model: nn.Module):
        d = self.decay
        if self.warmup:
            d = min(d, (1 + self.updates) / (10 + self.updates))
        for e, p in zip(self.model.state_dict().values(), model.state_dict().values()):
            if e.dtype.is_floating_point:
                e.mul_(d).add_(p.detach(), alpha=1.0 - d)
            else:
                e.copy_(p)
        self.updates += 1


def lr_at(it: int, cfg) -> float:
    scale = min(1.0, (it + 1) / cfg.warmup_iters) if cfg.warmup_iters > 0 else 1.0
    if cfg.lr_schedule == "cosine":
        scale *= 0.5 * (1.0 + math.cos(math.pi * it / cfg.iterations))
    return cfg.lr * scale


def grad_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.stack(norms).norm()) if norms else 0.0


def _clip_and_step(params, opt, cfg, it) -> tuple[float, float]:
    pre = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
    post = grad_norm(params)
    for group in opt.param_groups:
        group["lr"] = lr_at(it, cfg)
    opt.step()
    return pre, post


class _MetricsWriter:
    def __init__(self, path: Optional[str]):
        self.fh = None
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "a")

    def write(self, record: dict):
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def train_base(images: torch.Tensor, model: nn.Module, config: TrainConfig,
               labels: Optional[torch.Tensor] = None, sched: NoiseSchedule = COSINE):
    """Standard denoising training of a clean-image predictor.

    Returns ``(model, ema_model, report)``. The loss at a uniform random time
    is the mean squared error between predicted and true clean images, times
    ``max(snr, 1)`` when ``loss_weighting="truncated_snr"``.
    """
    if len(images) == 0:
        raise ValueError("dataset is empty")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model.train()
    for p in model.parameters():
        p.requires_grad_(True)
    ema = EMA(model, config.ema_decay, config.ema_warmup)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    conditional = labels is not None and getattr(model, "num_classes", 0) > 0
    report = StageReport(seed=config.seed)
    writer = _MetricsWriter(config.metrics_path)
    start = time.perf_counter()
    try:
        for it in range(config.iterations):
            idx = torch.randint(len(images), (config.batch_size,), generator=gen)
            x0 = images[idx]
            y = labels[idx] if conditional else None
            t = torch.rand(config.batch_size, generator=gen, dtype=torch.float64).clamp_min(1e-4)
            eps = torch.randn(x0.shape, generator=gen)
            z = forward_diffuse(x0, t, eps, sched)
            x_pred = model(z, t.float(), y)
            mse = ((x_pred - x0) ** 2).flatten(1).mean(1)
            if config.loss_weighting == "truncated_snr":
                mse = mse * sched.snr(t).clamp_min(1.0).float()
            loss = mse.mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite base loss at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            pre, post = _clip_and_step(params, opt, config, it)
            ema.update(model)
            rec = {"iteration": it, "total": float(loss.detach()), "lr": lr_at(it, config),
                   "grad_norm": post, "grad_norm_pre": pre,
                   "wall_clock": time.perf_counter() - start}
            report.records.append(rec)
            writer.write(rec)
    finally:
        writer.close()
    report.wall_clock = time.perf_counter() - start
    model.eval()
    return model, ema.model, report


def pretrain_classifier(images: torch.Tensor, labels: torch.Tensor, classifier: nn.Module,
                        config: TrainConfig, holdout: float = 0.2):
    """Supervised cross-entropy training; returns ``(FeatureExtractor, holdout_accuracy)``."""
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    train_idx, test_idx = split_holdout(len(images), holdout, config.seed)
    xs, ys = images[train_idx], labels[train_idx]
    classifier.train()
    params = list(classifier.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    for it in range(config.iterations):
        idx = torch.randint(len(xs), (config.batch_size,), generator=gen)
        loss = F.cross_entropy(classifier(xs[idx]), ys[idx])
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite classifier loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _clip_and_step(params, opt, config, it)
    classifier.eval()
    with torch.no_grad():
        acc = float((classifier(images[test_idx]).argmax(1) == labels[test_idx]).float().mean())
    log.info("classifier holdout accuracy %.3f", acc)
    return FeatureExtractor(classifier), acc


def distill_stage(teacher: nn.Module, student: nn.Module, n_student: int, images: torch.Tensor,
                  extractor: Optional[FeatureExtractor], config: DistillConfig, *,
                  labels: Optional[torch.Tensor] = None, queue: Optional[PixelQueue] = None,
                  head: Optional[ProjectionHead] = None, sched: NoiseSchedule = COSINE,
                  on_push=None):
    """Train ``student`` for ``n_student`` steps to match two steps of ``teacher``.

    Each iteration draws a batch, a time per sample from the student grid,
    builds the teacher target, evaluates the enabled loss terms and updates the
    student (and the projection head when the memory term is on). Teacher
    features are pushed into the queue after the update.

    Returns ``(exported_student, report)``; the export is the EMA model unless
    ``config.export == "live"``.
    """
    terms = config.terms
    feature_terms = terms & {"cfd", "ii_p2p", "is_p2p", "m_p2p"}
    if feature_terms and extractor is None:
        raise ValueError(f"terms {sorted(feature_terms)} need a feature extractor")
    if "m_p2p" in terms:
        dim = extractor.feature_dim
        if queue is None:
            queue = PixelQueue(config.queue_size, dim)
        if queue.dim != dim:
            raise ValueError(f"queue dim {queue.dim} does not match extractor dim {dim}")
        if head is None:
            head = ProjectionHead(dim)
    else:
        head = None

    torch.manual_seed(config.seed)
    data_gen = torch.Generator().manual_seed(config.seed)
    queue_gen = torch.Generator().manual_seed(config.seed + 7919)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.train()
    for p in student.parameters():
        p.requires_grad_(True)
    params = list(student.parameters())
    if head is not None:
        head.train()
        params += list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    ema = EMA(student, config.ema_decay, config.ema_warmup)
    conditional = labels is not None and getattr(student, "num_classes", 0) > 0
    weights = config.weights
    report = StageReport(seed=config.seed, extra={"n_student": n_student, "terms": sorted(terms)})
    writer = _MetricsWriter(config.metrics_path)
    start = time.perf_counter()
    try:
        for it in range(config.iterations):
            idx = torch.randint(len(images), (config.batch_size,), generator=data_gen)
            x0 = images[idx]
            y = labels[idx] if conditional else None
            t = torch.randint(1, n_student + 1, (config.batch_size,), generator=data_gen).double() / n_student
            eps = torch.randn(x0.shape, generator=data_gen)
            z = forward_diffuse(x0, t, eps, sched)
            x_t = pd_teacher_target(teacher, z, t, n_student, sched, y)
            x_s = student(z, t.float(), y)

            zero = x_s.new_zeros(())
            comps = {k: zero for k in COMPONENTS}
            if "pd" in terms:
                comps["pd"] = pd_loss(x_t, x_s, t, sched, weights.omega_clip)
            maps_t = None
            if feature_terms:
                with torch.no_grad():
                    raw_t, pooled_t = extract(extractor, x_t)
                    maps_t = l2_normalize_rows(raw_t)
                raw_s, pooled_s = extract(extractor, x_s)
                maps_s = l2_normalize_rows(raw_s)
                if "cfd" in terms:
                    comps["cfd"] = cfd_loss(pooled_t, pooled_s, weights.tau_cfd)
                if "is_p2p" in terms:
                    comps["is_p2p"] = is_p2p_loss(maps_t, maps_s, weights.tau_isp2p)
                if "ii_p2p" in terms:
                    comps["ii_p2p"] = ii_p2p_loss(spatial_relation(maps_t, maps_t),
                                                  spatial_relation(maps_s, maps_s), weights.tau_isp2p)
                if "m_p2p" in terms and queue.is_ready(config.queue_sample):
                    contrast = queue.sample(config.queue_sample, queue_gen)
                    comps["m_p2p"] = m_p2p_loss(maps_t, project_student(head, maps_s), contrast,
                                                weights.tau_mp2p)
            loss = config.total(comps)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite distillation loss at iteration {it}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in comps.items()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            pre, post = _clip_and_step(params, opt, config, it)
            ema.update(student)
            if "m_p2p" in terms:
                queue.push(maps_t, config.queue_push, queue_gen)
                if on_push is not None:
                    on_push(maps_t, x_t)

            rec = {"iteration": it, **{k: float(v.detach()) for k, v in comps.items()},
                   "total": float(loss.detach()),
                   "lr": lr_at(it, config), "grad_norm": post, "grad_norm_pre": pre,
                   "queue_count": 0 if queue is None else queue.count,
                   "wall_clock": time.perf_counter() - start}
            report.records.append(rec)
            writer.write(rec)
    finally:
        writer.close()
    report.wall_clock = time.perf_counter() - start
    student.eval()
    exported = ema.model if config.export == "ema" else student
    report.extra["ema_model"] = ema.model
    report.extra["queue"] = queue
    report.extra["head"] = head
    report.extra["optimizer"] = opt
    return exported, report


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def stage_plan(start_steps: int, end_steps: int) -> list[tuple[int, int]]:
    """Halving chain ``[(start, start/2), ..., (2*end, end)]``."""
    if not (_is_pow2(start_steps) and _is_pow2(end_steps)):
        raise ValueError("step counts must be powers of two")
    if end_steps > start_steps:
        raise ValueError("end_steps must not exceed start_steps")
    plan, n = [], start_steps
    while n > end_steps:
        plan.append((n, n // 2))
        n //= 2
    return plan


def progressive_distill(base: nn.Module, start_steps: int, end_steps: int, images: torch.Tensor,
                        extractor: Optional[FeatureExtractor],
                        configs: Union[DistillConfig, Sequence[DistillConfig]], *,
                        labels: Optional[torch.Tensor] = None, checkpoint_dir=None,
                        sched: NoiseSchedule = COSINE):
    """Run the halving chain from ``start_steps`` to ``end_steps``.

    ``configs`` is one config for all stages or one per stage. Each student
    starts from its teacher's weights, and each stage uses a fresh pixel queue.
    Returns a list of ``(n_steps, model, report)`` (empty when start == end).
    """
    plan = stage_plan(start_steps, end_steps)
    if isinstance(configs, DistillConfig):
        configs = [configs] * len(plan)
    if len(configs) != len(plan):
        raise ValueError(f"{len(plan)} stages planned but {len(configs)} configs given")
    results = []
    teacher = base
    for (n_teacher, n_student), cfg in zip(plan, configs):
        log.info("distilling %d -> %d steps (%s)", n_teacher, n_student, cfg.method)
        student = copy.deepcopy(teacher)
        model, report = distill_stage(teacher, student, n_student, images, extractor, cfg,
                                      labels=labels, sched=sched)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"student_{n_student:04d}.pt"
            save_checkpoint(path, student, ema=report.extra["ema_model"],
                            optimizer=report.extra["optimizer"], queue=report.extra["queue"], config=cfg,
                            meta={"n_steps": n_student, "teacher_steps": n_teacher,
                                  "losses": report.series()})
            report.checkpoint = str(path)
        results.append((n_student, model, report))
        teacher = model
    return results
