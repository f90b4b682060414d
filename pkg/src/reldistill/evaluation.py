"""Sample-quality metrics computed with the desk classifier.

The Fréchet distance here uses the desk classifier's pooled features and the
Inception Score its class probabilities, so values are only comparable with
each other (orderings and trends), never with Inception-V3 numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .features import FeatureExtractor, extract
from .schedule import COSINE, NoiseSchedule, ddim_sample

STATS_FORMAT = "reldistill-stats"
STATS_VERSION = 1


class MetricError(ValueError):
    pass


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)


class RunningStats:
    """Streaming mean / unbiased covariance (batched Welford-Chan updates)."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, feats: np.ndarray):
        feats = np.asarray(feats, dtype=np.float64)
        nb = len(feats)
        if nb == 0:
            return
        mb = feats.mean(0)
        centered = feats - mb
        m2b = centered.T @ centered
        delta = mb - self.mean
        n = self.n + nb
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + np.outer(delta, delta) * (self.n * nb / n)
        self.n = n

    def finalize(self) -> FeatureStats:
        if self.n < 2:
            raise MetricError("at least 2 samples are needed for a covariance")
        cov = self.m2 / (self.n - 1)
        return FeatureStats(self.mean.copy(), 0.5 * (cov + cov.T), self.n)


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    rs = RunningStats(np.asarray(feats).shape[1])
    rs.update(feats)
    return rs.finalize()


@torch.no_grad()
def collect_stats(extractor: FeatureExtractor, images: torch.Tensor, batch_size: int = 256) -> FeatureStats:
    """Pooled-feature mean and unbiased covariance over ``images``."""
    if len(images) < 2:
        raise MetricError("collect_stats needs at least 2 images")
    rs = RunningStats(extractor.feature_dim)
    for i in range(0, len(images), batch_size):
        rs.update(extract(extractor, images[i:i + batch_size])[1].double().numpy())
    return rs.finalize()


def _psd_sqrt(mat: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if w.min() < -tol:
        raise MetricError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of ``(S_a S_b)^(1/2)`` is computed as the trace of the symmetric
    square root of ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        if np.linalg.eigvalsh(0.5 * (s.cov + s.cov.T)).min() < -tol:
            raise MetricError("covariance is not positive semidefinite")
    root_a = _psd_sqrt(a.cov, tol)
    middle = _psd_sqrt(root_a @ b.cov @ root_a, tol)
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(middle)
    return float(max(value, 0.0))


def inception_score(probs, splits: int = 1, tol: float = 1e-5) -> float:
    """``exp(mean_i KL(p(y|x_i) || p(y)))``, averaged over ``splits`` chunks."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or np.any(p < -tol) or np.any(np.abs(p.sum(1) - 1.0) > tol):
        raise MetricError("rows must be probability vectors")
    p = np.clip(p, 0.0, None)
    scores = []
    for chunk in np.array_split(p, splits):
        marginal = chunk.mean(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(chunk > 0, chunk * (np.log(chunk) - np.log(marginal)), 0.0)
        scores.append(np.exp(terms.sum(1).mean()))
    return float(np.mean(scores))


def sample_seeds(seed: int, n: int) -> list[int]:
    """Independent per-sample seeds derived from ``seed``."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def sample_noise(seed: int, n: int, shape: tuple) -> torch.Tensor:
    gens = (torch.Generator().manual_seed(s) for s in sample_seeds(seed, n))
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


@torch.no_grad()
def generate(model, n_steps: int, n_samples: int, seed: int, shape: tuple,
             labels: Optional[torch.Tensor] = None, batch_size: int = 500,
             sched: NoiseSchedule = COSINE) -> torch.Tensor:
    noise = sample_noise(seed, n_samples, shape)
    out = []
    for i in range(0, n_samples, batch_size):
        y = None if labels is None else labels[i:i + batch_size]
        out.append(ddim_sample(model, n_steps, noise=noise[i:i + batch_size], y=y, sched=sched))
    return torch.cat(out)


@torch.no_grad()
def evaluate_model(model, n_steps: int, n_samples: int, extractor: FeatureExtractor,
                   reference: FeatureStats, seed: int = 0, labels: Optional[torch.Tensor] = None,
                   splits: int = 1, sched: NoiseSchedule = COSINE) -> dict:
    """Generate ``n_samples`` with ``n_steps`` DDIM steps and score them."""
    shape = (model.in_channels, model.image_size, model.image_size)
    if extractor.image_size is not None and extractor.image_size != model.image_size:
        raise MetricError("extractor and model resolutions differ")
    if reference.mean.shape[0] != extractor.feature_dim:
        raise MetricError("reference statistics were computed with a different extractor")
    images = generate(model, n_steps, n_samples, seed, shape, labels, sched=sched).clamp(-1, 1)
    stats = collect_stats(extractor, images)
    probs = torch.softmax(extractor.logits(images), dim=1).double().numpy()
    return {"fid": frechet_distance(stats, reference), "is": inception_score(probs, splits),
            "n_steps": n_steps, "n_samples": n_samples, "seed": seed}


def save_stats(path, stats: FeatureStats, extractor_checksum: str, dataset: str = ""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, mean=stats.mean, cov=stats.cov, count=stats.count,
                 meta=json.dumps({"format": STATS_FORMAT, "version": STATS_VERSION,
                                  "extractor": extractor_checksum, "dataset": dataset}))
    return path


def load_stats(path, extractor_checksum: Optional[str] = None) -> FeatureStats:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != STATS_FORMAT or meta.get("version", 0) > STATS_VERSION:
            raise MetricError(f"{path} is not a supported stats file")
        if extractor_checksum is not None and meta["extractor"] != extractor_checksum:
            raise MetricError(f"{path} was computed with a different extractor")
        return FeatureStats(data["mean"], data["cov"], int(data["count"]))


def reference_stats(cache_dir, dataset: str, extractor: FeatureExtractor, images: torch.Tensor) -> FeatureStats:
    """Cached reference statistics keyed by dataset name and extractor checksum."""
    checksum = extractor.checksum()
    path = Path(cache_dir) / f"{dataset}-{checksum[:16]}.npz"
    if path.exists():
        return load_stats(path, checksum)
    stats = collect_stats(extractor, images)
    save_stats(path, stats, checksum, dataset)
    return stats
