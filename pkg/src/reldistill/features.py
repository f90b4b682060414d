"""Frozen-classifier feature extraction and the student projection head.

Feature maps are handled as tensors of shape ``(B, A, C)`` where ``A = H * W``
spatial positions are rows ("pixels") and ``C`` is the channel dimension.
"""

from __future__ import annotations

import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F


def flatten_map(fmap: torch.Tensor) -> torch.Tensor:
    """``(B, C, H, W) -> (B, H*W, C)``, rows in row-major spatial order."""
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(1, 2)


def unflatten_map(rows: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`flatten_map`."""
    b, a, c = rows.shape
    if a != height * width:
        raise ValueError(f"{a} rows cannot be reshaped to {height}x{width}")
    return rows.transpose(1, 2).reshape(b, c, height, width)


def l2_normalize_rows(rows: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Divide every row (last axis) by its l2 norm; all-zero rows stay zero."""
    norm = rows.norm(dim=-1, keepdim=True)
    return torch.where(norm > eps, rows / norm.clamp_min(eps), torch.zeros_like(rows))


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FeatureExtractor(nn.Module):
    """Frozen wrapper around a classifier exposing its last convolutional map.

    The wrapped classifier must provide ``trunk`` (image -> ``(B, C, H, W)``)
    and ``fc`` (pooled ``C`` vector -> logits). Parameters never receive
    gradients, but gradients do flow through to the input images.
    """

    def __init__(self, classifier: nn.Module):
        super().__init__()
        self.classifier = classifier
        self.classifier.eval()
        for p in self.classifier.parameters():
            p.requires_grad_(False)
        self.image_size = getattr(classifier, "image_size", None)
        self.in_channels = getattr(classifier, "in_channels", None)

    def train(self, mode: bool = True):
        # frozen: stay in eval mode regardless of the parent's mode
        return super().train(False)

    @property
    def feature_dim(self) -> int:
        return self.classifier.feature_dim

    def _check(self, images: torch.Tensor):
        if images.ndim != 4:
            raise ValueError(f"expected a (B, C, H, W) batch, got shape {tuple(images.shape)}")
        if self.in_channels is not None and images.shape[1] != self.in_channels:
            raise ValueError(f"extractor expects {self.in_channels} channels, got {images.shape[1]}")
        if self.image_size is not None and tuple(images.shape[-2:]) != (self.image_size, self.image_size):
            raise ValueError(
                f"extractor expects {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")

    def feature_map(self, images: torch.Tensor) -> torch.Tensor:
        self._check(images)
        return self.classifier.trunk(images)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return extract(self, images)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.classifier.fc(extract(self, images)[1])

    def checksum(self) -> str:
        return parameter_checksum(self.classifier)


def extract(extractor: FeatureExtractor, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(maps, pooled)``: unnormalized ``(B, A, C)`` rows and their mean over ``A``."""
    maps = flatten_map(extractor.feature_map(images))
    return maps, maps.mean(dim=1)


class ProjectionHead(nn.Module):
    """1x1 conv -> batch norm -> ReLU -> 1x1 conv, channel count preserved.

    Trained jointly with the student and applied only to the student features
    entering the memory-based relational loss; it is never saved with a sampler.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 1)
        self.bn = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.relu(self.bn(self.conv1(fmap))))

    @torch.no_grad()
    def identity_init(self):
        """Set both convolutions to the identity (useful for tests and warm starts)."""
        eye = torch.eye(self.channels)[:, :, None, None]
        for conv in (self.conv1, self.conv2):
            conv.weight.copy_(eye)
            conv.bias.zero_()
        return self


def project_student(head: ProjectionHead, rows: torch.Tensor) -> torch.Tensor:
    """Apply ``head`` to ``(B, A, C)`` student rows and re-normalize every row."""
    if rows.shape[-1] != head.channels:
        raise ValueError(f"head expects {head.channels} channels, got {rows.shape[-1]}")
    b, a, c = rows.shape
    # a 1x1 conv over an (A, 1) grid is the same as over (H, W)
    out = head(rows.transpose(1, 2).reshape(b, c, a, 1))
    return l2_normalize_rows(out.reshape(b, c, a).transpose(1, 2))
