"""Online FIFO queue of teacher pixel embeddings."""

from __future__ import annotations

from typing import Optional

import torch


class QueueNotReadyError(RuntimeError):
    pass


class PixelQueue:
    """Fixed-capacity circular buffer of ``dim``-dimensional embeddings.

    Rows are written at ``cursor`` and wrap around, so once the queue is full
    each push overwrites the oldest entries. An optional integer ``tag`` per
    row records provenance (e.g. insertion index) for diagnostics.

    Example:
        >>> q = PixelQueue(capacity=20000, dim=64)
        >>> q.push(teacher_rows, k=8, generator=gen)   # (B, A, C), normalized
        >>> if q.is_ready(2048):
        ...     contrast = q.sample(2048, generator=gen)
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.tags = torch.full((capacity,), -1, dtype=torch.long)
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def is_ready(self, v: int) -> bool:
        return v >= 1 and self.count >= v

    def reset(self):
        self.storage.zero_()
        self.tags.fill_(-1)
        self.cursor = 0
        self.count = 0

    @torch.no_grad()
    def enqueue(self, rows: torch.Tensor, tags: Optional[torch.Tensor] = None):
        """Append ``(n, dim)`` rows in order, overwriting the oldest when full."""
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ValueError(f"expected rows of shape (n, {self.dim}), got {tuple(rows.shape)}")
        n = rows.shape[0]
        if tags is None:
            tags = torch.full((n,), -1, dtype=torch.long)
        if n > self.capacity:
            rows, tags = rows[-self.capacity:], tags[-self.capacity:]
            self.cursor = (self.cursor + n - self.capacity) % self.capacity
            n = self.capacity
        idx = (self.cursor + torch.arange(n)) % self.capacity
        self.storage[idx] = rows.detach().to(self.storage.dtype)
        self.tags[idx] = tags.to(torch.long)
        self.cursor = int((self.cursor + n) % self.capacity)
        self.count = min(self.count + n, self.capacity)

    @torch.no_grad()
    def push(self, maps: torch.Tensor, k: int, generator: Optional[torch.Generator] = None,
             tags: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Pick ``k`` rows per image uniformly without replacement and enqueue them.

        ``maps`` is ``(A, C)`` or ``(B, A, C)`` of l2-normalized teacher rows.
        Returns the selected row indices, shape ``(B, k)``.
        """
        if maps.ndim == 2:
            maps = maps[None]
        b, a, c = maps.shape
        if c != self.dim:
            raise ValueError(f"embedding dim {c} does not match queue dim {self.dim}")
        if not 1 <= k <= a:
            raise ValueError(f"k must be in [1, {a}], got {k}")
        picks = torch.rand(b, a, generator=generator).argsort(dim=1)[:, :k]
        rows = torch.gather(maps.detach(), 1, picks[:, :, None].expand(b, k, c)).reshape(b * k, c)
        self.enqueue(rows, None if tags is None else tags.reshape(-1))
        return picks

    def sample(self, v: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """``v`` distinct valid rows chosen uniformly without replacement, as a ``(v, dim)`` matrix."""
        if not self.is_ready(v):
            raise QueueNotReadyError(f"queue holds {self.count} embeddings, {v} requested")
        idx = torch.randperm(self.count, generator=generator)[:v]
        return self.storage[idx].clone()

    def contents(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Valid rows and tags ordered from oldest to newest."""
        if self.count < self.capacity:
            order = torch.arange(self.count)
        else:
            order = (self.cursor + torch.arange(self.capacity)) % self.capacity
        return self.storage[order].clone(), self.tags[order].clone()

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "storage": self.storage.clone(),
                "tags": self.tags.clone(), "cursor": self.cursor, "count": self.count}

    def load_state_dict(self, state: dict):
        if state["capacity"] != self.capacity or state["dim"] != self.dim:
            raise ValueError("queue geometry mismatch")
        self.storage.copy_(state["storage"])
        self.tags.copy_(state["tags"])
        self.cursor = int(state["cursor"])
        self.count = int(state["count"])

    @classmethod
    def from_state_dict(cls, state: dict) -> "PixelQueue":
        q = cls(state["capacity"], state["dim"], dtype=state["storage"].dtype)
        q.load_state_dict(state)
        return q
