# The pixel queue
#
# The memory loss draws contrast embeddings from a fixed-capacity FIFO of
# teacher pixel embeddings. Each training image pushes K randomly chosen pixel
# rows; each loss evaluation samples V rows without replacement.

# %%
import torch

from reldistill.features import l2_normalize_rows
from reldistill.memory import PixelQueue, QueueNotReadyError

gen = torch.Generator().manual_seed(0)

# %% [markdown]
# A queue of capacity 6 over 2-dim embeddings. Tags let us follow rows.

# %%
q = PixelQueue(capacity=6, dim=2)
for step in range(4):
    rows = l2_normalize_rows(torch.randn(2, 2, generator=gen))
    q.enqueue(rows, tags=torch.tensor([10 * step, 10 * step + 1]))
    print(f"after push {step}: count={q.count} tags oldest->newest {q.contents()[1].tolist()}")

# %% [markdown]
# The oldest rows (tags 0 and 1) were overwritten. Sampling more rows than the
# queue holds is an error; the trainer checks ``is_ready`` first and simply
# skips the memory term until then.

# %%
try:
    q.sample(7, gen)
except QueueNotReadyError as exc:
    print("not ready:", exc)
print("ready for 4:", q.is_ready(4), " sample:", q.sample(4, gen))

# %% [markdown]
# Pushing a batch of feature maps: (B, A, C) maps, K rows per image.

# %%
q = PixelQueue(capacity=100, dim=3)
maps = l2_normalize_rows(torch.randn(4, 16, 3, generator=gen))
picks = q.push(maps, k=5, generator=gen)
print("picked pixel indices per image:\n", picks)
print("queue count:", q.count)
