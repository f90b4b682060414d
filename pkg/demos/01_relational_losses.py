# Relational feature losses on hand-made feature maps
#
# Every feature loss in reldistill compares softened similarity structure of a
# teacher and a student. This script builds tiny feature maps by hand so the
# numbers can be checked by hand.

# %%
import torch

from reldistill.features import l2_normalize_rows
from reldistill.losses import cfd_loss, ii_p2p_loss, is_p2p_loss, m_p2p_loss, softmax_temp, spatial_relation

torch.set_printoptions(precision=4, sci_mode=False)

# %% [markdown]
# Two images, four pixels each, three channels. Rows are l2-normalized first,
# so every pixel embedding lives on the unit sphere.

# %%
teacher = l2_normalize_rows(torch.tensor([
    [[1.0, 0.0, 0.0], [0.9, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    [[0.0, 1.0, 0.0], [0.1, 0.9, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
], dtype=torch.float64))
student = l2_normalize_rows(teacher + 0.3 * torch.randn(teacher.shape, dtype=torch.float64,
                                                        generator=torch.Generator().manual_seed(0)))

# %% [markdown]
# The spatial relation of an image with itself is a cosine-similarity matrix
# with ones on the diagonal.

# %%
rel = spatial_relation(teacher[0], teacher[0])
print(rel)

# %% [markdown]
# Softmax with a temperature: large tau flattens every row towards uniform.

# %%
for tau in (0.1, 1.0, 10.0):
    print(tau, softmax_temp(rel[0], tau))

# %% [markdown]
# The intra-image loss compares row distributions of the two self-relations.
# The intra-sample loss does the same for every ordered pair of images in the
# batch, including (i, i), and averages.

# %%
ii = ii_p2p_loss(spatial_relation(teacher[0], teacher[0]), spatial_relation(student[0], student[0]), 1.0)
is_ = is_p2p_loss(teacher, student, 1.0)
print(f"ii_p2p image 0: {float(ii):.5f}   is_p2p batch: {float(is_):.5f}")
print("zero when equal:", float(is_p2p_loss(teacher, teacher, 1.0)))

# %% [markdown]
# The memory loss relates each pixel to a bank of contrast embeddings instead
# of to the other pixels. With a single contrast row every softmax is the
# trivial distribution [1], so the loss vanishes.

# %%
bank = l2_normalize_rows(torch.randn(16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1)))
print("m_p2p, 16 contrasts:", float(m_p2p_loss(teacher[0], student[0], bank, 0.1)))
print("m_p2p, 1 contrast  :", float(m_p2p_loss(teacher[0], student[0], bank[:1], 0.1)))

# %% [markdown]
# The pooled-feature loss only softens the teacher side; at tau=1 it is zero for
# identical inputs but positive for tau != 1.

# %%
pooled = teacher.mean(1)
print("cfd tau=1  :", float(cfd_loss(pooled, pooled, 1.0)))
print("cfd tau=0.9:", float(cfd_loss(pooled, pooled, 0.9)))
