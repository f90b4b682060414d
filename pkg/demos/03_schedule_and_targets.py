# Noise schedule, DDIM steps and the two-step teacher target
#
# A student with N steps is trained to jump from t to t - 1/N in one DDIM step,
# landing where two teacher steps of size 1/(2N) land. The target clean image
# that makes this exact comes from inverting the DDIM update.

# %%
import math

import torch

from reldistill.schedule import COSINE, ddim_step, ddim_update, pd_teacher_target

# %%
t = torch.linspace(0, 1, 5, dtype=torch.float64)
print("alpha:", COSINE.alpha(t))
print("sigma:", COSINE.sigma(t))
print("alpha^2 + sigma^2:", COSINE.alpha(t) ** 2 + COSINE.sigma(t) ** 2)

# %% [markdown]
# A small analytic "teacher": scales the noisy input by a time-dependent
# factor. Any function of (z, t) works.

# %%
class Teacher(torch.nn.Module):
    def forward(self, z, t, y=None):
        t = t.reshape(-1, *([1] * (z.ndim - 1))).to(z.dtype)
        return torch.cos(t) * z + 0.1


teacher = Teacher()
z = torch.randn(1, 1, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
n_student, t0 = 4, 0.75

# %%
x_target = pd_teacher_target(teacher, z, t0, n_student)
mid = ddim_step(teacher, z, t0, t0 - 1 / (2 * n_student))
two_steps = ddim_step(teacher, mid, t0 - 1 / (2 * n_student), t0 - 1 / n_student)
one_step = ddim_update(x_target, z, t0, t0 - 1 / n_student)
print("two teacher steps :", two_steps.flatten())
print("one step on target:", one_step.flatten())
print("max gap:", float((two_steps - one_step).abs().max()))

# %% [markdown]
# At the last grid point the second teacher step lands on t = 0, where z is
# already the clean image, so the target is simply that endpoint.

# %%
x_end = pd_teacher_target(teacher, z, 1 / n_student, n_student)
print("target at t=1/N equals endpoint:", torch.allclose(
    x_end, ddim_step(teacher, ddim_step(teacher, z, 0.25, 0.125), 0.125, 0.0)))
print("snr at t=0.5:", COSINE.snr(0.5), "(equals 1 since cos = sin at pi/4:", math.isclose(COSINE.snr(0.5), 1.0), ")")
