import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


class ConstantDenoiser(torch.nn.Module):
    """Predicts the same clean value everywhere."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value
        self.calls = 0

    def forward(self, z, t, y=None):
        self.calls += 1
        return torch.full_like(z, self.value)


class LinearDenoiser(torch.nn.Module):
    """A smooth nonlinear-in-time toy denoiser, ``x = w(t) * z + b``."""

    def __init__(self, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w = torch.nn.Parameter(torch.rand(1, generator=g) + 0.5)
        self.b = torch.nn.Parameter(torch.randn(1, generator=g) * 0.1)

    def forward(self, z, t, y=None):
        t = t.reshape(-1, *([1] * (z.ndim - 1))).to(z.dtype)
        return self.w * torch.cos(t) * z + self.b * (1 + t)


@pytest.fixture
def constant_denoiser():
    return ConstantDenoiser


@pytest.fixture
def linear_denoiser():
    return LinearDenoiser


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
