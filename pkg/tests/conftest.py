import numpy as np
import pytest
import torch

from mvstyle import toy


def central_difference(f, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Elementwise central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f(x))
            flat[i] = orig - step
            fm = float(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * step)
    return grad.view_as(x)


def autograd_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-300)
    return (a - b).norm().item() / denom


def gradient_error(f, x, step=1e-4) -> float:
    return relative_error(autograd_gradient(f, x), central_difference(f, x, step))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(seed: int, size=16, low=0.2, high=0.8) -> torch.Tensor:
    # Kept away from 0: near-black pixels make the log-chroma histogram so sharp
    # that a 1e-4 central difference is itself off by more than 1e-3.
    g = torch.Generator().manual_seed(seed)
    return low + (high - low) * torch.rand(size, size, 3, generator=g, dtype=torch.float64)


@pytest.fixture(scope="session")
def toy_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return toy.write_scene(root)
