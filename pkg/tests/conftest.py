import numpy as np
import pytest
import torch

from photomodern.seeds import make_rng
from photomodern.toydata import make_toy_corpus, toy_scene


@pytest.fixture()
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small corpus shared by unit tests (8 scenes, 64 px)."""
    root = tmp_path_factory.mktemp("corpus_small")
    make_toy_corpus(root, count=8, size=64, seed=7)
    return str(root)


@pytest.fixture(scope="session")
def single_image_corpus(tmp_path_factory):
    """One-scene corpus for overfit smoke runs."""
    root = tmp_path_factory.mktemp("corpus_one")
    make_toy_corpus(root, count=1, size=64, seed=11)
    return str(root)


@pytest.fixture(scope="session")
def textured_image():
    img, _ = toy_scene(64, make_rng(3), min_regions=4, max_regions=5)
    return img


def random_image(seed: int, h: int = 64, w: int = 64) -> np.ndarray:
    return make_rng(seed).uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)


def directional_grad_check(loss_fn, params: list[torch.Tensor], eps: float = 1e-4,
                           seed: int = 0) -> float:
    """Relative error between the analytic directional derivative and a central
    finite difference along a random direction in parameter space.

    `loss_fn` must be a pure function of `params`; tensors should be float64.
    """
    gen = torch.Generator().manual_seed(seed)
    direction = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    norm = torch.sqrt(sum((d * d).sum() for d in direction))
    direction = [d / norm for d in direction]

    for p in params:
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = sum((p.grad * d).sum().item() for p, d in zip(params, direction))

    with torch.no_grad():
        for p, d in zip(params, direction):
            p += eps * d
    loss_plus = loss_fn().item()
    with torch.no_grad():
        for p, d in zip(params, direction):
            p -= 2 * eps * d
    loss_minus = loss_fn().item()
    with torch.no_grad():
        for p, d in zip(params, direction):
            p += eps * d

    numeric = (loss_plus - loss_minus) / (2 * eps)
    scale = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / scale
