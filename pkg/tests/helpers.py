"""Finite-difference oracle and small fixtures shared across test modules."""
from __future__ import annotations

import numpy as np

from safe_fl import tensor as T
from safe_fl.ace import AceContextMatrix
from safe_fl.model import ModelConfig, init_params

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, step: float = FD_STEP, idx=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (perturbed in place, restored after)."""
    flat = x.reshape(-1)
    positions = range(flat.size) if idx is None else idx
    out = np.zeros(len(positions))
    for n, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        out[n] = (up - down) / (2 * step)
    return out


def check_op(build, *arrays, tol=1e-6):
    """Compare autodiff against central differences for ``sum(build(*tensors) * probe)``."""
    rng = np.random.default_rng(123)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = rng.normal(size=build(*[T.Tensor(a) for a in arrays]).shape)

    def value():
        return float((build(*[T.Tensor(a) for a in arrays]).data * probe).sum())

    leaves = [T.Tensor(a, requires_grad=True, name=f"x{i}") for i, a in enumerate(arrays)]
    grads = T.backward(T.sum_all(T.mul(build(*leaves), probe)))
    for i, a in enumerate(arrays):
        fd = numeric_grad(value, a)
        np.testing.assert_allclose(grads[f"x{i}"].ravel(), fd, atol=tol, rtol=tol)


def relative_error(a, b, floor: float = 1e-7) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


SMALL = ModelConfig(image_size=8, stage_channels=(4, 8), num_classes=3, ace_dim=2, num_clients=3, gn_groups=2)


def small_model(seed: int = 0, cfg: ModelConfig = SMALL):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    ctx = None
    if cfg.ace_enabled:
        ctx = AceContextMatrix.from_arrays([rng.normal(size=(cfg.num_clients, cfg.ace_dim))
                                            for _ in cfg.stage_channels])
    return params, ctx


def tiny_run_config(**changes):
    """A run small enough for unit tests: 3 clients, 8×8 images, 3 rounds."""
    from safe_fl.config import DataSection, ModelSection, RunConfig
    base = dict(clients=3, rounds=3, local_epochs=1, batch_size=16,
                data=DataSection(classes=4, samples_per_class=30, ses_per_class=4, image_size=8),
                model=ModelSection(stage_channels=(4, 8)))
    base.update(changes)
    return RunConfig(**base)
