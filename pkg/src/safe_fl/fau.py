"""Feature alignment update: CKA divergence between global and client
backbones, and the divergence-weighted blend of backbone parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLAMP_TOL = 1e-9


class UndefinedSimilarityError(ValueError):
    pass


@dataclass
class DivergenceReport:
    per_stage: list[float]
    mean: float


def linear_cka(a_global: np.ndarray, a_client: np.ndarray) -> float:
    """Linear CKA of two n×d activation matrices after column centering."""
    x = np.asarray(a_global, dtype=np.float64)
    y = np.asarray(a_client, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"row-count mismatch: {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least two rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise UndefinedSimilarityError("centered activations are all zero")
    cross = np.linalg.norm(y.T @ x) ** 2
    value = cross / (xx * yy)
    if value < -CLAMP_TOL or value > 1 + CLAMP_TOL:
        raise ArithmeticError(f"CKA {value} outside [0, 1]")
    return float(min(max(value, 0.0), 1.0))


def multi_scale_divergence(cap_global, cap_client) -> DivergenceReport:
    g = cap_global.stages if hasattr(cap_global, "stages") else cap_global
    c = cap_client.stages if hasattr(cap_client, "stages") else cap_client
    if len(g) != len(c):
        raise ValueError(f"stage-count mismatch: {len(g)} vs {len(c)}")
    per_stage = [linear_cka(a, b) for a, b in zip(g, c)]
    return DivergenceReport(per_stage, float(np.mean(per_stage)))


def blend_coefficients(d_cka: float, eps_minus: float) -> tuple[float, float]:
    """(client, global) coefficients; the client share is ½(1-ε⁻)(1-D)."""
    if not 0.0 <= d_cka <= 1.0:
        raise ValueError(f"d_cka must lie in [0, 1], got {d_cka}")
    if not 0.0 <= eps_minus <= 1.0:
        raise ValueError(f"eps_minus must lie in [0, 1], got {eps_minus}")
    c_client = 0.5 * (1.0 - eps_minus - (1.0 - eps_minus) * d_cka)
    c_global = 0.5 * (1.0 + eps_minus + (1.0 - eps_minus) * d_cka)
    assert 0.0 <= c_client <= 1.0 and 0.0 <= c_global <= 1.0
    return c_client, c_global


def fau_update(w_client: dict, w_global: dict, d_cka: float, eps_minus: float) -> dict:
    """Blend two name→array backbones; both must carry the same names and shapes."""
    if w_client.keys() != w_global.keys():
        raise ValueError("client and global backbones have different parameter names")
    c_client, c_global = blend_coefficients(d_cka, eps_minus)
    out = {}
    for name, wc in w_client.items():
        wg = w_global[name]
        if np.shape(wc) != np.shape(wg):
            raise ValueError(f"shape mismatch for {name}: {np.shape(wc)} vs {np.shape(wg)}")
        out[name] = c_client * np.asarray(wc) + c_global * np.asarray(wg)
    return out
