"""Class rectification: per-class gradient proportions measured on a balanced
monitoring set, and the loss that re-weights each sample by its class's
normalized proportion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ace import AceContextMatrix
from .model import ModelConfig, ModelParams, forward
from .tensor import Tensor


class DegenerateMeasurementError(ValueError):
    """A gradient-proportion denominator was zero."""


@dataclass(frozen=True)
class CroConfig:
    beta: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")


def head_gradients(params: ModelParams, images: np.ndarray, labels: np.ndarray, cfg: ModelConfig,
                   context: AceContextMatrix | None = None, tau: float = 1.0) -> dict[int, np.ndarray]:
    """Mean cross-entropy gradient of the head weight for each class's samples.

    Returns ``{p: J×D_feat array}``. Only the head weight is tracked; the
    backbone runs once, without gradient, and ``params`` is never modified.
    """
    labels = np.asarray(labels)
    feats: list[Tensor] = []
    forward(params, images, cfg, context, tau, training=False, features=feats)
    pooled = feats[0].data
    out = {}
    for p in range(cfg.num_classes):
        sel = labels == p
        if not sel.any():
            raise ValueError(f"monitoring set has no sample of class {p}")
        w = Tensor(np.array(params.head_weight, dtype=np.float64), requires_grad=True, name="head.weight")
        logits = T.linear(Tensor(pooled[sel]), w, Tensor(params.head_bias))
        grads = T.backward(T.cross_entropy_logits(logits, labels[sel]))
        out[p] = grads["head.weight"]
    return out


def measure_class_gradients(params: ModelParams, images: np.ndarray, labels: np.ndarray, cfg: ModelConfig,
                            context: AceContextMatrix | None = None, tau: float = 1.0) -> np.ndarray:
    """J×J matrix whose (p, q) entry is the L1 norm of head row q's gradient from class-p samples."""
    grads = head_gradients(params, images, labels, cfg, context, tau)
    return np.stack([np.abs(grads[p]).sum(axis=1) for p in range(cfg.num_classes)])


def compute_cr(g: np.ndarray) -> np.ndarray:
    """CR_p = g[p, p] / sum over i != p of g[i, p]."""
    g = np.asarray(g, dtype=np.float64)
    diag = np.diag(g)
    denom = g.sum(axis=0) - diag
    if np.any(denom <= 0):
        raise DegenerateMeasurementError(f"zero off-class gradient mass for classes {np.flatnonzero(denom <= 0)}")
    return diag / denom


def normalize_cr(cr: np.ndarray) -> np.ndarray:
    cr = np.asarray(cr, dtype=np.float64)
    lo, hi = cr.min(), cr.max()
    if hi == lo:
        return np.zeros_like(cr)
    return (cr - lo) / (hi - lo)


def class_weights(cr_tilde: np.ndarray, beta: float, eps_plus: float) -> np.ndarray:
    return eps_plus * beta * np.asarray(cr_tilde, dtype=np.float64) + 1.0


def cr_weighted_loss(probs: Tensor, labels, cr_tilde: np.ndarray, beta: float, eps_plus: float,
                     from_logits: bool = False) -> Tensor:
    """Mean of ``-(eps_plus * beta * cr_tilde[y] + 1) * log(prob_y)``.

    With ``from_logits`` the first argument holds logits and the log-softmax
    is taken internally, which avoids log(0) on saturated rows.
    """
    if not 0.0 <= eps_plus <= 1.0:
        raise ValueError(f"eps_plus must lie in [0, 1], got {eps_plus}")
    n, j = probs.shape
    labels = T._check_labels(labels, n, j)
    logp = T.log_softmax(probs) if from_logits else T.log(probs)
    picked = T.take_rows(logp, labels)
    w = class_weights(cr_tilde, beta, eps_plus)[labels]
    return T.scale(T.sum_all(T.mul(picked, w)), -1.0 / n)
