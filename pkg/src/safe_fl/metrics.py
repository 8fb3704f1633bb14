"""Accuracy, confusion, CR-tracking similarity and PCA parameter trajectories."""
from __future__ import annotations

import numpy as np

from .cro import normalize_cr


def _validate(preds, labels):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size == 0:
        raise ValueError("empty input")
    return preds, labels


def sample_accuracy(preds, labels) -> float:
    preds, labels = _validate(preds, labels)
    return float((preds == labels).mean())


def class_accuracy(preds, labels, num_classes: int) -> float:
    """Mean per-class recall over classes present in ``labels``."""
    preds, labels = _validate(preds, labels)
    recalls = [(preds[labels == j] == j).mean() for j in range(num_classes) if (labels == j).any()]
    return float(np.mean(recalls))


def confusion(preds, labels, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds, labels = _validate(preds, labels)
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (labels, preds), 1)
    return out


def inverse_frequency_profile(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("class counts must be positive")
    return normalize_cr(1.0 / counts)


def ratio_similarity(cr_tilde, class_counts) -> float:
    """Cosine similarity between CR̃ and the min-max normalized inverse class frequency."""
    a = np.asarray(cr_tilde, dtype=np.float64)
    b = inverse_frequency_profile(class_counts)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _power_iteration(cov: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int):
    v = rng.normal(size=cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v
        w /= norm
        # compare up to sign so negative-eigenvalue flips cannot stall the check
        done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
        v = w
        if done:
            break
    return float(v @ cov @ v), v


def pca_trajectory(snapshots, tol: float = 1e-9, max_iter: int = 500, seed: int = 0) -> np.ndarray:
    """Project parameter snapshots onto their top two principal components.

    Works in the snapshot Gram space (m×m), so the cost does not grow with
    the parameter count. Returns an m×2 array; missing components give 0.
    """
    x = np.asarray([np.ravel(s) for s in snapshots], dtype=np.float64)
    m = x.shape[0]
    if m < 3:
        raise ValueError("need at least three snapshots")
    xc = x - x.mean(axis=0)
    gram = xc @ xc.T
    scale = np.trace(gram)
    out = np.zeros((m, 2))
    if scale == 0:
        return out
    rng = np.random.default_rng(seed)
    g = gram.copy()
    for comp in range(2):
        lam, u = _power_iteration(g, rng, tol, max_iter)
        if lam <= 1e-12 * scale:
            break
        direction = xc.T @ u
        direction /= np.linalg.norm(direction)
        nz = np.flatnonzero(np.abs(direction) > 1e-12 * np.abs(direction).max())
        if nz.size and direction[nz[0]] < 0:
            direction = -direction
        out[:, comp] = xc @ direction
        g = g - lam * np.outer(u, u)
    return out
