"""Adaptive context enhancement: per-client context embeddings gate stage features.

Each stage's features are projected point-wise, attended against the (MLP
transformed) context rows of all K clients, mixed into a one-channel map and
turned into a binary foreground mask that amplifies the masked pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class AceParams:
    """Parameters of one stage's ACE branch (arrays or tracked Tensors)."""

    pointwise_kernel: object  # D×C×1×1
    mlp_w1: object  # D×D
    mlp_b1: object  # D
    mlp_w2: object  # D×D
    mlp_b2: object  # D
    mix_kernel: object  # 1×(K·D)×3×3
    mix_gamma: object  # 1
    mix_beta: object  # 1
    context_embedding: object  # D, this client's row

    @property
    def dim(self) -> int:
        return int(np.shape(_data(self.context_embedding))[0])

    @property
    def num_clients(self) -> int:
        return int(np.shape(_data(self.mix_kernel))[1]) // self.dim


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def init_ace_params(channels: int, dim: int, num_clients: int, rng: np.random.Generator) -> AceParams:
    return AceParams(
        pointwise_kernel=rng.normal(0.0, math.sqrt(1.0 / channels), (dim, channels, 1, 1)),
        mlp_w1=rng.normal(0.0, math.sqrt(1.0 / dim), (dim, dim)),
        mlp_b1=np.zeros(dim),
        mlp_w2=rng.normal(0.0, math.sqrt(1.0 / dim), (dim, dim)),
        mlp_b2=np.zeros(dim),
        mix_kernel=rng.normal(0.0, math.sqrt(2.0 / (num_clients * dim * 9)), (1, num_clients * dim, 3, 3)),
        mix_gamma=np.ones(1),
        mix_beta=np.zeros(1),
        context_embedding=rng.normal(0.0, 1.0, dim),
    )


ACE_FIELDS = tuple(f.name for f in fields(AceParams))


@dataclass
class AceContextMatrix:
    """Per-stage K×D stacks of every client's context embedding.

    ``owner_id`` names the single row allowed to receive gradient; ``None``
    means no row is active (cloud evaluation).
    """

    stages: list[Tensor]
    owner_id: int | None = None

    @classmethod
    def from_arrays(cls, arrays) -> "AceContextMatrix":
        return cls([Tensor(np.array(a, dtype=np.float64)) for a in arrays], None)

    def arrays(self) -> list[np.ndarray]:
        return [s.data.copy() for s in self.stages]

    @property
    def num_clients(self) -> int:
        return self.stages[0].shape[0]


def detach_foreign_rows(context: AceContextMatrix, owner_id: int) -> AceContextMatrix:
    """Let gradient reach only row ``owner_id`` of every stage matrix."""
    k = context.num_clients
    if not 0 <= owner_id < k:
        raise IndexError(f"owner {owner_id} outside [0, {k})")
    out = []
    for m in context.stages:
        if k == 1:
            out.append(m)
            continue
        keep = np.zeros((k, 1))
        keep[owner_id] = 1.0
        out.append(T.add(T.mul(m, keep), T.mul(T.detach(m), 1.0 - keep)))
    return AceContextMatrix(out, owner_id)


def client_context(arrays, own_rows: list[Tensor], owner_id: int) -> AceContextMatrix:
    """Context matrix for client training: own row tracked, others constant."""
    stages = []
    for full, own in zip(arrays, own_rows):
        rows = [own if i == owner_id else Tensor(full[i]) for i in range(full.shape[0])]
        stages.append(T.stack(rows))
    return detach_foreign_rows(AceContextMatrix(stages), owner_id)


@dataclass(frozen=True)
class GumbelConfig:
    tau_start: float = 1.0
    tau_end: float = 0.1

    def __post_init__(self):
        if not self.tau_end > 0 or self.tau_start < self.tau_end:
            raise ValueError("need tau_start >= tau_end > 0")


def anneal_tau(round_: int, total_rounds: int, cfg: GumbelConfig = GumbelConfig()) -> float:
    """Cosine interpolation from ``tau_start`` at round 0 to ``tau_end`` at the last round."""
    if total_rounds <= 0:
        return cfg.tau_start
    if not 0 <= round_ <= total_rounds:
        raise ValueError(f"round {round_} outside [0, {total_rounds}]")
    frac = round_ / total_rounds
    return cfg.tau_end + 0.5 * (cfg.tau_start - cfg.tau_end) * (1.0 + math.cos(math.pi * frac))


def logistic_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return np.log(u) - np.log1p(-u)


def gumbel_mask(x_c: Tensor, tau: float, training: bool, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Binary mask ``x_m`` and its soft relaxation ``x_m_soft``.

    Training draws logistic noise (or uses ``noise`` when given) and returns a
    hard mask whose gradient is that of the soft sigmoid. Inference is
    deterministic: the mask is ``x_c >= 0``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not training:
        return Tensor((x_c.data >= 0).astype(np.float64)), T.sigmoid(x_c)
    if noise is None:
        if rng is None:
            raise ValueError("training-mode mask needs an rng or explicit noise")
        noise = logistic_noise(x_c.shape, rng)
    soft = T.sigmoid(T.scale(T.add(x_c, noise), 1.0 / tau))
    hard = (soft.data >= 0.5).astype(np.float64)
    return T.straight_through(soft, hard), soft


def self_gate(features: Tensor, x_m: Tensor, x_m_soft: Tensor) -> Tensor:
    """``(1 + x_m * sigmoid(x_m_soft)) * features``, broadcast over channels."""
    gain = T.add(T.mul(x_m, T.sigmoid(x_m_soft)), 1.0)
    return T.mul(features, gain)


def ace_forward(x: Tensor, params: AceParams, context: Tensor, tau: float, training: bool,
                rng: np.random.Generator | None = None, details: dict | None = None) -> Tensor:
    """Enhance N×C×H×W stage features using a K×D context matrix."""
    p = {name: T.as_tensor(getattr(params, name)) for name in ACE_FIELDS}
    d = p["context_embedding"].shape[0]
    k = context.shape[0]
    if context.shape != (k, d):
        raise ValueError(f"context matrix {context.shape} does not match embedding dim {d}")
    if p["mix_kernel"].shape[1] != k * d:
        raise ValueError(f"mix kernel expects {p['mix_kernel'].shape[1] // d} clients, context has {k}")
    n, _, h, w = x.shape

    fb = T.conv2d(x, p["pointwise_kernel"])
    fb = T.reshape(T.transpose(fb, (0, 2, 3, 1)), (n * h * w, d))
    q = T.linear(T.relu(T.linear(context, p["mlp_w1"], p["mlp_b1"])), p["mlp_w2"], p["mlp_b2"])
    attn = T.softmax(T.scale(T.matmul(fb, T.transpose(q)), 1.0 / math.sqrt(d)))
    per_client = T.mul(T.reshape(attn, (n * h * w, k, 1)), T.reshape(q, (1, k, d)))
    stacked = T.transpose(T.reshape(per_client, (n, h, w, k * d)), (0, 3, 1, 2))
    x_c = T.group_norm(T.conv2d(stacked, p["mix_kernel"], 1, 1), 1, p["mix_gamma"], p["mix_beta"])
    x_m, x_m_soft = gumbel_mask(x_c, tau, training, rng)
    if details is not None:
        details.update(attention=attn.data, x_c=x_c.data, x_m=x_m.data, x_m_soft=x_m_soft.data)
    return self_gate(x, x_m, x_m_soft)
