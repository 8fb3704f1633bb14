"""Small multi-stage CNN shared by every client and the server."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ace import ACE_FIELDS, AceContextMatrix, AceParams, ace_forward, init_ace_params
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    image_size: int = 16
    stage_channels: tuple[int, ...] = (8, 16)
    num_classes: int = 8
    ace_enabled: bool = True
    ace_dim: int = 4
    num_clients: int = 5  # rows of the ACE context matrix
    gn_groups: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.image_size % 2 ** (len(self.stage_channels) - 1):
            raise ValueError("image_size must be divisible by 2^(num_stages-1)")
        for c in self.stage_channels:
            if c % self.gn_groups:
                raise ValueError(f"stage width {c} not divisible by {self.gn_groups} groups")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    def param_count(self) -> int:
        total, c_in = 0, self.input_channels
        for c in self.stage_channels:
            total += c * c_in * 9 + 2 * c
            if self.ace_enabled:
                d = self.ace_dim
                total += d * c + 2 * (d * d + d) + self.num_clients * d * 9 + 2 + d
            c_in = c
        return total + self.num_classes * self.feature_dim + self.num_classes


@dataclass
class StageParams:
    kernel: object  # C_out×C_in×3×3
    gn_gamma: object
    gn_beta: object


STAGE_FIELDS = ("kernel", "gn_gamma", "gn_beta")


@dataclass
class ModelParams:
    stages: list[StageParams]
    head_weight: object  # J×D_feat
    head_bias: object  # J
    ace: list[AceParams] | None = None

    def named(self) -> list[tuple[str, object]]:
        """(name, value) pairs in a fixed order; the order defines flattening."""
        out = []
        for s, st in enumerate(self.stages):
            out += [(f"stage{s}.{f}", getattr(st, f)) for f in STAGE_FIELDS]
            if self.ace is not None:
                out += [(f"ace{s}.{f}", getattr(self.ace[s], f)) for f in ACE_FIELDS]
        out += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else v) for k, v in self.named()}

    def clone(self) -> "ModelParams":
        return self.with_values({k: np.array(v, copy=True) for k, v in self.arrays().items()})

    def with_values(self, values: dict) -> "ModelParams":
        """Copy of this structure with every named entry taken from ``values``."""
        stages = [StageParams(*(values[f"stage{s}.{f}"] for f in STAGE_FIELDS)) for s in range(len(self.stages))]
        ace = None
        if self.ace is not None:
            ace = [AceParams(*(values[f"ace{s}.{f}"] for f in ACE_FIELDS)) for s in range(len(self.ace))]
        return ModelParams(stages, values["head.weight"], values["head.bias"], ace)

    def as_leaves(self, trainable=None) -> "ModelParams":
        """Wrap every array in a named Tensor; names in ``trainable`` (default all) track gradients."""
        vals = {}
        for k, v in self.arrays().items():
            vals[k] = Tensor(v, requires_grad=trainable is None or k in trainable, name=k)
        return self.with_values(vals)

    def embedding_rows(self) -> list:
        return [a.context_embedding for a in self.ace] if self.ace is not None else []


def is_embedding(name: str) -> bool:
    return name.endswith(".context_embedding")


def is_head(name: str) -> bool:
    return name.startswith("head.")


def is_backbone(name: str) -> bool:
    return not is_head(name) and not is_embedding(name)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    stages, ace = [], [] if cfg.ace_enabled else None
    c_in = cfg.input_channels
    for c in cfg.stage_channels:
        stages.append(StageParams(rng.normal(0.0, math.sqrt(2.0 / (9 * c_in)), (c, c_in, 3, 3)),
                                  np.ones(c), np.zeros(c)))
        if ace is not None:
            ace.append(init_ace_params(c, cfg.ace_dim, cfg.num_clients, rng))
        c_in = c
    head_w = rng.normal(0.0, math.sqrt(1.0 / cfg.feature_dim), (cfg.num_classes, cfg.feature_dim))
    return ModelParams(stages, head_w, np.zeros(cfg.num_classes), ace)


@dataclass
class ActivationCapture:
    """Per-stage post-relu, pre-ACE activations reshaped to (N·H·W)×C."""

    stages: list[np.ndarray] = field(default_factory=list)


def _capture_matrix(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n * h * w, c).copy()


def forward(params: ModelParams, batch, cfg: ModelConfig, context: AceContextMatrix | None = None,
            tau: float = 1.0, training: bool = False, rng: np.random.Generator | None = None,
            features: list | None = None) -> tuple[Tensor, ActivationCapture]:
    """Logits N×J and the per-stage activation capture.

    ``params`` may hold plain arrays (no gradient) or tracked Tensors from
    ``ModelParams.as_leaves``. When ``features`` is a list, the pooled
    features fed to the head are appended to it.
    """
    x = T.as_tensor(batch)
    expected = (cfg.input_channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"batch shape {x.shape} does not match model input N×{expected}")
    if len(params.stages) != len(cfg.stage_channels):
        raise ValueError("parameter stage count does not match config")
    if cfg.ace_enabled and (context is None or params.ace is None):
        raise ValueError("ACE enabled but no context matrix given")
    capture = ActivationCapture()
    for s, st in enumerate(params.stages):
        x = T.conv2d(x, T.as_tensor(st.kernel), stride=1 if s == 0 else 2, padding=1)
        x = T.relu(T.group_norm(x, cfg.gn_groups, T.as_tensor(st.gn_gamma), T.as_tensor(st.gn_beta)))
        capture.stages.append(_capture_matrix(x.data))
        if cfg.ace_enabled:
            x = ace_forward(x, params.ace[s], context.stages[s], tau, training, rng)
    pooled = T.global_avg_pool(x)
    if features is not None:
        features.append(pooled)
    logits = T.linear(pooled, T.as_tensor(params.head_weight), T.as_tensor(params.head_bias))
    return logits, capture


def predict(params: ModelParams, images: np.ndarray, cfg: ModelConfig, context: AceContextMatrix | None = None,
            tau: float = 1.0, batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(params, images[i:i + batch_size], cfg, context, tau, training=False)
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def flatten_params(params: ModelParams) -> np.ndarray:
    """All parameters as a 1×P row vector in ``named()`` order."""
    return np.concatenate([np.ravel(v) for v in params.arrays().values()])[None, :]


def unflatten_params(vec: np.ndarray, template: ModelParams) -> ModelParams:
    vec = np.ravel(vec)
    arrays = template.arrays()
    total = sum(a.size for a in arrays.values())
    if vec.size != total:
        raise ValueError(f"vector length {vec.size} != parameter count {total}")
    vals, pos = {}, 0
    for k, a in arrays.items():
        vals[k] = vec[pos:pos + a.size].reshape(a.shape).copy()
        pos += a.size
    return template.with_values(vals)
