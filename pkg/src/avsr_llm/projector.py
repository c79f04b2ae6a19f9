"""Modality projector: stack K consecutive encoder frames along the feature
axis, then map them with Linear -> ReLU -> Linear into the LLM embedding space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParameterError, Tensor
from .nn import ConfigError
from .params import ParamStore


@dataclass
class ProjectorConfig:
    K: int = 2
    d_enc: int = 64
    d_hidden: int | None = None  # None -> d_model
    d_model: int = 128

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ParameterError(f"compression rate K must be >= 1, got {self.K}")
        if self.d_hidden is None:
            self.d_hidden = self.d_model

    @property
    def d_in(self) -> int:
        return self.K * self.d_enc

    def num_params(self) -> int:
        return self.d_in * self.d_hidden + self.d_hidden + self.d_hidden * self.d_model + self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def compressed_length(T: int, K: int) -> int:
    return -(-T // K)


def stack_compress(features, K: int) -> Tensor:
    """[T, d] -> [ceil(T/K), K*d]; row t holds frames tK .. tK+K-1.

    The last group is right-padded with zero frames when K does not divide T.
    Also accepts a batch [B, T, d] whose padded frames are already zero.
    """
    if K < 1:
        raise ParameterError(f"compression rate K must be >= 1, got {K}")
    if not isinstance(features, Tensor):
        features = Tensor(features)
    *lead, T, d = features.shape
    n = compressed_length(T, K)
    if n * K != T:
        pad = Tensor(np.zeros(tuple(lead) + (n * K - T, d)), dtype=features.dtype)
        features = ag.concat([features, pad], axis=len(lead))
    return ag.reshape(features, tuple(lead) + (n, K * d))


def token_budget(duration_s: float, frame_rate: float, K: int) -> int:
    """Number of LLM tokens a clip of ``duration_s`` seconds turns into."""
    if duration_s <= 0 or frame_rate <= 0 or K < 1:
        raise ParameterError("duration, frame rate and K must be positive")
    return math.ceil(round(duration_s * frame_rate, 9) / K)


class Projector:
    def __init__(self, cfg: ProjectorConfig, store: ParamStore, rng: np.random.Generator, prefix: str):
        self.cfg, self.store, self.prefix = cfg, store, prefix
        std1 = 1.0 / math.sqrt(cfg.d_in)
        std2 = 1.0 / math.sqrt(cfg.d_hidden)
        store.add(f"{prefix}.fc1.w", rng.normal(0, std1, (cfg.d_in, cfg.d_hidden)), trainable=True)
        store.add(f"{prefix}.fc1.b", np.zeros(cfg.d_hidden), trainable=True)
        store.add(f"{prefix}.fc2.w", rng.normal(0, std2, (cfg.d_hidden, cfg.d_model)), trainable=True)
        store.add(f"{prefix}.fc2.b", np.zeros(cfg.d_model), trainable=True)

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{n}" for n in ("fc1.w", "fc1.b", "fc2.w", "fc2.b")]

    def project(self, stacked: Tensor) -> Tensor:
        """Row-wise Linear2(ReLU(Linear1(stacked)))."""
        if stacked.shape[-1] != self.cfg.d_in:
            raise ConfigError(f"{self.prefix}: input width {stacked.shape[-1]} != K*d_enc = {self.cfg.d_in}")
        s = self.store
        h = ag.relu(ag.matmul(stacked, s[f"{self.prefix}.fc1.w"]) + s[f"{self.prefix}.fc1.b"])
        return ag.matmul(h, s[f"{self.prefix}.fc2.w"]) + s[f"{self.prefix}.fc2.b"]

    def __call__(self, features) -> Tensor:
        return self.project(stack_compress(features, self.cfg.K))
