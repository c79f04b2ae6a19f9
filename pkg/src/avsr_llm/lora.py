"""Low-rank adapters on frozen linear projections.

Linear weights in this package are stored input-major (``y = x @ W`` with
``W`` of shape [d_in, d_out]).  An adapter holds ``A`` [r, d_in] and
``B`` [d_out, r] and contributes ``scale * (x @ A.T) @ B.T`` with
``scale = alpha / r``, i.e. the dense delta is ``scale * (B @ A).T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ParameterError, Tensor, matmul, transpose
from .params import ParamStore


class LoraStateError(RuntimeError):
    """Adapter used in a state that does not allow the operation."""


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float | None = None  # None -> 2 * rank
    targets: tuple[str, ...] = ("q", "v")
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ParameterError(f"LoRA rank must be positive, got {self.rank}")
        if self.alpha is None:
            self.alpha = 2.0 * self.rank
        if self.alpha <= 0:
            raise ParameterError(f"LoRA alpha must be positive, got {self.alpha}")
        self.targets = tuple(self.targets)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    target: str  # name of the base weight in the store
    A: Tensor
    B: Tensor
    scale: float
    merged: bool = False
    store: ParamStore | None = field(default=None, repr=False)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def num_params(self) -> int:
        return self.A.data.size + self.B.data.size

    def delta(self, x: Tensor) -> Tensor:
        return matmul(matmul(x, transpose(self.A)), transpose(self.B)) * self.scale

    def dense_delta(self) -> np.ndarray:
        """The [d_in, d_out] matrix this adapter adds to its base weight."""
        return self.scale * (self.B.data @ self.A.data).T


def attach(store: ParamStore, target: str, cfg: LoraConfig, rng: np.random.Generator) -> LoraAdapter:
    """Register A/B for the base weight ``target`` under ``lora.<target>.{A,B}``."""
    d_in, d_out = store[target].shape
    if cfg.rank > min(d_in, d_out):
        raise ParameterError(f"rank {cfg.rank} exceeds min(d_in, d_out) of {target} ({d_in}x{d_out})")
    A = store.add(f"lora.{target}.A", rng.normal(0.0, cfg.init_std, (cfg.rank, d_in)), trainable=True)
    B = store.add(f"lora.{target}.B", np.zeros((d_out, cfg.rank)), trainable=True)
    return LoraAdapter(target, A, B, cfg.scale, store=store)


def lora_forward(x: Tensor, W: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """``x @ W`` plus the adapter's low-rank delta; gradients reach only A, B
    (and W if it happens to require grad, which frozen bases never do)."""
    y = matmul(x, W)
    if adapter is None:
        return y
    if adapter.merged:
        raise LoraStateError(f"adapter on {adapter.target} is merged; use the base weight alone")
    return y + adapter.delta(x)


def lora_merge(adapter: LoraAdapter) -> None:
    if adapter.merged:
        raise LoraStateError(f"adapter on {adapter.target} is already merged")
    store = adapter.store
    store.assign(adapter.target, store[adapter.target].data + adapter.dense_delta())
    adapter.merged = True


def lora_unmerge(adapter: LoraAdapter) -> None:
    if not adapter.merged:
        raise LoraStateError(f"adapter on {adapter.target} is not merged")
    store = adapter.store
    store.assign(adapter.target, store[adapter.target].data - adapter.dense_delta())
    adapter.merged = False


def projection_shapes(n_layers: int, d_model: int, n_heads: int, n_kv_heads: int | None = None,
                      ffn_hidden: int | None = None) -> dict[str, tuple[int, int]]:
    """(d_in, d_out) of each projection kind in one attention/FFN block."""
    kv_dim = d_model // n_heads * (n_kv_heads or n_heads)
    shapes = {"q": (d_model, d_model), "k": (d_model, kv_dim), "v": (d_model, kv_dim), "o": (d_model, d_model)}
    if ffn_hidden:
        shapes.update({"ffn_in": (d_model, ffn_hidden), "ffn_out": (ffn_hidden, d_model)})
    return shapes


def count_lora_params(model_config, lora_config: LoraConfig) -> int:
    """Sum of ``r * (d_in + d_out)`` over every adapted matrix.

    ``model_config`` needs ``n_layers``, ``d_model``, ``n_heads`` and may
    carry ``n_kv_heads`` (grouped-query attention) and ``ffn_mult``.
    """
    ffn = getattr(model_config, "ffn_mult", None)
    shapes = projection_shapes(
        model_config.n_layers, model_config.d_model, model_config.n_heads,
        getattr(model_config, "n_kv_heads", None),
        ffn * model_config.d_model if ffn else None,
    )
    unknown = [t for t in lora_config.targets if t not in shapes]
    if unknown:
        raise ParameterError(f"unknown LoRA targets {unknown}; available {sorted(shapes)}")
    per_block = sum(lora_config.rank * sum(shapes[t]) for t in lora_config.targets)
    return model_config.n_layers * per_block
