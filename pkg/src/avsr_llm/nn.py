"""Transformer blocks: the causal toy language model and the frozen
bidirectional modality encoders."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor
from .lora import LoraAdapter, lora_forward
from .params import ParamStore

AUDIO_FPS = 50
VIDEO_FPS = 25


class CapacityError(RuntimeError):
    """Sequence longer than the model's positional capacity."""


class ConfigError(ValueError):
    """Inconsistent model configuration or input width."""


@dataclass
class TransformerConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 43
    max_seq_len: int = 256
    causal: bool = True
    n_kv_heads: int | None = None  # parameter accounting only; the toy model uses full MHA
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderConfig:
    d_in: int = 32
    d_enc: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 512
    frame_rate: int = AUDIO_FPS

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    features: Tensor  # [B, T, d_enc] (or [T, d_enc] for a single clip)
    frame_rate: int
    lengths: np.ndarray | None = None


def _normal(rng, shape, std):
    return rng.normal(0.0, std, shape)


def init_block(store: ParamStore, prefix: str, d: int, ffn_mult: int, rng, locked: bool) -> None:
    std = 1.0 / math.sqrt(d)
    store.add(f"{prefix}.attn_norm", np.ones(d), locked=locked)
    for name in ("q", "k", "v", "o"):
        store.add(f"{prefix}.attn.{name}", _normal(rng, (d, d), std), locked=locked)
    store.add(f"{prefix}.ffn_norm", np.ones(d), locked=locked)
    store.add(f"{prefix}.ffn.w_in", _normal(rng, (d, ffn_mult * d), std), locked=locked)
    store.add(f"{prefix}.ffn.w_out", _normal(rng, (ffn_mult * d, d), 1.0 / math.sqrt(ffn_mult * d)), locked=locked)


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def causal_bias(n_query: int, n_key: int, dtype) -> np.ndarray:
    """Additive mask: query i (the last ``n_query`` positions) sees keys <= its position."""
    offset = n_key - n_query
    q = np.arange(n_query)[:, None] + offset
    k = np.arange(n_key)[None, :]
    return np.where(k <= q, 0.0, -np.inf).astype(dtype)


def self_attention(x: Tensor, store: ParamStore, prefix: str, n_heads: int, *,
                   rope: tuple[np.ndarray, np.ndarray] | None = None,
                   bias: np.ndarray | None = None,
                   adapters: dict[str, LoraAdapter] | None = None,
                   cache: dict | None = None,
                   return_weights: bool = False):
    """Multi-head scaled dot-product attention over ``x`` [B, T, d].

    ``bias`` is added to the [B, H, T, T_key] scores (causal and/or padding
    masks).  With ``cache`` (inference only) previously computed keys and
    values are prepended and the new ones appended in place.
    """
    adapters = adapters or {}
    B, T, d = x.shape
    hd = d // n_heads

    def proj(name):
        key = f"{prefix}.attn.{name}"
        return lora_forward(x, store[key], adapters.get(key))

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, T, n_heads, hd)), (0, 2, 1, 3))

    q, k, v = heads(proj("q")), heads(proj("k")), heads(proj("v"))
    if rope is not None:
        q = ag.rotary(q, *rope)
        k = ag.rotary(k, *rope)
    if cache is not None:
        if ag.grad_enabled():
            raise ContractError("key/value cache is inference-only; wrap in no_grad()")
        if "k" in cache:
            k = Tensor(np.concatenate([cache["k"], k.data], axis=2), dtype=x.dtype)
            v = Tensor(np.concatenate([cache["v"], v.data], axis=2), dtype=x.dtype)
        cache["k"], cache["v"] = k.data, v.data
    scores = ag.matmul(q, ag.transpose(k)) * (1.0 / math.sqrt(hd))
    if bias is not None:
        scores = scores + Tensor(bias, dtype=x.dtype)
    weights = ag.softmax(scores, axis=-1)
    y = ag.matmul(weights, v)
    y = ag.reshape(ag.transpose(y, (0, 2, 1, 3)), (B, T, d))
    out = lora_forward(y, store[f"{prefix}.attn.o"], adapters.get(f"{prefix}.attn.o"))
    return (out, weights) if return_weights else out


def block_forward(x: Tensor, store: ParamStore, prefix: str, n_heads: int, **attn_kw) -> Tensor:
    h = ag.rms_norm(x, store[f"{prefix}.attn_norm"])
    x = x + self_attention(h, store, prefix, n_heads, **attn_kw)
    h = ag.rms_norm(x, store[f"{prefix}.ffn_norm"])
    adapters = attn_kw.get("adapters") or {}
    h = ag.silu(lora_forward(h, store[f"{prefix}.ffn.w_in"], adapters.get(f"{prefix}.ffn.w_in")))
    return x + lora_forward(h, store[f"{prefix}.ffn.w_out"], adapters.get(f"{prefix}.ffn.w_out"))


@dataclass
class DecodeState:
    """Per-layer key/value cache of an incremental decode."""
    caches: list[dict]
    length: int
    version: int
    batch: int

    def reorder(self, index: np.ndarray) -> "DecodeState":
        index = np.asarray(index)
        caches = [{"k": c["k"][index], "v": c["v"][index]} for c in self.caches]
        return DecodeState(caches, self.length, self.version, len(index))


class Decoder:
    """Causal decoder-only language model with rotary positions."""

    def __init__(self, cfg: TransformerConfig, store: ParamStore, rng: np.random.Generator,
                 prefix: str = "llm", locked: bool = True):
        if cfg.n_kv_heads not in (None, cfg.n_heads):
            raise ConfigError("grouped-query attention is not implemented in the toy decoder")
        self.cfg, self.store, self.prefix = cfg, store, prefix
        d = cfg.d_model
        store.add(f"{prefix}.embed", _normal(rng, (cfg.vocab_size, d), 1.0), locked=locked)
        for i in range(cfg.n_layers):
            init_block(store, f"{prefix}.block{i}", d, cfg.ffn_mult, rng, locked)
        store.add(f"{prefix}.final_norm", np.ones(d), locked=locked)
        store.add(f"{prefix}.head", _normal(rng, (d, cfg.vocab_size), 1.0 / math.sqrt(d)), locked=locked)

    def block_names(self) -> list[str]:
        return [f"{self.prefix}.block{i}" for i in range(self.cfg.n_layers)]

    def embed(self, ids) -> Tensor:
        return ag.embedding(self.store[f"{self.prefix}.embed"], ids)

    def forward(self, x: Tensor, adapters: dict[str, LoraAdapter] | None = None,
                state: DecodeState | None = None) -> Tensor:
        """Next-token logits [B, T, V] for fused embeddings ``x`` [B, T, d].

        With ``state`` the positions continue after ``state.length`` and the
        cache is extended in place.
        """
        if x.ndim == 2:
            x = ag.reshape(x, (1,) + x.shape)
        B, T, d = x.shape
        if d != self.cfg.d_model:
            raise ConfigError(f"input width {d} != d_model {self.cfg.d_model}")
        start = state.length if state is not None else 0
        if start + T > self.cfg.max_seq_len:
            raise CapacityError(f"sequence length {start + T} exceeds max_seq_len {self.cfg.max_seq_len}")
        rope = rope_tables(np.arange(start, start + T), self.cfg.head_dim, self.cfg.rope_base, x.dtype)
        bias = causal_bias(T, start + T, x.dtype) if self.cfg.causal else None
        for i, name in enumerate(self.block_names()):
            cache = state.caches[i] if state is not None else None
            x = block_forward(x, self.store, name, self.cfg.n_heads, rope=rope, bias=bias,
                              adapters=adapters, cache=cache)
        x = ag.rms_norm(x, self.store[f"{self.prefix}.final_norm"])
        return ag.matmul(x, self.store[f"{self.prefix}.head"])

    def new_state(self, batch: int) -> DecodeState:
        return DecodeState([{} for _ in range(self.cfg.n_layers)], 0, self.store.version, batch)

    def prefill(self, x: Tensor, adapters=None) -> tuple[np.ndarray, DecodeState]:
        """Run the prompt through the model, returning last-position logits and the cache."""
        if x.ndim == 2:
            x = ag.reshape(x, (1,) + x.shape)
        state = self.new_state(x.shape[0])
        with ag.no_grad():
            logits = self.forward(x, adapters, state)
        state.length = x.shape[1]
        return logits.data[:, -1], state

    def incremental_step(self, state: DecodeState, tokens, adapters=None) -> tuple[np.ndarray, DecodeState]:
        """Feed one new token per batch row; returns logits [B, V] and the extended state."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if state.version != self.store.version:
            raise ContractError("decode cache is stale: parameters changed since it was built")
        if len(tokens) != state.batch:
            raise ContractError(f"{len(tokens)} tokens for a cache of batch {state.batch}")
        with ag.no_grad():
            x = ag.reshape(self.embed(tokens), (len(tokens), 1, self.cfg.d_model))
            logits = self.forward(x, adapters, state)
        state.length += 1
        return logits.data[:, -1], state


class FrozenEncoder:
    """Bidirectional transformer over raw feature frames, frozen at birth.

    Stand-in for a pretrained audio or video encoder: randomly initialised,
    learned absolute positions, never updated.  Only adapters attached to it
    (video-encoder LoRA for VSR) can be trainable.
    """

    def __init__(self, cfg: EncoderConfig, store: ParamStore, rng: np.random.Generator, prefix: str):
        self.cfg, self.store, self.prefix = cfg, store, prefix
        store.add(f"{prefix}.in_proj", _normal(rng, (cfg.d_in, cfg.d_enc), 1.0 / math.sqrt(cfg.d_in)), locked=True)
        store.add(f"{prefix}.in_bias", _normal(rng, (cfg.d_enc,), 0.1), locked=True)
        store.add(f"{prefix}.pos", _normal(rng, (cfg.max_len, cfg.d_enc), 0.5), locked=True)
        for i in range(cfg.n_layers):
            init_block(store, f"{prefix}.block{i}", cfg.d_enc, cfg.ffn_mult, rng, locked=True)

    def block_names(self) -> list[str]:
        return [f"{self.prefix}.block{i}" for i in range(self.cfg.n_layers)]

    def forward(self, frames: Tensor, lengths=None, adapters=None) -> EncoderOutput:
        """Encode ``frames`` [B, T, d_in] (or [T, d_in]); padded frames
        (beyond ``lengths``) are excluded as keys and zeroed in the output."""
        single = frames.ndim == 2
        if single:
            frames = ag.reshape(frames, (1,) + frames.shape)
        B, T, d_in = frames.shape
        if d_in != self.cfg.d_in:
            raise ConfigError(f"{self.prefix}: input width {d_in} != {self.cfg.d_in}")
        if T > self.cfg.max_len:
            raise CapacityError(f"{self.prefix}: {T} frames exceed max_len {self.cfg.max_len}")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        valid = np.arange(T)[None, :] < lengths[:, None]
        bias = np.where(valid, 0.0, -np.inf).astype(frames.dtype)[:, None, None, :]
        pos = Tensor(self.store[f"{self.prefix}.pos"].data[:T], dtype=frames.dtype)
        h = ag.matmul(frames, self.store[f"{self.prefix}.in_proj"]) + self.store[f"{self.prefix}.in_bias"] + pos
        for name in self.block_names():
            h = block_forward(h, self.store, name, self.cfg.n_heads, bias=bias, adapters=adapters)
        h = h * Tensor(valid[..., None], dtype=frames.dtype)
        if single:
            h = ag.reshape(h, h.shape[1:])
        return EncoderOutput(h, self.cfg.frame_rate, lengths)


def frames_for(duration_s: float, frame_rate: int) -> int:
    return int(round(duration_s * frame_rate))
