"""Builders shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from avsr_llm import autograd as ag
from avsr_llm.assembly import Vocabulary
from avsr_llm.autograd import Tensor
from avsr_llm.data import ToyCorpusSpec
from avsr_llm.lora import LoraConfig
from avsr_llm.model import AVSRModel, ModelConfig
from avsr_llm.nn import AUDIO_FPS, VIDEO_FPS, Decoder, EncoderConfig, TransformerConfig
from avsr_llm.params import ParamStore


def grad_check(fn, arrays, rng, step: float = 1e-6) -> float:
    """Max relative error between tape and central-difference gradients of
    ``sum(w * fn(*inputs))`` over every input, at float64."""
    with ag.default_dtype(np.float64):
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        w = Tensor(rng.normal(size=fn(*inputs).shape))

        def loss():
            return ag.tsum(fn(*inputs) * w)

        loss().backward()
        return max(ag.max_relative_error(t.grad, ag.numerical_grad(loss, t, step)) for t in inputs)


def store_grad_check(loss_fn, store: ParamStore, names, extra=(), step: float = 1e-6) -> float:
    """Like :func:`grad_check` for parameters living in ``store`` plus extra leaf tensors."""
    for n in names:
        store[n].requires_grad = True
    loss_fn().backward()
    targets = [store[n] for n in names] + list(extra)
    return max(ag.max_relative_error(t.grad, ag.numerical_grad(loss_fn, t, step)) for t in targets)


def tiny_llm_config(**kw) -> TransformerConfig:
    base = dict(n_layers=2, d_model=16, n_heads=2, ffn_mult=2, vocab_size=12, max_seq_len=64)
    base.update(kw)
    return TransformerConfig(**base)


def tiny_decoder(seed: int = 0, **kw) -> tuple[Decoder, ParamStore]:
    store = ParamStore()
    dec = Decoder(tiny_llm_config(**kw), store, np.random.default_rng(seed), locked=False)
    return dec, store


def tiny_model_config(task: str = "ASR", K_audio: int = 2, K_video: int = 1, rank: int = 4,
                      vocab_size: int = 8, **kw) -> ModelConfig:
    n_tokens = len(Vocabulary(vocab_size))
    llm = TransformerConfig(n_layers=2, d_model=16, n_heads=2, ffn_mult=2, vocab_size=n_tokens, max_seq_len=128)
    enc = dict(d_in=6, d_enc=8, n_layers=1, n_heads=2, ffn_mult=2, max_len=64)
    return ModelConfig(task=task, llm=llm, audio_encoder=EncoderConfig(frame_rate=AUDIO_FPS, **enc),
                       video_encoder=EncoderConfig(frame_rate=VIDEO_FPS, **enc), K_audio=K_audio,
                       K_video=K_video, lora=LoraConfig(rank=rank), **kw)


def tiny_model(task: str = "ASR", seed: int = 0, randomize_lora: bool = True, **kw) -> AVSRModel:
    """A small model whose LoRA B matrices are non-zero so adapters matter."""
    cfg = tiny_model_config(task, **kw)
    model = AVSRModel(cfg, Vocabulary(kw.get("vocab_size", 8)), seed)
    if randomize_lora:
        rng = np.random.default_rng([seed, 99])
        for a in model.adapters.values():
            model.store.assign(a.B.name, rng.normal(0, 0.2, a.B.shape).astype(a.B.dtype))
    return model


def tiny_corpus_spec(**kw) -> ToyCorpusSpec:
    base = dict(vocab_size=8, min_words=2, max_words=5, d_audio=6, d_video=6, n_train=12, n_valid=2, n_test=4)
    base.update(kw)
    return ToyCorpusSpec(**base)


def measured_snr_db(clean: np.ndarray, mixed: np.ndarray) -> float:
    clean = clean.astype(np.float64)
    residual = mixed.astype(np.float64) - clean
    return 10 * math.log10(np.mean(clean ** 2) / np.mean(residual ** 2))
