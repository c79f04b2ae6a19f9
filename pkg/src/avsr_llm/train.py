"""Optimisation: AdamW, the cosine schedule, decoder pretraining and the
projector + LoRA training loop."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ParameterError, Tensor
from .data import (SNR_LEVELS_DB, Utterance, adaptive_time_mask, babble_noise, mix_noise_at_snr, sample_words,
                   z_normalize)
from .model import AVSRModel
from .nn import Decoder, TransformerConfig
from .params import FreezePolicyError, ParamStore

DEFAULT_LR = {"ASR": 1e-3, "AVSR": 1e-3, "VSR": 5e-4}


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; ``snapshot`` holds the diagnostics."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    lr_peak: float = 1e-3
    weight_decay: float = 0.1
    epochs: int = 10
    batch_size: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_fraction: float = 0.03
    grad_clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.lr_peak <= 0:
            raise ParameterError("lr_peak must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ParameterError("warmup_fraction must be in [0, 1)")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ParameterError("grad_clip_norm must be positive when set")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "TrainConfig":
        return cls(**{"lr_peak": DEFAULT_LR[task], **overrides})


@dataclass
class AugmentConfig:
    """Train-time perturbations; evaluation only ever z-normalises."""

    babble: bool = False  # mix babble at an SNR drawn uniformly from ``snr_levels_db``
    snr_levels_db: tuple[float, ...] = SNR_LEVELS_DB
    n_talkers: int = 5
    time_mask_rho: float = 0.1

    def __post_init__(self) -> None:
        self.snr_levels_db = tuple(float(s) for s in self.snr_levels_db)
        if not 0 <= self.time_mask_rho < 1:
            raise ParameterError("time_mask_rho must be in [0, 1)")


# -- optimiser -------------------------------------------------------------------

def adamw_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One AdamW update (decoupled decay on the pre-update weights).

    Returns new ``(theta, m, v)``; inputs are not modified.
    """
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * theta
    return theta, m, v


class AdamW:
    def __init__(self, store: ParamStore, names: list[str] | None = None, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.1):
        names = list(store.trainable()) if names is None else list(names)
        frozen = [n for n in names if not store.is_trainable(n)]
        if frozen:
            raise FreezePolicyError(f"optimizer given frozen parameters: {frozen[:5]}")
        self.store, self.names = store, names
        self.betas, self.eps, self.weight_decay = tuple(betas), eps, weight_decay
        self.m = {n: np.zeros_like(store[n].data, dtype=np.float64) for n in names}
        self.v = {n: np.zeros_like(store[n].data, dtype=np.float64) for n in names}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for n in self.names:
            if not self.store.is_trainable(n):
                raise FreezePolicyError(f"{n!r} became frozen after the optimizer was built")
            p = self.store[n]
            g = np.zeros(p.shape) if p.grad is None else p.grad
            theta, self.m[n], self.v[n] = adamw_step(p.data.astype(np.float64), g, self.m[n], self.v[n],
                                                     self.t, lr, self.betas, self.eps, self.weight_decay)
            self.store.assign(n, theta.astype(p.dtype))


def cosine_lr(step: int, total_steps: int, lr_peak: float, warmup_fraction: float = 0.03) -> float:
    """Linear warm-up to ``lr_peak`` then half-cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_fraction * total_steps
    if step < warmup:
        return lr_peak * step / warmup
    if total_steps == warmup:
        return lr_peak
    progress = (step - warmup) / (total_steps - warmup)
    return max(0.0, lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress)))


def clip_grad_norm(tensors: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for t in tensors if t.grad is not None))
    if norm > max_norm:
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * (max_norm / norm)
    return norm


# -- decoder pretraining -----------------------------------------------------------

@dataclass
class PretrainConfig:
    """Text-only copy task that gives the toy decoder its language skills.

    Each sample is ``source <sep> words <eos>`` where the source repeats every
    word 1..``max_repeat`` times, so the decoder learns to collapse a variable
    number of tokens per word into one output word.
    """

    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    min_words: int = 4
    max_words: int = 16
    max_repeat: int = 6
    no_adjacent_repeats: bool = True
    seed: int = 0

    def key(self, llm: TransformerConfig, backbone_seed: int) -> str:
        blob = json.dumps({"pretrain": asdict(self), "llm": llm.to_dict(), "backbone_seed": backbone_seed},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def copy_task_batch(vocab, cfg: PretrainConfig, rng: np.random.Generator):
    rows, targets = [], []
    for _ in range(cfg.batch_size):
        n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        symbols = sample_words(rng, n, vocab.n_words, cfg.no_adjacent_repeats)
        words = [vocab.word_id(int(w)) for w in symbols]
        source = []
        for w in words:
            source += [w] * int(rng.integers(1, cfg.max_repeat + 1))
        rows.append(source + [vocab.sep_id] + words + [vocab.eos_id])
        targets.append([-1] * len(source) + words + [vocab.eos_id])
    T = max(map(len, rows))
    ids = np.full((len(rows), T), vocab.pad_id, dtype=np.int64)
    tgt = np.full((len(rows), T), -1, dtype=np.int64)
    for i, (r, t) in enumerate(zip(rows, targets)):
        ids[i, : len(r)] = r
        tgt[i, : len(t)] = t
    mask = tgt >= 0
    return ids, np.where(mask, tgt, 0), mask


def pretrain_llm(llm_cfg: TransformerConfig, vocab, cfg: PretrainConfig, backbone_seed: int = 0,
                 log: Callable[[str], None] | None = None) -> dict[str, np.ndarray]:
    """Train every decoder weight on the copy task; returns its ``llm.*`` state."""
    store = ParamStore()
    decoder = Decoder(llm_cfg, store, np.random.default_rng([backbone_seed, 101]), prefix="llm", locked=False)
    for name in store:
        store.set_trainable(name, True)
    opt = AdamW(store, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 404])
    for step in range(cfg.steps):
        ids, tgt, mask = copy_task_batch(vocab, cfg, rng)
        loss = ag.masked_cross_entropy(decoder.forward(decoder.embed(ids)), tgt, mask)
        if not np.isfinite(loss.item()):
            raise TrainingAborted(f"non-finite pretraining loss at step {step}", {"step": step})
        loss.backward()
        opt.step(cosine_lr(step + 1, cfg.steps, cfg.lr, 0.03))
        store.zero_grad()
        if log and (step % 200 == 0 or step == cfg.steps - 1):
            log(f"pretrain step {step:5d}  loss {loss.item():.4f}")
    return store.state_dict("llm.")


# -- features ----------------------------------------------------------------------

def eval_noise_rng(seed: int, index: int, snr_db: float) -> np.random.Generator:
    """Noise draw for evaluation cell (seed, utterance, SNR); identical across models."""
    code = 10**6 if math.isinf(snr_db) else int(round(snr_db * 100)) + 10**5
    return np.random.default_rng([seed, 17, index, code])


def prepare_features(utts: list[Utterance], index: int, snr_db: float, rng: np.random.Generator,
                     n_talkers: int = 5, time_mask_rho: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Babble-corrupt the audio of ``utts[index]`` at ``snr_db``, z-normalise
    both streams and optionally time-mask them.  Video is never corrupted."""
    u = utts[index]
    audio = u.audio
    if not math.isinf(snr_db):
        noise = babble_noise(len(audio), [x.audio for x in utts], rng, n_talkers, exclude=index)
        audio = mix_noise_at_snr(audio, noise, snr_db)
    audio, video = z_normalize(audio), z_normalize(u.video)
    if time_mask_rho > 0:
        audio = adaptive_time_mask(audio, time_mask_rho, rng)
        video = adaptive_time_mask(video, time_mask_rho, rng)
    return audio, video


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    initial_loss: float
    epoch_losses: list[float]
    steps: int
    trainable_params: int
    trainable_breakdown: dict[str, int]
    freeze_audit: dict
    wall_clock_s: float
    lr_trace: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return asdict(self)


def frozen_digests(store: ParamStore) -> dict[str, str]:
    return {n: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest() for n, t in store.frozen().items()}


def freeze_audit(before: dict[str, str], after: dict[str, str], model: AVSRModel) -> dict:
    changed = sorted(n for n in before if after.get(n) != before[n])
    return {
        "frozen_params": len(before),
        "changed": changed,
        "unchanged": not changed and before.keys() == after.keys(),
        "trainable": sorted(model.store.trainable()),
        "outside_policy": model.audit_trainable(),
    }


def _batch_loss(model: AVSRModel, utts: list[Utterance], idx, rng, augment: AugmentConfig, train: bool) -> Tensor:
    audio, video = [], []
    for i in idx:
        snr = augment.snr_levels_db[rng.integers(len(augment.snr_levels_db))] if augment.babble and train else math.inf
        a, v = prepare_features(utts, int(i), snr, rng, augment.n_talkers,
                                augment.time_mask_rho if train else 0.0)
        audio.append(a)
        video.append(v)
    return model.loss(audio, video, [utts[int(i)].words for i in idx])


def train(model: AVSRModel, utts: list[Utterance], cfg: TrainConfig, augment: AugmentConfig | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Fit the projectors and LoRA adapters of ``model`` on ``utts``.

    Deterministic given ``cfg.seed``.  Raises :class:`TrainingAborted` on a
    non-finite loss, before any update is applied with it.
    """
    augment = augment or AugmentConfig()
    t0 = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, 7])
    names = sorted(model.store.trainable())
    opt = AdamW(model.store, names, cfg.betas, cfg.eps, cfg.weight_decay)
    before = frozen_digests(model.store)

    probe = np.arange(min(len(utts), cfg.batch_size))
    with ag.no_grad():
        initial = _batch_loss(model, utts, probe, np.random.default_rng([cfg.seed, 8]), augment, False).item()

    steps_per_epoch = math.ceil(len(utts) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step, epoch_losses, lr_trace = 0, [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(utts))
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss = _batch_loss(model, utts, idx, rng, augment, True)
            value = loss.item()
            if not np.isfinite(value):
                snapshot = {"epoch": epoch, "step": step, "loss": value, "lr": lr_trace[-1] if lr_trace else None,
                            "batch": [utts[int(i)].uid for i in idx],
                            "param_norms": {n: float(np.linalg.norm(model.store[n].data)) for n in names}}
                raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}", snapshot)
            loss.backward()
            if cfg.grad_clip_norm is not None:
                clip_grad_norm([model.store[n] for n in names], cfg.grad_clip_norm)
            step += 1
            lr = cosine_lr(step, total, cfg.lr_peak, cfg.warmup_fraction)
            lr_trace.append(lr)
            opt.step(lr)
            model.store.zero_grad()
            running += value
        epoch_losses.append(running / steps_per_epoch)
        if log:
            log(f"epoch {epoch + 1:2d}/{cfg.epochs}  loss {epoch_losses[-1]:.4f}  "
                f"({time.perf_counter() - t0:.0f}s)")

    audit = freeze_audit(before, frozen_digests(model.store), model)
    return TrainResult(initial, epoch_losses, step, model.store.num_trainable(), model.expected_trainable(),
                       audit, time.perf_counter() - t0, lr_trace)


def save_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
