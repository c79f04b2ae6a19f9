"""Auto-regressive generation over the response span: greedy and beam search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ParameterError, Tensor
from .nn import Decoder, DecodeState


@dataclass
class DecodeConfig:
    beam_width: int = 15
    temperature: float = 0.6
    max_new_tokens: int = 24
    length_normalization: str = "none"  # "none" | "by-length"

    def __post_init__(self) -> None:
        if self.beam_width < 1:
            raise ParameterError(f"beam_width must be >= 1, got {self.beam_width}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ParameterError("max_new_tokens must be >= 1")
        if self.length_normalization not in ("none", "by-length"):
            raise ParameterError(f"unknown length normalization {self.length_normalization!r}")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # generated ids, EOS excluded
    log_score: float  # cumulative temperature-scaled log-probability (EOS included)
    finished: bool = False
    truncated: bool = False
    step_scores: tuple[float, ...] = field(default=(), repr=False)

    def score(self, normalization: str = "none") -> float:
        if normalization == "by-length":
            return self.log_score / max(1, len(self.step_scores))
        return self.log_score


class Session:
    """A decoder plus its adapters, exposing prefill/step for generation."""

    def __init__(self, decoder: Decoder, adapters=None, eos_id: int = 2):
        self.decoder, self.adapters, self.eos_id = decoder, adapters, eos_id

    def prefill(self, prefix: Tensor) -> tuple[np.ndarray, DecodeState]:
        return self.decoder.prefill(prefix, self.adapters)

    def step(self, state: DecodeState, tokens) -> tuple[np.ndarray, DecodeState]:
        return self.decoder.incremental_step(state, tokens, self.adapters)


def scaled_log_softmax(logits: np.ndarray, tau: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(session: Session, prefix: Tensor, cfg: DecodeConfig) -> Hypothesis:
    """Append the arg-max token until EOS or ``max_new_tokens``."""
    logits, state = session.prefill(prefix)
    tokens, steps = [], []
    for i in range(cfg.max_new_tokens):
        logp = scaled_log_softmax(logits[0], cfg.temperature)
        tok = int(np.argmax(logp))
        steps.append(float(logp[tok]))
        if tok == session.eos_id:
            return Hypothesis(tuple(tokens), float(sum(steps)), True, False, tuple(steps))
        tokens.append(tok)
        if i + 1 < cfg.max_new_tokens:
            logits, state = session.step(state, [tok])
    return Hypothesis(tuple(tokens), float(sum(steps)), False, True, tuple(steps))


def beam_search(session: Session, prefix: Tensor, cfg: DecodeConfig) -> list[Hypothesis]:
    """Breadth-pruned search over temperature-scaled log-probabilities.

    Each step expands every live hypothesis over the vocabulary and keeps the
    best ``beam_width`` expansions (ties: lexicographically smaller token
    sequence first).  Expansions ending in EOS move to the completed pool.
    Hypotheses still live when ``max_new_tokens`` is reached are finalised
    into the pool flagged ``truncated``, so the search space always contains
    the greedy path.  Returns the pool sorted by (normalised) score.
    """
    W, eos, norm = cfg.beam_width, session.eos_id, cfg.length_normalization
    logits, state = session.prefill(prefix)
    live = [Hypothesis((), 0.0)]
    completed: list[Hypothesis] = []

    for step in range(cfg.max_new_tokens):
        logp = scaled_log_softmax(logits, cfg.temperature)
        cands = []
        for b, hyp in enumerate(live):
            row = logp[b]
            # only the best W tokens of a row can survive the global cut
            top = np.argsort(-row, kind="stable")[:W] if W < row.size else np.arange(row.size)
            for tok in top:
                s = float(row[tok])
                cands.append((-(hyp.log_score + s), hyp.tokens + (int(tok),), b, s))
        cands.sort(key=lambda c: (c[0], c[1]))
        new_live, parents, next_tokens = [], [], []
        for neg, toks, b, s in cands[:W]:
            parent = live[b]
            steps = parent.step_scores + (s,)
            if toks[-1] == eos:
                completed.append(Hypothesis(toks[:-1], -neg, True, False, steps))
            else:
                new_live.append(Hypothesis(toks, -neg, False, False, steps))
                parents.append(b)
                next_tokens.append(toks[-1])
        live = new_live
        if not live:
            break
        if completed and norm == "none":
            # scores only decrease with length, so the best live score bounds every extension
            if live[0].log_score <= max(h.log_score for h in completed):
                break
        if step + 1 < cfg.max_new_tokens:
            state = state.reorder(np.asarray(parents))
            logits, state = session.step(state, next_tokens)
        else:
            completed += [Hypothesis(h.tokens, h.log_score, False, True, h.step_scores) for h in live]

    return sorted(completed, key=lambda h: (-h.score(norm), h.tokens))


def decode(session: Session, prefix: Tensor, cfg: DecodeConfig, method: str = "beam") -> Hypothesis:
    if method == "greedy":
        return greedy_decode(session, prefix, cfg)
    if method == "beam":
        return beam_search(session, prefix, cfg)[0]
    raise ParameterError(f"unknown decode method {method!r}")
