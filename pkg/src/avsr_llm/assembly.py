"""Fused LLM input: [audio tokens][video tokens][prompt][response].

Text is tokenised word-level over a closed vocabulary: special tokens, the
words of the instruction prompt, and the toy content symbols.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ContractError, DegenerateInputError, ParameterError, Tensor
from .nn import ConfigError

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)
PROMPT_WORDS = ("Transcribe", "speech", "video", "and", "to", "text", ".")
TASKS = ("ASR", "VSR", "AVSR")
TASK_PROMPTS = {"ASR": "speech", "VSR": "video", "AVSR": "speech and video"}
TASK_MODALITIES = {"ASR": (True, False), "VSR": (False, True), "AVSR": (True, True)}
SPAN_ORDER = ("audio", "video", "prompt", "response")


def content_word(i: int) -> str:
    return f"w{i:02d}"


class Vocabulary:
    """Specials, then prompt words, then ``n_words`` content symbols."""

    def __init__(self, n_words: int = 32):
        if n_words < 1:
            raise ParameterError(f"vocabulary needs at least one content word, got {n_words}")
        self.n_words = n_words
        self.tokens = list(SPECIALS) + list(PROMPT_WORDS) + [content_word(i) for i in range(n_words)]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id, self.bos_id, self.eos_id, self.sep_id = (self.index[t] for t in SPECIALS)
        self.first_word_id = len(SPECIALS) + len(PROMPT_WORDS)

    def __len__(self) -> int:
        return len(self.tokens)

    def word_id(self, symbol: int) -> int:
        return self.first_word_id + int(symbol)

    def encode(self, text: str) -> list[int]:
        out = []
        for piece in text.replace(".", " .").split():
            if piece not in self.index:
                raise ParameterError(f"token {piece!r} not in vocabulary")
            out.append(self.index[piece])
        return out

    def decode(self, ids, strip: bool = True) -> list[str]:
        words = []
        for i in ids:
            tok = self.tokens[int(i)]
            if strip and tok == EOS:
                break
            if strip and tok in SPECIALS:
                continue
            words.append(tok)
        return words


@dataclass
class PromptTemplate:
    task: str
    text: str
    ids: list[int]


def build_prompt(task: str, vocab: Vocabulary) -> PromptTemplate:
    if task not in TASK_PROMPTS:
        raise ParameterError(f"unknown task {task!r}; expected one of {TASKS}")
    text = f"Transcribe {TASK_PROMPTS[task]} to text."
    return PromptTemplate(task, text, vocab.encode(text))


@dataclass
class FusedSequence:
    embeddings: Tensor  # [T_total, d_model]
    spans: dict[str, tuple[int, int]]
    loss_mask: np.ndarray  # bool [T_total]
    token_ids: np.ndarray  # int [T_total]; -1 at modality positions
    target_ids: np.ndarray  # response ids y_1..y_N (transcription + EOS); empty in infer mode
    mode: str = "train"

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    def shifted_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Targets/mask aligned to logits: position t predicts token t+1."""
        targets = np.zeros(self.length, dtype=np.int64)
        mask = np.zeros(self.length, dtype=bool)
        targets[:-1] = np.maximum(self.token_ids[1:], 0)
        mask[:-1] = self.loss_mask[1:]
        return targets, mask


def fuse(audio_tokens: Tensor | None, video_tokens: Tensor | None, prompt: PromptTemplate,
         target_ids, mode: str, embed: Callable[[np.ndarray], Tensor],
         separator_id: int | None = None) -> FusedSequence:
    """Concatenate modality tokens, the embedded prompt and (train mode) the response.

    ``target_ids`` are the transcription ids followed by EOS.  In ``infer``
    mode the response span is empty and generation appends to it.
    ``separator_id``, when given, is inserted at the head of the prompt span.
    """
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    want_audio, want_video = TASK_MODALITIES[prompt.task]
    has_audio = audio_tokens is not None and audio_tokens.shape[0] > 0
    has_video = video_tokens is not None and video_tokens.shape[0] > 0
    if (has_audio, has_video) != (want_audio, want_video):
        raise ConfigError(
            f"{prompt.task} expects audio={want_audio}, video={want_video}; "
            f"got audio={has_audio}, video={has_video}")
    prompt_ids = ([separator_id] if separator_id is not None else []) + list(prompt.ids)
    target_ids = np.asarray(target_ids if mode == "train" else [], dtype=np.int64)
    text_ids = np.concatenate([np.asarray(prompt_ids, dtype=np.int64), target_ids])

    parts, lengths = [], {}
    for name, tok in (("audio", audio_tokens if has_audio else None), ("video", video_tokens if has_video else None)):
        lengths[name] = 0 if tok is None else tok.shape[0]
        if tok is not None:
            parts.append(tok)
    lengths["prompt"] = len(prompt_ids)
    lengths["response"] = len(target_ids)
    parts.append(embed(text_ids))
    embeddings = ag.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    spans, lo = {}, 0
    for name in SPAN_ORDER:
        spans[name] = (lo, lo + lengths[name])
        lo += lengths[name]
    T = lo
    loss_mask = np.zeros(T, dtype=bool)
    r0, r1 = spans["response"]
    loss_mask[r0:r1] = True
    token_ids = np.full(T, -1, dtype=np.int64)
    token_ids[spans["prompt"][0]:] = text_ids
    return FusedSequence(embeddings, spans, loss_mask, token_ids, target_ids, mode)


def check_spans(fused: FusedSequence) -> None:
    """Raise :class:`ContractError` unless the spans tile the sequence in
    order and the loss mask covers exactly the response."""
    pos = 0
    for name in SPAN_ORDER:
        lo, hi = fused.spans[name]
        if lo != pos or hi < lo:
            raise ContractError(f"span {name} {(lo, hi)} does not continue at {pos}")
        pos = hi
    if pos != fused.length:
        raise ContractError(f"spans cover {pos} of {fused.length} positions")
    r0, r1 = fused.spans["response"]
    if not (fused.loss_mask.sum() == r1 - r0 == len(fused.target_ids) and fused.loss_mask[r0:r1].all()):
        raise ContractError("loss mask does not cover exactly the response span")


def collate(batch: list[FusedSequence]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Right-pad fused sequences into [B, T_max, d] with shifted targets/masks.

    Padding sits after every real position, so causal attention keeps it from
    influencing real positions; it is excluded from the loss.
    """
    emb = ag.pad_stack([f.embeddings for f in batch])
    T = emb.shape[1]
    targets = np.zeros((len(batch), T), dtype=np.int64)
    mask = np.zeros((len(batch), T), dtype=bool)
    for i, f in enumerate(batch):
        t, m = f.shifted_targets()
        targets[i, : f.length] = t
        mask[i, : f.length] = m
    return emb, targets, mask


def sequence_log_prob(fused: FusedSequence, logits, tau: float = 1.0) -> float:
    """sum_i log p(y_i | X_aud, X_vid, X_text, y_<i) from teacher-forced logits [T, V]."""
    r0, r1 = fused.spans["response"]
    if r1 == r0:
        raise DegenerateInputError("response span is empty")
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if z.ndim == 3:
        z = z[0]
    z = z[r0 - 1: r1 - 1] / tau
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(logp[np.arange(r1 - r0), fused.token_ids[r0:r1]].sum())
