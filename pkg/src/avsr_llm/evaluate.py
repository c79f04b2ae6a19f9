"""Test-set decoding, WER tables over SNR and compression-rate grids."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

from . import autograd as ag
from .data import SNR_LEVELS_DB, Utterance
from .decoding import DecodeConfig
from .metrics import corpus_wer
from .model import AVSRModel
from .train import eval_noise_rng, prepare_features


@dataclass
class EvalRecord:
    """One evaluation cell; ``tokens`` counts modality tokens fed to the decoder."""

    task: str
    K_a: int | None
    K_v: int | None
    snr_db: float
    wer: float
    tokens: int
    seed: int
    audio_frames: int = 0
    audio_tokens: int = 0
    video_frames: int = 0
    video_tokens: int = 0
    n_utterances: int = 0
    method: str = "beam"
    hypotheses: list[list[str]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("hypotheses")
        d["wer"] = round(d["wer"], 2)
        d["snr_db"] = None if math.isinf(self.snr_db) else self.snr_db
        return json.dumps(d, sort_keys=True)


def evaluate(model: AVSRModel, utts: list[Utterance], snr_db: float = math.inf,
             decode_cfg: DecodeConfig | None = None, method: str = "beam", seed: int = 0,
             limit: int | None = None) -> EvalRecord:
    """Decode ``utts`` with babble at ``snr_db`` (never masked) and score corpus WER."""
    decode_cfg = decode_cfg or DecodeConfig()
    cfg = model.cfg
    refs, hyps = [], []
    counts = {"audio_frames": 0, "audio_tokens": 0, "video_frames": 0, "video_tokens": 0}
    n = len(utts) if limit is None else min(limit, len(utts))
    for i in range(n):
        audio, video = prepare_features(utts, i, snr_db, eval_noise_rng(seed, i, snr_db))
        audio = audio if cfg.uses_audio else None
        video = video if cfg.uses_video else None
        with ag.no_grad():
            fused = model.fuse_batch([audio] if audio is not None else None,
                                     [video] if video is not None else None, None, "infer")[0]
        for m, x in (("audio", audio), ("video", video)):
            if x is not None:
                counts[f"{m}_frames"] += len(x)
                a, b = fused.spans[m]
                counts[f"{m}_tokens"] += b - a
        hyp = model.decode_fused(fused, decode_cfg, method)
        refs.append(utts[i].text())
        hyps.append(model.hyp_words(hyp))
    return EvalRecord(cfg.task, cfg.K_audio if cfg.uses_audio else None, cfg.K_video if cfg.uses_video else None,
                      snr_db, corpus_wer(refs, hyps), counts["audio_tokens"] + counts["video_tokens"], seed,
                      n_utterances=n, method=method, hypotheses=hyps, **counts)


def noise_sweep(models: dict[str, AVSRModel], utts: list[Utterance], snr_levels=SNR_LEVELS_DB,
                decode_cfg: DecodeConfig | None = None, method: str = "beam", seed: int = 0,
                limit: int | None = None, log: Callable[[str], None] | None = None) -> list[EvalRecord]:
    """WER of every model at every SNR; each (utterance, SNR) sees the same babble for all models."""
    records = []
    for label, model in models.items():
        for snr in snr_levels:
            rec = evaluate(model, utts, float(snr), decode_cfg, method, seed, limit)
            records.append(rec)
            if log:
                log(f"{label:>6s}  snr {format_snr(snr):>4s}  WER {rec.wer:6.2f}")
    return records


def compression_sweep(task: str, K_values, build_and_train: Callable[[int], AVSRModel],
                      utts: list[Utterance], decode_cfg: DecodeConfig | None = None, method: str = "beam",
                      seed: int = 0, limit: int | None = None,
                      log: Callable[[str], None] | None = None) -> list[EvalRecord]:
    """Train one model per K (via ``build_and_train``) and evaluate it clean."""
    records = []
    for K in K_values:
        if not 1 <= K <= 8:
            raise ValueError(f"K must be in [1, 8], got {K}")
        model = build_and_train(K)
        rec = evaluate(model, utts, math.inf, decode_cfg, method, seed, limit)
        records.append(rec)
        if log:
            log(f"{task}  K={K}  tokens {rec.tokens}  WER {rec.wer:.2f}")
    return records


def format_snr(snr: float | None) -> str:
    if snr is None or math.isinf(snr):
        return "inf"
    return f"{snr:g}"


def _fmt_k(K: int | None) -> str:
    return "-" if K is None else str(K)


def noise_table(records: list[EvalRecord]) -> str:
    """Rows (task, K_a, K_v); columns SNR levels; cells WER to 2 decimals."""
    snrs = sorted({r.snr_db for r in records}, key=lambda s: (math.isinf(s), s))
    rows: dict[tuple, dict[float, list[float]]] = {}
    for r in records:
        rows.setdefault((r.task, r.K_a, r.K_v), {}).setdefault(r.snr_db, []).append(r.wer)
    header = f"{'Task':<6}{'K_a':>4}{'K_v':>4} | " + " ".join(f"{format_snr(s) + ' dB':>9}" for s in snrs)
    lines = [header, "-" * len(header)]
    for (task, ka, kv), cells in rows.items():
        vals = []
        for s in snrs:
            v = cells.get(s)
            vals.append(f"{sum(v) / len(v):9.2f}" if v else f"{'':>9}")
        lines.append(f"{task:<6}{_fmt_k(ka):>4}{_fmt_k(kv):>4} | " + " ".join(vals))
    return "\n".join(lines)


def compression_table(records: list[EvalRecord]) -> str:
    lines = [f"{'Task':<6}{'K_a':>4}{'K_v':>4} {'frames':>8} {'tokens':>8} {'WER':>7}", "-" * 42]
    for r in records:
        frames = r.audio_frames + r.video_frames
        lines.append(f"{r.task:<6}{_fmt_k(r.K_a):>4}{_fmt_k(r.K_v):>4} {frames:8d} {r.tokens:8d} {r.wer:7.2f}")
    return "\n".join(lines)


def write_records(path, records: list[EvalRecord]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
