"""Glue between a :class:`RunConfig` and the model, training and evaluation code."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .assembly import Vocabulary
from .config import RunConfig, output_root
from .data import Utterance, generate_corpus, load_corpus, split_corpus
from .model import AVSRModel
from .params import load_checkpoint, save_checkpoint
from .projector import compressed_length
from .train import TrainResult, pretrain_llm, save_json, train

Log = Callable[[str], None]


def _quiet(_: str) -> None:
    pass


def load_splits(cfg: RunConfig) -> dict[str, list[Utterance]]:
    """Corpus from ``corpus.path`` when set, otherwise generated in memory from ``corpus.spec``."""
    path = cfg["corpus"]["path"]
    if path:
        utts, _ = load_corpus(path)
    else:
        utts = generate_corpus(cfg.corpus_spec())
    return split_corpus(utts)


def vocabulary(cfg: RunConfig) -> Vocabulary:
    return Vocabulary(cfg.corpus_spec().vocab_size)


def backbone_path(cfg: RunConfig, root: Path | None = None) -> Path:
    key = cfg.pretrain_config().key(cfg.model_config().llm, cfg["model"]["backbone_seed"])
    return (root or output_root()) / "backbones" / f"llm-{key}.npz"


def backbone_state(cfg: RunConfig, root: Path | None = None, log: Log = _quiet) -> dict[str, np.ndarray]:
    """Pretrained decoder weights, trained once per (decoder config, pretraining config) and cached."""
    path = backbone_path(cfg, root)
    if path.exists():
        arrays, _ = load_checkpoint(path)
        log(f"loaded pretrained decoder {path}")
        return arrays
    log(f"pretraining decoder -> {path}")
    state = pretrain_llm(cfg.model_config().llm, vocabulary(cfg), cfg.pretrain_config(),
                         cfg["model"]["backbone_seed"], log)
    save_checkpoint(path, state, {"pretrain": cfg["pretrain"], "llm": cfg.model_config().llm.to_dict(),
                                  "backbone_seed": cfg["model"]["backbone_seed"]})
    return state


@dataclass
class RunSpec:
    """The per-run choices a sweep varies on top of the base config."""

    task: str
    K_audio: int
    K_video: int
    seed: int

    def label(self) -> str:
        return f"{self.task}-Ka{self.K_audio}-Kv{self.K_video}-s{self.seed}"

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "RunSpec":
        m = cfg["model"]
        return cls(cfg.task, m["K_audio"], m["K_video"], cfg["seed"])


def build_model(cfg: RunConfig, run: RunSpec, llm_state: dict | None) -> AVSRModel:
    return AVSRModel(cfg.model_config(run.task, run.K_audio, run.K_video), vocabulary(cfg), run.seed, llm_state)


def train_model(cfg: RunConfig, run: RunSpec, train_utts: list[Utterance], llm_state: dict,
                log: Log = _quiet) -> tuple[AVSRModel, TrainResult]:
    model = build_model(cfg, run, llm_state)
    result = train(model, train_utts, cfg.train_config(run.task, run.seed), cfg.augment_config(), log)
    return model, result


def save_model(path, model: AVSRModel, cfg: RunConfig, run: RunSpec) -> None:
    save_checkpoint(path, model.store.state_dict(), {"run": cfg.tree, "spec": vars(run)})


def load_model(path) -> tuple[AVSRModel, RunConfig, RunSpec]:
    arrays, meta = load_checkpoint(path)
    cfg = RunConfig(meta["run"])
    run = RunSpec(**meta["spec"])
    model = build_model(cfg, run, None)
    model.store.load_state_dict(arrays)
    return model, cfg, run


def write_train_outputs(out: Path, model: AVSRModel, result: TrainResult, cfg: RunConfig, run: RunSpec) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "checkpoint.npz", model, cfg, run)
    with open(out / "train_metrics.jsonl", "w") as fh:
        for i, loss in enumerate(result.epoch_losses, start=1):
            fh.write(f'{{"epoch": {i}, "loss": {loss:.6f}}}\n')
    save_json(out / "freeze_audit.json", result.freeze_audit)
    summary = result.to_dict()
    summary.pop("lr_trace")
    summary.pop("freeze_audit")
    save_json(out / "train_summary.json", {**summary, "run": vars(run)})


def token_estimate(cfg: RunConfig, run: RunSpec) -> dict[str, int]:
    """Worst-case and mean modality-token counts per utterance implied by the corpus spec."""
    spec = cfg.corpus_spec()
    mc = cfg.model_config(run.task, run.K_audio, run.K_video)
    mean_words = (spec.min_words + spec.max_words) / 2
    out = {}
    for m, fpw, K in (("audio", spec.audio_frames_per_word, mc.K_audio),
                      ("video", spec.video_frames_per_word, mc.K_video)):
        if getattr(mc, f"uses_{m}"):
            out[f"{m}_tokens_max"] = compressed_length(spec.max_words * fpw, K)
            out[f"{m}_tokens_mean"] = math.ceil(mean_words * fpw / K)
    return out
