"""Run configuration: a nested key/value tree loaded from YAML with dotted overrides.

Every field is listed in ``RunConfig.defaults()``; ``docs/config.md`` in the
repository describes each one.  Unknown keys are rejected so typos surface as
configuration errors rather than silently ignored settings.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .assembly import TASKS, Vocabulary
from .data import SNR_LEVELS_DB, ToyCorpusSpec
from .decoding import DecodeConfig
from .lora import LoraConfig
from .model import ModelConfig
from .nn import AUDIO_FPS, VIDEO_FPS, ConfigError, EncoderConfig, TransformerConfig
from .train import DEFAULT_LR, AugmentConfig, PretrainConfig, TrainConfig

OUTPUT_ROOT_ENV = "AVSR_LLM_HOME"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _snr_out(v: float) -> float | str:
    return "inf" if math.isinf(v) else v


def _snr_in(v) -> float:
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "clean", "∞"):
        return math.inf
    return float(v)


DEFAULTS: dict = {
    "task": "ASR",
    "seed": 0,
    "output_dir": None,
    "corpus": {"path": None, "spec": ToyCorpusSpec().to_dict()},
    "model": {
        "K_audio": 2,
        "K_video": 1,
        "projector_hidden": None,
        "separator": False,
        "backbone_seed": 0,
        "llm": {**TransformerConfig().to_dict(), "vocab_size": None},  # None -> tokenizer size
        "audio_encoder": EncoderConfig(frame_rate=AUDIO_FPS).to_dict(),
        "video_encoder": EncoderConfig(frame_rate=VIDEO_FPS).to_dict(),
        "lora": {"rank": 16, "alpha": None, "targets": ["q", "v"], "init_std": 0.02},
        "video_encoder_lora": None,
    },
    "pretrain": vars(PretrainConfig()).copy(),
    "train": {**vars(TrainConfig()), "lr_peak": None, "betas": [0.9, 0.999]},
    "augment": {"babble": False, "snr_levels_db": [_snr_out(s) for s in SNR_LEVELS_DB], "n_talkers": 5,
                "time_mask_rho": 0.1},
    "decode": {**vars(DecodeConfig()), "method": "beam"},
    "eval": {"snr_db": "inf", "limit": None},
    "sweep": {"kind": "compression", "tasks": ["ASR"], "K_values": [1, 2, 3, 4, 5],
              "snr_levels_db": [_snr_out(s) for s in SNR_LEVELS_DB], "seeds": [0]},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with the value parsed as YAML (so ``[1, 2]``, ``null``, ``1e-3`` work)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def _set(tree: dict, keys: list[str], value) -> None:
    node = tree
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
    node[keys[-1]] = value


@dataclass
class RunConfig:
    tree: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides: list[str] = ()) -> "RunConfig":
        tree = copy.deepcopy(DEFAULTS)
        if path is not None:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            tree = _merge(tree, doc)
        cfg = cls(tree)
        for item in overrides:
            cfg.set(item)
        cfg.validate()
        return cfg

    def set(self, item: str) -> None:
        keys, value = parse_override(item)
        _set(self.tree, keys, value)

    def __getitem__(self, key: str):
        return self.tree[key]

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dump())

    # -- typed views -------------------------------------------------------------
    @property
    def task(self) -> str:
        return self.tree["task"]

    def corpus_spec(self) -> ToyCorpusSpec:
        return ToyCorpusSpec(**self.tree["corpus"]["spec"])

    def model_config(self, task: str | None = None, K_audio: int | None = None,
                     K_video: int | None = None) -> ModelConfig:
        m = self.tree["model"]
        vlora = m["video_encoder_lora"]
        task = task or self.task
        return ModelConfig(
            task=task,
            llm=TransformerConfig(**self._llm_fields()),
            audio_encoder=EncoderConfig(**m["audio_encoder"]),
            video_encoder=EncoderConfig(**m["video_encoder"]),
            K_audio=K_audio if K_audio is not None else m["K_audio"],
            K_video=K_video if K_video is not None else m["K_video"],
            projector_hidden=m["projector_hidden"],
            lora=LoraConfig(**m["lora"]),
            video_encoder_lora=LoraConfig(**vlora) if vlora and task == "VSR" else None,
            separator=m["separator"],
            backbone_seed=m["backbone_seed"],
        )

    def _llm_fields(self) -> dict:
        fields = dict(self.tree["model"]["llm"])
        if fields["vocab_size"] is None:
            fields["vocab_size"] = len(Vocabulary(self.tree["corpus"]["spec"]["vocab_size"]))
        return fields

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.tree["pretrain"])

    def train_config(self, task: str | None = None, seed: int | None = None) -> TrainConfig:
        t = dict(self.tree["train"])
        task = task or self.task
        if t["lr_peak"] is None:
            t["lr_peak"] = DEFAULT_LR[task]
        t["seed"] = self.tree["seed"] if seed is None else seed
        return TrainConfig(**t)

    def augment_config(self) -> AugmentConfig:
        a = dict(self.tree["augment"])
        a["snr_levels_db"] = tuple(_snr_in(s) for s in a["snr_levels_db"])
        return AugmentConfig(**a)

    def decode_config(self) -> tuple[DecodeConfig, str]:
        d = dict(self.tree["decode"])
        method = d.pop("method")
        if method not in ("beam", "greedy"):
            raise ConfigError(f"decode.method must be beam or greedy, got {method!r}")
        return DecodeConfig(**d), method

    def eval_snr(self) -> float:
        return _snr_in(self.tree["eval"]["snr_db"])

    def sweep_snrs(self) -> list[float]:
        return [_snr_in(s) for s in self.tree["sweep"]["snr_levels_db"]]

    def validate(self) -> None:
        """Build every typed view so bad values fail before any work starts."""
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        try:
            self.corpus_spec().validate()
            self.model_config()
            self.pretrain_config()
            self.train_config()
            self.augment_config()
            self.decode_config()
            self.eval_snr()
            self.sweep_snrs()
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        sweep = self.tree["sweep"]
        if sweep["kind"] not in ("compression", "noise"):
            raise ConfigError(f"sweep.kind must be compression or noise, got {sweep['kind']!r}")
        for t in sweep["tasks"]:
            if t not in TASKS:
                raise ConfigError(f"unknown sweep task {t!r}")
