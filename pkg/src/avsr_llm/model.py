"""The multimodal recogniser: frozen encoders -> projectors -> LoRA-adapted LLM."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .assembly import (TASK_MODALITIES, FusedSequence, PromptTemplate, Vocabulary, build_prompt,
                       collate, fuse)
from .autograd import ParameterError, Tensor
from .decoding import DecodeConfig, Hypothesis, Session, decode
from .lora import LoraAdapter, LoraConfig, attach
from .nn import AUDIO_FPS, VIDEO_FPS, ConfigError, Decoder, EncoderConfig, FrozenEncoder, TransformerConfig
from .params import ParamStore
from .projector import Projector, ProjectorConfig, compressed_length

# preset compression rates (audio, video)
PRESETS = {
    "ASR": (3, None),
    "VSR": (None, 3),
    "AVSR": (4, 2),
    "ASR-low-resource": (2, None),
    "VSR-low-resource": (None, 2),
}

_TARGET_WEIGHTS = {"q": "attn.q", "k": "attn.k", "v": "attn.v", "o": "attn.o",
                   "ffn_in": "ffn.w_in", "ffn_out": "ffn.w_out"}


@dataclass
class ModelConfig:
    task: str = "ASR"
    llm: TransformerConfig = field(default_factory=TransformerConfig)
    audio_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(frame_rate=AUDIO_FPS))
    video_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(frame_rate=VIDEO_FPS))
    K_audio: int = 2
    K_video: int = 1
    projector_hidden: int | None = None
    lora: LoraConfig = field(default_factory=LoraConfig)
    video_encoder_lora: LoraConfig | None = None
    separator: bool = False
    backbone_seed: int = 0  # seeds the frozen encoders / LLM shared across runs

    def __post_init__(self) -> None:
        if self.task not in TASK_MODALITIES:
            raise ParameterError(f"unknown task {self.task!r}")
        if self.video_encoder_lora is not None and self.task != "VSR":
            raise ConfigError("video-encoder LoRA is only used for the VSR task")

    @property
    def uses_audio(self) -> bool:
        return TASK_MODALITIES[self.task][0]

    @property
    def uses_video(self) -> bool:
        return TASK_MODALITIES[self.task][1]

    def projector_config(self, modality: str) -> ProjectorConfig:
        enc = self.audio_encoder if modality == "audio" else self.video_encoder
        K = self.K_audio if modality == "audio" else self.K_video
        return ProjectorConfig(K, enc.d_enc, self.projector_hidden, self.llm.d_model)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["llm"] = TransformerConfig(**d["llm"])
        d["audio_encoder"] = EncoderConfig(**d["audio_encoder"])
        d["video_encoder"] = EncoderConfig(**d["video_encoder"])
        d["lora"] = LoraConfig(**{**d["lora"], "targets": tuple(d["lora"]["targets"])})
        if d.get("video_encoder_lora"):
            v = d["video_encoder_lora"]
            d["video_encoder_lora"] = LoraConfig(**{**v, "targets": tuple(v["targets"])})
        return cls(**d)


def lora_target_names(block_prefixes: list[str], targets) -> list[str]:
    unknown = [t for t in targets if t not in _TARGET_WEIGHTS]
    if unknown:
        raise ParameterError(f"unknown LoRA targets {unknown}; choose from {sorted(_TARGET_WEIGHTS)}")
    return [f"{b}.{_TARGET_WEIGHTS[t]}" for b in block_prefixes for t in targets]


class AVSRModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0,
                 llm_state: dict[str, np.ndarray] | None = None):
        if cfg.llm.vocab_size != len(vocab):
            raise ConfigError(f"LLM vocab_size {cfg.llm.vocab_size} != tokenizer size {len(vocab)}")
        self.cfg, self.vocab = cfg, vocab
        self.store = ParamStore()
        backbone = np.random.default_rng([cfg.backbone_seed, 101])
        trainable_rng = np.random.default_rng([seed, 202])

        self.llm = Decoder(cfg.llm, self.store, backbone, prefix="llm", locked=True)
        if llm_state is not None:
            self.store.load_state_dict({k: v for k, v in llm_state.items() if k.startswith("llm.")}, strict=False)
        self.encoders: dict[str, FrozenEncoder] = {}
        self.projectors: dict[str, Projector] = {}
        enc_rng = np.random.default_rng([cfg.backbone_seed, 303])
        for modality, ecfg in (("audio", cfg.audio_encoder), ("video", cfg.video_encoder)):
            # both encoders are always built so the backbone is identical across tasks
            self.encoders[modality] = FrozenEncoder(ecfg, self.store, enc_rng, prefix=f"{modality}_enc")
        for modality in ("audio", "video"):
            if getattr(cfg, f"uses_{modality}"):
                self.projectors[modality] = Projector(cfg.projector_config(modality), self.store,
                                                      trainable_rng, prefix=f"proj.{modality}")

        self.adapters: dict[str, LoraAdapter] = {}
        for name in lora_target_names(self.llm.block_names(), cfg.lora.targets):
            self.adapters[name] = attach(self.store, name, cfg.lora, trainable_rng)
        self.encoder_adapters: dict[str, LoraAdapter] = {}
        if cfg.video_encoder_lora is not None:
            for name in lora_target_names(self.encoders["video"].block_names(), cfg.video_encoder_lora.targets):
                self.encoder_adapters[name] = attach(self.store, name, cfg.video_encoder_lora, trainable_rng)
        self.prompt: PromptTemplate = build_prompt(cfg.task, vocab)

    # -- bookkeeping ---------------------------------------------------------
    def expected_trainable(self) -> dict[str, int]:
        """Analytic trainable-parameter breakdown (projector formula + LoRA counts)."""
        out = {}
        for m in self.projectors:
            out[f"projector.{m}"] = self.cfg.projector_config(m).num_params()
        out["lora.llm"] = sum(self.cfg.lora.rank * sum(self.store[a.target].shape) for a in self.adapters.values())
        if self.encoder_adapters:
            r = self.cfg.video_encoder_lora.rank
            out["lora.video_enc"] = sum(r * sum(self.store[a.target].shape) for a in self.encoder_adapters.values())
        return out

    def audit_trainable(self) -> list[str]:
        """Names of trainable parameters that are neither projector nor LoRA."""
        return [n for n in self.store.trainable() if not (n.startswith("proj.") or n.startswith("lora."))]

    # -- forward ---------------------------------------------------------------
    def modality_tokens(self, frames: list[np.ndarray], modality: str) -> list[Tensor]:
        """Encode, stack and project a batch of raw feature sequences."""
        enc = self.encoders[modality]
        lengths = np.array([f.shape[0] for f in frames])
        X = np.zeros((len(frames), lengths.max(), enc.cfg.d_in), dtype=ag.get_default_dtype())
        for i, f in enumerate(frames):
            X[i, : len(f)] = f
        adapters = self.encoder_adapters if modality == "video" else None
        ctx = contextlib.nullcontext() if adapters else ag.no_grad()
        with ctx:
            feats = enc.forward(Tensor(X), lengths, adapters).features
        if not adapters:
            feats = Tensor(feats.data)
        tokens = self.projectors[modality](feats)
        K = self.projectors[modality].cfg.K
        return [ag.getitem(tokens, (i, slice(0, compressed_length(int(n), K)))) for i, n in enumerate(lengths)]

    def fuse_batch(self, audio: list[np.ndarray] | None, video: list[np.ndarray] | None,
                   targets: list[list[int]] | None, mode: str) -> list[FusedSequence]:
        n = len(audio if audio is not None else video)
        a_tok = self.modality_tokens(audio, "audio") if self.cfg.uses_audio else [None] * n
        v_tok = self.modality_tokens(video, "video") if self.cfg.uses_video else [None] * n
        sep = self.vocab.sep_id if self.cfg.separator else None
        return [fuse(a_tok[i], v_tok[i], self.prompt, targets[i] if targets else [], mode,
                     self.llm.embed, separator_id=sep) for i in range(n)]

    def response_ids(self, words) -> list[int]:
        return [self.vocab.word_id(w) for w in words] + [self.vocab.eos_id]

    def logits(self, fused: list[FusedSequence]) -> tuple[Tensor, np.ndarray, np.ndarray]:
        emb, targets, mask = collate(fused)
        return self.llm.forward(emb, self.adapters), targets, mask

    def loss(self, audio, video, words_list) -> Tensor:
        fused = self.fuse_batch(audio, video, [self.response_ids(w) for w in words_list], "train")
        logits, targets, mask = self.logits(fused)
        return ag.masked_cross_entropy(logits, targets, mask)

    # -- inference -----------------------------------------------------------------
    def session(self) -> Session:
        return Session(self.llm, self.adapters, self.vocab.eos_id)

    def transcribe(self, audio: np.ndarray | None, video: np.ndarray | None, cfg: DecodeConfig,
                   method: str = "beam") -> Hypothesis:
        with ag.no_grad():
            fused = self.fuse_batch([audio] if audio is not None else None,
                                    [video] if video is not None else None, None, "infer")[0]
        return self.decode_fused(fused, cfg, method)

    def decode_fused(self, fused: FusedSequence, cfg: DecodeConfig, method: str = "beam") -> Hypothesis:
        return decode(self.session(), fused.embeddings, cfg, method)

    def hyp_words(self, hyp: Hypothesis) -> list[str]:
        return self.vocab.decode(hyp.tokens)
