"""Audio-visual speech recognition with a LoRA-adapted decoder-only language model.

Frozen modality encoders feed compression-rate-K projectors whose tokens are
prepended to a text prompt and decoded by a small causal transformer.
"""

from .assembly import Vocabulary, build_prompt, fuse
from .autograd import Tensor, no_grad
from .data import ToyCorpusSpec, generate_corpus, mix_noise_at_snr
from .decoding import DecodeConfig, beam_search, greedy_decode
from .lora import LoraConfig, count_lora_params
from .metrics import corpus_wer, wer
from .model import AVSRModel, ModelConfig
from .projector import ProjectorConfig, token_budget
from .train import AugmentConfig, PretrainConfig, TrainConfig, cosine_lr, pretrain_llm, train

__all__ = [
    "AVSRModel", "AugmentConfig", "DecodeConfig", "LoraConfig", "ModelConfig", "PretrainConfig",
    "ProjectorConfig", "Tensor", "ToyCorpusSpec", "TrainConfig", "Vocabulary", "beam_search", "build_prompt",
    "corpus_wer", "cosine_lr", "count_lora_params", "fuse", "generate_corpus", "greedy_decode",
    "mix_noise_at_snr", "no_grad", "pretrain_llm", "token_budget", "train", "wer",
]
