"""Desk-scale LoRA adapter generation by conditional recurrent diffusion."""

from .config import ExperimentConfig
from .lora import LoraAdapter, LoraFactor, merge_adapter
from .tokenizer import detokenize, tokenize

__all__ = ["ExperimentConfig", "LoraAdapter", "LoraFactor", "merge_adapter", "tokenize", "detokenize"]
__version__ = "0.1.0"
