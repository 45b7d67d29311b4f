"""Self-speculative decoding with one-step diffusion drafts and AR verification."""

from .backbone import AttentionSpec, Backbone, KVCache, init_backbone
from .config import ModelConfig
from .engine import Strategy, VerifierConfig, ar_generate, blockdiff_generate, generate

__all__ = [
    "AttentionSpec",
    "Backbone",
    "KVCache",
    "ModelConfig",
    "Strategy",
    "VerifierConfig",
    "ar_generate",
    "blockdiff_generate",
    "generate",
    "init_backbone",
]
__version__ = "0.1.0"
