"""Model configuration and the byte-level toy vocabulary."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

# 256 byte ids followed by four specials.
BOS_ID = 256
EOS_ID = 257
MASK_ID = 258
PAD_ID = 259
BYTE_VOCAB_SIZE = 260


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


class CapacityError(ValueError):
    """Raised when a request does not fit into ``max_seq_len`` positions."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = BYTE_VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: float = 4.0
    max_seq_len: int = 256
    block_len: int = 4
    mask_token_id: int = MASK_ID
    bos_token_id: int = BOS_ID
    eos_token_id: int = EOS_ID
    pad_token_id: int = PAD_ID
    rope_theta: float = 10000.0
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        specials = (self.mask_token_id, self.bos_token_id, self.eos_token_id)
        if len(set(specials)) != len(specials):
            raise ConfigError("mask_token_id, bos_token_id, eos_token_id must be distinct")
        if any(t < 0 or t >= self.vocab_size for t in specials):
            raise ConfigError("special token ids must be < vocab_size")
        if self.block_len < 1:
            raise ConfigError("block_len >= 1")
        if self.max_seq_len < 2 * self.block_len:
            raise ConfigError("max_seq_len >= 2*block_len")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError("d_model divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary embedding")
        if self.n_layers < 1 or self.ffn_mult <= 0:
            raise ConfigError("n_layers >= 1 and ffn_mult > 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
