"""A small mask-programmable transformer.

Every forward takes an explicit :class:`AttentionSpec` (dense boolean
allowed-key matrix plus absolute position per query and key). There is no
implicit causal default: AR mode, diffusion mode and the hybrid decode layout
are all just different specs fed to the same weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CapacityError, ModelConfig

CACHE_FIRST = "cache_first"
SELF_FIRST = "self_first"


class SpecError(ValueError):
    """Raised for malformed attention specs (shape, empty rows, positions)."""


class CacheConsistencyError(ValueError):
    """Raised when KV rows or specs disagree with the cache contents."""


@dataclass(frozen=True)
class AttentionSpec:
    """Allowed-key matrix and absolute positions for one forward.

    ``allowed[i, j]`` is True when query ``i`` may attend key ``j``. Keys are
    the cached keys plus the keys of the forwarded tokens; ``key_layout`` says
    which group comes first in the column order (``cache_first`` or
    ``self_first``). ``positions_k`` follows the same column order.
    """

    allowed: torch.Tensor
    positions_q: torch.Tensor
    positions_k: torch.Tensor
    key_layout: str = CACHE_FIRST

    @property
    def n_query(self) -> int:
        return self.allowed.shape[0]

    @property
    def n_key(self) -> int:
        return self.allowed.shape[1]

    @property
    def cache_len(self) -> int:
        return self.n_key - self.n_query

    def cache_columns(self) -> slice:
        if self.key_layout == SELF_FIRST:
            return slice(self.n_query, self.n_key)
        return slice(0, self.cache_len)

    def self_columns(self) -> slice:
        if self.key_layout == SELF_FIRST:
            return slice(0, self.n_query)
        return slice(self.cache_len, self.n_key)

    def validate(self) -> None:
        a = self.allowed
        if a.dtype != torch.bool or a.dim() != 2:
            raise SpecError("allowed must be a 2-D bool tensor")
        if self.key_layout not in (CACHE_FIRST, SELF_FIRST):
            raise SpecError(f"unknown key_layout {self.key_layout!r}")
        if self.positions_q.shape != (self.n_query,) or self.positions_k.shape != (self.n_key,):
            raise SpecError("positions do not match allowed shape")
        if self.n_key < self.n_query:
            raise SpecError("n_key must be >= n_query")
        if not bool(a.any(dim=1).all()):
            row = int((~a.any(dim=1)).nonzero()[0])
            raise SpecError(f"query row {row} attends no key")
        if not torch.equal(self.positions_k[self.self_columns()], self.positions_q):
            raise SpecError("self-key positions must equal query positions")

    @classmethod
    def causal(cls, n: int, start_pos: int = 1) -> "AttentionSpec":
        """Plain causal spec over ``n`` tokens at positions ``start_pos..``."""
        pos = torch.arange(start_pos, start_pos + n)
        allowed = torch.ones(n, n, dtype=torch.bool).tril()
        return cls(allowed, pos, pos.clone())

    @classmethod
    def causal_with_cache(cls, n_new: int, cache_len: int) -> "AttentionSpec":
        """Causal continuation of ``n_new`` tokens after ``cache_len`` cached ones."""
        pos_q = torch.arange(cache_len + 1, cache_len + n_new + 1)
        allowed = torch.ones(n_new, cache_len + n_new, dtype=torch.bool)
        allowed[:, cache_len:] = torch.ones(n_new, n_new, dtype=torch.bool).tril()
        pos_k = torch.arange(1, cache_len + n_new + 1)
        return cls(allowed, pos_q, pos_k)


@dataclass
class KVRows:
    """Keys/values produced by one forward, one row per forwarded token.

    ``keys``/``values`` have shape ``[n_layers, batch, n_heads, n_query, d_head]``.
    """

    keys: torch.Tensor
    values: torch.Tensor
    positions: torch.Tensor

    def __len__(self) -> int:
        return self.keys.shape[3]


@dataclass
class LogitsBundle:
    """Logit rows for every forwarded token.

    ``is_mask`` partitions the rows: mask-token rows carry diffusion
    (marginal) predictions, all other rows carry AR next-token predictions.
    """

    logits: torch.Tensor
    is_mask: torch.Tensor

    def __len__(self) -> int:
        return self.logits.shape[-2]

    @property
    def ar_rows(self) -> torch.Tensor:
        return self.logits[..., ~self.is_mask, :]

    @property
    def diff_rows(self) -> torch.Tensor:
        return self.logits[..., self.is_mask, :]


class KVCache:
    """Per-layer append-only key/value store with suffix eviction.

    Storage is preallocated to ``max_seq_len``; entry ``i`` holds the token
    at absolute position ``i + 1``. Eviction only moves the logical length,
    so retained entries are never rewritten.
    """

    def __init__(self, config: ModelConfig):
        shape = (config.n_layers, config.n_heads, config.max_seq_len, config.d_head)
        self.keys = torch.zeros(shape)
        self.values = torch.zeros(shape)
        self.cache_len = 0
        self.max_len = config.max_seq_len
        self.rows_appended = 0
        self.rows_evicted = 0

    def __len__(self) -> int:
        return self.cache_len

    def layer(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.cache_len
        return self.keys[i, :, :n], self.values[i, :, :n]

    def append(self, rows: KVRows, count_to_keep: int) -> "KVCache":
        if count_to_keep < 0 or count_to_keep > len(rows):
            raise CacheConsistencyError(
                f"count_to_keep={count_to_keep} outside [0, {len(rows)}]"
            )
        if rows.keys.shape[1] != 1:
            raise CacheConsistencyError("KV cache holds a single sequence")
        if count_to_keep == 0:
            return self
        pos = rows.positions[:count_to_keep]
        expected = torch.arange(self.cache_len + 1, self.cache_len + count_to_keep + 1)
        if not torch.equal(pos, expected):
            raise CacheConsistencyError(
                f"rows at positions {pos.tolist()} do not continue cache_len={self.cache_len}"
            )
        end = self.cache_len + count_to_keep
        if end > self.max_len:
            raise CapacityError(f"cache would grow to {end} > max_seq_len={self.max_len}")
        self.keys[:, :, self.cache_len:end] = rows.keys[:, 0, :, :count_to_keep]
        self.values[:, :, self.cache_len:end] = rows.values[:, 0, :, :count_to_keep]
        self.cache_len = end
        self.rows_appended += count_to_keep
        return self

    def evict_to(self, new_len: int) -> "KVCache":
        if new_len < 0 or new_len > self.cache_len:
            raise IndexError(f"evict_to({new_len}) outside [0, {self.cache_len}]")
        self.rows_evicted += self.cache_len - new_len
        self.cache_len = new_len
        return self

    def snapshot(self) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.cache_len
        return self.keys[:, :, :n].clone(), self.values[:, :, :n].clone()


def cache_append(cache: KVCache, kv_rows: KVRows, count_to_keep: int) -> KVCache:
    return cache.append(kv_rows, count_to_keep)


def cache_evict_to(cache: KVCache, new_len: int) -> KVCache:
    return cache.evict_to(new_len)


def apply_rotary(x: torch.Tensor, positions: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotate channel pairs of ``x[..., n, d]`` by angles derived from ``positions[n]``."""
    d = x.shape[-1]
    freqs = 1.0 / (theta ** (torch.arange(0, d, 2, dtype=torch.float32) / d))
    angles = positions.to(torch.float32)[:, None] * freqs[None, :]
    cos, sin = angles.cos(), angles.sin()
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return out.flatten(-2)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.d_head = config.d_head
        self.theta = config.rope_theta
        hidden = int(config.d_model * config.ffn_mult)
        self.ln1 = nn.LayerNorm(config.d_model)
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, hidden), nn.GELU(), nn.Linear(hidden, config.d_model)
        )

    def forward(self, x, spec: AttentionSpec, past: Optional[tuple[torch.Tensor, torch.Tensor]]):
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        q = apply_rotary(q, spec.positions_q, self.theta)
        k = apply_rotary(k, spec.positions_q, self.theta)
        new_k, new_v = k, v
        if past is not None and past[0].shape[-2] > 0:
            pk = past[0].unsqueeze(0).expand(b, -1, -1, -1)
            pv = past[1].unsqueeze(0).expand(b, -1, -1, -1)
            if spec.key_layout == SELF_FIRST:
                k, v = torch.cat((k, pk), dim=2), torch.cat((v, pv), dim=2)
            else:
                k, v = torch.cat((pk, k), dim=2), torch.cat((pv, v), dim=2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~spec.allowed, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        x = x + self.proj(att.transpose(1, 2).reshape(b, n, d))
        x = x + self.mlp(self.ln2(x))
        return x, new_k, new_v


class Backbone(nn.Module):
    """Transformer whose attention pattern and positions are fully explicit."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.rng_seed)
            self.embed = nn.Embedding(config.vocab_size, config.d_model)
            self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
            self.ln_f = nn.LayerNorm(config.d_model)
            self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
            nn.init.normal_(self.embed.weight, std=0.02)
            for blk in self.blocks:
                for lin in (blk.qkv, blk.proj, blk.mlp[0], blk.mlp[2]):
                    nn.init.normal_(lin.weight, std=0.02)
                    nn.init.zeros_(lin.bias)
            nn.init.normal_(self.head.weight, std=0.02)

    def _check(self, tokens: torch.Tensor, spec: AttentionSpec, cache: Optional[KVCache]) -> None:
        spec.validate()
        if tokens.shape[-1] != spec.n_query:
            raise SpecError(f"{tokens.shape[-1]} tokens but spec has {spec.n_query} query rows")
        top = int(max(spec.positions_q.max(), spec.positions_k.max()))
        low = int(min(spec.positions_q.min(), spec.positions_k.min()))
        if top > self.config.max_seq_len:
            raise CapacityError(f"position {top} > max_seq_len={self.config.max_seq_len}")
        if low < 1:
            raise SpecError("positions are 1-based")
        cache_len = 0 if cache is None else cache.cache_len
        if spec.cache_len != cache_len:
            raise CacheConsistencyError(
                f"spec expects {spec.cache_len} cached keys, cache holds {cache_len}"
            )
        if cache_len and not torch.equal(
            spec.positions_k[spec.cache_columns()], torch.arange(1, cache_len + 1)
        ):
            raise CacheConsistencyError("cache key positions must be 1..cache_len")
        if cache is not None and tokens.dim() == 2 and tokens.shape[0] != 1:
            raise CacheConsistencyError("cached forwards are single-sequence")

    def forward(
        self, tokens: torch.Tensor, spec: AttentionSpec, cache: Optional[KVCache] = None
    ) -> tuple[LogitsBundle, KVRows]:
        self._check(tokens, spec, cache)
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        x = self.embed(tokens)
        ks, vs = [], []
        for i, blk in enumerate(self.blocks):
            past = cache.layer(i) if cache is not None else None
            x, k, v = blk(x, spec, past)
            ks.append(k)
            vs.append(v)
        logits = self.head(self.ln_f(x))
        is_mask = tokens[0] == self.config.mask_token_id
        if squeeze:
            logits = logits[0]
        rows = KVRows(torch.stack(ks), torch.stack(vs), spec.positions_q.clone())
        return LogitsBundle(logits, is_mask), rows


def init_backbone(config: ModelConfig) -> Backbone:
    return Backbone(config)


def forward(
    backbone: Backbone,
    tokens: torch.Tensor,
    spec: AttentionSpec,
    cache: Optional[KVCache] = None,
) -> tuple[LogitsBundle, KVRows]:
    return backbone(tokens, spec, cache)
