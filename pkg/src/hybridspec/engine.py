"""Single-forward draft-and-verify decoding, plus AR and block-diffusion baselines.

Each hybrid decode step forwards ``B`` carried tokens causally (slot 1 is
already committed, slots 2..B are drafts) together with ``B`` mask blocks,
one per possible accepted-prefix length. The verifier argmaxes mixed
AR/diffusion logits, accepts the longest matching draft prefix, keeps KV rows
only for accepted carried tokens, and picks the pre-drafted block that was
conditioned on exactly that prefix.
"""

from __future__ import annotations

import functools
import json
import time
from collections import Counter
from pathlib import Path
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .backbone import AttentionSpec, Backbone, KVCache
from .config import CapacityError, ConfigError
from .maskgen import (
    DecodeTemplate,
    block_rows,
    build_decode_template,
    build_prefill_template,
    slice_decode_spec,
    slice_prefill_spec,
)


@dataclass(frozen=True)
class VerifierConfig:
    beta: float = 1.0
    temperature: float = 0.0
    max_new_tokens: int = 64
    stop_on_eos: bool = True
    block_len: Optional[int] = None  # None: the backbone's block_len

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.temperature < 0:
            raise ConfigError("temperature >= 0")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens >= 1")
        if self.block_len is not None and self.block_len < 1:
            raise ConfigError("block_len >= 1")

    @property
    def mode(self) -> str:
        if self.beta == 1.0:
            return "trust_ar"
        if self.beta == 0.0:
            return "trust_diff"
        return f"mix_{self.beta:g}"


@dataclass
class GenerationStats:
    nfe: int = 0
    committed_tokens: int = 0
    accepted: Counter = field(default_factory=Counter)
    wall_time: float = 0.0
    truncated: bool = False

    @property
    def tokens_per_nfe(self) -> float:
        return self.committed_tokens / self.nfe if self.nfe else 0.0


@dataclass
class StepRecord:
    nfe: int
    cache_len: int
    carried: list[int]
    accepted: int
    correction: int
    evicted: int
    logits: Optional[torch.Tensor] = None

    def as_dict(self) -> dict:
        return {
            "nfe": self.nfe,
            "cache_len": self.cache_len,
            "carried": self.carried,
            "a": self.accepted,
            "correction": self.correction,
            "evictions": self.evicted,
        }


@dataclass
class DecodeState:
    committed: list[int]
    prompt_len: int
    cache: KVCache
    carried: list[int]
    block_len: int
    stats: GenerationStats = field(default_factory=GenerationStats)
    done: bool = False
    trace: list[StepRecord] = field(default_factory=list)
    keep_logits: bool = False

    @property
    def cache_len(self) -> int:
        return self.cache.cache_len

    @property
    def output(self) -> list[int]:
        return self.committed[self.prompt_len :]


def mix_logits(ar_row: torch.Tensor, diff_row: torch.Tensor, beta: float) -> torch.Tensor:
    if ar_row.shape != diff_row.shape:
        raise ValueError("AR and diffusion rows differ in shape")
    if beta == 1.0:
        return ar_row
    if beta == 0.0:
        return diff_row
    return beta * ar_row + (1.0 - beta) * diff_row


def _pick(logits: torch.Tensor, temperature: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Greedy argmax at temperature 0, otherwise a softmax sample (last dim)."""
    if temperature == 0:
        return logits.argmax(dim=-1)
    probs = torch.softmax(logits / temperature, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    return torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])


@functools.lru_cache(maxsize=None)
def decode_template(B: int, max_seq_len: int) -> DecodeTemplate:
    return build_decode_template(B, max_seq_len)


@functools.lru_cache(maxsize=None)
def prefill_template(B: int, max_seq_len: int) -> torch.Tensor:
    return build_prefill_template(max_seq_len, B)


def _block_len(backbone: Backbone, vcfg: VerifierConfig) -> int:
    B = vcfg.block_len or backbone.config.block_len
    if backbone.config.max_seq_len < 2 * B:
        raise ConfigError("max_seq_len >= 2*block_len")
    return B


def _commit(state: DecodeState, tokens: Sequence[int], vcfg: VerifierConfig, eos_id: int) -> int:
    """Append tokens up to the budget and first EOS; returns how many were kept."""
    kept = 0
    for t in tokens:
        if state.stats.committed_tokens >= vcfg.max_new_tokens:
            state.done = True
            break
        state.committed.append(int(t))
        state.stats.committed_tokens += 1
        kept += 1
        if vcfg.stop_on_eos and t == eos_id:
            state.done = True
            break
    if state.stats.committed_tokens >= vcfg.max_new_tokens:
        state.done = True
    return kept


@torch.no_grad()
def prefill(
    prompt: Sequence[int],
    backbone: Backbone,
    vcfg: VerifierConfig = VerifierConfig(),
    generator: Optional[torch.Generator] = None,
    keep_logits: bool = False,
) -> DecodeState:
    """Causal prompt encoding plus one bidirectional draft block, in one forward."""
    cfg = backbone.config
    B = _block_len(backbone, vcfg)
    n = len(prompt)
    if n < 1:
        raise ValueError("prompt must be non-empty")
    if n + 2 * B > cfg.max_seq_len:
        raise CapacityError(f"prompt {n} + 2*{B} exceeds max_seq_len={cfg.max_seq_len}")
    t0 = time.perf_counter()
    tokens = torch.tensor(list(prompt) + [cfg.mask_token_id] * B)
    spec = slice_prefill_spec(prefill_template(B, cfg.max_seq_len), n, B)
    cache = KVCache(cfg)
    bundle, rows = backbone(tokens, spec, cache)
    cache.append(rows, n)
    logits = bundle.logits
    first = _pick(mix_logits(logits[n - 1], logits[n], vcfg.beta), vcfg.temperature, generator)
    drafts = _pick(logits[n + 1 : n + B], vcfg.temperature, generator).tolist()
    state = DecodeState(
        committed=list(prompt),
        prompt_len=n,
        cache=cache,
        carried=[int(first)] + drafts,
        block_len=B,
        keep_logits=keep_logits,
    )
    state.stats.nfe = 1
    _commit(state, [int(first)], vcfg, cfg.eos_token_id)
    state.stats.wall_time += time.perf_counter() - t0
    return state


@torch.no_grad()
def decode_step(
    state: DecodeState,
    backbone: Backbone,
    vcfg: VerifierConfig = VerifierConfig(),
    generator: Optional[torch.Generator] = None,
) -> tuple[DecodeState, int]:
    """Verify the carried drafts and pre-draft the next block; one forward."""
    cfg = backbone.config
    B = state.block_len
    n = state.cache_len
    if n + 2 * B > cfg.max_seq_len:
        state.stats.truncated = True
        state.done = True
        return state, 0
    t0 = time.perf_counter()
    carried = state.carried
    tokens = torch.tensor(carried + [cfg.mask_token_id] * (B * B))
    spec = slice_decode_spec(decode_template(B, cfg.max_seq_len), n)
    bundle, rows = backbone(tokens, spec, state.cache)
    state.cache.append(rows, B)
    logits = bundle.logits

    # c_j: verifier token for position n+j+1, from carried j's AR row and block j's first mask.
    ar = logits[:B]
    first_masks = logits[B :: B]
    verdict = _pick(mix_logits(ar, first_masks, vcfg.beta), vcfg.temperature, generator).tolist()
    a = 1
    while a < B and verdict[a - 1] == carried[a]:
        a += 1
    correction = verdict[a - 1]

    state.cache.evict_to(n + a)
    drafts = _pick(logits[block_rows(B, a)][1:], vcfg.temperature, generator).tolist()
    state.carried = [correction] + drafts
    state.stats.nfe += 1
    state.stats.accepted[a] += 1
    state.trace.append(
        StepRecord(
            nfe=state.stats.nfe,
            cache_len=n,
            carried=list(carried),
            accepted=a,
            correction=correction,
            evicted=B - a,
            logits=logits.clone() if state.keep_logits else None,
        )
    )
    _commit(state, carried[1:a] + [correction], vcfg, cfg.eos_token_id)
    state.stats.wall_time += time.perf_counter() - t0
    return state, a


def write_trace(state: DecodeState, path: str | Path) -> None:
    """One JSON object per decode step."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in state.trace:
            fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")


def generate(
    prompt: Sequence[int],
    backbone: Backbone,
    vcfg: VerifierConfig = VerifierConfig(),
    seed: int = 0,
    keep_logits: bool = False,
) -> tuple[list[int], GenerationStats, DecodeState]:
    """Prefill then decode steps until EOS, budget, or capacity."""
    generator = torch.Generator().manual_seed(seed) if vcfg.temperature > 0 else None
    state = prefill(prompt, backbone, vcfg, generator, keep_logits)
    while not state.done:
        decode_step(state, backbone, vcfg, generator)
    return state.output, state.stats, state


@torch.no_grad()
def ar_generate(
    prompt: Sequence[int],
    backbone: Backbone,
    max_new: int,
    stop_on_eos: bool = True,
) -> tuple[list[int], GenerationStats]:
    """Cache-backed greedy AR decoding, one token per forward."""
    cfg = backbone.config
    n = len(prompt)
    if n < 1:
        raise ValueError("prompt must be non-empty")
    if n > cfg.max_seq_len:
        raise CapacityError(f"prompt {n} exceeds max_seq_len={cfg.max_seq_len}")
    t0 = time.perf_counter()
    stats = GenerationStats()
    cache = KVCache(cfg)
    bundle, rows = backbone(torch.tensor(list(prompt)), AttentionSpec.causal(n), cache)
    cache.append(rows, n)
    stats.nfe = 1
    out: list[int] = []
    nxt = int(bundle.logits[-1].argmax())
    while True:
        out.append(nxt)
        stats.committed_tokens += 1
        if len(out) >= max_new or (stop_on_eos and nxt == cfg.eos_token_id):
            break
        if cache.cache_len + 1 > cfg.max_seq_len:
            stats.truncated = True
            break
        spec = AttentionSpec.causal_with_cache(1, cache.cache_len)
        bundle, rows = backbone(torch.tensor([nxt]), spec, cache)
        cache.append(rows, 1)
        stats.nfe += 1
        nxt = int(bundle.logits[-1].argmax())
    stats.wall_time = time.perf_counter() - t0
    return out, stats


# -- block-diffusion baseline ------------------------------------------------

CONFMAX = "confmax"
L2R = "l2r"
THRESHOLD = "threshold"


@dataclass(frozen=True)
class Strategy:
    """How many masked positions a block-diffusion forward finalizes.

    ``confmax``: the ``k`` most confident; ``l2r``: the leftmost ``k``;
    ``threshold``: every position whose max probability exceeds ``tau``
    (at least the single most confident one).
    """

    kind: str = THRESHOLD
    k: int = 1
    tau: float = 0.9

    def __post_init__(self):
        if self.kind not in (CONFMAX, L2R, THRESHOLD):
            raise ConfigError(f"unknown strategy {self.kind!r}")
        if self.kind == THRESHOLD and not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.kind != THRESHOLD and self.k < 1:
            raise ConfigError("k >= 1")

    @property
    def label(self) -> str:
        if self.kind == THRESHOLD:
            return f"threshold_{self.tau:g}"
        return f"{self.kind}_k{self.k}"

    def select(self, conf: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        """Indices (into the block) to finalize now; ``conf`` is per-position max prob."""
        open_idx = masked.nonzero().flatten()
        if self.kind == L2R:
            return open_idx[: self.k]
        c = conf[open_idx]
        if self.kind == CONFMAX:
            order = torch.argsort(c, descending=True, stable=True)
            return open_idx[order[: self.k]].sort().values
        chosen = open_idx[c > self.tau]
        if len(chosen) == 0:
            chosen = open_idx[int(torch.argmax(c))].reshape(1)
        return chosen


def block_spec(n: int, B: int) -> AttentionSpec:
    """``B`` block tokens after ``n`` cached ones: full prefix, bidirectional block."""
    allowed = torch.ones(B, n + B, dtype=torch.bool)
    pos_q = torch.arange(n + 1, n + B + 1)
    return AttentionSpec(allowed, pos_q, torch.arange(1, n + B + 1))


@torch.no_grad()
def blockdiff_generate(
    prompt: Sequence[int],
    backbone: Backbone,
    strategy: Strategy = Strategy(),
    max_new: int = 64,
    block_len: Optional[int] = None,
    stop_on_eos: bool = True,
) -> tuple[list[int], GenerationStats]:
    """Block-wise iterative unmasking; each completed block is cached by one causal forward."""
    cfg = backbone.config
    B = block_len or cfg.block_len
    n = len(prompt)
    if n < 1:
        raise ValueError("prompt must be non-empty")
    if n + B > cfg.max_seq_len:
        raise CapacityError(f"prompt {n} + block {B} exceeds max_seq_len={cfg.max_seq_len}")
    t0 = time.perf_counter()
    stats = GenerationStats()
    cache = KVCache(cfg)
    mask = cfg.mask_token_id

    block = torch.full((B,), mask)
    tokens = torch.cat((torch.tensor(list(prompt)), block))
    spec = slice_prefill_spec(prefill_template(B, cfg.max_seq_len), n, B)
    bundle, rows = backbone(tokens, spec, cache)
    cache.append(rows, n)
    stats.nfe = 1
    block_logits = bundle.logits[n:]
    out: list[int] = []

    while True:
        masked = block == mask
        remaining = max_new - len(out)
        probs = torch.softmax(block_logits, dim=-1)
        conf, pred = probs.max(dim=-1)
        chosen = strategy.select(conf, masked)
        block[chosen] = pred[chosen]
        masked = block == mask
        need = min(remaining, B)
        head = block[:need].tolist()
        eos_at = next(
            (i for i, t in enumerate(head) if stop_on_eos and t == cfg.eos_token_id and not masked[: i + 1].any()),
            None,
        )
        if eos_at is not None or not masked[:need].any():
            keep = head if eos_at is None else head[: eos_at + 1]
            out.extend(int(t) for t in keep)
            if eos_at is not None or len(out) >= max_new:
                break
            # Cache the completed block, then open the next one.
            start = cache.cache_len
            if start + 2 * B > cfg.max_seq_len:
                stats.truncated = True
                break
            _, rows = backbone(block, AttentionSpec.causal_with_cache(B, start), cache)
            cache.append(rows, B)
            stats.nfe += 1
            block = torch.full((B,), mask)
            bundle, _ = backbone(block, block_spec(cache.cache_len, B), cache)
            stats.nfe += 1
            block_logits = bundle.logits
            continue
        bundle, _ = backbone(block, block_spec(cache.cache_len, B), cache)
        stats.nfe += 1
        block_logits = bundle.logits

    stats.committed_tokens = len(out)
    stats.wall_time = time.perf_counter() - t0
    return out, stats
