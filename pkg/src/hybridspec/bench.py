"""Forward-latency grid over prefix length and token slots, plus throughput ratios."""

from __future__ import annotations

import statistics
import time
from typing import Sequence

import numpy as np
import torch

from .backbone import AttentionSpec, Backbone, KVCache
from .config import BOS_ID, CapacityError
from .engine import VerifierConfig, ar_generate, generate

LATENCY_FIELDS = ("prefix_len", "n_token_slots", "median_forward_seconds", "mean_forward_seconds", "runs")
THROUGHPUT_FIELDS = ("decoder", "block_len", "tokens", "nfe", "seconds", "tokens_per_sec", "rel_throughput")


@torch.no_grad()
def time_forward(backbone: Backbone, prefix_len: int, slots: int, repeats: int = 20, warmup: int = 3, seed: int = 0):
    """Time one cached forward of ``slots`` causal tokens after ``prefix_len`` cached ones."""
    cfg = backbone.config
    if prefix_len + slots > cfg.max_seq_len:
        raise CapacityError(f"prefix {prefix_len} + slots {slots} exceeds max_seq_len")
    rng = np.random.default_rng(seed)
    cache = KVCache(cfg)
    if prefix_len:
        prefix = torch.as_tensor(rng.integers(0, 256, prefix_len))
        prefix[0] = BOS_ID
        _, rows = backbone(prefix, AttentionSpec.causal(prefix_len), None)
        cache.append(rows, prefix_len)
    toks = torch.as_tensor(rng.integers(0, 256, slots))
    spec = AttentionSpec.causal_with_cache(slots, prefix_len)
    samples = []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        backbone(toks, spec, cache)
        dt = time.perf_counter() - t0
        if i >= warmup:
            samples.append(dt)
    return statistics.median(samples), statistics.fmean(samples)


def bench_latency(
    backbone: Backbone,
    prefix_lens: Sequence[int],
    slot_counts: Sequence[int],
    repeats: int = 20,
    warmup: int = 3,
) -> list[dict]:
    """One row per (prefix, slots) pair, in sweep order; pairs that do not fit are skipped."""
    if repeats < 20:
        raise ValueError("use at least 20 timed runs")
    rows = []
    for p in prefix_lens:
        for s in slot_counts:
            if p + s > backbone.config.max_seq_len:
                continue
            med, mean = time_forward(backbone, p, s, repeats, warmup)
            rows.append(
                {
                    "prefix_len": p,
                    "n_token_slots": s,
                    "median_forward_seconds": med,
                    "mean_forward_seconds": mean,
                    "runs": repeats,
                }
            )
    return rows


def relative_throughput(
    backbone: Backbone,
    prompts: Sequence[Sequence[int]],
    block_lens: Sequence[int],
    max_new: int,
    beta: float = 1.0,
) -> list[dict]:
    """Tokens/sec of hybrid decoding at each block length divided by AR tokens/sec."""

    def run(fn):
        tokens = nfe = 0
        t0 = time.perf_counter()
        for p in prompts:
            stats = fn(list(p))
            tokens += stats.committed_tokens
            nfe += stats.nfe
        return tokens, nfe, time.perf_counter() - t0

    ar_tok, ar_nfe, ar_sec = run(lambda p: ar_generate(p, backbone, max_new)[1])
    ar_rate = ar_tok / ar_sec if ar_sec > 0 else float("inf")
    rows = [
        {"decoder": "ar", "block_len": 1, "tokens": ar_tok, "nfe": ar_nfe, "seconds": ar_sec,
         "tokens_per_sec": ar_rate, "rel_throughput": 1.0}
    ]
    for B in block_lens:
        vcfg = VerifierConfig(beta=beta, max_new_tokens=max_new, block_len=B)
        tok, nfe, sec = run(lambda p: generate(p, backbone, vcfg)[1])
        rate = tok / sec if sec > 0 else float("inf")
        rows.append(
            {"decoder": "hybrid", "block_len": B, "tokens": tok, "nfe": nfe, "seconds": sec,
             "tokens_per_sec": rate, "rel_throughput": rate / ar_rate}
        )
    return rows
