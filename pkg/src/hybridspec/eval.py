"""AR-mode likelihood scoring and exact-match accuracy on the synthetic tasks."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .backbone import AttentionSpec, Backbone, KVCache
from .config import BOS_ID, CapacityError
from .data import Task, decode, encode
from .engine import Strategy, VerifierConfig, ar_generate, blockdiff_generate, generate


@dataclass
class ScoreReport:
    total: float
    token_logprobs: list[float]
    nfe_used: int


@torch.no_grad()
def score_loglik(
    prompt: Sequence[int],
    continuation: Sequence[int],
    backbone: Backbone,
    cache: Optional[KVCache] = None,
) -> ScoreReport:
    """Teacher-forced log-likelihood of ``continuation`` under a causal mask.

    With ``cache`` holding the first ``cache.cache_len`` prompt tokens, only the
    rest is forwarded. Either way it is a single forward.
    """
    prompt, continuation = list(prompt), list(continuation)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if not continuation:
        return ScoreReport(0.0, [], 0)
    full = prompt + continuation
    if len(full) > backbone.config.max_seq_len:
        raise CapacityError(f"{len(full)} tokens exceed max_seq_len={backbone.config.max_seq_len}")
    start = 0 if cache is None else cache.cache_len
    if start >= len(prompt) + 1:
        raise ValueError("cache must not extend past the prompt")
    spec = AttentionSpec.causal_with_cache(len(full) - start, start)
    bundle, _ = backbone(torch.tensor(full[start:]), spec, cache)
    logp = torch.log_softmax(bundle.logits, dim=-1)
    # Row r predicts full[start + r + 1].
    rows = torch.arange(len(prompt) - 1 - start, len(full) - 1 - start)
    targets = torch.tensor(continuation)
    per_token = logp[rows, targets]
    return ScoreReport(float(per_token.sum()), per_token.tolist(), 1)


@dataclass(frozen=True)
class DecoderSpec:
    """One decoding configuration for :func:`task_accuracy`."""

    kind: str  # "hybrid" | "ar" | "blockdiff"
    beta: float = 1.0
    block_len: Optional[int] = None
    strategy: Strategy = field(default_factory=Strategy)

    @property
    def name(self) -> str:
        if self.kind == "hybrid":
            tag = "trust_ar" if self.beta == 1.0 else "trust_diff" if self.beta == 0.0 else f"beta{self.beta:g}"
            return f"hybrid_B{self.block_len}_{tag}" if self.block_len else f"hybrid_{tag}"
        if self.kind == "blockdiff":
            return f"blockdiff_{self.strategy.label}" + (f"_B{self.block_len}" if self.block_len else "")
        return "ar"


def run_decoder(dec: DecoderSpec, prompt: list[int], backbone: Backbone, max_new: int):
    if dec.kind == "hybrid":
        vcfg = VerifierConfig(beta=dec.beta, max_new_tokens=max_new, block_len=dec.block_len)
        out, stats, _ = generate(prompt, backbone, vcfg)
        return out, stats
    if dec.kind == "ar":
        return ar_generate(prompt, backbone, max_new)
    if dec.kind == "blockdiff":
        return blockdiff_generate(prompt, backbone, dec.strategy, max_new, dec.block_len)
    raise ValueError(f"unknown decoder kind {dec.kind!r}")


RESULT_FIELDS = ("task_id", "decoder", "correct", "tokens", "nfe", "t_per_nfe", "seconds")


@dataclass
class AccuracyReport:
    rows: list[dict]
    summary: dict[str, dict]

    def accuracy(self, decoder: str) -> float:
        return self.summary[decoder]["accuracy"]

    def t_per_nfe(self, decoder: str) -> float:
        return self.summary[decoder]["t_per_nfe"]


def task_accuracy(
    backbone: Backbone,
    tasks: Sequence[Task],
    decoders: Sequence[DecoderSpec],
) -> AccuracyReport:
    """Exact match of the first ``len(expected)`` generated bytes, per decoder."""
    rows = []
    summary = {}
    for dec in decoders:
        correct = tokens = nfe = 0
        t0 = time.perf_counter()
        for task in tasks:
            prompt = [BOS_ID] + encode(task.prompt)
            expected = encode(task.expected)
            out, stats = run_decoder(dec, prompt, backbone, len(expected))
            ok = out[: len(expected)] == expected
            correct += ok
            tokens += stats.committed_tokens
            nfe += stats.nfe
            rows.append(
                {
                    "task_id": task.task_id,
                    "decoder": dec.name,
                    "correct": int(ok),
                    "tokens": stats.committed_tokens,
                    "nfe": stats.nfe,
                    "t_per_nfe": stats.tokens_per_nfe,
                    "seconds": stats.wall_time,
                }
            )
        summary[dec.name] = {
            "accuracy": correct / len(tasks) if tasks else 0.0,
            "t_per_nfe": tokens / nfe if nfe else 0.0,
            "tokens": tokens,
            "nfe": nfe,
            "seconds": time.perf_counter() - t0,
        }
    return AccuracyReport(rows, summary)


def write_results_csv(
    rows: Sequence[dict], path: str | Path, manifest_hash: str = "", record_time: bool = False
) -> None:
    """Per-task results; ``seconds`` is left blank unless ``record_time`` (keeps files reproducible)."""
    fields = RESULT_FIELDS + (("manifest_sha256",) if manifest_hash else ())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            line = [
                r["task_id"],
                r["decoder"],
                r["correct"],
                r["tokens"],
                r["nfe"],
                f"{r['t_per_nfe']:.6f}",
                f"{r['seconds']:.6f}" if record_time else "",
            ]
            if manifest_hash:
                line.append(manifest_hash)
            w.writerow(line)


def completion_text(out: Sequence[int]) -> str:
    return decode(out)
