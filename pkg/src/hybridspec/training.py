"""Batch construction, the dual AR/diffusion loss, and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, LogitsBundle
from .config import MASK_ID, PAD_ID, ModelConfig
from .data import iter_batches
from .maskgen import TrainingSpec, build_training_spec

IGNORE = -100
FULL = "full"
RANDOM = "random"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingBatch:
    inputs: torch.Tensor  # [b, 2S-1]
    tspec: TrainingSpec
    ar_labels: torch.Tensor  # [b, S-1], IGNORE where no loss
    diff_labels: torch.Tensor  # [b, S-1], IGNORE where no loss
    masking_mode: str

    @property
    def ar_valid(self) -> torch.Tensor:
        return self.ar_labels != IGNORE

    @property
    def diff_valid(self) -> torch.Tensor:
        return self.diff_labels != IGNORE


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class DualLossReport:
    total: torch.Tensor
    ar: torch.Tensor
    diff: torch.Tensor
    n_ar_terms: int
    n_diff_terms: int


def _as_tensor(seqs) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(seqs), dtype=torch.long)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    return t


def make_batch_full(seqs, B: int, mask_token_id: int = MASK_ID, pad_token_id: int = PAD_ID) -> TrainingBatch:
    """Clean section plus an all-mask diffusion section; every non-PAD row bears loss."""
    x = _as_tensor(seqs)
    S = x.shape[1]
    tspec = build_training_spec(S, B)
    target = x[:, 1:]
    labels = target.masked_fill(target == pad_token_id, IGNORE)
    inputs = torch.cat((x, torch.full_like(target, mask_token_id)), dim=1)
    return TrainingBatch(inputs, tspec, labels.clone(), labels.clone(), FULL)


def uniform_rate(rng: np.random.Generator) -> float:
    """Per-sequence corruption rate drawn from uniform(0, 1]."""
    return 1.0 - rng.random()


def make_batch_random(
    seqs,
    B: int,
    mask_rate_sampler: Callable[[np.random.Generator], float] = uniform_rate,
    rng: Optional[np.random.Generator] = None,
    mask_token_id: int = MASK_ID,
    pad_token_id: int = PAD_ID,
) -> TrainingBatch:
    """Mask each diffusion position with a per-sequence rate; loss only where masked.

    PAD positions are always masked and never bear loss, matching the full-mask layout.

    A block whose non-PAD positions all came out unmasked is re-drawn, so each
    block carries at least one loss term.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = _as_tensor(seqs)
    b, S = x.shape
    tspec = build_training_spec(S, B)
    target = x[:, 1:]
    real = (target != pad_token_id).numpy()
    masked = np.zeros((b, S - 1), dtype=bool)
    for r in range(b):
        u = mask_rate_sampler(rng)
        if not 0.0 < u <= 1.0:
            raise ValueError(f"mask rate must lie in (0, 1], got {u}")
        for s in range(0, S - 1, B):
            live = real[r, s : s + B]
            if not live.any():
                masked[r, s : s + B] = True
                continue
            while True:
                draw = rng.random(B) < u
                if (draw & live).any():
                    break
            masked[r, s : s + B] = draw | ~live
    masked_t = torch.from_numpy(masked)
    diff_inputs = torch.where(masked_t, torch.full_like(target, mask_token_id), target)
    inputs = torch.cat((x, diff_inputs), dim=1)
    ar_labels = target.masked_fill(target == pad_token_id, IGNORE)
    diff_labels = ar_labels.masked_fill(~masked_t, IGNORE)
    return TrainingBatch(inputs, tspec, ar_labels, diff_labels, RANDOM)


def dual_loss(logits, batch: TrainingBatch, w: LossWeights = LossWeights()) -> DualLossReport:
    """``(alpha * mean AR CE + mean diffusion CE) / (1 + alpha)`` over valid terms."""
    if isinstance(logits, LogitsBundle):
        logits = logits.logits
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    ts = batch.tspec
    ar_logits = logits[:, ts.ar_rows]
    diff_logits = logits[:, ts.diff_rows]
    n_ar = int(batch.ar_valid.sum())
    n_diff = int(batch.diff_valid.sum())
    if n_ar == 0 or n_diff == 0:
        raise ValueError("batch has no valid AR or diffusion loss terms")
    vocab = logits.shape[-1]
    l_ar = F.cross_entropy(ar_logits.reshape(-1, vocab), batch.ar_labels.reshape(-1), ignore_index=IGNORE)
    l_diff = F.cross_entropy(diff_logits.reshape(-1, vocab), batch.diff_labels.reshape(-1), ignore_index=IGNORE)
    total = (w.alpha * l_ar + l_diff) / (1.0 + w.alpha)
    return DualLossReport(total, l_ar, l_diff, n_ar, n_diff)


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 32
    seq_len: int = 33
    peak_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_frac: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    alpha: float = 1.0
    masking: str = FULL
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_frac`` of the run, then cosine decay to ``min_lr``."""
    warmup = max(1, math.ceil(cfg.warmup_frac * cfg.steps))
    if step < warmup:
        return cfg.peak_lr * (step + 1) / warmup
    span = max(1, cfg.steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    backbone: Backbone
    train_config: TrainConfig
    log: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.log[-1]["L_total"] if self.log else float("nan")


LOG_FIELDS = ("step", "lr", "L_AR", "L_Diff", "L_total")


def write_log_csv(log: Sequence[dict], path: str | Path, manifest_hash: str = "") -> None:
    fields = LOG_FIELDS + (("manifest_sha256",) if manifest_hash else ())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in log:
            line = [f"{row[k]:.6g}" if isinstance(row[k], float) else row[k] for k in LOG_FIELDS]
            writer.writerow(line + ([manifest_hash] if manifest_hash else []))


def train(
    config: ModelConfig,
    seqs: Sequence[Sequence[int]],
    tcfg: TrainConfig = TrainConfig(),
    backbone: Optional[Backbone] = None,
) -> TrainResult:
    """Deterministic Adam training on the dual loss.

    ``seqs`` must already be length ``tcfg.seq_len`` (see :func:`data.ingest_corpus`).
    """
    if tcfg.masking not in (FULL, RANDOM):
        raise ValueError(f"unknown masking mode {tcfg.masking!r}")
    weights = LossWeights(tcfg.alpha)
    model = backbone if backbone is not None else Backbone(config)
    result = TrainResult(model, tcfg)
    if tcfg.steps == 0:
        return result
    if len(seqs) < tcfg.batch_size:
        raise ValueError(f"{len(seqs)} sequences < batch_size {tcfg.batch_size}")
    if any(len(s) != tcfg.seq_len for s in seqs):
        raise ValueError(f"every sequence must have length seq_len={tcfg.seq_len}")

    rng = np.random.default_rng(tcfg.seed)
    batches = iter_batches(seqs, tcfg.batch_size, rng)
    opt = torch.optim.AdamW(
        model.parameters(), lr=tcfg.peak_lr, betas=tcfg.betas, weight_decay=tcfg.weight_decay
    )
    spec = build_training_spec(tcfg.seq_len, config.block_len).spec
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tcfg.seed)
        for step in range(tcfg.steps):
            raw = next(batches)
            if tcfg.masking == FULL:
                batch = make_batch_full(raw, config.block_len, config.mask_token_id, config.pad_token_id)
            else:
                batch = make_batch_random(
                    raw, config.block_len, uniform_rate, rng, config.mask_token_id, config.pad_token_id
                )
            lr = lr_at(step, tcfg)
            for group in opt.param_groups:
                group["lr"] = lr
            bundle, _ = model(batch.inputs, spec)
            report = dual_loss(bundle, batch, weights)
            if not torch.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: L_AR={report.ar.item()}, L_Diff={report.diff.item()}, lr={lr}"
                )
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if tcfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
            opt.step()
            result.log.append(
                {
                    "step": step,
                    "lr": lr,
                    "L_AR": report.ar.item(),
                    "L_Diff": report.diff.item(),
                    "L_total": report.total.item(),
                }
            )
    model.eval()
    return result
