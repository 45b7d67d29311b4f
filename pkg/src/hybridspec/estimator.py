"""scikit-learn style wrapper: ``fit`` on documents, ``predict`` completions for prompts."""

from __future__ import annotations

from pathlib import Path
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .config import BOS_ID, ModelConfig
from .data import chunk_document, decode, encode, tokenize_document
from .engine import Strategy, VerifierConfig, ar_generate, blockdiff_generate, generate
from .eval import score_loglik
from .training import TrainConfig, train


def check_text_array(X, name: str = "X") -> list[str]:
    """Accept a string or a 1-D iterable of strings; always return a list."""
    if isinstance(X, str):
        return [X]
    if isinstance(X, np.ndarray) and X.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {X.shape}")
    items = list(X)
    if not items:
        raise ValueError(f"{name} is empty")
    bad = [type(x).__name__ for x in items if not isinstance(x, str)]
    if bad:
        raise TypeError(f"{name} must contain str, found {bad[0]}")
    return items


class HybridLM(BaseEstimator):
    """Byte-level dual-mode language model with self-speculative decoding.

    ``fit`` trains the backbone with the dual AR/diffusion loss; ``predict``
    completes prompts with the configured decoder and records per-prompt
    generation stats in ``last_stats_``.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        block_len: int = 4,
        max_seq_len: int = 128,
        seq_len: int = 33,
        steps: int = 600,
        batch_size: int = 32,
        peak_lr: float = 3e-3,
        alpha: float = 1.0,
        masking: str = "full",
        decoder: str = "hybrid",
        beta: float = 1.0,
        tau: float = 0.9,
        max_new_tokens: int = 20,
        random_state: int = 0,
    ):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.block_len = block_len
        self.max_seq_len = max_seq_len
        self.seq_len = seq_len
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.alpha = alpha
        self.masking = masking
        self.decoder = decoder
        self.beta = beta
        self.tau = tau
        self.max_new_tokens = max_new_tokens
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            block_len=self.block_len,
            max_seq_len=self.max_seq_len,
            rng_seed=self.random_state,
        )

    def fit(self, X, y=None):
        docs = check_text_array(X)
        cfg = self._model_config()
        tcfg = TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            seq_len=self.seq_len,
            peak_lr=self.peak_lr,
            min_lr=self.peak_lr / 10,
            alpha=self.alpha,
            masking=self.masking,
            seed=self.random_state,
        )
        seqs = [c for d in docs for c in chunk_document(tokenize_document(d), self.seq_len)]
        result = train(cfg, seqs, tcfg)
        self.backbone_ = result.backbone
        self.train_log_ = result.log
        return self

    def _complete(self, prompt: str, max_new: int):
        ids = [BOS_ID] + encode(prompt)
        if self.decoder == "hybrid":
            vcfg = VerifierConfig(beta=self.beta, max_new_tokens=max_new)
            out, stats, _ = generate(ids, self.backbone_, vcfg)
        elif self.decoder == "ar":
            out, stats = ar_generate(ids, self.backbone_, max_new)
        elif self.decoder == "blockdiff":
            out, stats = blockdiff_generate(ids, self.backbone_, Strategy("threshold", tau=self.tau), max_new)
        else:
            raise ValueError(f"unknown decoder {self.decoder!r}")
        return decode(out), stats

    def predict(self, X, max_new_tokens: int | None = None) -> np.ndarray:
        check_is_fitted(self, "backbone_")
        prompts = check_text_array(X)
        n = max_new_tokens or self.max_new_tokens
        texts, stats = zip(*(self._complete(p, n) for p in prompts))
        self.last_stats_ = list(stats)
        return np.array(texts, dtype=object)

    def score(self, X, y) -> float:
        """Exact-match accuracy of the first ``len(expected)`` generated bytes."""
        check_is_fitted(self, "backbone_")
        prompts, expected = check_text_array(X), check_text_array(y, "y")
        if len(prompts) != len(expected):
            raise ValueError("X and y differ in length")
        hits = 0
        stats = []
        for p, e in zip(prompts, expected):
            text, st = self._complete(p, len(encode(e)))
            hits += text == e
            stats.append(st)
        self.last_stats_ = stats
        return hits / len(prompts)

    def score_samples(self, X, y) -> np.ndarray:
        """Log-likelihood of each continuation given its prompt (one causal forward each)."""
        check_is_fitted(self, "backbone_")
        prompts, conts = check_text_array(X), check_text_array(y, "y")
        return np.array(
            [score_loglik([BOS_ID] + encode(p), encode(c), self.backbone_).total for p, c in zip(prompts, conts)]
        )

    def tokens_per_nfe(self) -> float:
        """Aggregate T/NFE over the last ``predict``/``score`` call."""
        check_is_fitted(self, "last_stats_")
        tokens = sum(s.committed_tokens for s in self.last_stats_)
        nfe = sum(s.nfe for s in self.last_stats_)
        return tokens / nfe

    def save(self, path: str | Path) -> Path:
        check_is_fitted(self, "backbone_")
        return save_checkpoint(self.backbone_, path, extra={"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path: str | Path) -> "HybridLM":
        backbone, extra = load_checkpoint(path)
        est = cls(**extra.get("estimator_params", {}))
        est.backbone_ = backbone
        return est

