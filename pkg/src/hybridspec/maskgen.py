"""Attention specs for training, prefill and decoding.

Positions are 1-based; position 1 holds BOS. The training layout forwards
``S`` clean tokens followed by ``S - 1`` mask tokens covering positions
``2..S``, tiled into blocks of ``B`` from position 2.

Decode layout (one forward per step, ``q_len = B * (1 + B)`` query rows)::

    rows/cols 0..B-1          carried tokens, positions n+1..n+B
    rows/cols B + (j-1)*B ..  mask block j (j = 1..B), positions n+j+1..n+j+B
    cols q_len..              prefix (cached) keys, positions 1..n
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import SELF_FIRST, AttentionSpec
from .config import CapacityError


class BatchingError(ValueError):
    """Raised when a training length does not tile into whole blocks."""


@dataclass(frozen=True)
class TrainingSpec:
    """Training attention spec plus label alignment.

    Row ``r`` of ``spec`` is clean position ``r + 1`` for ``r < S`` and mask
    position ``r - S + 2`` otherwise. ``ar_rows[i]`` predicts the token at
    ``ar_label_pos[i]`` (shifted by one); ``diff_rows[i]`` predicts the token
    at its own position ``diff_label_pos[i]``.
    """

    spec: AttentionSpec
    seq_len: int
    block_len: int
    ar_rows: torch.Tensor
    ar_label_pos: torch.Tensor
    diff_rows: torch.Tensor
    diff_label_pos: torch.Tensor

    @property
    def n_tokens(self) -> int:
        return 2 * self.seq_len - 1

    def block_start(self, position: int) -> int:
        """First position of the mask block containing ``position``."""
        return 2 + ((position - 2) // self.block_len) * self.block_len


def build_training_spec(S: int, B: int) -> TrainingSpec:
    if S < 2:
        raise BatchingError("S >= 2")
    if B < 1 or (S - 1) % B != 0:
        raise BatchingError(f"S-1={S - 1} is not divisible by block length {B}")
    n = 2 * S - 1
    allowed = torch.zeros(n, n, dtype=torch.bool)
    allowed[:S, :S] = torch.ones(S, S, dtype=torch.bool).tril()
    for b0 in range(2, S + 1, B):
        rows = slice(S + b0 - 2, S + b0 - 2 + B)
        allowed[rows, : b0 - 1] = True
        allowed[rows, rows] = True
    positions = torch.cat((torch.arange(1, S + 1), torch.arange(2, S + 1)))
    spec = AttentionSpec(allowed, positions, positions.clone())
    return TrainingSpec(
        spec=spec,
        seq_len=S,
        block_len=B,
        ar_rows=torch.arange(0, S - 1),
        ar_label_pos=torch.arange(2, S + 1),
        diff_rows=torch.arange(S, n),
        diff_label_pos=torch.arange(2, S + 1),
    )


def build_prefill_spec(n_prompt: int, B: int, max_seq_len: int | None = None) -> AttentionSpec:
    """Causal prompt rows followed by one bidirectional block of ``B`` masks."""
    if n_prompt < 1:
        raise ValueError("n_prompt >= 1")
    if max_seq_len is not None and n_prompt + B > max_seq_len:
        raise CapacityError(f"prompt {n_prompt} + block {B} exceeds max_seq_len={max_seq_len}")
    n = n_prompt + B
    allowed = torch.zeros(n, n, dtype=torch.bool)
    allowed[:n_prompt, :n_prompt] = torch.ones(n_prompt, n_prompt, dtype=torch.bool).tril()
    allowed[n_prompt:, :] = True
    pos = torch.arange(1, n + 1)
    return AttentionSpec(allowed, pos, pos.clone())


def build_prefill_template(max_seq_len: int, B: int) -> torch.Tensor:
    """Allowed matrix for the longest prefill, laid out prompt-first.

    Masks sit at the end, so the attention spec for prompt length ``n`` is rows/cols
    ``0..n-1`` plus the last ``B``; see :func:`slice_prefill_spec`.
    """
    m = max_seq_len
    allowed = torch.zeros(m + B, m + B, dtype=torch.bool)
    allowed[:m, :m] = torch.ones(m, m, dtype=torch.bool).tril()
    allowed[m:, :] = True
    return allowed


def slice_prefill_spec(template: torch.Tensor, n_prompt: int, B: int) -> AttentionSpec:
    m = template.shape[0] - B
    if n_prompt < 1 or n_prompt + B > m:
        raise CapacityError(f"prompt {n_prompt} + block {B} exceeds max_seq_len={m}")
    idx = torch.cat((torch.arange(n_prompt), torch.arange(m, m + B)))
    allowed = template[idx][:, idx]
    pos = torch.arange(1, n_prompt + B + 1)
    return AttentionSpec(allowed, pos, pos.clone())


def q_len_for(B: int) -> int:
    return B * (1 + B)


def positions_for_step(n: int, B: int) -> torch.Tensor:
    """Positions of the ``q_len`` tokens forwarded in a decode step at prefix ``n``.

    Carried token ``j`` sits at ``n + j``; mask ``i`` of block ``j`` at ``n + j + i``.
    """
    carried = torch.arange(n + 1, n + B + 1)
    j = torch.arange(1, B + 1)[:, None]
    i = torch.arange(1, B + 1)[None, :]
    blocks = (n + j + i).reshape(-1)
    return torch.cat((carried, blocks))


@dataclass(frozen=True)
class DecodeTemplate:
    """Allowed matrix ``[q_len, q_len + max_seq_len]`` built once per engine."""

    allowed: torch.Tensor
    block_len: int
    max_seq_len: int

    @property
    def q_len(self) -> int:
        return q_len_for(self.block_len)


def _decode_self_block(B: int) -> torch.Tensor:
    q = q_len_for(B)
    a = torch.zeros(q, q, dtype=torch.bool)
    a[:B, :B] = torch.ones(B, B, dtype=torch.bool).tril()
    for j in range(1, B + 1):
        rows = slice(B + (j - 1) * B, B + j * B)
        a[rows, :j] = True
        a[rows, rows] = True
    return a


def build_decode_template(B: int, max_seq_len: int) -> DecodeTemplate:
    if B < 1 or max_seq_len < 2 * B:
        raise ValueError("need B >= 1 and max_seq_len >= 2*B")
    q = q_len_for(B)
    allowed = torch.zeros(q, q + max_seq_len, dtype=torch.bool)
    allowed[:, :q] = _decode_self_block(B)
    allowed[:, q:] = True
    return DecodeTemplate(allowed, B, max_seq_len)


def slice_decode_spec(template: DecodeTemplate, n: int) -> AttentionSpec:
    """Spec for prefix length ``n``: every row, the self columns, the first ``n`` prefix columns.

    The returned matrix is a view into the template; nothing is copied.
    """
    B = template.block_len
    if n < 0 or n + B > template.max_seq_len:
        raise CapacityError(f"prefix {n} + {B} carried tokens exceeds max_seq_len")
    q = template.q_len
    allowed = template.allowed[:, : q + n]
    pos_q = positions_for_step(n, B)
    pos_k = torch.cat((pos_q, torch.arange(1, n + 1)))
    return AttentionSpec(allowed, pos_q, pos_k, key_layout=SELF_FIRST)


def build_decode_spec(n: int, B: int) -> AttentionSpec:
    """Direct construction of the decode spec for prefix ``n`` (no template)."""
    q = q_len_for(B)
    allowed = torch.zeros(q, q + n, dtype=torch.bool)
    for r in range(q):
        if r < B:
            carried_seen = r + 1
            own = None
        else:
            j = (r - B) // B + 1
            carried_seen = j
            own = range(B + (j - 1) * B, B + j * B)
        for c in range(carried_seen):
            allowed[r, c] = True
        if own is not None:
            for c in own:
                allowed[r, c] = True
        for c in range(q, q + n):
            allowed[r, c] = True
    pos_q = positions_for_step(n, B)
    pos_k = torch.cat((pos_q, torch.arange(1, n + 1)))
    return AttentionSpec(allowed, pos_q, pos_k, key_layout=SELF_FIRST)


def block_rows(B: int, j: int) -> slice:
    """Rows of mask block ``j`` (1-based) in the decode layout."""
    return slice(B + (j - 1) * B, B + j * B)


def dump_csv(allowed: torch.Tensor, path: str | Path) -> None:
    np.savetxt(path, allowed.to(torch.uint8).numpy(), fmt="%d", delimiter=",")


def dump_pbm(allowed: torch.Tensor, path: str | Path) -> None:
    """Plain (P1) portable bitmap; black pixel = attention allowed."""
    a = allowed.to(torch.uint8).numpy()
    lines = [f"P1\n{a.shape[1]} {a.shape[0]}"]
    lines += [" ".join(str(v) for v in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path: str | Path) -> torch.Tensor:
    a = np.loadtxt(path, delimiter=",", dtype=np.uint8, ndmin=2)
    return torch.from_numpy(a).bool()
