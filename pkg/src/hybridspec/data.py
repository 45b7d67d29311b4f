"""Byte-level tokenization, corpus ingestion and the synthetic toy grammar.

A corpus file holds one document per non-empty line. Each document becomes
``[BOS] + utf-8 bytes`` and is cut into training sequences of exactly ``S``
tokens (BOS first), right-padded with PAD.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .config import BOS_ID, EOS_ID, PAD_ID


class CorpusError(ValueError):
    pass


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids: Iterable[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def tokenize_document(text: str, append_eos: bool = False) -> list[int]:
    ids = [BOS_ID] + encode(text)
    if append_eos:
        ids.append(EOS_ID)
    return ids


def chunk_document(ids: Sequence[int], S: int) -> list[list[int]]:
    """Split a BOS-led document into BOS-led chunks of ``S`` tokens, PAD-filled."""
    body = list(ids[1:]) if ids and ids[0] == BOS_ID else list(ids)
    step = S - 1
    chunks = []
    for start in range(0, max(len(body), 1), step):
        piece = [BOS_ID] + body[start : start + step]
        piece += [PAD_ID] * (S - len(piece))
        chunks.append(piece)
    return chunks


def read_documents(paths: str | Path | Sequence[str | Path]) -> list[str]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    docs = []
    for p in paths:
        text = Path(p).read_text(encoding="utf-8")
        docs.extend(line for line in text.splitlines() if line.strip())
    return docs


def ingest_corpus(
    paths: str | Path | Sequence[str | Path],
    S: int | None = None,
    B: int | None = None,
    append_eos: bool = False,
) -> list[list[int]]:
    """Tokenize every document; with ``S`` given, chunk to length-``S`` sequences.

    ``S - 1`` must be a multiple of ``B`` when both are given.
    """
    docs = read_documents(paths)
    if not docs:
        raise CorpusError("corpus is empty")
    seqs = [tokenize_document(d, append_eos) for d in docs]
    if S is None:
        return seqs
    if B is not None and (S - 1) % B != 0:
        raise CorpusError(f"S-1={S - 1} must be a multiple of block length {B}")
    return [c for s in seqs for c in chunk_document(s, S)]


def iter_batches(seqs: Sequence[Sequence[int]], batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless shuffled epochs of ``[batch_size, S]`` int arrays."""
    arr = np.asarray(seqs, dtype=np.int64)
    while True:
        order = rng.permutation(len(arr))
        for i in range(0, len(order) - batch_size + 1, batch_size):
            yield arr[order[i : i + batch_size]]


# -- synthetic grammar -------------------------------------------------------

LETTERS = string.ascii_lowercase


def _alpha_run(rng: np.random.Generator, length: int) -> str:
    start = int(rng.integers(26))
    return "a:" + "".join(LETTERS[(start + k) % 26] for k in range(length))


LEXICON = ("cat", "dog", "sun", "tree", "blue", "map", "owl", "fig", "jazz", "kite", "moon", "red")


def _repeat(rng: np.random.Generator, length: int) -> str:
    word = LEXICON[int(rng.integers(len(LEXICON)))]
    unit = word + "."
    body = (unit * (length // len(unit) + 2))[:length]
    return "r:" + body


def _count(rng: np.random.Generator, length: int) -> str:
    v = int(rng.integers(10, 90))
    out = []
    while len(",".join(out)) < length:
        out.append(str(v))
        v = 10 if v == 99 else v + 1
    return "n:" + (",".join(out) + ",")[:length]


GENERATORS = (_alpha_run, _repeat, _count)


def synthetic_documents(n: int, seed: int = 0, length: int = 30) -> list[str]:
    """``n`` documents of the toy grammar: alphabet runs, repeated words, counting."""
    rng = np.random.default_rng(seed)
    return [GENERATORS[i % len(GENERATORS)](rng, length) for i in range(n)]


def write_synthetic_corpus(path: str | Path, n: int, seed: int = 0, length: int = 30) -> Path:
    path = Path(path)
    path.write_text("\n".join(synthetic_documents(n, seed, length)) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class Task:
    task_id: str
    prompt: str
    expected: str


def synthetic_tasks(n: int, seed: int = 1, prompt_len: int = 10, completion_len: int = 12) -> list[Task]:
    """Prompt/completion pairs cut from fresh grammar documents."""
    docs = synthetic_documents(n, seed=seed, length=prompt_len + completion_len)
    total = 2 + prompt_len
    return [Task(f"t{i:04d}", d[:total], d[total:]) for i, d in enumerate(docs)]


def read_tasks(path: str | Path) -> list[Task]:
    """Tab-separated ``task_id<TAB>prompt<TAB>expected`` lines."""
    tasks = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            tid, prompt, expected = line.split("\t")
            tasks.append(Task(tid, prompt, expected))
    return tasks


def write_tasks(tasks: Sequence[Task], path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{t.task_id}\t{t.prompt}\t{t.expected}\n" for t in tasks), encoding="utf-8")
    return path
