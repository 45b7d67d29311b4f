import hashlib
from pathlib import Path

import pytest
import torch

import hybridspec
from hybridspec.backbone import Backbone
from hybridspec.checkpoint import load_checkpoint, save_checkpoint
from hybridspec.config import ModelConfig
from hybridspec.data import chunk_document, synthetic_documents, synthetic_tasks, tokenize_document
from hybridspec.training import TrainConfig, train

# Toy fixture: 2000 grammar documents of 32 bytes, S = 33 so S-1 tiles into blocks of 4.
FIXTURE_MODEL = ModelConfig(d_model=64, n_layers=2, n_heads=4, max_seq_len=128, block_len=4, rng_seed=0)
FIXTURE_TRAIN = TrainConfig(steps=600, batch_size=32, seq_len=33, peak_lr=3e-3, min_lr=3e-4, seed=0)
CORPUS_SEED = 0
TASK_SEED = 5


@pytest.fixture
def tiny_config():
    # 256 bytes + BOS/EOS/MASK/PAD
    return ModelConfig(vocab_size=260, d_model=32, n_layers=2, n_heads=4, max_seq_len=64, block_len=3, rng_seed=7)


@pytest.fixture
def tiny_model(tiny_config):
    return Backbone(tiny_config).eval()


def random_tokens(n, seed=0, high=256):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, high, (n,), generator=g)


def fixture_corpus():
    docs = synthetic_documents(2000, seed=CORPUS_SEED, length=32)
    return [c for d in docs for c in chunk_document(tokenize_document(d), FIXTURE_TRAIN.seq_len)]


def held_out_tasks(n=100):
    return synthetic_tasks(n, seed=TASK_SEED, prompt_len=10, completion_len=20)


def _source_digest() -> str:
    h = hashlib.sha256()
    for name in ("backbone.py", "config.py", "data.py", "maskgen.py", "training.py", "checkpoint.py"):
        h.update((Path(hybridspec.__file__).parent / name).read_bytes())
    return h.hexdigest()[:16]


def _trained(request, masking: str):
    """Train once per source revision; the checkpoint is kept in pytest's cache dir."""
    tcfg = TrainConfig(**{**FIXTURE_TRAIN.to_dict(), "betas": FIXTURE_TRAIN.betas, "masking": masking})
    key = hashlib.sha256(
        f"{_source_digest()}|{FIXTURE_MODEL.to_json()}|{tcfg.to_dict()}".encode()
    ).hexdigest()[:16]
    path = Path(request.config.cache.mkdir("hybridspec")) / f"fixture_{masking}_{key}.ckpt"
    if path.exists():
        model, _ = load_checkpoint(path)
        return model
    result = train(FIXTURE_MODEL, fixture_corpus(), tcfg)
    save_checkpoint(result.backbone, path)
    return result.backbone.eval()


@pytest.fixture(scope="session")
def trained_model(request):
    return _trained(request, "full")


@pytest.fixture(scope="session")
def trained_random_mask_model(request):
    return _trained(request, "random")


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE: dict[str, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        cid, text = marker.args
        status = "PASS" if rep.outcome == "passed" else "FAIL"
        _ACCEPTANCE.setdefault(f"{cid}|{text}", []).append(status)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (int(k.split("|")[0].rstrip("ab")), k)):
        cid, text = key.split("|", 1)
        status = "PASS" if all(s == "PASS" for s in _ACCEPTANCE[key]) else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {cid}: {text}")
