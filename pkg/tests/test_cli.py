import csv
import json

import pytest

from hybridspec.cli import main

SMALL = {
    "model": {"d_model": 32, "n_layers": 1, "n_heads": 4, "max_seq_len": 64, "block_len": 4},
    "train": {"steps": 15, "batch_size": 8, "seq_len": 17},
    "data": {"n_docs": 60, "doc_len": 16, "n_tasks": 4, "prompt_len": 6, "completion_len": 6},
    "compare": {"thresholds": [0.9, 0.8, 0.7, 0.6], "drafts": [4, 8, 16], "k_values": [1], "betas": [1.0, 0.0]},
    "bench": {"prefix_lens": [8, 16], "slots": [1, 4, 16], "repeats": 20, "warmup": 1,
              "throughput_prompts": 2, "drafts": [4]},
}


def rows(path):
    return list(csv.DictReader(path.open(encoding="utf-8")))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["make-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(root / "data" / "corpus.txt"),
                 "--out", str(root / "train")]) == 0
    return root, cfg


def run(root, cfg, *argv):
    ckpt = root / "train" / "model.ckpt"
    return main([*argv, "--config", str(cfg), "--checkpoint", str(ckpt), "--tasks", str(root / "data" / "tasks.tsv")])


def test_train_outputs(workspace):
    root, _ = workspace
    log = rows(root / "train" / "train_log.csv")
    assert len(log) == SMALL["train"]["steps"]
    manifest = json.loads((root / "train" / "manifest.json").read_text())
    assert list(log[0]) == ["step", "lr", "L_AR", "L_Diff", "L_total", "manifest_sha256"]
    assert {r["manifest_sha256"] for r in log} == {manifest["manifest_sha256"]}
    assert manifest["subcommand"] == "train" and len(manifest["manifest_sha256"]) == 64


@pytest.mark.parametrize("beta,mode", [(1.0, "trust_ar"), (0.0, "trust_diff")])
def test_generate_modes(workspace, beta, mode):
    root, cfg = workspace
    out = root / f"gen_{beta}"
    assert run(root, cfg, "generate", "--beta", str(beta), "--trace", "--out", str(out)) == 0
    got = rows(out / "generations.csv")
    assert len(got) == 4 and {r["mode"] for r in got} == {mode}
    h = json.loads((out / "manifest.json").read_text())["manifest_sha256"]
    assert {r["manifest_sha256"] for r in got} == {h}
    assert list(out.glob("trace_*.jsonl"))


def test_generate_baselines(workspace):
    root, cfg = workspace
    assert run(root, cfg, "generate", "--decoder", "ar", "--out", str(root / "g_ar")) == 0
    assert run(root, cfg, "generate", "--decoder", "blockdiff", "--strategy", "confmax", "--k", "2",
               "--out", str(root / "g_bd")) == 0
    assert {r["mode"] for r in rows(root / "g_bd" / "generations.csv")} == {"confmax_k2"}


def test_compare_grid(workspace):
    root, cfg = workspace
    out = root / "cmp"
    assert run(root, cfg, "compare", "--out", str(out)) == 0
    got = rows(out / "compare.csv")
    settings = [(r["decoder"], r["setting"], r["block_len"]) for r in got]
    for tau in ("0.9", "0.8", "0.7", "0.6"):
        assert any(d == "blockdiff" and s == f"threshold_{tau}" for d, s, _ in settings)
    sweep = rows(out / "hybrid_sweep.csv")
    assert sorted({int(r["block_len"]) for r in sweep}) == [4, 8, 16]
    assert len(rows(out / "results.csv")) == len(got) * 4
    assert all(r["seconds"] == "" for r in rows(out / "results.csv"))


def test_score(workspace):
    root, cfg = workspace
    assert run(root, cfg, "score", "--out", str(root / "score")) == 0
    got = rows(root / "score" / "scores.csv")
    assert len(got) == 4 and all(float(r["loglik"]) < 0 for r in got)


def test_byte_identical_and_replay(workspace):
    root, cfg = workspace
    a, b = root / "rep_a", root / "rep_b"
    for out in (a, b):
        assert run(root, cfg, "compare", "--out", str(out)) == 0
    for name in ("compare.csv", "hybrid_sweep.csv", "results.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert main(["replay", str(a / "manifest.json"), "--out", str(root / "rep_c")]) == 0
    ma = json.loads((a / "manifest.json").read_text())["manifest_sha256"]
    mc = json.loads((root / "rep_c" / "manifest.json").read_text())["manifest_sha256"]
    assert ma == mc
    assert (a / "compare.csv").read_bytes() == (root / "rep_c" / "compare.csv").read_bytes()


def test_bench_latency(workspace):
    root, cfg = workspace
    out = root / "bench"
    assert run(root, cfg, "bench-latency", "--out", str(out)) == 0
    lat = rows(out / "latency.csv")
    assert len(lat) == 6
    assert [(int(r["prefix_len"]), int(r["n_token_slots"])) for r in lat] == [
        (p, s) for p in (8, 16) for s in (1, 4, 16)
    ]
    assert all(int(r["runs"]) >= 20 for r in lat)
    assert rows(out / "throughput.csv")


def test_missing_inputs_exit_nonzero(tmp_path, capsys):
    assert main(["generate", "--checkpoint", str(tmp_path / "nope.ckpt"), "--prompt", "x", "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    assert main(["generate", "--checkpoint", str(bad), "--prompt", "x", "--out", str(tmp_path)]) != 0


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert capsys.readouterr().out.strip()
