"""Exit criteria, run against the trained toy fixture (see ``conftest.trained_model``).

Each test carries an ``acceptance`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import csv
import io
import json
import random
import time

import pytest
import torch

from hybridspec.backbone import AttentionSpec, Backbone
from hybridspec.checkpoint import save_checkpoint
from hybridspec.cli import main
from hybridspec.config import BOS_ID, ModelConfig
from hybridspec.data import encode, synthetic_documents, write_tasks
from hybridspec.engine import VerifierConfig, ar_generate, generate
from hybridspec.eval import DecoderSpec, task_accuracy
from hybridspec.maskgen import build_decode_spec, build_decode_template, build_training_spec, slice_decode_spec
from hybridspec.training import make_batch_full

from .conftest import fixture_corpus, held_out_tasks
from .test_training import TestDualLoss

acceptance = pytest.mark.acceptance
TAUS = (0.9, 0.8, 0.7, 0.6)


def prompt_ids(task):
    return [BOS_ID] + encode(task.prompt)


def read_rows(path):
    return list(csv.DictReader(path.open(encoding="utf-8")))


@pytest.fixture(scope="module")
def ckpt(trained_model, tmp_path_factory):
    return save_checkpoint(trained_model, tmp_path_factory.mktemp("acc") / "model.ckpt")


# -- 1 --------------------------------------------------------------------------


@acceptance(1, "beta=1 hybrid output is token-identical to AR greedy, 100 prompts, B in {2,4,8}, < 2 min")
def test_lossless_equivalence(trained_model):
    tasks = held_out_tasks(100)
    t0 = time.perf_counter()
    mismatches = []
    for task in tasks:
        prompt = prompt_ids(task)
        ref, _ = ar_generate(prompt, trained_model, 20)
        for B in (2, 4, 8):
            out, _, _ = generate(prompt, trained_model, VerifierConfig(beta=1.0, max_new_tokens=20, block_len=B))
            if out != ref:
                mismatches.append((task.task_id, B))
    elapsed = time.perf_counter() - t0
    assert not mismatches
    assert elapsed < 120, f"{elapsed:.1f}s"


# -- 2 --------------------------------------------------------------------------


def _fuzz_models(trained):
    yield trained
    for seed in range(3):
        cfg = ModelConfig(d_model=32, n_layers=1, n_heads=4, max_seq_len=96, block_len=4, rng_seed=seed)
        yield Backbone(cfg).eval()


@acceptance(2, "every decode step forwards B(1+B) tokens and commits a in [1,B], >= 10k fuzzed steps")
def test_commit_bounds_fuzz(trained_model):
    rng = random.Random(0)
    docs = synthetic_documents(200, seed=11, length=40)
    steps = 0
    accept_hist = set()
    models = list(_fuzz_models(trained_model))
    while steps < 10_000:
        model = rng.choice(models)
        widths = []
        orig = model.forward

        def counting(tokens, spec, cache=None, _orig=orig):
            widths.append(tokens.shape[-1])
            return _orig(tokens, spec, cache)

        B = rng.randint(1, 8)
        if rng.random() < 0.5:
            text = rng.choice(docs)[: rng.randint(1, 30)]
            prompt = [BOS_ID] + encode(text)
        else:
            prompt = [BOS_ID] + [rng.randrange(256) for _ in range(rng.randint(0, 30))]
        beta = rng.choice([1.0, 0.0, rng.random()])
        vcfg = VerifierConfig(beta=beta, max_new_tokens=rng.randint(1, 60), block_len=B,
                              stop_on_eos=rng.random() < 0.5)
        model.forward = counting
        try:
            _, stats, state = generate(prompt, model, vcfg)
        finally:
            del model.forward
        assert widths[0] == len(prompt) + B
        assert widths[1:] == [B * (1 + B)] * len(state.trace)
        accepted = [r.accepted for r in state.trace]
        assert all(1 <= a <= B for a in accepted)
        # Every step commits exactly a, except a final step cut short by the budget or EOS.
        assert stats.committed_tokens <= 1 + sum(accepted)
        if accepted:
            assert stats.committed_tokens >= 1 + sum(accepted[:-1]) + 1
        accept_hist.update((B, a) for a in accepted)
        steps += len(state.trace)
    # the fuzz must actually exercise both rejection and full acceptance
    assert any(a == 1 for _, a in accept_hist)
    assert any(a == B and B > 1 for B, a in accept_hist)


# -- 3 --------------------------------------------------------------------------


@acceptance("3a", "training mask: perturbing future or in-block clean tokens leaves logits unchanged, exact")
def test_training_mask_no_leakage(trained_model):
    S, B = 33, 4
    tspec = build_training_spec(S, B)
    batch = make_batch_full(fixture_corpus()[:1], B)
    base = batch.inputs[0]
    with torch.no_grad():
        ref = trained_model(base, tspec.spec)[0].logits
    g = torch.Generator().manual_seed(0)
    checked = changed = 0
    for p in range(2, S + 1, 3):
        # clean tokens at positions >= p (row index p-1 onward)
        pert = base.clone()
        pert[p - 1 : S] = torch.randint(0, 256, (S - p + 1,), generator=g)
        with torch.no_grad():
            got = trained_model(pert, tspec.spec)[0].logits
        # AR rows for clean positions < p see nothing that changed
        assert torch.equal(got[: p - 1], ref[: p - 1])
        # every mask row whose block starts at or after p sees no clean token >= its block start
        for r in range(S, 2 * S - 1):
            pos = r - S + 2
            if tspec.block_start(pos) <= p:
                assert torch.equal(got[r], ref[r]), (p, r)
                checked += 1
            else:
                changed += not torch.equal(got[r], ref[r])
    # and perturbing other mask blocks' inputs does not leak across blocks
    pert = base.clone()
    pert[S + 4 :] = torch.randint(0, 256, (S - 1 - 4,), generator=g)
    with torch.no_grad():
        got = trained_model(pert, tspec.spec)[0].logits
    assert torch.equal(got[: S + 4], ref[: S + 4])
    # the perturbation is visible to rows allowed to see it, so the checks above are not vacuous
    assert checked > 0 and changed > 0


@acceptance("3b", "decode template slice equals direct construction for all prefixes at max_seq_len=256, exact")
@pytest.mark.parametrize("B", [1, 2, 4, 8])
def test_decode_template_slices(B):
    m = 256
    template = build_decode_template(B, m)
    for n in range(0, m - B + 1):
        sliced = slice_decode_spec(template, n)
        direct = build_decode_spec(n, B)
        assert torch.equal(sliced.allowed, direct.allowed), n
        assert torch.equal(sliced.positions_q, direct.positions_q), n
        assert torch.equal(sliced.positions_k, direct.positions_k), n


# -- 4 --------------------------------------------------------------------------


def scratch_step_logits(model, prefix, step_tokens, spec):
    """Recompute one decode step with no cache: prefix causal, step rows as in ``spec``."""
    n, q = len(prefix), len(step_tokens)
    allowed = torch.zeros(n + q, n + q, dtype=torch.bool)
    allowed[:n, :n] = torch.ones(n, n, dtype=torch.bool).tril()
    allowed[n:, :n] = spec.allowed[:, q:]
    allowed[n:, n:] = spec.allowed[:, :q]
    pos = torch.cat((torch.arange(1, n + 1), spec.positions_q))
    full = AttentionSpec(allowed, pos, pos.clone())
    with torch.no_grad():
        bundle, _ = model(torch.tensor(list(prefix) + list(step_tokens)), full)
    return bundle.logits[n:]


@acceptance(4, "cached-path logits match scratch recomputation <= 1e-4 at every step of 20 generations")
def test_cache_truth(trained_model):
    rng = random.Random(4)
    tasks = held_out_tasks(100)
    worst = 0.0
    steps = 0
    for i in range(20):
        B = rng.choice([2, 3, 4, 6, 8])
        prompt = prompt_ids(rng.choice(tasks)) if i % 2 else [BOS_ID] + [rng.randrange(256) for _ in range(8)]
        vcfg = VerifierConfig(beta=rng.choice([1.0, 0.0, 0.5]), max_new_tokens=40, block_len=B, stop_on_eos=False)
        _, _, state = generate(prompt, trained_model, vcfg, keep_logits=True)
        mask_id = trained_model.config.mask_token_id
        for rec in state.trace:
            n = rec.cache_len
            spec = build_decode_spec(n, B)
            step_tokens = rec.carried + [mask_id] * (B * B)
            ref = scratch_step_logits(trained_model, state.committed[:n], step_tokens, spec)
            worst = max(worst, (rec.logits - ref).abs().max().item())
            steps += 1
    assert steps > 0
    assert worst <= 1e-4, worst


# -- 5 --------------------------------------------------------------------------


@acceptance(5, "dual loss: hand fixture 1e-6, alpha=1 average, alpha=0 zero AR gradient, FD gradient 1e-3")
def test_loss_equation(trained_model):
    suite = TestDualLoss()
    suite.test_hand_computed()
    suite.test_alpha_one_is_average()
    suite.test_alpha_zero_kills_ar_gradient()
    suite.test_gradient_matches_finite_differences()

    # alpha=0 on the trained model: parameter gradients equal those of L_Diff alone
    from hybridspec.training import LossWeights, dual_loss

    batch = make_batch_full(fixture_corpus()[:4], 4)
    model = Backbone(trained_model.config)
    model.load_state_dict(trained_model.state_dict())

    def grads(fn):
        model.zero_grad()
        bundle, _ = model(batch.inputs, batch.tspec.spec)
        fn(bundle).backward()
        return [p.grad.clone() for p in model.parameters()]

    g0 = grads(lambda b: dual_loss(b, batch, LossWeights(0.0)).total)
    gd = grads(lambda b: dual_loss(b, batch, LossWeights(0.0)).diff)
    assert all(torch.equal(a, b) for a, b in zip(g0, gd))


# -- 6, 7: one CLI compare run over the held-out task set ----------------------


@pytest.fixture(scope="module")
def compare_run(ckpt, tmp_path_factory):
    root = tmp_path_factory.mktemp("compare")
    tasks = write_tasks(held_out_tasks(100), root / "tasks.tsv")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"compare": {"thresholds": list(TAUS), "drafts": [2, 4, 8, 16],
                                           "k_values": [1, 2], "betas": [1.0, 0.0]}}))
    t0 = time.perf_counter()
    code = main(["compare", "--config", str(cfg), "--checkpoint", str(ckpt), "--tasks", str(tasks),
                 "--out", str(root / "out")])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return root / "out", elapsed


@acceptance(6, "B=4 beta=1 mean T/NFE >= 1.5 over 100 prompts; sweep CSV covers B in {4,8,16}")
def test_parallelism(trained_model, compare_run):
    tasks = held_out_tasks(100)
    rep = task_accuracy(trained_model, tasks, [DecoderSpec("hybrid", beta=1.0, block_len=4)])
    per_prompt = [r["t_per_nfe"] for r in rep.rows]
    assert len(per_prompt) == 100
    assert sum(per_prompt) / len(per_prompt) >= 1.5
    out, _ = compare_run
    sweep = read_rows(out / "hybrid_sweep.csv")
    got = {int(r["block_len"]) for r in sweep if r["setting"] == "beta=1"}
    assert {4, 8, 16} <= got
    assert all(float(r["t_per_nfe"]) >= 1.0 for r in sweep)


@acceptance(7, "block-diffusion accuracy non-increasing over tau 0.9..0.6; hybrid B>=2 equals AR accuracy; < 10 min")
def test_decoder_comparison(compare_run):
    out, elapsed = compare_run
    rows = read_rows(out / "compare.csv")
    acc = {(r["decoder"], r["setting"], int(r["block_len"])): float(r["accuracy"]) for r in rows}
    bd = [next(v for (d, s, _), v in acc.items() if d == "blockdiff" and s == f"threshold_{t:g}") for t in TAUS]
    assert all(a >= b for a, b in zip(bd, bd[1:])), bd
    ar = acc[("ar", "greedy", 1)]
    hybrid = {B: v for (d, s, B), v in acc.items() if d == "hybrid" and s == "beta=1"}
    assert set(hybrid) == {2, 4, 8, 16}
    assert all(v == ar for v in hybrid.values()), (ar, hybrid)
    # per-task, not just in aggregate
    per = {}
    for r in read_rows(out / "results.csv"):
        per.setdefault(r["decoder"], []).append(r["correct"])
    for B in (2, 4, 8, 16):
        assert per[f"hybrid_B{B}_trust_ar"] == per["ar"]
    assert elapsed < 600, f"{elapsed:.1f}s"


# -- 8 --------------------------------------------------------------------------


@acceptance(8, "full-mask model >= random-mask model on B=4 hybrid T/NFE and on task accuracy")
def test_masking_ablation(trained_model, trained_random_mask_model):
    tasks = held_out_tasks(100)
    decs = [DecoderSpec("hybrid", beta=1.0, block_len=4)]
    full = task_accuracy(trained_model, tasks, decs).summary[decs[0].name]
    rand = task_accuracy(trained_random_mask_model, tasks, decs).summary[decs[0].name]
    print(f"\nfull: acc={full['accuracy']:.3f} T/NFE={full['t_per_nfe']:.3f}; "
          f"random: acc={rand['accuracy']:.3f} T/NFE={rand['t_per_nfe']:.3f}")
    assert full["t_per_nfe"] >= rand["t_per_nfe"]
    assert full["accuracy"] >= rand["accuracy"]


# -- 9 --------------------------------------------------------------------------


@acceptance(9, "bench-latency grid is deterministic in row count and schema")
def test_latency_grid(ckpt, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bench": {"prefix_lens": [16, 32, 64], "slots": [1, 2, 4, 8, 16, 32],
                                         "repeats": 20, "warmup": 2, "throughput_prompts": 3, "drafts": [4, 8]}}))
    shapes = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["bench-latency", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        text = (out / "latency.csv").read_text(encoding="utf-8")
        header = text.splitlines()[0].split(",")
        rows = list(csv.DictReader(io.StringIO(text)))
        shapes.append((header, [(r["prefix_len"], r["n_token_slots"], r["runs"]) for r in rows]))
        assert header == ["prefix_len", "n_token_slots", "median_forward_seconds", "mean_forward_seconds",
                          "runs", "manifest_sha256"]
        assert len(rows) == 18
        assert all(float(r["median_forward_seconds"]) > 0 for r in rows)
    assert shapes[0] == shapes[1]


# -- 10 -------------------------------------------------------------------------

TIMING_COLUMNS = {"median_forward_seconds", "mean_forward_seconds", "seconds", "tokens_per_sec", "rel_throughput"}


def _pipeline(root, cfg):
    data, run = root / "data", root / "run"
    assert main(["make-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(data / "corpus.txt"), "--out", str(run / "train")]) == 0
    ck, tasks = str(run / "train" / "model.ckpt"), str(data / "tasks.tsv")
    common = ["--config", str(cfg), "--checkpoint", ck, "--tasks", tasks]
    for name, extra in (("gen_ar", ["--decoder", "ar"]), ("gen_hybrid", ["--beta", "1"]),
                        ("gen_mix", ["--beta", "0.5"]), ("gen_bd", ["--decoder", "blockdiff"])):
        assert main(["generate", *common, *extra, "--out", str(run / name)]) == 0
    assert main(["score", *common, "--out", str(run / "score")]) == 0
    assert main(["compare", *common, "--out", str(run / "compare")]) == 0
    assert main(["bench-latency", "--config", str(cfg), "--checkpoint", ck, "--out", str(run / "bench")]) == 0
    return run


def _drop_timing(text):
    rows = list(csv.reader(io.StringIO(text)))
    keep = [i for i, h in enumerate(rows[0]) if h not in TIMING_COLUMNS]
    return [[r[i] for i in keep] for r in rows]


@acceptance(10, "every CSV is byte-identical under fixed seed and config")
def test_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": {"d_model": 32, "n_layers": 2, "n_heads": 4, "max_seq_len": 96, "block_len": 4},
        "train": {"steps": 60, "batch_size": 16, "seq_len": 17},
        "data": {"n_docs": 200, "doc_len": 16, "n_tasks": 12, "prompt_len": 6, "completion_len": 10},
        "bench": {"prefix_lens": [8, 16], "slots": [1, 4], "repeats": 20, "warmup": 1,
                  "throughput_prompts": 2, "drafts": [4]},
    }))
    a, b = _pipeline(tmp_path / "a", cfg), _pipeline(tmp_path / "b", cfg)
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    assert len(files) >= 10
    assert files == sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    timing = {"bench/latency.csv", "bench/throughput.csv"}
    for rel in files:
        ta, tb = (a / rel).read_bytes(), (b / rel).read_bytes()
        if str(rel) in timing:
            # wall-clock columns are measurements; everything else must agree byte for byte
            assert _drop_timing(ta.decode()) == _drop_timing(tb.decode()), rel
        else:
            assert ta == tb, rel
    assert (tmp_path / "a/data/corpus.txt").read_bytes() == (tmp_path / "b/data/corpus.txt").read_bytes()
