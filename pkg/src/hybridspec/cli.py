"""Command-line entry point.

Every subcommand writes ``manifest.json`` (the fully resolved run config) into
``--out`` and tags each CSV row with the manifest hash. ``replay`` re-runs a
manifest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__
from .bench import LATENCY_FIELDS, THROUGHPUT_FIELDS, bench_latency, relative_throughput
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import BOS_ID, ModelConfig
from .data import (
    CorpusError,
    decode,
    encode,
    ingest_corpus,
    read_tasks,
    synthetic_tasks,
    write_synthetic_corpus,
    write_tasks,
)
from .engine import (
    CONFMAX,
    L2R,
    THRESHOLD,
    Strategy,
    VerifierConfig,
    ar_generate,
    blockdiff_generate,
    generate,
    write_trace,
)
from .eval import DecoderSpec, score_loglik, task_accuracy, write_results_csv
from .training import TrainConfig, train, write_log_csv

log = logging.getLogger("hybridspec")

DEFAULTS = {
    "model": ModelConfig(max_seq_len=128).to_dict(),
    "train": TrainConfig().to_dict(),
    "data": {"n_docs": 2000, "doc_len": 32, "n_tasks": 100, "prompt_len": 10, "completion_len": 20},
    "decode": {"beta": 1.0, "max_new": 20, "block_len": None, "decoder": "hybrid",
               "strategy": THRESHOLD, "tau": 0.9, "k": 1, "temperature": 0.0},
    "compare": {"thresholds": [0.9, 0.8, 0.7, 0.6], "drafts": [4, 8, 16], "k_values": [1, 2], "betas": [1.0, 0.0]},
    "bench": {"prefix_lens": [16, 32, 64], "slots": [1, 2, 4, 8, 16, 32], "repeats": 20, "warmup": 3,
              "throughput_prompts": 10, "drafts": [4, 8, 16]},
}


class CliError(RuntimeError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {path}")
        cfg = _merge(cfg, json.loads(p.read_text(encoding="utf-8")))
    return cfg


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out: Path, subcommand: str, cfg: dict, inputs: dict[str, str]) -> str:
    """Write ``manifest.json``; the hash covers config and input digests, not paths."""
    digests = {}
    for name, path in inputs.items():
        if name == "checkpoint":
            digests[name] = read_checkpoint(path)[0]["sha256"]
        else:
            digests[name] = file_sha256(path)
    hashed = {"subcommand": subcommand, "config": cfg, "input_sha256": digests, "version": __version__}
    h = hashlib.sha256(_canonical(hashed).encode()).hexdigest()
    manifest = dict(hashed, inputs=inputs, manifest_sha256=h)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return h


def write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict], manifest_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(fields) + ["manifest_sha256"])
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields] + [manifest_hash])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise CliError(f"--{what} is required")
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_model(path: str):
    try:
        model, _ = load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(str(exc)) from exc
    return model


def _prompts(args, cfg) -> list[tuple[str, str]]:
    prompts = [(f"p{i:03d}", p) for i, p in enumerate(args.prompt or [])]
    if args.tasks:
        prompts += [(t.task_id, t.prompt) for t in read_tasks(_require(args.tasks, "tasks"))]
    if not prompts:
        raise CliError("give --prompt or --tasks")
    return prompts


def _tasks(args, cfg):
    if args.tasks:
        return read_tasks(_require(args.tasks, "tasks"))
    d = cfg["data"]
    return synthetic_tasks(d["n_tasks"], seed=args.seed + 1, prompt_len=d["prompt_len"], completion_len=d["completion_len"])


# -- subcommands ---------------------------------------------------------------


def cmd_make_data(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg["data"]
    write_synthetic_corpus(out / "corpus.txt", d["n_docs"], seed=args.seed, length=d["doc_len"])
    tasks = synthetic_tasks(d["n_tasks"], seed=args.seed + 1, prompt_len=d["prompt_len"], completion_len=d["completion_len"])
    write_tasks(tasks, out / "tasks.tsv")
    write_manifest(out, "make-data", cfg, {})
    print(f"wrote {out / 'corpus.txt'} and {out / 'tasks.tsv'}")
    return 0


def cmd_train(args, cfg) -> int:
    corpus = _require(args.corpus, "corpus")
    mcfg = ModelConfig.from_dict(cfg["model"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    try:
        seqs = ingest_corpus(corpus, S=tcfg.seq_len, B=mcfg.block_len)
    except CorpusError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    h = write_manifest(out, "train", cfg, {"corpus": corpus})
    result = train(mcfg, seqs, tcfg)
    write_log_csv(result.log, out / "train_log.csv", h)
    save_checkpoint(result.backbone, out / "model.ckpt", extra={"train": tcfg.to_dict(), "manifest_sha256": h})
    print(f"final loss {result.final_loss:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


GEN_FIELDS = ("prompt_id", "decoder", "mode", "block_len", "text", "tokens", "nfe", "t_per_nfe")


def cmd_generate(args, cfg) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    model = _load_model(ckpt)
    d = cfg["decode"]
    out = Path(args.out)
    inputs = {"checkpoint": ckpt}
    if args.tasks:
        inputs["tasks"] = args.tasks
    h = write_manifest(out, "generate", dict(cfg, prompts=args.prompt or []), inputs)
    B = d["block_len"] or model.config.block_len
    rows = []
    for pid, text in _prompts(args, cfg):
        prompt = [BOS_ID] + encode(text)
        if d["decoder"] == "hybrid":
            vcfg = VerifierConfig(beta=d["beta"], temperature=d["temperature"], max_new_tokens=d["max_new"], block_len=B)
            toks, stats, state = generate(prompt, model, vcfg, seed=args.seed)
            mode = vcfg.mode
            if args.trace:
                write_trace(state, out / f"trace_{pid}.jsonl")
        elif d["decoder"] == "ar":
            toks, stats = ar_generate(prompt, model, d["max_new"])
            mode, B = "ar", 1
        else:
            strat = Strategy(d["strategy"], k=d["k"], tau=d["tau"])
            toks, stats = blockdiff_generate(prompt, model, strat, d["max_new"], B)
            mode = strat.label
        rows.append({"prompt_id": pid, "decoder": d["decoder"], "mode": mode, "block_len": B,
                     "text": decode(toks), "tokens": stats.committed_tokens, "nfe": stats.nfe,
                     "t_per_nfe": stats.tokens_per_nfe})
        print(f"{pid} [{mode}] {text!r} -> {decode(toks)!r} (T/NFE {stats.tokens_per_nfe:.2f})")
    write_csv(out / "generations.csv", GEN_FIELDS, rows, h)
    return 0


SCORE_FIELDS = ("task_id", "loglik", "n_tokens", "nfe")


def cmd_score(args, cfg) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    model = _load_model(ckpt)
    out = Path(args.out)
    if args.tasks:
        pairs = [(t.task_id, t.prompt, t.expected) for t in read_tasks(_require(args.tasks, "tasks"))]
        inputs = {"checkpoint": ckpt, "tasks": args.tasks}
    elif args.prompt and args.continuation is not None:
        pairs = [("p000", args.prompt[0], args.continuation)]
        inputs = {"checkpoint": ckpt}
    else:
        raise CliError("give --tasks, or --prompt with --continuation")
    h = write_manifest(out, "score", dict(cfg, pairs=[list(p) for p in pairs] if not args.tasks else None), inputs)
    rows = []
    for tid, prompt, cont in pairs:
        rep = score_loglik([BOS_ID] + encode(prompt), encode(cont), model)
        rows.append({"task_id": tid, "loglik": rep.total, "n_tokens": len(rep.token_logprobs), "nfe": rep.nfe_used})
    write_csv(out / "scores.csv", SCORE_FIELDS, rows, h)
    print(f"scored {len(rows)} continuation(s)")
    return 0


COMPARE_FIELDS = ("decoder", "setting", "block_len", "accuracy", "t_per_nfe", "tokens", "nfe")


def compare_decoders(cfg: dict) -> list[DecoderSpec]:
    c = cfg["compare"]
    decs = [DecoderSpec("ar")]
    for k in c["k_values"]:
        decs.append(DecoderSpec("blockdiff", strategy=Strategy(CONFMAX, k=k)))
        decs.append(DecoderSpec("blockdiff", strategy=Strategy(L2R, k=k)))
    for tau in c["thresholds"]:
        decs.append(DecoderSpec("blockdiff", strategy=Strategy(THRESHOLD, tau=tau)))
    for beta in c["betas"]:
        for B in c["drafts"]:
            decs.append(DecoderSpec("hybrid", beta=beta, block_len=B))
    return decs


def cmd_compare(args, cfg) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    model = _load_model(ckpt)
    tasks = _tasks(args, cfg)
    out = Path(args.out)
    inputs = {"checkpoint": ckpt}
    if args.tasks:
        inputs["tasks"] = args.tasks
    h = write_manifest(out, "compare", cfg, inputs)
    decs = compare_decoders(cfg)
    report = task_accuracy(model, tasks, decs)
    rows, sweep = [], []
    for dec in decs:
        s = report.summary[dec.name]
        setting = dec.strategy.label if dec.kind == "blockdiff" else ("greedy" if dec.kind == "ar" else f"beta={dec.beta:g}")
        B = dec.block_len or (model.config.block_len if dec.kind != "ar" else 1)
        row = {"decoder": dec.kind, "setting": setting, "block_len": B, "accuracy": s["accuracy"],
               "t_per_nfe": s["t_per_nfe"], "tokens": s["tokens"], "nfe": s["nfe"]}
        rows.append(row)
        if dec.kind == "hybrid":
            sweep.append(row)
        print(f"{dec.name:32s} acc={s['accuracy']:.3f} T/NFE={s['t_per_nfe']:.2f}")
    write_csv(out / "compare.csv", COMPARE_FIELDS, rows, h)
    write_csv(out / "hybrid_sweep.csv", COMPARE_FIELDS, sweep, h)
    write_results_csv(report.rows, out / "results.csv", h, record_time=args.record_time)
    return 0


def cmd_bench_latency(args, cfg) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    model = _load_model(ckpt)
    b = cfg["bench"]
    out = Path(args.out)
    h = write_manifest(out, "bench-latency", cfg, {"checkpoint": ckpt})
    torch.set_num_threads(1)
    rows = bench_latency(model, b["prefix_lens"], b["slots"], b["repeats"], b["warmup"])
    write_csv(out / "latency.csv", LATENCY_FIELDS, rows, h)
    d = cfg["data"]
    tasks = synthetic_tasks(b["throughput_prompts"], seed=args.seed + 1, prompt_len=d["prompt_len"],
                            completion_len=d["completion_len"])
    prompts = [[BOS_ID] + encode(t.prompt) for t in tasks]
    drafts = [B for B in b["drafts"] if len(prompts[0]) + 2 * B <= model.config.max_seq_len]
    tp = relative_throughput(model, prompts, drafts, cfg["decode"]["max_new"])
    write_csv(out / "throughput.csv", THROUGHPUT_FIELDS, tp, h)
    for r in rows:
        print(f"prefix={r['prefix_len']:4d} slots={r['n_token_slots']:3d} median={r['median_forward_seconds'] * 1e3:.3f} ms")
    return 0


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "score": cmd_score,
    "compare": cmd_compare,
    "bench-latency": cmd_bench_latency,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (merged over defaults)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/latest")
    common.add_argument("--checkpoint")
    common.add_argument("--corpus")
    common.add_argument("--tasks", help="TSV of task_id, prompt, expected")
    common.add_argument("--beta", type=float)
    common.add_argument("--block-len", type=int)
    common.add_argument("--decoder", choices=["hybrid", "ar", "blockdiff"])
    common.add_argument("--strategy", choices=[CONFMAX, L2R, THRESHOLD])
    common.add_argument("--tau", type=float)
    common.add_argument("--k", type=int)
    common.add_argument("--max-new", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--masking", choices=["full", "random"])
    common.add_argument("--prompt", action="append")
    common.add_argument("--continuation")
    common.add_argument("--trace", action="store_true", help="write per-step JSONL traces")
    common.add_argument("--record-time", action="store_true", help="fill wall-clock columns in results.csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hybridspec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    rp = sub.add_parser("replay", help="re-run a manifest.json")
    rp.add_argument("manifest")
    rp.add_argument("--out", default="runs/replay")
    return parser


def resolve(args) -> dict:
    cfg = load_config(args.config)
    cfg["seed"] = args.seed
    d = cfg["decode"]
    for flag, key in (("beta", "beta"), ("block_len", "block_len"), ("decoder", "decoder"),
                      ("strategy", "strategy"), ("tau", "tau"), ("k", "k"), ("max_new", "max_new")):
        val = getattr(args, flag)
        if val is not None:
            d[key] = val
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    if args.alpha is not None:
        cfg["train"]["alpha"] = args.alpha
    if args.masking is not None:
        cfg["train"]["masking"] = args.masking
    if args.block_len is not None and args.command == "train":
        cfg["model"]["block_len"] = args.block_len
    cfg["train"]["seed"] = args.seed
    cfg["model"]["rng_seed"] = args.seed
    return cfg


def _replay_args(manifest_path: str, out: str) -> list[str]:
    m = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    cfg_path = Path(out) / "replay_config.json"
    Path(out).mkdir(parents=True, exist_ok=True)
    cfg = dict(m["config"])
    argv = [m["subcommand"], "--config", str(cfg_path), "--out", out, "--seed", str(cfg.pop("seed", 0))]
    for prompt in cfg.pop("prompts", None) or []:
        argv += ["--prompt", prompt]
    pairs = cfg.pop("pairs", None)
    if pairs:
        argv += ["--prompt", pairs[0][1], "--continuation", pairs[0][2]]
    for name, path in m.get("inputs", {}).items():
        argv += [f"--{name}", path]
    cfg_path.write_text(json.dumps(cfg, sort_keys=True), encoding="utf-8")
    return argv


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "replay":
        return main(_replay_args(args.manifest, args.out))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (CliError, CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
