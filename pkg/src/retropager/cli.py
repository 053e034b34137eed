"""Command-line entry point.

Four subcommands: ``gen`` writes synthetic dataset files, ``train`` runs one
training stage and writes a checkpoint plus step metrics, ``eval`` runs a
report suite (recall, needle, equivalence, memory), and ``trace`` dumps the
score and budget-audit CSVs for one prompt.  Every successful run writes a
single ``manifest.json`` into its output directory recording the command,
the resolved config snapshot, the seed, content hashes of the file inputs,
the output paths, and wall time; rerunning with identical inputs reproduces
identical output bytes.

Config precedence is flags (``--set section.key=value``) over ``--config``
file over dataclass defaults.  ``--seed`` falls back to the
``RETRO_PAGER_SEED`` environment variable when the flag is absent.  Exit
codes: 0 success, 2 usage error, 3 invalid configuration, 1 other failure;
failures print a one-line error JSON to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .config import (EngineConfig, config_snapshot, load_config_file,
                     resolve_configs)
from .data import (VocabLayout, eval_needle, eval_recall, gen_corpus,
                   gen_needle, gen_pairwise, gen_synthetic_qa, load_samples,
                   save_samples)
from .engine import Engine, full_attention_oracle
from .errors import InvalidConfig, InvalidInput, RetroPagerError
from .kernels import set_num_threads
from .model import init_params, load_checkpoint, save_checkpoint
from .retriever import RetrieverSettings, export_score_trace
from .training import train_stage1, train_stage2


# ---- shared plumbing -----------------------------------------------------------

def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("RETRO_PAGER_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise InvalidConfig(f"RETRO_PAGER_SEED={env!r} is not an integer") from exc


def _parse_overrides(pairs) -> dict[str, dict]:
    """--set model.d_model=32 style entries -> per-section override dicts."""
    out: dict[str, dict] = {"model": {}, "engine": {}, "train": {}}
    for item in pairs or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise InvalidConfig(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in out:
            raise InvalidConfig(f"unknown config section {section!r} in --set")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[section][key] = value
    return out


def _load_configs(args, *, seed: int | None = None):
    file_data = load_config_file(args.config) if args.config else {}
    over = _parse_overrides(getattr(args, "set", None))
    if seed is not None:
        over["train"].setdefault("seed", seed)
    if getattr(args, "stage", None) is not None:
        over["train"]["stage"] = args.stage
    if getattr(args, "steps", None) is not None:
        over["train"]["max_steps"] = args.steps
    if getattr(args, "lr", None) is not None:
        over["train"]["learning_rate"] = args.lr
    return resolve_configs(file_data, over["model"], over["engine"], over["train"])


def _out_dir(args) -> str:
    if args.out:
        path = args.out
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S.%fZ")
        path = os.path.join("runs", stamp)
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out_dir: str, argv, snapshot: dict, seed: int | None,
                    input_paths, outputs, t0: float) -> None:
    manifest = {
        "version": __version__,
        "command": list(argv),
        "config": snapshot,
        "seed": seed,
        "input_hashes": {p: _sha256(p) for p in sorted(set(input_paths))},
        "outputs": sorted(outputs),
        "wall_time_s": round(time.time() - t0, 3),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def _load_params(args, model_cfg):
    """Checkpoint weights when given, else fresh initialization.  A checkpoint
    carries its own model config, which then wins over file and flags."""
    if getattr(args, "checkpoint", None):
        params, cfg, _ = load_checkpoint(args.checkpoint)
        return params, cfg, [args.checkpoint]
    return init_params(model_cfg), model_cfg, []


def _layout(args, model_cfg) -> VocabLayout:
    return VocabLayout(model_cfg.vocab_size, key_band=args.key_band,
                       value_band=args.value_band)


# ---- subcommands ---------------------------------------------------------------

def cmd_gen(args, out_dir, argv, t0) -> int:
    seed = _resolve_seed(args) or 0
    model_cfg, engine_cfg, train_cfg = _load_configs(args)
    outputs = []
    if args.kind != "corpus":
        layout = _layout(args, model_cfg)
    if args.kind == "pairwise":
        samples = gen_pairwise(layout, model_cfg.w, args.pages, args.n,
                               seed=seed, phrase_len=args.phrase_len)
        path = os.path.join(out_dir, "pairwise.jsonl")
        save_samples(path, samples)
        outputs.append("pairwise.jsonl")
    elif args.kind == "qa":
        samples = gen_synthetic_qa(layout, model_cfg.w, args.pages, args.n,
                                   seed=seed, key_len=args.key_len,
                                   answer_len=args.answer_len)
        path = os.path.join(out_dir, "qa.jsonl")
        save_samples(path, samples)
        outputs.append("qa.jsonl")
    elif args.kind == "needle":
        depths = args.depths or [i / 8 for i in range(9)]
        path = os.path.join(out_dir, "needle.jsonl")
        with open(path, "w") as fh:
            for di, depth in enumerate(depths):
                for j in range(args.n):
                    s = gen_needle(layout, model_cfg.w, args.pages, depth,
                                   seed=seed + di * 10_000 + j,
                                   key_len=args.key_len,
                                   answer_len=args.answer_len)
                    row = {"tokens": [int(x) for x in s.tokens],
                           "answer": [int(x) for x in s.answer],
                           "needle_page": int(s.needle_page),
                           "depth": float(s.depth), "meta": s.meta}
                    fh.write(json.dumps(row) + "\n")
        outputs.append("needle.jsonl")
    else:  # corpus: JSONL rows of fixed-length surrogate-text sequences
        # band flags don't apply here; the whole non-reserved range is text
        text_layout = VocabLayout(model_cfg.vocab_size, key_band=0, value_band=0)
        path = os.path.join(out_dir, "corpus.jsonl")
        with open(path, "w") as fh:
            for j in range(args.n):
                toks = gen_corpus(text_layout, args.seq_len, seed=seed + j)
                fh.write(json.dumps({"tokens": [int(x) for x in toks]}) + "\n")
        outputs.append("corpus.jsonl")
    snapshot = config_snapshot(model_cfg, engine_cfg, train_cfg)
    snapshot["gen"] = {"kind": args.kind, "n": args.n, "pages": args.pages,
                       "key_band": args.key_band, "value_band": args.value_band}
    inputs = [args.config] if args.config else []
    _write_manifest(out_dir, argv, snapshot, seed, inputs, outputs, t0)
    print(os.path.join(out_dir, outputs[0]))
    return 0


def _read_token_rows(path: str) -> list[np.ndarray]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            rows.append(np.asarray(row["tokens"], dtype=np.int64))
    if not rows:
        raise InvalidInput(f"no token rows in {path}")
    return rows


def _read_needles(path: str):
    from .data import NeedleSample
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(NeedleSample(
                tokens=np.asarray(row["tokens"], dtype=np.int64),
                answer=np.asarray(row["answer"], dtype=np.int64),
                needle_page=row["needle_page"], depth=row["depth"],
                meta=row.get("meta", {})))
    if not out:
        raise InvalidInput(f"no needle rows in {path}")
    return out


def cmd_train(args, out_dir, argv, t0) -> int:
    seed = _resolve_seed(args)
    model_cfg, engine_cfg, train_cfg = _load_configs(args, seed=seed)
    params, model_cfg, inputs = _load_params(args, model_cfg)
    if args.data:
        inputs.append(args.data)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    if train_cfg.stage == 1:
        if not args.data:
            raise InvalidInput("train --stage 1 needs --data (retrieval samples)")
        samples = load_samples(args.data)
        train_stage1(params, model_cfg, train_cfg, samples,
                     metrics_path=metrics_path)
    else:
        if not args.data:
            raise InvalidInput("train --stage 2 needs --data (token rows)")
        corpora = _read_token_rows(args.data)
        settings: object = "full" if args.plan == "full" else RetrieverSettings(
            engine_cfg.k_pages, engine_cfg.sink_count, engine_cfg.local_count)
        train_stage2(params, model_cfg, train_cfg, corpora, settings,
                     metrics_path=metrics_path)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, params, model_cfg, seed=train_cfg.seed)
    if args.config:
        inputs.append(args.config)
    snapshot = config_snapshot(model_cfg, engine_cfg, train_cfg)
    _write_manifest(out_dir, argv, snapshot, train_cfg.seed, inputs,
                    ["checkpoint.bin", "metrics.jsonl"], t0)
    print(ckpt_path)
    return 0


def _suite_equivalence(args, params, model_cfg, seed: int) -> tuple[dict, int]:
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model_cfg.vocab_size - 1, size=args.tokens)
    n_pages = -(-args.tokens // model_cfg.w)
    ecfg = EngineConfig(mode="retrieval", k_pages=max(n_pages, 2),
                        sink_count=1, local_count=0,
                        hot_budget_tokens=10 * (args.tokens + n_pages),
                        max_new_tokens=0)
    eng = Engine(params, model_cfg, ecfg)
    got = eng.prefill(tokens)
    want = full_attention_oracle(params.astype(np.float64), model_cfg, tokens)
    diff = float(np.max(np.abs(got.astype(np.float64) - want)))
    report = {"suite": "equivalence", "tokens": int(args.tokens),
              "max_abs_logit_diff": diff, "tolerance": 1e-4,
              "passed": diff < 1e-4}
    return report, 0 if report["passed"] else 1


def _suite_memory(args, params, model_cfg, engine_cfg, seed: int) -> tuple[dict, int]:
    lengths = args.lengths or [1024, 2048, 4096]
    rng = np.random.default_rng(seed)
    peaks, resident = [], []
    for n in lengths:
        tokens = rng.integers(0, model_cfg.vocab_size - 1, size=n)
        ecfg = dataclasses.replace(engine_cfg, mode="retrieval", max_new_tokens=0)
        eng = Engine(params, model_cfg, ecfg)
        eng.prefill(tokens)
        peaks.append(eng.memory_report()["peak_hot_tokens"])
        base = Engine(params, model_cfg,
                      dataclasses.replace(engine_cfg, mode="full_attention",
                                          max_new_tokens=0))
        base.prefill(tokens)
        resident.append(base.memory_report()["resident_kv_tokens"])
    flat = len(set(peaks)) == 1
    growing = all(b > a for a, b in zip(resident, resident[1:]))
    report = {"suite": "memory", "lengths": lengths,
              "peak_hot_tokens": peaks, "baseline_resident_kv": resident,
              "paged_flat": flat, "baseline_growing": growing,
              "passed": flat and growing}
    return report, 0 if report["passed"] else 1


def cmd_eval(args, out_dir, argv, t0) -> int:
    seed = _resolve_seed(args) or 0
    model_cfg, engine_cfg, train_cfg = _load_configs(args)
    params, model_cfg, inputs = _load_params(args, model_cfg)
    code = 0
    if args.suite == "recall":
        if not args.data:
            raise InvalidInput("eval --suite recall needs --data")
        samples = load_samples(args.data)
        inputs.append(args.data)
        report = {"suite": "recall", "n_samples": len(samples)}
        report.update(eval_recall(params, model_cfg, samples))
    elif args.suite == "needle":
        if not args.data:
            raise InvalidInput("eval --suite needle needs --data")
        needles = _read_needles(args.data)
        inputs.append(args.data)
        report = {"suite": "needle", "n_samples": len(needles)}
        for mode in ("retrieval", "sliding_window"):
            ecfg = dataclasses.replace(engine_cfg, mode=mode)
            report[mode] = eval_needle(params, model_cfg, ecfg, needles)
    elif args.suite == "equivalence":
        report, code = _suite_equivalence(args, params, model_cfg, seed)
    else:
        report, code = _suite_memory(args, params, model_cfg, engine_cfg, seed)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
    if args.config:
        inputs.append(args.config)
    snapshot = config_snapshot(model_cfg, engine_cfg, train_cfg)
    _write_manifest(out_dir, argv, snapshot, seed, inputs, ["report.json"], t0)
    print(path)
    return code


def cmd_trace(args, out_dir, argv, t0) -> int:
    seed = _resolve_seed(args) or 0
    model_cfg, engine_cfg, train_cfg = _load_configs(args)
    params, model_cfg, inputs = _load_params(args, model_cfg)
    if args.data:
        tokens = _read_token_rows(args.data)[args.row]
        inputs.append(args.data)
    else:
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, model_cfg.vocab_size - 1, size=args.tokens)
    eng = Engine(params, model_cfg, engine_cfg)
    eng.prefill(tokens)
    if engine_cfg.max_new_tokens:
        eng.decode()
    score_path = os.path.join(out_dir, "score_trace.csv")
    export_score_trace(score_path, eng.trace.decode_scores)
    audit_path = os.path.join(out_dir, "audit.csv")
    eng.trace.audit_csv(audit_path)
    eng.trace.to_json(os.path.join(out_dir, "trace.json"))
    if args.config:
        inputs.append(args.config)
    snapshot = config_snapshot(model_cfg, engine_cfg, train_cfg)
    _write_manifest(out_dir, argv, snapshot, seed, inputs,
                    ["score_trace.csv", "audit.csv", "trace.json"], t0)
    print(audit_path)
    return 0


# ---- parser --------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (model/engine/train sections)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="config override, repeatable; values parse as JSON")
    p.add_argument("--out", help="output directory (default runs/<timestamp>)")
    p.add_argument("--seed", type=int,
                   help="run seed; falls back to RETRO_PAGER_SEED")
    p.add_argument("--threads", type=int, help="cap kernel thread count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retropager",
        description="Paged KV-cache inference with learned page retrieval.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--kind", required=True,
                   choices=["pairwise", "qa", "needle", "corpus"])
    g.add_argument("--n", type=int, default=100,
                   help="samples (per depth for needle kind)")
    g.add_argument("--pages", type=int, default=8,
                   help="pages per episode (candidate pages for qa/needle)")
    g.add_argument("--phrase-len", type=int, default=3)
    g.add_argument("--key-len", type=int, default=3)
    g.add_argument("--answer-len", type=int, default=2)
    g.add_argument("--key-band", type=int, default=64)
    g.add_argument("--value-band", type=int, default=64)
    g.add_argument("--depths", type=float, nargs="*",
                   help="needle depths in [0,1] (default: nine eighths)")
    g.add_argument("--seq-len", type=int, default=512,
                   help="tokens per corpus row")
    _add_common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=[1, 2], required=True)
    t.add_argument("--data", help="dataset file from `gen`")
    t.add_argument("--steps", type=int, help="optimizer steps")
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint", help="resume weights from this checkpoint")
    t.add_argument("--plan", choices=["live", "full"], default="live",
                   help="stage-2 attention plan source")
    _add_common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run a report suite")
    e.add_argument("--suite", required=True,
                   choices=["recall", "needle", "equivalence", "memory"])
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--tokens", type=int, default=512,
                   help="prompt length for the equivalence suite")
    e.add_argument("--lengths", type=int, nargs="*",
                   help="prompt lengths for the memory suite")
    _add_common(e)
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("trace", help="dump score and budget-audit CSVs")
    tr.add_argument("--checkpoint")
    tr.add_argument("--data", help="JSONL with token rows")
    tr.add_argument("--row", type=int, default=0, help="row index into --data")
    tr.add_argument("--tokens", type=int, default=512,
                    help="random prompt length when --data is absent")
    _add_common(tr)
    tr.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.time()
    try:
        if args.threads:
            set_num_threads(args.threads)
        out_dir = _out_dir(args)
        return args.func(args, out_dir, ["retropager"] + argv, t0)
    except InvalidConfig as exc:
        print(json.dumps({"error": "InvalidConfig", "message": str(exc)}),
              file=sys.stderr)
        return 3
    except RetroPagerError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
