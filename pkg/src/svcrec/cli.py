"""File-based experiment pipeline: build, train, scenario, edit, decode,
evaluate, analyze.

Every command is a pure function of (input files, config, seed): outputs are
written with sorted keys and no timestamps, so reruns are byte-identical.
Each command drops a manifest recording the effective config hash and seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import DecodeTrace, probability_cost, parse_service_sequence, tradeoff_report, validity_rate
from .decoder import DecoderConfig, decode, unconstrained_greedy
from .editor import EditConfig, EditRequest, apply_edit, estimate_covariance
from .errors import SvcRecError
from .evaluation import (
    EvalRecord,
    build_evolution_scenario,
    chronological_split,
    map_at_k,
    precision_at_k,
    recall_at_k,
    scenario_manifest,
)
from .lexicon import Lexicon
from .model import ToyLM, TrainCorpus, TrainHyper, corpus_loss, train_toy
from .retrieval import TfidfEmbedder, build_prompt, load_corpus, save_corpus, top_k

DEFAULT_CONFIG = {
    "decoder": {"max_tokens": 256, "renormalize_masked": True},
    "edit": {
        "num_grad_steps": 40,
        "v_lr": 1e-2,
        "weight_decay": 1e-3,
        "clamp_factor": 4.0,
        "kl_factor": 0.06,
        "layer": None,
    },
    "train": {
        "dim": 32,
        "hidden": 48,
        "n_blocks": 2,
        "lr": 1.0,
        "steps": 400,
        "checkpoint_every": 20,
    },
    "prefix_sampling": {"count": 8, "min_words": 5, "max_words": 8},
    "holdout_count": 10,
    "retrieval_k": 5,
    "eval_k": [1, 5, 10],
    "scenario": {
        "n_segments": 3,
        "train_frac": 0.7,
        "volatility_threshold": 0.5,
        "min_count": 3,
    },
}


def _load_config(path: Optional[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    return cfg


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise SvcRecError(f"{path}:{lineno}: malformed JSON: {exc}") from None
    return rows


def _manifest(out: Path, command: str, seed: int, cfg: dict, inputs: dict) -> None:
    blob = json.dumps(cfg, sort_keys=True).encode()
    _write_json(
        out / f"manifest_{command}.json",
        {
            "command": command,
            "seed": seed,
            "config_hash": hashlib.sha256(blob).hexdigest(),
            "package_version": __version__,
            "inputs": inputs,
        },
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_build(args, cfg) -> int:
    records = load_corpus(args.corpus)
    if not records:
        raise SvcRecError(f"{args.corpus}: corpus is empty")
    names = sorted({api for rec in records for api in rec.apis})
    if not names:
        raise SvcRecError(f"{args.corpus}: no service names found")
    descriptions = [rec.description for rec in sorted(records, key=lambda r: r.rid)]
    lexicon = Lexicon.from_pairs(list(enumerate(names)), extra_texts=descriptions)
    out = _out_dir(args)
    lexicon.save(out)
    _manifest(out, "build", args.seed, cfg, {"corpus": str(args.corpus)})
    return 0


def cmd_train(args, cfg) -> int:
    records = sorted(load_corpus(args.corpus), key=lambda r: r.rid)
    lexicon = Lexicon.load(args.lexicon)
    corpus = TrainCorpus.from_examples(
        [(rec.description, rec.apis) for rec in records if rec.apis], lexicon
    )
    hyper = TrainHyper(seed=args.seed, **cfg["train"])
    model = train_toy(corpus, hyper)
    out = _out_dir(args)
    model.save(out / "model.json")
    _write_json(
        out / "train_report.json",
        {"final_loss": corpus_loss(model, corpus), "n_records": len(corpus.pairs)},
    )
    _manifest(out, "train", args.seed, cfg, {"corpus": str(args.corpus), "lexicon": str(args.lexicon)})
    return 0


def _sample_prefixes(rng, descriptions: list[str], spec: dict) -> tuple[str, ...]:
    prefixes = []
    for _ in range(spec["count"]):
        words = descriptions[int(rng.integers(len(descriptions)))].split()
        width = int(rng.integers(spec["min_words"], spec["max_words"] + 1))
        width = min(width, len(words))
        start = int(rng.integers(len(words) - width + 1))
        prefixes.append(" ".join(words[start : start + width]))
    return tuple(prefixes)


def cmd_edit(args, cfg) -> int:
    lexicon = Lexicon.load(args.lexicon)
    model = ToyLM.load(args.model)
    records = sorted(load_corpus(args.corpus), key=lambda r: r.rid)
    descriptions = [rec.description for rec in records]
    if not descriptions:
        raise SvcRecError(f"{args.corpus}: corpus is empty")
    edit_cfg = EditConfig(**cfg["edit"])
    layer = edit_cfg.layer if edit_cfg.layer is not None else model.config.editable_layer
    cov = estimate_covariance(model, descriptions, layer, lexicon.tokenizer)
    rng = np.random.default_rng(args.seed)
    rows = []
    current = model
    for item in _read_jsonl(Path(args.edits)):
        target = lexicon.by_sid.get(int(item["target_sid"]))
        if target is None:
            raise SvcRecError(f"unknown target_sid {item['target_sid']}")
        holdout = tuple(item.get("prompts") or ())
        if not holdout:
            pool = [d for d in descriptions if d != item["query"]]
            count = min(cfg["holdout_count"], len(pool))
            idx = rng.choice(len(pool), size=count, replace=False)
            holdout = tuple(pool[i] for i in sorted(idx))
        request = EditRequest(
            query=str(item["query"]),
            target=target,
            prefixes=_sample_prefixes(rng, descriptions, cfg["prefix_sampling"]),
            holdout=holdout,
        )
        current, report = apply_edit(
            current, request, edit_cfg, cov, lexicon, DecoderConfig(**cfg["decoder"])
        )
        rows.append(
            {
                "query": request.query,
                "target_sid": target.sid,
                "efficacy": report.efficacy,
                "locality": report.locality,
                "constraint_residual": report.constraint_residual,
                "drift": report.drift,
            }
        )
    if not rows:
        raise SvcRecError(f"{args.edits}: no edits found")
    out = _out_dir(args)
    current.save(out / "edited_model.json")
    _write_jsonl(out / "edit_report.jsonl", rows)
    _write_json(
        out / "edit_summary.json",
        {
            "n_edits": len(rows),
            "efficacy_rate": sum(r["efficacy"] for r in rows) / len(rows),
            "mean_locality": sum(r["locality"] for r in rows) / len(rows),
            "max_constraint_residual": max(r["constraint_residual"] for r in rows),
        },
    )
    _manifest(
        out,
        "edit",
        args.seed,
        cfg,
        {
            "model": str(args.model),
            "lexicon": str(args.lexicon),
            "edits": str(args.edits),
            "corpus": str(args.corpus),
        },
    )
    return 0


def cmd_decode(args, cfg) -> int:
    lexicon = Lexicon.load(args.lexicon)
    tok = lexicon.tokenizer
    model = ToyLM.load(args.model)
    records = sorted(load_corpus(args.queries), key=lambda r: r.rid)
    exclude: set[int] = set()
    if args.exclude_sids:
        exclude |= {int(s) for s in args.exclude_sids.split(",") if s.strip()}
    if args.scenario:
        payload = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        if args.exclude_dying:
            exclude |= set(payload["dying_sids"])
    dec_cfg = DecoderConfig(**cfg["decoder"])
    out = _out_dir(args)
    decode_rows, trace_rows, raw_rows = [], [], []
    for rec in records:
        prompt = tok.encode(rec.description)
        result = decode(
            model.forward,
            lexicon.trie,
            dec_cfg,
            prompt,
            sep_id=tok.sep_id,
            eos_id=tok.eos_id,
            exclude_sids=frozenset(exclude),
            query_id=str(rec.rid),
        )
        decode_rows.append(
            {
                "query_id": str(rec.rid),
                "sids": list(result.sids),
                "tokens": list(result.tokens),
                "truncated": result.truncated,
            }
        )
        trace_rows.extend(result.trace.to_records())
        if args.raw:
            raw = unconstrained_greedy(
                model.forward, prompt, eos_id=tok.eos_id, max_tokens=dec_cfg.max_tokens
            )
            raw_rows.append({"query_id": str(rec.rid), "tokens": raw})
    _write_jsonl(out / "decodes.jsonl", decode_rows)
    _write_jsonl(out / "trace.jsonl", trace_rows)
    if args.raw:
        _write_jsonl(out / "raw_decodes.jsonl", raw_rows)
    if args.prompt_corpus:
        prompt_pool = load_corpus(args.prompt_corpus)
        embedder = TfidfEmbedder([r.description for r in prompt_pool])
        prompts_dir = out / "prompts"
        prompts_dir.mkdir(exist_ok=True)
        for rec in records:
            neighbors = top_k(rec.description, prompt_pool, cfg["retrieval_k"], embedder)
            bundle = build_prompt(rec.description, rec.categories, neighbors, cfg["retrieval_k"])
            (prompts_dir / f"{rec.rid}.txt").write_text(bundle.render() + "\n", encoding="utf-8")
    _manifest(
        out,
        "decode",
        args.seed,
        cfg,
        {"model": str(args.model), "lexicon": str(args.lexicon), "queries": str(args.queries)},
    )
    return 0


def cmd_evaluate(args, cfg) -> int:
    lexicon = Lexicon.load(args.lexicon)
    gold_records = sorted(load_corpus(args.gold), key=lambda r: r.rid)
    predicted = {row["query_id"]: row for row in _read_jsonl(Path(args.pred))}
    eval_records = []
    for rec in gold_records:
        if not rec.apis:
            continue
        row = predicted.get(str(rec.rid), {"sids": []})
        eval_records.append(
            EvalRecord(
                query_id=str(rec.rid),
                gold=frozenset(lexicon.sid_of(name) for name in rec.apis),
                predicted=tuple(row["sids"]),
            )
        )
    if not eval_records:
        raise SvcRecError("nothing to evaluate: gold corpus has no labeled records")
    ks = [int(k) for k in cfg["eval_k"]]
    report = []
    for k in ks:
        report.append(
            {
                "K": k,
                "recall": sum(recall_at_k(r, k) for r in eval_records) / len(eval_records),
                "precision": sum(precision_at_k(r, k) for r in eval_records) / len(eval_records),
                "map": map_at_k(eval_records, k),
                "n_records": len(eval_records),
                "mean_predicted_len": sum(len(r.predicted) for r in eval_records) / len(eval_records),
            }
        )
    out = _out_dir(args)
    _write_json(out / "metrics.json", report)
    _manifest(
        out,
        "evaluate",
        args.seed,
        cfg,
        {"pred": str(args.pred), "gold": str(args.gold), "lexicon": str(args.lexicon)},
    )
    return 0


def cmd_analyze(args, cfg) -> int:
    lexicon = Lexicon.load(args.lexicon)
    tok = lexicon.tokenizer
    trace_rows = _read_jsonl(Path(args.trace))
    by_query: dict[str, list[dict]] = {}
    for row in trace_rows:
        by_query.setdefault(str(row["query_id"]), []).append(row)
    traces = {qid: DecodeTrace.from_records(rows) for qid, rows in by_query.items()}

    decode_rows = _read_jsonl(Path(args.decodes))
    constrained_seqs = [row["tokens"] for row in decode_rows if not row["truncated"]]
    raw_by_query: dict[str, list[int]] = {}
    if args.raw:
        for row in _read_jsonl(Path(args.raw)):
            raw_by_query[str(row["query_id"])] = [int(t) for t in row["tokens"]]

    per_query = []
    entries = []
    for row in sorted(decode_rows, key=lambda r: r["query_id"]):
        qid = str(row["query_id"])
        trace = traces.get(qid)
        cost = probability_cost(trace) if trace and trace.steps else 0.0
        raw_tokens = raw_by_query.get(qid)
        raw_valid = (
            parse_service_sequence(raw_tokens, lexicon.trie, tok.sep_id, tok.eos_id) is not None
            if raw_tokens is not None
            else None
        )
        per_query.append(
            {"query_id": qid, "cost": cost, "raw_valid": raw_valid, "n_steps": len(trace.steps) if trace else 0}
        )
        if trace and raw_valid is not None:
            entries.append((trace, raw_valid))

    summary = {
        "constrained_validity": validity_rate(
            constrained_seqs, lexicon.trie, tok.sep_id, tok.eos_id
        ),
        "mean_cost": sum(p["cost"] for p in per_query) / len(per_query) if per_query else 0.0,
        "per_query": per_query,
    }
    if raw_by_query:
        summary["raw_validity"] = validity_rate(
            list(raw_by_query.values()), lexicon.trie, tok.sep_id, tok.eos_id
        )
    out = _out_dir(args)
    _write_json(out / "analysis.json", summary)
    if entries:
        (out / "tradeoff.csv").write_text(tradeoff_report(entries), encoding="utf-8")
    _manifest(
        out,
        "analyze",
        args.seed,
        cfg,
        {"decodes": str(args.decodes), "trace": str(args.trace), "raw": str(args.raw or "")},
    )
    return 0


def cmd_scenario(args, cfg) -> int:
    lexicon = Lexicon.load(args.lexicon)
    records = load_corpus(args.corpus)
    sc_cfg = cfg["scenario"]
    plan = chronological_split(records, sc_cfg["n_segments"], sc_cfg["train_frac"])
    scenario = build_evolution_scenario(
        plan,
        lexicon,
        volatility_threshold=sc_cfg["volatility_threshold"],
        min_count=sc_cfg["min_count"],
        seed=args.seed,
    )
    out = _out_dir(args)
    _write_json(out / "scenario.json", scenario_manifest(scenario))
    early_train = [rec for seg in plan.segments[:-1] for rec in seg.train]
    save_corpus(sorted(early_train, key=lambda r: r.rid), out / "early_train.jsonl")
    save_corpus(scenario.later_test, out / "later_test.jsonl")
    save_corpus(scenario.test_new, out / "test_new.jsonl")
    save_corpus(scenario.test_preserve, out / "test_preserve.jsonl")
    by_rid = {rec.rid: rec for rec in records}
    _write_jsonl(
        out / "edits.jsonl",
        [
            {"query": by_rid[rid].description, "target_sid": sid, "prompts": []}
            for rid, sid in scenario.edit_targets
        ],
    )
    _manifest(out, "scenario", args.seed, cfg, {"corpus": str(args.corpus), "lexicon": str(args.lexicon)})
    return 0


# ----------------------------------------------------------------------
# argument wiring
# ----------------------------------------------------------------------
def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svcrec",
        description="Trie-constrained service recommendation pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seed_required=False):
        p.add_argument("--config", default=None, help="JSON config overriding defaults")
        p.add_argument("--seed", type=int, required=seed_required, default=0)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("build", help="build lexicon/tokenizer/trie from a corpus")
    p.add_argument("--corpus", required=True)
    common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="train the toy model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", required=True)
    common(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("scenario", help="chronological split + evolution scenario")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", required=True)
    common(p, seed_required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("edit", help="apply knowledge edits to a model")
    p.add_argument("--model", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--edits", required=True)
    p.add_argument("--corpus", required=True, help="corpus for prefixes/covariance")
    common(p, seed_required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("decode", help="constrained decode for query records")
    p.add_argument("--model", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--exclude-sids", default="", help="comma-separated sids to retire")
    p.add_argument("--scenario", default=None, help="scenario.json for exclusions")
    p.add_argument("--exclude-dying", action="store_true")
    p.add_argument("--raw", action="store_true", help="also write unconstrained decodes")
    p.add_argument("--prompt-corpus", default=None, help="render retrieval prompts from this corpus")
    common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="ranking metrics against gold records")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--lexicon", required=True)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="decoding-distribution diagnostics")
    p.add_argument("--decodes", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--raw", default=None)
    p.add_argument("--lexicon", required=True)
    common(p)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except (SvcRecError, FileNotFoundError) as exc:
        print(json.dumps({"command": args.command, "error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
