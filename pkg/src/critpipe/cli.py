"""Command-line surface for the pipelines.

Subcommands: synth-flaws, synth-critiques, filter, test-time, self-improve,
self-talk, report, validate. Exit codes: 0 success, 2 config error,
3 backend failure, 4 resumable interruption.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import critiques as critiques_mod
from . import flaws as flaws_mod
from . import grading
from . import selftalk as selftalk_mod
from .config import build_gateway, load_config, load_query_file, role_backend
from .core import Critique, Query, ReasoningPath
from .critiques import CritiqueCandidate, FilterVerdict
from .errors import BackendError, ConfigError, CritpipeError, ResumableInterruption
from .flaws import FlawRecord
from .jsonl import read_jsonl, write_jsonl
from .manifest import RunManifest, run_stage
from .reports import emit_eval_report, emit_ledger_report, emit_tail_deltas
from .selfimprove import IterationLedger, LoopConfig, run_loop
from .testtime import ProtocolConfig, evaluate, run_protocol

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_RESUMABLE = 4


def _setup(args) -> tuple[dict, list[Query], "object", RunManifest]:
    config = load_config(args.config)
    queries = load_query_file(config.get("queries", "queries.jsonl"))
    gateway = build_gateway(config, queries, base_dir=Path(args.config).parent)
    manifest = RunManifest.open(args.run_dir, run_id=Path(args.run_dir).name,
                                config=config, seed=config.get("seed", 0))
    return config, queries, gateway, manifest


def cmd_synth_flaws(args) -> int:
    config, queries, gateway, manifest = _setup(args)
    seed = config.get("seed", 0)
    block = config.get("flaws", {})
    strategy = args.strategy or block.get("strategy", "rg1")
    budget = args.budget or int(block.get("budget", 4))
    temperature = float(block.get("temperature", 0.7))
    actor_id = role_backend(config, "actor")
    out_path = Path(args.run_dir) / "flaws.jsonl"
    query_map = {q.id: q for q in queries}

    def stage():
        rows = []
        for query in queries:
            base = flaws_mod.rg1_sample(gateway, actor_id, query, budget, temperature, seed)
            if strategy == "rg1":
                records, correct = base.flawed, base.correct
            else:
                correct = base.correct
                records = []
                if correct:
                    if strategy == "rg2":
                        rec = flaws_mod.rg2_error_location(
                            gateway, actor_id, query, correct[0], seed=seed
                        )
                    else:
                        taxonomy = tuple(block.get("taxonomy", flaws_mod.DEFAULT_TAXONOMY))
                        rec = flaws_mod.rg3_inject_mistake(
                            gateway, actor_id, query, correct[0], taxonomy, seed=seed
                        )
                    records = [rec] if rec is not None else []
            for record in records:
                if grading.reward(query_map[record.query_id], record.flawed_path) != 0:
                    continue
                rows.append({"kind": "flaw", **record.to_json()})
            for path in correct:
                rows.append(
                    {"kind": "correct-path", "schema_version": 1,
                     "query_id": query.id, "path": path.to_json()}
                )
        write_jsonl(out_path, rows)
        return [str(out_path)]

    run_stage(manifest, "synth-flaws", stage)
    print(f"synth-flaws: wrote {out_path}")
    return EXIT_OK


def cmd_synth_critiques(args) -> int:
    config, queries, gateway, manifest = _setup(args)
    seed = config.get("seed", 0)
    annotator_id = role_backend(config, "annotator")
    query_map = {q.id: q for q in queries}
    flaws_path = Path(args.run_dir) / "flaws.jsonl"
    out_path = Path(args.run_dir) / "critique-candidates.jsonl"
    strategy_by_hint = {
        flaws_mod.HINT_NONE: critiques_mod.STRATEGY_INCREMENTAL,
        flaws_mod.HINT_REFERENCE: critiques_mod.STRATEGY_INCREMENTAL,
        flaws_mod.HINT_REFERENCE_START: critiques_mod.STRATEGY_INCREMENTAL,
        flaws_mod.HINT_LOCATION_DETAIL: critiques_mod.STRATEGY_HOLISTIC,
        **(config.get("critiques", {}).get("strategy_by_hint", {})),
    }

    def stage():
        rows = []
        for row in read_jsonl(flaws_path):
            if row["kind"] == "flaw":
                record = FlawRecord.from_json(row)
                query = query_map[record.query_id]
                strategy = strategy_by_hint[record.hint]
                fn = (
                    critiques_mod.critique_holistic
                    if strategy == critiques_mod.STRATEGY_HOLISTIC
                    else critiques_mod.critique_incremental
                )
                candidate = fn(
                    gateway, annotator_id, query, record.flawed_path,
                    hint=record.hint, record=record, seed=seed,
                )
            else:
                query = query_map[row["query_id"]]
                path = ReasoningPath.from_json(row["path"])
                candidate = critiques_mod.critique_incremental(
                    gateway, annotator_id, query, path, seed=seed
                )
            if candidate is None:
                continue
            if not critiques_mod.verdict_matches_oracle(candidate, query):
                logger.info("discarding candidate for %s: verdict disagrees with oracle",
                            query.id)
                continue
            rows.append(candidate.to_json())
        write_jsonl(out_path, rows)
        return [str(out_path)]

    run_stage(manifest, "synth-critiques", stage, upstream=["synth-flaws"])
    print(f"synth-critiques: wrote {out_path}")
    return EXIT_OK


def cmd_filter(args) -> int:
    config, queries, gateway, manifest = _setup(args)
    seed = config.get("seed", 0)
    refiner_id = role_backend(config, "refiner")
    query_map = {q.id: q for q in queries}
    block = config.get("filter", {})
    k = args.k or int(block.get("k", critiques_mod.DEFAULT_FILTER_K))
    tau = args.tau if args.tau is not None else float(block.get("tau", critiques_mod.DEFAULT_FILTER_TAU))
    mode = args.mode or block.get("mode", critiques_mod.FILTER_SOFT)
    candidates_path = Path(args.run_dir) / "critique-candidates.jsonl"
    dataset_path = Path(args.run_dir) / "critique-dataset.jsonl"
    stats_path = Path(args.run_dir) / "critique-dataset-stats.json"

    def stage():
        retained = []
        for row in read_jsonl(candidates_path):
            candidate = CritiqueCandidate.from_json(row)
            query = query_map[candidate.query_id]
            if grading.reward(query, candidate.target_path) == 1:
                if critiques_mod.validate_correct_path_critique(candidate, query):
                    retained.append(candidate)
                continue
            verdict = critiques_mod.mc_filter(
                gateway, refiner_id, query, candidate, k=k, tau=tau, mode=mode, seed=seed
            )
            if verdict.retained:
                retained.append(candidate)
        stats = critiques_mod.emit_dataset(retained, dataset_path)
        stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", "utf-8")
        return [str(dataset_path), str(stats_path)]

    run_stage(manifest, "filter", stage, upstream=["synth-critiques"])
    print(f"filter: wrote {dataset_path}")
    print(stats_path.read_text("utf-8").strip())
    return EXIT_OK


def cmd_test_time(args) -> int:
    config, queries, gateway, manifest = _setup(args)
    seed = config.get("seed", 0)
    block = config.get("test_time", {})
    protocol = ProtocolConfig(
        mode=args.mode or block.get("mode", "with-critic-single-round"),
        K=args.K or int(block.get("K", 1)),
        oracle_gated=args.oracle_gated or bool(block.get("oracle_gated", False)),
        context_mode=block.get("context_mode"),
        temperature=float(block.get("temperature", 0.7)),
        rounds=int(block.get("rounds", 1)),
    )
    actor_id = role_backend(config, "actor")
    critic_id = role_backend(config, "critic") if protocol.mode != "response-only" else None
    transcripts = run_protocol(queries, gateway, actor_id, critic_id, protocol, seed=seed)
    report = evaluate(transcripts)
    out_dir = Path(args.report or (Path(args.run_dir) / "report"))
    paths = emit_eval_report(report, out_dir)
    print(f"test-time: accuracy={report.accuracy} -> {out_dir}")
    for p in paths:
        print(f"  {p}")
    return EXIT_OK


def cmd_self_improve(args) -> int:
    config, queries, gateway, manifest = _setup(args)
    seed = config.get("seed", 0)
    block = config.get("self_improve", {})
    loop_config = LoopConfig(
        iterations=args.T or int(block.get("iterations", 3)),
        n_samples=args.N or int(block.get("n_samples", 5)),
        l_critiques=args.L or int(block.get("l_critiques", 2)),
        temperature=float(block.get("temperature", 0.7)),
        beta=float(block.get("beta", 1.0)),
        trainer_hook=block.get("trainer_hook"),
        vanilla=args.vanilla or bool(block.get("vanilla", False)),
        refinements_per_critique=int(block.get("refinements_per_critique", 1)),
        include_new_refinements=bool(block.get("include_new_refinements", False)),
    )
    actor_id = role_backend(config, "actor")
    critic_id = None if loop_config.vanilla else role_backend(config, "critic")
    d_reason = list(read_jsonl(block["d_reason"])) if block.get("d_reason") else []
    d_refine = list(read_jsonl(block["d_refine"])) if block.get("d_refine") else []
    ledgers = run_loop(
        gateway, actor_id, critic_id, queries, loop_config, manifest,
        out_dir=Path(args.run_dir) / "self-improve", seed=seed,
        d_reason=d_reason, d_refine=d_refine,
    )
    paths = emit_ledger_report(ledgers, Path(args.run_dir) / "self-improve")
    print(f"self-improve: {len(ledgers)} iterations")
    for p in paths:
        print(f"  {p}")
    return EXIT_OK


def cmd_self_talk(args) -> int:
    config, queries, gateway, manifest = _setup(args)
    seed = config.get("seed", 0)
    block = config.get("self_talk", {})
    max_iters = args.max_iters or int(block.get("max_iters", selftalk_mod.DEFAULT_MAX_ITERS))
    insert_affirmations = bool(block.get("insert_affirmations", False))
    actor_id = role_backend(config, "actor")
    critic_id = role_backend(config, "critic")
    smoother_id = role_backend(config, "smoother")
    out_path = Path(args.out or (Path(args.run_dir) / "self-talk.jsonl"))

    def stage():
        rows = []
        for query in queries:
            base = flaws_mod.rg1_sample(gateway, actor_id, query, budget=1, seed=seed)
            paths = base.correct + [r.flawed_path for r in base.flawed]
            for path in paths:
                candidate = critiques_mod.critique_incremental(
                    gateway, critic_id, query, path, seed=seed
                )
                if candidate is None:
                    continue
                record = selftalk_mod.build_self_talk_record(
                    gateway, actor_id, critic_id, smoother_id, query, path,
                    candidate.critique, max_iters=max_iters, seed=seed,
                    insert_affirmations=insert_affirmations,
                )
                if record is not None:
                    rows.append(record)
        write_jsonl(out_path, rows)
        return [str(out_path)]

    run_stage(manifest, "self-talk", stage)
    print(f"self-talk: wrote {out_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise ConfigError(f"report input not found: {src}")
    obj = json.loads(src.read_text("utf-8"))
    out_dir = Path(args.out)
    if isinstance(obj, list):  # ledgers
        ledgers = [IterationLedger.from_json(o) for o in obj]
        paths = emit_ledger_report(ledgers, out_dir)
    else:
        raise ConfigError("report input must be a self_improve_ledgers.json file")
    for p in paths:
        print(p)
    return EXIT_OK


_VALIDATORS = {
    "query": Query.from_json,
    "path": ReasoningPath.from_json,
    "critique": Critique.from_json,
    "flaw": FlawRecord.from_json,
    "candidate": CritiqueCandidate.from_json,
}


def cmd_validate(args) -> int:
    validator = _VALIDATORS.get(args.schema)
    if validator is None:
        raise ConfigError(f"unknown schema {args.schema!r}; choose from {sorted(_VALIDATORS)}")
    errors = 0
    rows = 0
    for i, row in enumerate(read_jsonl(args.input)):
        rows += 1
        try:
            validator(row)
        except (KeyError, ValueError, TypeError) as exc:
            errors += 1
            print(f"line {i + 1}: {exc}")
    print(f"validate: {rows} rows, {errors} invalid")
    return EXIT_OK if errors == 0 else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critpipe")
    parser.add_argument("--config", default="critpipe.json", help="config file path")
    parser.add_argument("--run-dir", default="runs/default", help="manifest + artifact directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-flaws", help="construct flawed reasoning paths")
    p.add_argument("--strategy", choices=["rg1", "rg2", "rg3"])
    p.add_argument("--budget", type=int)
    p.set_defaults(fn=cmd_synth_flaws)

    p = sub.add_parser("synth-critiques", help="annotate step-level critiques")
    p.set_defaults(fn=cmd_synth_critiques)

    p = sub.add_parser("filter", help="Monte-Carlo filter critique candidates")
    p.add_argument("--mode", choices=["soft", "hard"])
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("test-time", help="run a critique-supervised protocol")
    p.add_argument("--mode")
    p.add_argument("--K", type=int)
    p.add_argument("--oracle-gated", action="store_true")
    p.add_argument("--report", help="report output directory")
    p.set_defaults(fn=cmd_test_time)

    p = sub.add_parser("self-improve", help="run the exploration/learning loop")
    p.add_argument("--T", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--vanilla", action="store_true")
    p.set_defaults(fn=cmd_self_improve)

    p = sub.add_parser("self-talk", help="build step-level self-talk data")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_self_talk)

    p = sub.add_parser("report", help="emit CSV/JSON reports from saved data")
    p.add_argument("input")
    p.add_argument("--out", default="report")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("validate", help="schema-check a JSONL artifact")
    p.add_argument("input")
    p.add_argument("--schema", required=True)
    p.set_defaults(fn=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResumableInterruption as exc:
        print(f"interrupted (resumable): {exc}", file=sys.stderr)
        return EXIT_RESUMABLE
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except CritpipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
