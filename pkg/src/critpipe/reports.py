"""Deterministic CSV/JSON report emission.

Column orders are fixed and rows are sorted, so the same inputs always
produce byte-identical files. Plotting is external; these are the data
series behind the scaling curves, difficulty tables, and loop ledgers.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .selfimprove import IterationLedger
from .testtime import EvalReport


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def emit_eval_report(report: EvalReport, out_dir) -> list[str]:
    """Write the EvalReport as CSV series plus a JSON mirror; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    maj_path = out / "maj_at_k.csv"
    _write_csv(
        maj_path,
        ["K", "maj_at_k"],
        [[k, report.maj_at_k[k]] for k in sorted(report.maj_at_k)],
    )
    paths.append(maj_path)

    pass_path = out / "pass_at_k.csv"
    _write_csv(
        pass_path,
        ["K", "pass_at_k"],
        [[k, report.pass_at_k[k]] for k in sorted(report.pass_at_k)],
    )
    paths.append(pass_path)

    diff_path = out / "per_difficulty.csv"
    _write_csv(
        diff_path,
        ["difficulty", "accuracy"],
        [[lvl, report.per_difficulty_accuracy[lvl]] for lvl in sorted(report.per_difficulty_accuracy)],
    )
    paths.append(diff_path)

    hist_path = out / "correct_fraction_histogram.csv"
    _write_csv(
        hist_path,
        ["query_id", "fraction", "maj_correct"],
        [[h["query_id"], h["fraction"], h["maj_correct"]] for h in report.correct_fraction_histogram],
    )
    paths.append(hist_path)

    json_path = out / "report.json"
    json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", "utf-8")
    paths.append(json_path)
    return [str(p) for p in paths]


def emit_ledger_report(ledgers: Sequence[IterationLedger], out_dir) -> list[str]:
    """Write per-iteration loop ledgers as CSV plus a JSON mirror."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    count_keys = [
        "sampled",
        "correct_initial",
        "incorrect_initial",
        "critiques_issued",
        "refinements_correct",
        "failures",
    ]
    levels = sorted({lvl for lg in ledgers for lvl in lg.per_difficulty_proportions})
    header = ["iteration"] + count_keys + [f"proportion_level_{lvl}" for lvl in levels]
    rows = []
    for lg in ledgers:
        row = [lg.t] + [lg.counts.get(k, 0) for k in count_keys]
        row += [lg.per_difficulty_proportions.get(lvl, 0.0) for lvl in levels]
        rows.append(row)
    csv_path = out / "self_improve_ledgers.csv"
    _write_csv(csv_path, header, rows)
    paths.append(csv_path)

    json_path = out / "self_improve_ledgers.json"
    json_path.write_text(
        json.dumps([lg.to_json() for lg in ledgers], indent=2, sort_keys=True) + "\n", "utf-8"
    )
    paths.append(json_path)
    return [str(p) for p in paths]


def emit_tail_deltas(deltas: Sequence[dict[int, float]], out_dir) -> list[str]:
    """Write per-iteration, per-difficulty proportion deltas."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t, per_level in enumerate(deltas, start=1):
        for lvl in sorted(per_level):
            rows.append([t, lvl, per_level[lvl]])
    csv_path = out / "tail_narrowing_deltas.csv"
    _write_csv(csv_path, ["iteration", "difficulty", "delta"], rows)
    json_path = out / "tail_narrowing_deltas.json"
    json_path.write_text(
        json.dumps(
            [{str(k): v for k, v in sorted(d.items())} for d in deltas], indent=2, sort_keys=True
        )
        + "\n",
        "utf-8",
    )
    return [str(csv_path), str(json_path)]
