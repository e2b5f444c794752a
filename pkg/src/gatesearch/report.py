"""Run artifacts: JSON-lines history, sweep summaries, pareto data files."""
from __future__ import annotations

import csv
import json
from pathlib import Path


def append_history(path: str | Path, record: dict) -> None:
    """Append one record; the file stays valid even if the run crashes."""
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_history(path: str | Path, records: list[dict],
                  meta: dict | None = None) -> None:
    Path(path).write_text("")
    if meta:
        append_history(path, {"meta": meta})
    for rec in records:
        append_history(path, rec)


def read_history(path: str | Path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            out.append(json.loads(line))
    return out


SUMMARY_COLUMNS = ("lambda", "cost", "accuracy", "seed")
PARETO_COLUMNS = ("method", "cost", "accuracy", "seed")


def write_summary(path: str | Path, rows: list[dict]) -> None:
    """Sweep summary: one row per (lambda, seed) run."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([row["lambda"], row["cost"], row["accuracy"],
                             row["seed"]])


def write_report(path: str | Path, entries: list[dict]) -> None:
    """Pareto data for external plotting: (method, cost, accuracy, seed)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PARETO_COLUMNS)
        for e in entries:
            writer.writerow([e["method"], e["cost"], e["accuracy"],
                             e.get("seed", "")])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
