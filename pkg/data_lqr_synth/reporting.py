import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from loguru import logger

from data_lqr_synth.config import ExperimentConfig
from data_lqr_synth.harness import MetricsRow, TrialRecord

SUMMARY_FIELDS = ["label", "variant", "num_trials", "mean_snr_db", "S", "M", "V",
                  "num_infeasible", "open_loop_stable", "num_certificate_violations"]


class ReportError(Exception):
    pass


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_summary(rows: Sequence[MetricsRow], path: Path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(SUMMARY_FIELDS)
        for row in rows:
            data = row.model_dump()
            writer.writerow([_format(data[name]) for name in SUMMARY_FIELDS])


def write_trials(trials: Sequence[TrialRecord], path: Path):
    with open(path, "w", encoding="utf-8") as f:
        for record in trials:
            f.write(record.model_dump_json())
            f.write("\n")


def _cell(value: Optional[float], fmt: str) -> str:
    return "-" if value is None else format(value, fmt)


def render_table1(rows: Sequence[MetricsRow]) -> str:
    """
    One line per noise scenario; S/M/V per program, then S/M of the averaged runs.

    Averaged rows carry the scenario label with an "(N=...)" suffix.
    """
    scenarios: Dict[str, Dict[str, MetricsRow]] = {}
    snr: Dict[str, Optional[float]] = {}
    for row in rows:
        base, _, suffix = row.label.partition(" (N=")
        key = "ave" if suffix else row.variant
        scenarios.setdefault(base, {})[key] = row
        if not suffix:
            snr.setdefault(base, row.mean_snr_db)

    columns = []
    for entries in scenarios.values():
        for key in entries:
            if key not in columns:
                columns.append(key)

    header = ["Noise", "SNR (dB)"]
    for key in columns:
        if key == "ave":
            header += ["S ave", "M ave"]
        else:
            header += [f"S {key}", f"M {key}", f"V {key}"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]

    for label, entries in scenarios.items():
        cells = [label, _cell(snr.get(label), ".1f")]
        for key in columns:
            row = entries.get(key)
            width = 2 if key == "ave" else 3
            if row is None:
                cells += ["-"] * width
                continue
            cells += [f"{row.S:.0f}%", _cell(row.M, ".4f")]
            if key != "ave":
                cells.append(f"{row.V:.0f}%")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[MetricsRow], trials: Sequence[TrialRecord], path,
                config: Optional[ExperimentConfig] = None) -> List[Path]:
    """
    Write summary.csv, trials.jsonl, table1.md and run.json under ``path``.

    trials.jsonl carries no timestamp, so identical configurations give
    identical files; the timestamp lives in run.json.

    Raises:
        ReportError: the directory or a file cannot be written.
    """
    out = Path(path)
    written = []
    target = out
    try:
        out.mkdir(parents=True, exist_ok=True)

        target = out / "summary.csv"
        write_summary(rows, target)
        written.append(target)

        target = out / "trials.jsonl"
        write_trials(trials, target)
        written.append(target)

        target = out / "table1.md"
        target.write_text(render_table1(rows), encoding="utf-8")
        written.append(target)

        target = out / "run.json"
        meta = {
            "created": datetime.now(timezone.utc).isoformat(),
            "num_rows": len(rows),
            "num_trials": len(trials),
            "config": None if config is None else json.loads(config.model_dump_json()),
        }
        target.write_text(json.dumps(meta, indent=2), encoding="utf-8")
        written.append(target)
    except OSError as e:
        raise ReportError(f"cannot write {target}: {e}") from e

    logger.info(f"Report written to {out.resolve()}")
    return written
