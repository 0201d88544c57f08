# cartlab/artifacts.py
"""Run directory management: traces, reports, curves and append-only logs."""

import csv
import io
import json
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .tracemodel import Trace, serialize_trace

CURVE_HEADER = ("rollouts", "best_heldout_score")


def _dump(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


class RunArtifacts:
    """
    Everything one command writes lives under `out_dir`:

        traces/<session_id>.json, personas/<session_id>.json
        report.json, report.txt
        curve.csv, acceptance.jsonl, best bundle / prompt files

    Outputs carry no timestamps, so reruns with the same inputs are byte-identical.
    """

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)

    def initialize(self) -> "RunArtifacts":
        """Create the run directory structure if it doesn't exist."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "traces").mkdir(exist_ok=True)
        return self

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_trace(self, trace: Trace) -> Path:
        path = self.out_dir / "traces" / f"{trace.session_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(serialize_trace(trace) + "\n")
        return path

    def write_traces(self, traces: Iterable[Trace]) -> List[Path]:
        return [self.write_trace(t) for t in traces]

    def write_json(self, name: str, data: Any) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_dump(data))
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text if text.endswith("\n") else text + "\n")
        return path

    def write_jsonl(self, name: str, records: Sequence[Mapping[str, Any]]) -> Path:
        """Write a whole JSON-lines log, one sorted-key record per line."""
        path = self.path(name)
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
        return path

    def append_jsonl(self, name: str, record: Mapping[str, Any]) -> Path:
        path = self.path(name)
        with path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        return path

    def write_curve(self, curve: Sequence[Tuple[int, float]], name: str = "curve.csv") -> Path:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for rollouts, score in curve:
            writer.writerow((rollouts, f"{score:.6f}"))
        path = self.path(name)
        path.write_text(buffer.getvalue())
        return path

    def write_report(self, report: Mapping[str, Any], summary: Optional[str] = None) -> Path:
        """report.json plus the human-readable report.txt."""
        self.write_json("report.json", report)
        self.write_text("report.txt", summary if summary is not None else format_report(report))
        return self.path("report.json")


def read_curve(path: Union[str, Path]) -> List[Tuple[int, float]]:
    with Path(path).open() as f:
        rows = list(csv.reader(f))
    return [(int(r[0]), float(r[1])) for r in rows[1:]]


def read_jsonl(path: Union[str, Path]) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _format_value(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_report(report: Mapping[str, Any], indent: int = 0) -> str:
    """Indented `key: value` rendering of a (nested) report mapping."""
    lines: List[str] = []
    pad = "  " * indent
    for key in sorted(report):
        value = report[key]
        if isinstance(value, Mapping):
            lines.append(f"{pad}{key}:")
            lines.append(format_report(value, indent + 1))
        elif isinstance(value, list) and value and isinstance(value[0], Mapping):
            lines.append(f"{pad}{key}: {len(value)} entries")
        else:
            lines.append(f"{pad}{key}: {_format_value(value)}")
    return "\n".join(line for line in lines if line)
