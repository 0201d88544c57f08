# tests/test_artifacts.py
"""Tests for run directory outputs."""

import json

import pytest

from cartlab.artifacts import RunArtifacts, format_report, read_curve, read_jsonl
from cartlab.tracemodel import load_trace, trace_from_dict


@pytest.fixture
def artifacts(tmp_path):
    return RunArtifacts(tmp_path / "run").initialize()


class TestRunArtifacts:
    """Files written under the run directory."""

    def test_initialize_creates_traces_dir(self, artifacts):
        assert (artifacts.out_dir / "traces").is_dir()
        # Idempotent
        artifacts.initialize()

    def test_write_trace(self, artifacts):
        trace = trace_from_dict({
            "session_id": "s-1",
            "turns": [{"role": "user", "text": "I need milk."}, {"role": "assistant", "text": "Sure."}],
        })
        path = artifacts.write_trace(trace)
        assert path == artifacts.out_dir / "traces" / "s-1.json"
        assert load_trace(path).session_id == "s-1"
        assert path.read_text().endswith("\n")

    def test_json_is_sorted_and_stable(self, artifacts):
        first = artifacts.write_json("report.json", {"b": 1, "a": [1, 2]}).read_text()
        second = artifacts.write_json("report.json", {"a": [1, 2], "b": 1}).read_text()
        assert first == second
        assert list(json.loads(first)) == ["a", "b"]

    def test_curve(self, artifacts):
        path = artifacts.write_curve([(0, 0.5), (12, 0.875)])
        assert path.read_text().splitlines() == [
            "rollouts,best_heldout_score", "0,0.500000", "12,0.875000",
        ]
        assert read_curve(path) == [(0, 0.5), (12, 0.875)]

    def test_jsonl(self, artifacts):
        artifacts.write_jsonl("log.jsonl", [{"step": 1}])
        artifacts.append_jsonl("log.jsonl", {"step": 2, "decision": "accept"})
        assert read_jsonl(artifacts.path("log.jsonl")) == [{"step": 1}, {"decision": "accept", "step": 2}]

    def test_write_report(self, artifacts):
        artifacts.write_report({"command": "simulate", "episodes": 2})
        assert json.loads(artifacts.path("report.json").read_text()) == {"command": "simulate", "episodes": 2}
        assert artifacts.path("report.txt").read_text() == "command: simulate\nepisodes: 2\n"

        artifacts.write_report({"command": "evaluate"}, "Pass rates: none")
        assert artifacts.path("report.txt").read_text() == "Pass rates: none\n"


class TestFormatReport:
    def test_nested_values(self):
        report = {
            "score": 0.5,
            "missing": None,
            "nodes": {"item_selection": {"rollouts_used": 4}},
            "records": [{"step": 1}, {"step": 2}],
            "sessions": ["a", "b"],
        }
        assert format_report(report).splitlines() == [
            "missing: n/a",
            "nodes:",
            "  item_selection:",
            "    rollouts_used: 4",
            "records: 2 entries",
            "score: 0.5000",
            "sessions: ['a', 'b']",
        ]
