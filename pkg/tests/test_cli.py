# tests/test_cli.py
"""End-to-end tests for the cartlab command line, offline backend only."""

import json

import pytest
import yaml

from cartlab.artifacts import read_curve
from cartlab.cli import build_parser, main, split_episodes
from cartlab.errors import InvalidInput
from cartlab.tracemodel import trace_from_dict
from cartlab.usersim import load_persona


@pytest.fixture
def example_config(data_dir):
    return str(data_dir / "configs" / "example.yaml")


class TestParser:
    def test_config_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["simulate"])

    def test_optimize_mode_choices(self, example_config):
        args = build_parser().parse_args(["optimize", "--config", example_config, "--mode", "subagent"])
        assert args.mode == "subagent"
        with pytest.raises(SystemExit):
            build_parser().parse_args(["optimize", "--config", example_config, "--mode", "greedy"])


class TestSimulateAndEvaluate:
    """Rollouts written by simulate feed evaluate."""

    def test_simulate_then_evaluate(self, example_config, tmp_path):
        sim_out = tmp_path / "sim"
        assert main(["simulate", "--config", example_config, "--out", str(sim_out)]) == 0

        trace_files = sorted((sim_out / "traces").glob("*.json"))
        assert len(trace_files) == 6
        report = json.loads((sim_out / "report.json").read_text())
        assert report["episodes"] == 6
        assert report["seed"] == 7

        eval_out = tmp_path / "eval"
        code = main([
            "evaluate", "--config", example_config,
            "--traces", str(sim_out / "traces"), "--out", str(eval_out),
        ])
        assert code == 0
        scored = json.loads((eval_out / "report.json").read_text())
        assert set(scored["traces"]) == {p.stem for p in trace_files}
        assert "shopping_execution" in scored["pass_rates"]["per_domain"]
        assert (eval_out / "report.txt").read_text().startswith("Pass rates over 6 traces:")

    def test_simulate_writes_personas(self, example_config, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--config", example_config, "--out", str(out)]) == 0

        persona_files = sorted((out / "personas").glob("*.json"))
        assert [p.stem for p in persona_files] == sorted(p.stem for p in (out / "traces").glob("*.json"))
        for path in persona_files:
            assert load_persona(path).to_dict() == json.loads(path.read_text())

        consistency = json.loads((out / "report.json").read_text())["persona_consistency"]
        assert set(consistency) == {"goal_recall", "dietary_consistent"}
        assert all(0.0 <= v <= 1.0 for v in consistency.values())

    def test_seed_override_is_reported(self, example_config, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--config", example_config, "--seed", "3", "--generate", "2", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["seed"] == 3
        assert "gen-3-000" in report["sessions"]


class TestOptimize:
    def test_joint_mode(self, example_config, tmp_path):
        out = tmp_path / "opt"
        code = main(["optimize", "--config", example_config, "--budget", "12", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mode"] == "mamut"
        assert report["rollouts_used"] <= 12
        assert report["final_heldout_score"] >= report["initial_heldout_score"]
        assert (out / "best_bundle.json").exists()
        curve = read_curve(out / "curve.csv")
        assert curve[0][1] == pytest.approx(report["initial_heldout_score"], abs=1e-6)


class TestExitCodes:
    """Configuration problems exit with 2."""

    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")]) == 2

    def test_calibration_without_labels(self, example_config, tmp_path):
        assert main(["calibrate-judge", "--config", example_config, "--out", str(tmp_path / "o")]) == 2

    def test_no_traces(self, example_config, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = main(["evaluate", "--config", example_config, "--traces", str(empty), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_no_scenarios(self, data_dir, tmp_path):
        config = tmp_path / "bare.yaml"
        config.write_text(yaml.safe_dump({"world": str(data_dir / "world.json"), "seed": 1}))
        assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "o")]) == 2


class TestSplitEpisodes:
    def _episodes(self, n):
        return [trace_from_dict({"session_id": f"e{i}", "turns": []}) for i in range(n)]

    def test_disjoint_and_seeded(self):
        seed_set, heldout = split_episodes(self._episodes(6), 0.34, seed=7)
        assert len(heldout) == 3
        assert {t.session_id for t in seed_set} | {t.session_id for t in heldout} == {f"e{i}" for i in range(6)}
        assert split_episodes(self._episodes(6), 0.34, seed=7) == (seed_set, heldout)

    def test_keeps_one_seed_episode(self):
        seed_set, heldout = split_episodes(self._episodes(2), 0.9, seed=0)
        assert (len(seed_set), len(heldout)) == (1, 1)

    def test_too_few(self):
        with pytest.raises(InvalidInput):
            split_episodes(self._episodes(1), 0.5, seed=0)
