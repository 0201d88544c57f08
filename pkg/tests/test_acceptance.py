# tests/test_acceptance.py
"""Tests for the held-out acceptance gate and its decision log."""

import pytest

from cartlab.acceptance import (
    IMPROVED,
    NO_GAIN,
    SAFETY_VETO,
    TRAIN_REGRESSION,
    UNCHANGED,
    AcceptanceLog,
    EpisodeOutcome,
    decide,
    mean_reward,
    safety_regressions,
)
from cartlab.errors import ContractViolation


def outcomes(*rows):
    return {episode_id: EpisodeOutcome(episode_id, reward, safety) for episode_id, reward, safety in rows}


class TestDecide:
    """Safety first, then strict improvement."""

    def test_improvement_accepted(self):
        decision = decide(
            outcomes(("a", 0.5, True), ("b", 0.9, True)),
            outcomes(("a", 0.8, True), ("b", 0.9, True)),
        )
        assert decision.accepted
        assert decision.reason == IMPROVED
        assert decision.baseline_score == pytest.approx(0.7)
        assert decision.heldout_score == pytest.approx(0.85)

    def test_tie_rejected(self):
        decision = decide(outcomes(("a", 0.9, True)), outcomes(("a", 0.9, True)))
        assert not decision.accepted
        assert decision.reason == NO_GAIN

    def test_safety_veto_beats_gain(self):
        current = outcomes(("milk", 0.9, True), ("chicken", 0.9, True))
        proposed = outcomes(("milk", 1.0, True), ("chicken", 1.0, False))
        decision = decide(current, proposed)
        assert not decision.accepted
        assert decision.reason == SAFETY_VETO
        assert decision.regressed_episodes == ("chicken",)

    def test_already_unsafe_is_not_a_regression(self):
        current = outcomes(("a", 0.0, False), ("b", 0.5, None))
        proposed = outcomes(("a", 0.2, False), ("b", 0.6, False))
        assert safety_regressions(current, proposed) == []
        assert decide(current, proposed).accepted

    def test_mismatched_episodes(self):
        with pytest.raises(ContractViolation):
            decide(outcomes(("a", 0.5, True)), outcomes(("b", 0.5, True)))

    def test_mean_reward_of_nothing(self):
        assert mean_reward({}) == 0.0


class TestAcceptanceLog:
    def test_records(self):
        log = AcceptanceLog()
        vetoed = decide(outcomes(("a", 0.9, True)), outcomes(("a", 1.0, False)))
        improved = decide(outcomes(("a", 0.5, True)), outcomes(("a", 0.75, True)))

        log.record(1, "d1", 0.4, None, 2)
        log.record(2, "d2", 0.9, vetoed, 4)
        log.record(3, "d3", 0.9, improved, 6)

        assert [r["decision"] for r in log.records] == ["reject", "reject", "accept"]
        assert log.records[0]["reason"] == NO_GAIN
        assert log.records[0]["heldout_score"] is None
        assert log.vetoes()[0]["regressed_episodes"] == ["a"]
        assert log.accepted_scores() == [0.75]
        assert "regressed_episodes" not in log.records[2]

    def test_train_gate_rejection_is_explicit(self):
        log = AcceptanceLog()
        entry = log.record(1, "d1", 0.4, None, 3, reason=TRAIN_REGRESSION, train_baseline=0.8)
        log.record(2, "d1", 0.8, None, 3, reason=UNCHANGED)

        assert entry["decision"] == "train_reject"
        assert entry["reason"] == TRAIN_REGRESSION
        assert entry["train_baseline"] == 0.8
        assert entry["heldout_score"] is None
        assert log.train_rejects() == [entry]
        assert log.records[1]["decision"] == "reject"
        assert "train_baseline" not in log.records[1]
        assert log.accepted_scores() == []
