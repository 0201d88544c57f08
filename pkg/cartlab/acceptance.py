# cartlab/acceptance.py
"""
Held-out acceptance gate for joint bundle updates.

A proposal whose mean train-batch reward falls below the current bundle's is
logged as "train_reject" and never reaches held-out. The rest are checked in order:
  [1/3] safety: no held-out episode that passed safety may now fail it
  [2/3] gain: mean held-out reward must strictly improve
  [3/3] record the decision
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import ContractViolation

logger = logging.getLogger(__name__)

SAFETY_VETO = "safety_veto"
NO_GAIN = "no_gain"
IMPROVED = "improved"
UNCHANGED = "unchanged"
TRAIN_REGRESSION = "train_regression"

GAIN_EPSILON = 1e-12


@dataclass(frozen=True)
class EpisodeOutcome:
    episode_id: str
    reward: float
    safety_pass: Optional[bool] = None


@dataclass(frozen=True)
class AcceptanceDecision:
    accepted: bool
    reason: str
    baseline_score: float
    heldout_score: float
    regressed_episodes: Tuple[str, ...] = ()


def mean_reward(outcomes: Mapping[str, EpisodeOutcome]) -> float:
    if not outcomes:
        return 0.0
    return sum(o.reward for o in outcomes.values()) / len(outcomes)


def safety_regressions(current: Mapping[str, EpisodeOutcome], proposed: Mapping[str, EpisodeOutcome]) -> List[str]:
    """Episodes whose safety verdict went from pass to fail."""
    return sorted(
        episode_id for episode_id, before in current.items()
        if before.safety_pass is True and proposed[episode_id].safety_pass is False
    )


def decide(current: Mapping[str, EpisodeOutcome], proposed: Mapping[str, EpisodeOutcome]) -> AcceptanceDecision:
    if set(current) != set(proposed):
        raise ContractViolation("current and proposed outcomes cover different held-out episodes")
    baseline, score = mean_reward(current), mean_reward(proposed)

    regressed = safety_regressions(current, proposed)
    if regressed:
        logger.info("[Acceptance] safety veto: %s regressed", ", ".join(regressed))
        return AcceptanceDecision(False, SAFETY_VETO, baseline, score, tuple(regressed))

    if score <= baseline + GAIN_EPSILON:
        logger.info("[Acceptance] rejected: held-out %.4f does not beat %.4f", score, baseline)
        return AcceptanceDecision(False, NO_GAIN, baseline, score)

    logger.info("[Acceptance] accepted: held-out %.4f -> %.4f", baseline, score)
    return AcceptanceDecision(True, IMPROVED, baseline, score)


@dataclass
class AcceptanceLog:
    """Append-only decision log; each record is one JSON line on disk."""

    records: List[Dict[str, Any]] = field(default_factory=list)

    def record(
        self,
        iteration: int,
        proposed_digest: str,
        train_score: Optional[float],
        decision: Optional[AcceptanceDecision],
        rollouts_used: int,
        reason: Optional[str] = None,
        train_baseline: Optional[float] = None,
    ) -> Dict[str, Any]:
        if decision is not None:
            verdict = "accept" if decision.accepted else "reject"
        else:
            verdict = "train_reject" if reason == TRAIN_REGRESSION else "reject"
        entry: Dict[str, Any] = {
            "iteration": iteration,
            "proposed_digest": proposed_digest,
            "train_score": train_score,
            "heldout_score": decision.heldout_score if decision else None,
            "decision": verdict,
            "reason": decision.reason if decision else (reason or NO_GAIN),
            "rollouts_used": rollouts_used,
        }
        if train_baseline is not None:
            entry["train_baseline"] = train_baseline
        if decision and decision.regressed_episodes:
            entry["regressed_episodes"] = list(decision.regressed_episodes)
        self.records.append(entry)
        return entry

    def accepted(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["decision"] == "accept"]

    def vetoes(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["reason"] == SAFETY_VETO]

    def train_rejects(self) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["decision"] == "train_reject"]

    def accepted_scores(self) -> Sequence[float]:
        return [r["heldout_score"] for r in self.accepted()]
