# cartlab/failures.py
"""Failure summaries: which checks failed on which traces, and the turns they cite."""

from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import ContractViolation
from .rubric import CART_CHECKS, STORE_CHECKS, RubricSpec, default_rubric
from .tracemodel import LabeledVerdict, Trace, Verdict, VerdictValue

SNIPPET_CHARS = 160


@dataclass(frozen=True)
class FailureSummary:
    trace_id: str
    check_id: str
    domain: str
    turn_indices: Tuple[int, ...]
    evidence: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "check_id": self.check_id,
            "domain": self.domain,
            "turn_indices": list(self.turn_indices),
            "evidence": self.evidence,
        }


def cited_turns(trace: Trace, check_id: str) -> Tuple[int, ...]:
    """Turns a failed check points at."""
    if check_id in STORE_CHECKS:
        first = trace.first_selected_store
        return (first.turn,) if first is not None else ()
    assistant = trace.assistant_turns()
    if check_id in CART_CHECKS:
        acting = [i for i, t in assistant if t.items or t.tool_calls]
        return tuple(acting) or tuple(i for i, _t in assistant[-1:])
    return tuple(i for i, _t in assistant)


def _snippet(trace: Trace, turns: Sequence[int]) -> str:
    if not turns:
        return ""
    turn = trace.turns[turns[-1]]
    text = " ".join(turn.text.split())
    return f"[turn {turns[-1]} {turn.role}] {text[:SNIPPET_CHARS]}"


def identify_failures(
    traces: Sequence[Trace],
    verdicts: Sequence[Union[Verdict, LabeledVerdict]],
    spec: Optional[RubricSpec] = None,
) -> List[FailureSummary]:
    """
    One summary per Fail verdict, ordered by domain weight (heaviest first),
    then trace_id, then rubric order.
    """
    spec = spec or default_rubric()
    if len(traces) != len(verdicts):
        raise ContractViolation(f"{len(traces)} traces but {len(verdicts)} verdicts")

    summaries: List[Tuple[Tuple[float, str, int], FailureSummary]] = []
    order = {cid: i for i, cid in enumerate(spec.check_ids())}
    for trace, verdict in zip(traces, verdicts):
        if isinstance(verdict, LabeledVerdict):
            if verdict.session_id != trace.session_id:
                raise ContractViolation(f"verdict for {verdict.session_id} paired with trace {trace.session_id}")
            verdict = verdict.verdict
        for check_id, value in verdict.items():
            if value is not VerdictValue.FAIL or check_id not in order:
                continue
            check = spec.check(check_id)
            turns = cited_turns(trace, check_id)
            summary = FailureSummary(trace.session_id, check_id, check.domain, turns, _snippet(trace, turns))
            key = (-spec.domain_weights[check.domain], trace.session_id, order[check_id])
            summaries.append((key, summary))
    return [s for _k, s in sorted(summaries, key=lambda pair: pair[0])]


def failure_report(summaries: Sequence[FailureSummary], limit: int = 20) -> str:
    """Plain-text digest of failures for reflective proposers and reports."""
    if not summaries:
        return "No failures."
    counts: Dict[str, int] = {}
    for s in summaries:
        counts[s.check_id] = counts.get(s.check_id, 0) + 1
    lines = ["Failed checks:"]
    lines += [f"- {check_id}: {n} trace(s)" for check_id, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    lines.append("")
    lines.append("Examples:")
    for s in summaries[:limit]:
        lines.append(f"- {s.trace_id} {s.check_id} ({s.domain}): {s.evidence}")
    return "\n".join(lines)


def failed_check_counts(summaries: Sequence[FailureSummary]) -> Mapping[str, int]:
    counts: Dict[str, int] = {}
    for s in summaries:
        counts[s.check_id] = counts.get(s.check_id, 0) + 1
    return counts
