# tests/test_failures.py
"""Tests for failure summaries and reports."""

import pytest

from cartlab.errors import ContractViolation
from cartlab.failures import cited_turns, failed_check_counts, failure_report, identify_failures
from cartlab.tracemodel import LabeledVerdict, VerdictValue, trace_from_dict

FAIL, PASS = VerdictValue.FAIL, VerdictValue.PASS


def make_trace(session_id, history=True):
    return trace_from_dict({
        "session_id": session_id,
        "user_preferences": {"household_size": 1},
        "storeSelectionHistory": [{"turn": 1, "store_id": "s-grocery-1", "store_type": "grocery"}] if history else [],
        "turns": [
            {"role": "user", "text": "I need milk."},
            {"role": "assistant", "text": "Added 1 x Whole Milk.",
             "items": [{"query": "milk", "selected_item_id": "g1-001", "quantity": 1}]},
            {"role": "user", "text": "That's everything, thanks!"},
            {"role": "assistant", "text": "Thanks for shopping with us.   Goodbye!"},
        ],
    })


class TestIdentifyFailures:
    """Ordering, citations and pairing."""

    def test_ordering(self):
        traces = [make_trace("b"), make_trace("a")]
        verdicts = [
            {"quantity": FAIL, "dietary_prefs": FAIL, "tone_brand": FAIL, "store_type_fit": PASS},
            {"safety_compliance": FAIL, "cart_completeness": FAIL, "made_up_check": FAIL},
        ]
        summaries = identify_failures(traces, verdicts)
        assert [(s.trace_id, s.check_id) for s in summaries] == [
            ("a", "cart_completeness"),
            ("b", "quantity"),
            ("a", "safety_compliance"),
            ("b", "dietary_prefs"),
            ("b", "tone_brand"),
        ]

    def test_citations_and_evidence(self):
        summaries = identify_failures([make_trace("a")], [{"safety_compliance": FAIL, "quantity": FAIL}])
        by_check = {s.check_id: s for s in summaries}
        assert by_check["quantity"].turn_indices == (1,)
        assert by_check["safety_compliance"].turn_indices == (1, 3)
        assert by_check["safety_compliance"].evidence == "[turn 3 assistant] Thanks for shopping with us. Goodbye!"
        assert by_check["safety_compliance"].domain == "safety"

    def test_store_check_cites_first_selection(self):
        assert cited_turns(make_trace("a"), "store_type_fit") == (1,)
        assert cited_turns(make_trace("a", history=False), "store_selection") == ()

    def test_labeled_verdicts(self):
        summaries = identify_failures([make_trace("a")], [LabeledVerdict("a", {"quantity": FAIL})])
        assert summaries[0].check_id == "quantity"
        with pytest.raises(ContractViolation):
            identify_failures([make_trace("a")], [LabeledVerdict("b", {"quantity": FAIL})])

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            identify_failures([make_trace("a")], [])


class TestFailureReport:
    def test_empty(self):
        assert failure_report([]) == "No failures."

    def test_counts_and_examples(self):
        summaries = identify_failures(
            [make_trace("a"), make_trace("b")],
            [{"quantity": FAIL}, {"quantity": FAIL, "tone_brand": FAIL}],
        )
        report = failure_report(summaries, limit=1)
        assert report.splitlines()[:3] == ["Failed checks:", "- quantity: 2 trace(s)", "- tone_brand: 1 trace(s)"]
        assert report.splitlines()[-1].startswith("- a quantity (shopping_execution): [turn 1 assistant]")
        assert failed_check_counts(summaries) == {"quantity": 2, "tone_brand": 1}
