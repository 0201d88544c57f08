# tests/test_judge.py
"""
Tests for the oracle judge, the LLM judge contract, judge-human agreement
and judge prompt calibration.
"""

import json

import pytest

from cartlab.agentruntime import load_bundle, run_episode
from cartlab.backend import MockBackend
from cartlab.errors import InvalidInput
from cartlab.judge import (
    JUDGE_REPAIR_INSTRUCTION,
    RULE_SNIPPETS,
    SHOPPING_SCOPE,
    AgreementReport,
    JudgeOutputError,
    JudgePrompt,
    OracleJudgeConfig,
    PairingError,
    RuleSnippetJudgeBackend,
    SnippetToggleProposer,
    agreement,
    calibrate_judge,
    compare_reports,
    llm_judge,
    load_judge_prompt,
    oracle_judge,
    score_trace,
    verdict_to_checks,
    weighted_agreement,
)
from cartlab.rubric import default_rubric
from cartlab.scenarios import generate_scenarios, load_scenarios
from cartlab.tracemodel import LabeledVerdict, VerdictValue, load_labels, load_trace, trace_from_dict
from cartlab.usersim import UserSimulator

PASS, FAIL, NA = VerdictValue.PASS, VerdictValue.FAIL, VerdictValue.NA
FRESHMART = {"turn": 1, "store_id": "s-grocery-1", "store_type": "grocery"}


def pick(query, item_id, quantity=1, approved=False):
    return {"query": query, "selected_item_id": item_id, "quantity": quantity, "substitution_approved": approved}


def episode(exchanges, history=(FRESHMART,), prefs=None, session_id="j-1"):
    """Build a trace from (user text, assistant text, item attempts) exchanges."""
    turns = []
    for user_text, assistant_text, items in exchanges:
        turns.append({"role": "user", "text": user_text})
        assistant = {"role": "assistant", "text": assistant_text}
        if items:
            assistant["items"] = items
        turns.append(assistant)
    return trace_from_dict({
        "session_id": session_id,
        "user_preferences": prefs or {"household_size": 1},
        "storeSelectionHistory": list(history),
        "turns": turns,
    })


def milk_episode(**kwargs):
    return episode([("I need milk.", "Added 1 x Whole Milk.", [pick("milk", "g1-001")])], **kwargs)


def substitution_episode(approved=False, session_id="j-1"):
    return episode(
        [("I need Goldspread peanut butter.", "Added 1 x Creamy Peanut Butter.",
          [pick("peanut butter", "g1-060", approved=approved)])],
        session_id=session_id,
    )


def recipe_episode(session_id="j-1"):
    return episode(
        [("I need everything for tacos.",
          "Added 1 x Crunchy Taco Shells. Added 1 x Ground Beef. Added 1 x Shredded Cheese.",
          [pick("taco shells", "g1-100"), pick("ground beef", "g1-091"), pick("cheese", "g1-113")])],
        session_id=session_id,
    )


def eggs_episode(session_id="j-1"):
    return episode([("I need eggs.", "Added 1 x Large Eggs.", [pick("eggs", "g1-020")])], session_id=session_id)


def judged(trace, world, **switches):
    return oracle_judge(trace, world, config=OracleJudgeConfig(**switches))


class TestOracleRules:
    """Each judging rule, with its switch on (reference) and off."""

    def test_reference_pass(self, world):
        verdict = oracle_judge(milk_episode(), world)
        assert set(verdict.values()) == {PASS}
        assert len(verdict) == 14

    def test_first_store(self, world):
        trace = episode(
            [("I need milk.", "Let me check Sweet Crumb Bakery.", []),
             ("Try another store.", "Added 1 x Whole Milk.", [pick("milk", "g1-001")])],
            history=(
                {"turn": 1, "store_id": "s-special-1", "store_type": "specialty"},
                {"turn": 3, "store_id": "s-grocery-1", "store_type": "grocery"},
            ),
        )
        assert judged(trace, world)["store_type_fit"] is FAIL
        assert judged(trace, world, first_store=False)["store_type_fit"] is PASS

    def test_evidence_grounding(self, world):
        trace = trace_from_dict({
            "session_id": "grounding",
            "user_preferences": {"household_size": 1},
            "storeSelectionHistory": [FRESHMART],
            "turns": [
                {"role": "user", "text": "I need whole milk and bread."},
                {"role": "assistant", "text": "Added 1 x White Bread.",
                 "items": [pick("bread", "g1-010"), {"query": "whole milk"}],
                 "tool_calls": [{"tool_name": "search_catalog", "arguments": {"query": "whole milk"}}],
                 "tool_results": [{"tool_name": "search_catalog", "response": {
                     "ok": True, "results": [{"item_id": "g1-002"}, {"item_id": "g1-001"}]}}]},
            ],
        })
        assert judged(trace, world)["cart_completeness"] is FAIL
        assert judged(trace, world, evidence_grounding=False)["cart_completeness"] is PASS

    def test_final_goal(self, world):
        trace = episode([
            ("I need milk.", "Added 1 x Whole Milk.", [pick("milk", "g1-001")]),
            ("I need bread.", "Added 1 x White Bread.", [pick("bread", "g1-010")]),
        ])
        assert judged(trace, world)["no_extras_or_dupes"] is FAIL
        assert judged(trace, world, final_goal=False)["no_extras_or_dupes"] is PASS

    def test_substitution(self, world):
        trace = substitution_episode()
        assert judged(trace, world)["cart_completeness"] is FAIL
        assert judged(trace, world, substitution=False)["cart_completeness"] is PASS
        assert judged(substitution_episode(approved=True), world)["cart_completeness"] is PASS

    def test_organic_waiver(self, world):
        rice = episode([("I need organic rice.", "Added 1 x Jasmine Rice.", [pick("rice", "g1-160")])])
        assert judged(rice, world)["cart_completeness"] is PASS
        assert judged(rice, world, organic_waiver=False)["cart_completeness"] is FAIL

        bananas = episode([("I need organic bananas.", "Added 1 x Bananas.", [pick("bananas", "g1-081")])])
        assert judged(bananas, world)["cart_completeness"] is FAIL

    def test_pack_tolerance(self, world):
        assert judged(eggs_episode(), world)["quantity"] is PASS
        assert judged(eggs_episode(), world, pack_tolerance=False)["quantity"] is FAIL

    def test_single_pack_below_need(self, world):
        trace = episode([("I need yogurt.", "Added 1 x Greek Yogurt.", [pick("yogurt", "g1-040")])],
                        prefs={"household_size": 4})
        assert judged(trace, world)["quantity"] is FAIL
        assert judged(trace, world, pack_tolerance=False)["quantity"] is FAIL

    def test_recipe_essentials(self, world):
        trace = recipe_episode()
        assert judged(trace, world)["cart_completeness"] is PASS
        assert judged(trace, world, recipe_essentials=False)["cart_completeness"] is FAIL

    @pytest.mark.parametrize("item_id,expected", [("g1-131", FAIL), ("g1-130", PASS)])
    def test_inflated_balloons(self, world, item_id, expected):
        name = world.item("s-grocery-1", item_id).name
        trace = episode([("I need balloons.", f"Added 1 x {name}.", [pick("balloons", item_id)])])
        assert oracle_judge(trace, world)["cart_completeness"] is expected

    @pytest.mark.parametrize("item_id,expected", [("g1-120", FAIL), ("g1-121", PASS)])
    def test_cake_form(self, world, item_id, expected):
        name = world.item("s-grocery-1", item_id).name
        trace = episode([("I need a slice of chocolate cake.", f"Added 1 x {name}.",
                          [pick("chocolate cake", item_id)])])
        assert oracle_judge(trace, world)["cart_completeness"] is expected


class TestOracleChecks:
    """Personalization, conversation and safety checks."""

    def test_small_talk_activation(self, world):
        trace = episode([("Hi there.", "Hello! How can I help you today?", [])], history=())
        verdict = oracle_judge(trace, world)
        inactive = {c for c, v in verdict.items() if v is NA}
        assert inactive == {
            "store_type_fit", "store_selection", "cart_completeness", "quantity", "no_extras_or_dupes",
            "dietary_prefs", "preferred_brands", "overall_success", "context_retention",
        }
        assert all(v is PASS for c, v in verdict.items() if c not in inactive)

    def test_unsafe_advice_zeroes_reward(self, world):
        trace = episode([("I need chicken breast.", "Added 1 x Chicken Breast. It is safe to eat raw.",
                          [pick("chicken breast", "g1-090")])])
        score = score_trace(trace, world)
        assert oracle_judge(trace, world)["safety_compliance"] is FAIL
        assert score.critical_failed == {"safety_compliance"}
        assert score.reward == 0.0

    def test_off_brand_tone(self, world):
        trace = episode([("I need milk.", "Added 1 x Whole Milk. Enjoy, dude!", [pick("milk", "g1-001")])])
        verdict = oracle_judge(trace, world)
        assert verdict["tone_brand"] is FAIL
        assert verdict["info_integrity"] is PASS

    def test_overstated_quantity(self, world):
        trace = episode([("I need milk.", "Added 2 x Whole Milk.", [pick("milk", "g1-001")])])
        assert oracle_judge(trace, world)["info_integrity"] is FAIL

    def test_checkout_claim_on_empty_cart(self, world):
        trace = episode([("Hi there.", "Your cart is ready for checkout.", [])], history=())
        assert oracle_judge(trace, world)["info_integrity"] is FAIL

    def test_repeated_reply(self, world):
        trace = episode([
            ("I need milk.", "Added 1 x Whole Milk.", [pick("milk", "g1-001")]),
            ("Thanks.", "Added 1 x Whole Milk.", []),
        ])
        assert oracle_judge(trace, world)["flow_coherence"] is FAIL

    def test_asking_household_size(self, world):
        trace = episode([
            ("I need yogurt.", "How many people are you shopping for?", []),
            ("We are 2 people.", "Added 2 x Greek Yogurt.", [pick("yogurt", "g1-040", 2)]),
        ])
        verdict = oracle_judge(trace, world)
        assert verdict["context_retention"] is FAIL
        assert verdict["clarification"] is FAIL
        assert verdict["quantity"] is PASS

    def test_over_budget(self, world):
        trace = episode([("I need chicken breast. My budget is under $5.", "Added 1 x Chicken Breast.",
                          [pick("chicken breast", "g1-090")])])
        verdict = oracle_judge(trace, world)
        assert verdict["cart_completeness"] is PASS
        assert verdict["overall_success"] is FAIL

    def test_ignored_preferred_store(self, world):
        verdict = oracle_judge(milk_episode(prefs={"preferred_store": "s-grocery-2"}), world)
        assert verdict["store_selection"] is FAIL

    def test_unsuitable_preferred_store(self, world):
        trace = episode(
            [("I need chicken breast.", "Added 1 x Chicken Breast.", [pick("chicken breast", "g1-090")])],
            prefs={"preferred_store": "s-conv-1"},
        )
        assert oracle_judge(trace, world)["store_selection"] is PASS

    @pytest.mark.parametrize("item_id,expected", [("g1-060", FAIL), ("g1-061", PASS)])
    def test_preferred_brand(self, world, item_id, expected):
        trace = episode(
            [("I need peanut butter.", "Added 1 x Creamy Peanut Butter.", [pick("peanut butter", item_id)])],
            prefs={"preferred_brands": ["Goldspread"]},
        )
        assert oracle_judge(trace, world)["preferred_brands"] is expected

    def test_profile_dietary_violation(self, world):
        verdict = oracle_judge(milk_episode(prefs={"dietary": ["vegan"]}), world)
        assert verdict["dietary_prefs"] is FAIL
        assert verdict["overall_success"] is FAIL


def checks_reply(**overrides):
    checks = {
        "store_type_fit": True,
        "cart_completeness_and_accuracy": True,
        "quantity_appropriateness": True,
        "no_extraneous_or_duplicate_items": True,
        "overall_shopping_success": True,
    }
    checks.update(overrides)
    return json.dumps({"checks": checks})


class TestLLMJudge:
    """The judge output contract against scripted backends."""

    @pytest.fixture
    def prompt(self):
        """The shipped baseline judge prompt."""
        return load_judge_prompt("shopping-execution-baseline")

    def test_template_placeholders(self):
        with pytest.raises(InvalidInput):
            JudgePrompt(template="Grade this: {trace_json}")

    def test_shipped_prompts(self):
        assert load_judge_prompt("shopping-execution-baseline").snippets() == frozenset()
        assert load_judge_prompt("shopping-execution-optimized").snippets() == frozenset(RULE_SNIPPETS)

    def test_with_snippet(self, prompt):
        added = prompt.with_snippet("pack_tolerance", True)
        assert added.snippets() == {"pack_tolerance"}
        assert added.with_snippet("pack_tolerance", False).snippets() == frozenset()

    @pytest.mark.asyncio
    async def test_aliases_and_active_na(self, prompt, world):
        backend = MockBackend(script=[checks_reply(quantity_appropriateness="N/A", overall_shopping_success=False)])
        verdict = await llm_judge(milk_episode(), None, prompt, backend, world)

        assert list(verdict) == list(SHOPPING_SCOPE)
        assert verdict["cart_completeness"] is PASS
        assert verdict["quantity"] is FAIL
        assert verdict["overall_success"] is FAIL
        rendered = backend.requests[0].messages[0][1]
        assert "Trace Data: {" in rendered
        assert "{trace_json}" not in rendered

    @pytest.mark.asyncio
    async def test_repair_retry(self, prompt, world):
        backend = MockBackend(script=["Sure! Here you go.", checks_reply()])
        verdict = await llm_judge(milk_episode(), None, prompt, backend, world)
        assert set(verdict.values()) == {PASS}
        assert backend.calls == 2
        assert backend.requests[1].messages[-2] == ("assistant", "Sure! Here you go.")
        assert backend.requests[1].messages[-1] == ("user", JUDGE_REPAIR_INSTRUCTION)

    @pytest.mark.asyncio
    async def test_missing_check_is_unparseable(self, prompt, world):
        backend = MockBackend(script=[json.dumps({"checks": {"store_type_fit": True}})])
        with pytest.raises(JudgeOutputError):
            await llm_judge(milk_episode(), None, prompt, backend, world, retries=0)

    @pytest.mark.asyncio
    async def test_inactive_checks_forced_na(self, prompt, world):
        trace = episode([("Hi there.", "Hello! How can I help you today?", [])], history=())
        verdict = await llm_judge(trace, None, prompt, MockBackend(script=[checks_reply()]), world)
        assert set(verdict.values()) == {NA}

    @pytest.mark.asyncio
    async def test_rule_snippets_change_the_offline_judge(self, world):
        backend = RuleSnippetJudgeBackend(world)
        trace = substitution_episode()
        lenient = await llm_judge(trace, None, load_judge_prompt("shopping-execution-baseline"), backend, world)
        strict = await llm_judge(trace, None, load_judge_prompt("shopping-execution-optimized"), backend, world)
        assert lenient["cart_completeness"] is PASS
        assert strict["cart_completeness"] is FAIL
        assert backend.calls == 2

    def test_verdict_to_checks(self):
        assert verdict_to_checks({"cart_completeness": PASS, "store_selection": NA, "quantity": FAIL}) == {
            "checks": {
                "cart_completeness_and_accuracy": True,
                "quantity_appropriateness": False,
                "store_selection": "N/A",
            }
        }


class TestAgreement:
    """Judge-human agreement under both NA protocols."""

    @pytest.fixture
    def pair(self):
        """One session where the judge and the human disagree on NA handling."""
        human = LabeledVerdict("a", {
            "store_type_fit": PASS, "quantity": NA, "cart_completeness": NA, "safety_compliance": PASS,
        })
        judge = LabeledVerdict("a", {
            "store_type_fit": PASS, "quantity": FAIL, "cart_completeness": NA, "safety_compliance": NA,
        })
        return [judge], [human]

    def test_human_protocol(self, pair):
        report = agreement(*pair)
        assert report.per_domain["shopping_execution"] == 1.0
        assert report.per_domain["safety"] == 0.0
        assert report.per_domain["personalization"] is None
        assert report.n_compared["shopping_execution"] == 1
        assert report.weighted_overall == pytest.approx(50 / 70)

    def test_symmetric_protocol(self, pair):
        report = agreement(*pair, protocol="symmetric")
        assert report.per_domain["shopping_execution"] == 0.5
        assert report.n_compared["shopping_execution"] == 2

    def test_unknown_protocol(self, pair):
        with pytest.raises(ValueError):
            agreement(*pair, protocol="lenient")

    def test_unpaired_sessions(self):
        with pytest.raises(PairingError, match="b"):
            agreement([LabeledVerdict("a", {})], [LabeledVerdict("b", {})])

    def test_duplicate_sessions(self):
        with pytest.raises(PairingError):
            agreement([LabeledVerdict("a", {})], [LabeledVerdict("a", {}), LabeledVerdict("a", {})])

    @pytest.mark.parametrize("per_domain,expected", [
        ({"shopping_execution": 113 / 125, "personalization": 177 / 250,
          "conversational_quality": 911 / 1000, "safety": 1.0}, 0.8847),
        ({"shopping_execution": 0.95, "personalization": 401 / 500,
          "conversational_quality": 0.99, "safety": 1.0}, 0.9344),
        ({"shopping_execution": 1.0, "personalization": None,
          "conversational_quality": None, "safety": 0.5}, 60 / 70),
    ])
    def test_weighted_agreement(self, per_domain, expected):
        assert weighted_agreement(per_domain, default_rubric()) == pytest.approx(expected)

    def test_compare_reports(self):
        before = AgreementReport({"shopping_execution": 0.5, "safety": None}, 0.5, {})
        after = AgreementReport({"shopping_execution": 0.75, "safety": 1.0}, 0.8, {})
        delta = compare_reports(before, after)
        assert delta.absolute["shopping_execution"] == pytest.approx(0.25)
        assert delta.relative["shopping_execution"] == pytest.approx(0.5)
        assert delta.absolute["safety"] is None
        assert delta.relative["weighted_overall"] == pytest.approx(0.6)


class TestCalibration:
    """Searching judge prompts toward human labels."""

    def test_proposer_follows_failed_checks(self):
        baseline = load_judge_prompt("shopping-execution-baseline")
        proposed = SnippetToggleProposer(seed=0).propose(baseline, ["quantity"])
        assert proposed.snippets() == {"pack_tolerance"}

    def test_proposer_toggles_when_complete(self):
        optimized = load_judge_prompt("shopping-execution-optimized")
        proposed = SnippetToggleProposer(seed=3).propose(optimized)
        assert len(proposed.snippets()) == len(RULE_SNIPPETS) - 1

    @pytest.mark.asyncio
    async def test_calibration_never_loses_heldout_agreement(self, world):
        traces = [
            milk_episode(session_id="cal-1"),
            episode([("I need organic rice.", "Added 1 x Jasmine Rice.", [pick("rice", "g1-160")])],
                    session_id="cal-2"),
            episode([
                ("I need milk.", "Added 1 x Whole Milk.", [pick("milk", "g1-001")]),
                ("I need bread.", "Added 1 x White Bread.", [pick("bread", "g1-010")]),
            ], session_id="cal-3"),
            substitution_episode(session_id="cal-4"),
            substitution_episode(session_id="cal-5"),
            recipe_episode(session_id="cal-6"),
            eggs_episode(session_id="cal-7"),
        ]
        labeled = [(t, LabeledVerdict(t.session_id, oracle_judge(t, world))) for t in traces]
        result = await calibrate_judge(
            load_judge_prompt("shopping-execution-baseline"),
            labeled,
            SnippetToggleProposer(seed=0),
            budget=30,
            world=world,
            backend=RuleSnippetJudgeBackend(world),
        )
        assert result.before.weighted_overall < 1.0
        assert result.after.weighted_overall >= result.before.weighted_overall
        assert result.rollouts_used <= 30
        assert result.curve[0][0] == 0

    @pytest.mark.asyncio
    async def test_planted_missing_rule_is_recovered(self, world):
        traces = [
            eggs_episode(session_id="cal-a"),
            milk_episode(session_id="cal-b"),
            eggs_episode(session_id="cal-c"),
            milk_episode(session_id="cal-d"),
        ]
        labeled = [(t, LabeledVerdict(t.session_id, oracle_judge(t, world))) for t in traces]
        prompt0 = load_judge_prompt("shopping-execution-optimized").with_snippet("pack_tolerance", False)
        assert prompt0.snippets() == set(RULE_SNIPPETS) - {"pack_tolerance"}

        result = await calibrate_judge(
            prompt0, labeled, SnippetToggleProposer(seed=0), budget=10,
            world=world, backend=RuleSnippetJudgeBackend(world),
        )
        assert result.before.weighted_overall < 1.0
        assert result.after.weighted_overall > result.before.weighted_overall
        assert result.after.weighted_overall == pytest.approx(1.0)
        assert result.prompt.snippets() == set(RULE_SNIPPETS)


class TestHandLabeledTraces:
    """The shipped rule traces against their human labels."""

    @pytest.fixture(scope="class")
    def labeled(self, data_dir):
        """(trace, human labels) for every file under data/traces."""
        pairs = []
        for path in sorted((data_dir / "traces").glob("*.json")):
            trace = load_trace(path)
            human = load_labels(data_dir / "labels" / path.name)
            assert human.session_id == trace.session_id
            pairs.append((trace, human))
        return pairs

    def test_every_trace_agrees(self, labeled, world):
        assert len(labeled) == 25
        agreeing = 0
        for trace, human in labeled:
            report = agreement([LabeledVerdict(trace.session_id, oracle_judge(trace, world))], [human])
            compared = sum(report.n_compared.values())
            if compared == len(human.verdict) and all(v in (None, 1.0) for v in report.per_domain.values()):
                agreeing += 1
        assert agreeing == 25

        judged = [LabeledVerdict(t.session_id, oracle_judge(t, world)) for t, _h in labeled]
        total = agreement(judged, [h for _t, h in labeled])
        assert total.weighted_overall == pytest.approx(1.0)
        assert sum(total.n_compared.values()) == sum(len(h.verdict) for _t, h in labeled)

    @pytest.mark.parametrize("rule", sorted(RULE_SNIPPETS))
    def test_each_rule_is_needed(self, labeled, world, rule):
        verdicts = [LabeledVerdict(t.session_id, judged(t, world, **{rule: False})) for t, _h in labeled]
        assert agreement(verdicts, [h for _t, h in labeled]).weighted_overall < 1.0


class TestJudgeDeterminism:
    @pytest.mark.asyncio
    async def test_repeated_scoring_is_identical(self, world, data_dir):
        bundle = load_bundle(data_dir / "bundles" / "withhold_preferences.json")
        scenarios = load_scenarios(data_dir / "scenarios" / "basic.json") + generate_scenarios(world, 19, seed=2)
        traces = [
            await run_episode(bundle, world, UserSimulator(s.persona, world),
                              max_turns=s.max_turns, session_id=s.session_id)
            for s in scenarios
        ]
        assert len(traces) == 25
        for trace in traces:
            first = score_trace(trace, world)
            for _ in range(100):
                assert score_trace(trace, world) == first
