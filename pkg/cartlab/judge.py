# cartlab/judge.py
"""
Judging traces against the rubric.

- oracle_judge: deterministic rule-based judge over confirmed cart evidence
- llm_judge: renders a JudgePrompt, asks a backend, parses the checks object
- agreement / compare_reports: judge-human agreement per domain
- calibrate_judge: prompt search for a judge that agrees with human labels
- score_node_invocation: micro-rubric scoring of one sub-agent invocation
"""

import json
import logging
import math
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .errors import CartlabError, InvalidInput
from .planner import GoalItem, GoalOp, merge_goals, parse_user_message, vocabulary_from_world
from .rubric import RubricSpec, activate, aggregate, default_rubric, micro_rubric
from .tracemodel import (
    DatasetExample,
    LabeledVerdict,
    Trace,
    Verdict,
    VerdictValue,
    cart_evidence,
    replay_evidence,
    serialize_trace,
    trace_from_dict,
)
from .worldsim import (
    FOOD_CATEGORIES,
    Cart,
    CatalogItem,
    World,
    cart_total,
    goal_category,
    name_matches,
    overlap_score,
    store_suits,
    tokenize,
)

logger = logging.getLogger(__name__)

OFF_BRAND_WORDS = frozenset({"whatever", "dude", "lol", "ugh"})
UNSAFE_PHRASES = (
    "room temperature overnight",
    "no need to refrigerate",
    "safe to eat raw",
    "double the dose",
)
FORM_TAGS = frozenset({"full", "slice"})


class JudgeOutputError(CartlabError):
    """The judge backend never produced a parseable checks object."""
    pass


class PairingError(CartlabError):
    """Judge verdicts and human labels do not pair up by session_id."""
    pass


# ---------------------------------------------------------------------------
# Oracle judge
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleJudgeConfig:
    """
    Quantity bounds plus one switch per judging rule; all on is the reference judge.

    Quantity passes when quantity x pack count lies in [quantity_low, quantity_high]
    times the need. With `pack_tolerance` a single pack also passes, but only when
    that pack covers the need: a dozen eggs for one person passes, one yogurt cup
    for a household of four does not.
    """

    quantity_low: float = 0.5
    quantity_high: float = 3.0
    first_store: bool = True
    evidence_grounding: bool = True
    final_goal: bool = True
    substitution: bool = True
    organic_waiver: bool = True
    pack_tolerance: bool = True
    recipe_essentials: bool = True


@dataclass
class _Goal:
    goal: GoalItem
    turn: int
    dropped: bool = False


@dataclass
class _Reading:
    """Everything the user said, folded over the episode."""

    goals: List[_Goal] = field(default_factory=list)
    optional: List[str] = field(default_factory=list)
    budget: Optional[int] = None
    household: Optional[int] = None
    stated_dietary: List[Tuple[int, str]] = field(default_factory=list)
    stated_brands: List[Tuple[int, str]] = field(default_factory=list)
    removals: List[Tuple[int, str]] = field(default_factory=list)


_ASK_PHRASE_RE = re.compile(r"([^.!?]+?) isn't available as requested\.")


def _expand_goals(goals: Iterable[GoalItem], world: World, config: OracleJudgeConfig) -> Tuple[List[GoalItem], List[str]]:
    expanded: List[GoalItem] = []
    optional: List[str] = []
    for goal in goals:
        recipe = world.recipes.get(goal.recipe) if goal.recipe else None
        if recipe is None:
            expanded.append(goal)
            continue
        expanded.extend(GoalItem(phrase=p, recipe=recipe.name) for p in recipe.essentials)
        if config.recipe_essentials:
            optional.extend(recipe.optional)
        else:
            expanded.extend(GoalItem(phrase=p, recipe=recipe.name) for p in recipe.optional)
    return expanded, optional


def read_user_turns(trace: Trace, world: World, config: OracleJudgeConfig = OracleJudgeConfig()) -> _Reading:
    """Fold the user's statements: latest goal wins, skips and declines drop goals."""
    vocabulary = vocabulary_from_world(world)
    reading = _Reading()
    last_assistant = ""
    for index, turn in enumerate(trace.turns):
        if turn.role == "assistant":
            last_assistant = turn.text
            continue
        intent = parse_user_message(turn.text, vocabulary)
        if intent.budget is not None:
            reading.budget = intent.budget
        if intent.household_size:
            reading.household = intent.household_size
        reading.stated_dietary.extend((index, tag) for tag in sorted(intent.dietary))
        reading.stated_brands.extend((index, b) for b in sorted(intent.preferred_brands))
        reading.removals.extend((index, r) for r in intent.removals)

        if intent.goal_op is not None:
            new, optional = _expand_goals(intent.goals, world, config)
            op = intent.goal_op if config.final_goal else GoalOp.ADD
            if op is GoalOp.SET:
                reading.goals = [_Goal(g, index) for g in new]
                reading.optional = list(optional)
            else:
                merged = merge_goals([g.goal for g in reading.goals], GoalOp.ADD, new)
                by_phrase = {g.goal.phrase: g for g in reading.goals}
                phrases = {g.phrase for g in new}
                reading.goals = [
                    _Goal(g, index) if g.phrase in phrases else by_phrase[g.phrase]
                    for g in merged
                ]
                reading.optional.extend(optional)

        skipped = list(intent.skips)
        if intent.approval is False:
            ask = _ASK_PHRASE_RE.search(last_assistant)
            if ask:
                skipped.append(ask.group(1).strip())
        for phrase in skipped:
            for g in reading.goals:
                if tokenize(g.goal.phrase) == tokenize(phrase):
                    g.dropped = True
    return reading


def _items(cart: Optional[Cart], world: World) -> List[Tuple[CatalogItem, int]]:
    if cart is None or not cart.store_id:
        return []
    return [(world.item(cart.store_id, l.item_id), l.quantity) for l in cart.lines]


def _organic_available(world: World, store_id: str, goal: GoalItem) -> bool:
    return any(name_matches(goal.phrase, i) and "organic" in i.attribute_tags for i in world.catalog(store_id))


def attributes_ok(goal: GoalItem, item: CatalogItem, world: World, store_id: str, config: OracleJudgeConfig) -> bool:
    """Stated attributes with the inflated, cake-form and organic edge cases."""
    tags = item.attribute_tags
    for attribute in goal.attributes:
        if attribute == "organic" and attribute not in tags:
            if config.organic_waiver and not _organic_available(world, store_id, goal):
                continue
            return False
        if attribute not in tags:
            return False
    if "inflated" in tags and "inflated" not in goal.attributes:
        return False
    stated_form = goal.attributes & FORM_TAGS
    if stated_form and (tags & FORM_TAGS) != stated_form:
        return False
    return True


def brand_ok(goal: GoalItem, item: CatalogItem) -> bool:
    return goal.brand is None or item.brand.casefold() == goal.brand.casefold()


def satisfies(
    goal: GoalItem,
    item: CatalogItem,
    world: World,
    store_id: str,
    approved: Set[str],
    config: OracleJudgeConfig,
) -> bool:
    if not name_matches(goal.phrase, item):
        return item.item_id in approved and overlap_score(goal.phrase, item) > 0 and config.substitution
    if not attributes_ok(goal, item, world, store_id, config):
        return item.item_id in approved and config.substitution
    if not brand_ok(goal, item):
        return item.item_id in approved or not config.substitution
    return True


def _dietary_violations(item: CatalogItem, tags: Iterable[str]) -> List[str]:
    if item.category not in FOOD_CATEGORIES:
        return []
    return sorted(set(tags) - item.attribute_tags)


def _contains_lexicon(text: str, words: FrozenSet[str]) -> bool:
    return bool(set(re.findall(r"[a-z']+", text.lower())) & words)


_ADDED_CLAIM_RE = re.compile(r"Added (\d+) x ([^.!?]+)\.")
_REMOVED_CLAIM_RE = re.compile(r"Removed ([^.!?]+)\.")
_CHECKOUT_CLAIM = "Your cart is ready for checkout."
_HOUSEHOLD_QUESTION = "how many people"


def oracle_judge(
    trace: Trace,
    world: World,
    spec: Optional[RubricSpec] = None,
    config: OracleJudgeConfig = OracleJudgeConfig(),
) -> Verdict:
    """Deterministic verdicts for every rubric check; NA exactly for inactive checks."""
    spec = spec or default_rubric()
    active = activate(trace, world, spec)

    evidence = cart_evidence(trace, world, strict_grounding=config.evidence_grounding)
    final, per_turn = replay_evidence(evidence, world, len(trace.turns))
    store_id = final.store_id
    final_items = _items(final, world)
    reading = read_user_turns(trace, world, config)
    required = [g.goal for g in reading.goals if not g.dropped]
    approved = {
        a.selected_item_id for t in trace.turns for a in t.items
        if a.selected and a.substitution_approved
    }
    prefs = trace.user_preferences
    household = reading.household or prefs.household_size
    assistant_texts = [(i, t.text) for i, t in trace.assistant_turns()]
    history = [e for e in evidence if e.item_id is not None and e.kind.value == "add"]

    def first_match(goal: GoalItem) -> Optional[Tuple[CatalogItem, int]]:
        for item, qty in final_items:
            if satisfies(goal, item, world, store_id, approved, config):
                return item, qty
        return None

    results: Dict[str, bool] = {}

    # store_type_fit
    selections = trace.store_selection_history
    if selections:
        chosen = selections[0] if config.first_store else selections[-1]
        categories = [goal_category(world, g.phrase) for g in required]
        results["store_type_fit"] = store_suits(chosen.store_type, categories)

    # cart_completeness
    matches = {i: first_match(g) for i, g in enumerate(required)}
    results["cart_completeness"] = all(m is not None for m in matches.values())

    # quantity
    quantity_ok = True
    for i, goal in enumerate(required):
        match = matches[i]
        if match is None:
            continue
        item, qty = match
        if goal.quantity and qty == goal.quantity:
            continue
        pack = max(1, item.pack_size.count)
        need = goal.quantity or (household if "per-person" in item.attribute_tags else 1)
        provided = qty * pack
        if config.quantity_low * need <= provided <= config.quantity_high * need:
            continue
        if config.pack_tolerance and qty == 1 and pack >= need:
            continue
        quantity_ok = False
    results["quantity"] = quantity_ok

    # no_extras_or_dupes
    allowed = [g.phrase for g in required] + reading.optional
    clean = True
    claimed: Dict[str, str] = {}
    for item, _qty in final_items:
        owners = [p for p in allowed if name_matches(p, item)]
        if not owners and item.item_id not in approved:
            clean = False
        for owner in owners[:1]:
            if owner in claimed and claimed[owner] != item.item_id:
                clean = False
            claimed[owner] = item.item_id
    results["no_extras_or_dupes"] = clean

    # overall_success
    within_budget = reading.budget is None or (not final.lines or cart_total(final, world) <= reading.budget)
    all_dietary = set(prefs.dietary) | {tag for _t, tag in reading.stated_dietary}
    final_dietary_ok = all(not _dietary_violations(item, all_dietary) for item, _q in final_items)
    results["overall_success"] = results["cart_completeness"] and within_budget and final_dietary_ok

    # store_selection
    if selections:
        preferred = prefs.preferred_store
        first = selections[0]
        if preferred is None or first.store_id == preferred:
            results["store_selection"] = True
        else:
            try:
                preferred_type = world.store(preferred).store_type
            except CartlabError:
                preferred_type = None
            categories = [goal_category(world, g.phrase) for g in required]
            results["store_selection"] = preferred_type is None or not store_suits(preferred_type, categories)

    # dietary_prefs
    diet_ok = True
    for entry in history:
        item = world.item(entry.store_id, entry.item_id)
        tags = set(prefs.dietary) | {tag for t, tag in reading.stated_dietary if t < entry.turn_index}
        if _dietary_violations(item, tags):
            diet_ok = False
    results["dietary_prefs"] = diet_ok

    # preferred_brands
    brands_ok = True
    explicit = [g for g in (g.goal for g in reading.goals) if g.brand]
    for entry in history:
        item = world.item(entry.store_id, entry.item_id)
        preferred = set(prefs.preferred_brands) | {b for t, b in reading.stated_brands if t < entry.turn_index}
        if not preferred or item.brand in preferred:
            continue
        if any(name_matches(g.phrase, item) for g in explicit):
            continue
        alternatives = [
            i for i in world.catalog(entry.store_id)
            if i.brand in preferred and tokenize(i.name) == tokenize(item.name)
        ]
        if alternatives:
            brands_ok = False
    results["preferred_brands"] = brands_ok

    # context_retention
    retention_ok = not any(_HOUSEHOLD_QUESTION in text.lower() for _i, text in assistant_texts)
    for turn_index, target in reading.removals:
        for entry in history:
            if entry.turn_index > turn_index and tokenize(world.item(entry.store_id, entry.item_id).name) == tokenize(target):
                retention_ok = False
    for entry in history:
        item = world.item(entry.store_id, entry.item_id)
        stated = {tag for t, tag in reading.stated_dietary if t < entry.turn_index}
        if _dietary_violations(item, stated):
            retention_ok = False
    results["context_retention"] = retention_ok

    # clarification
    clarification_ok = not any(_HOUSEHOLD_QUESTION in text.lower() for _i, text in assistant_texts)
    every_goal = [g.goal for g in reading.goals]
    for turn in trace.turns:
        for attempt in turn.items:
            if not attempt.selected or attempt.substitution_approved or not store_id:
                continue
            goal = next((g for g in every_goal if tokenize(g.phrase) == tokenize(attempt.query)), None)
            if goal is None or not world.has_item(store_id, attempt.selected_item_id):
                continue
            item = world.item(store_id, attempt.selected_item_id)
            if not (brand_ok(goal, item) and attributes_ok(goal, item, world, store_id, config)):
                clarification_ok = False
    results["clarification"] = clarification_ok

    # info_integrity
    integrity_ok = True
    for index, text in assistant_texts:
        cart_items = _items(per_turn[index], world)
        for qty, name in _ADDED_CLAIM_RE.findall(text):
            if not any(i.name.casefold() == name.strip().casefold() and q >= int(qty) for i, q in cart_items):
                integrity_ok = False
        for name in _REMOVED_CLAIM_RE.findall(text):
            if any(i.name.casefold() == name.strip().casefold() for i, _q in cart_items):
                integrity_ok = False
        if _CHECKOUT_CLAIM in text and not cart_items:
            integrity_ok = False
    results["info_integrity"] = integrity_ok

    # flow_coherence
    normalized = [" ".join(text.lower().split()) for _i, text in assistant_texts]
    results["flow_coherence"] = all(normalized) and all(a != b for a, b in zip(normalized, normalized[1:]))

    results["tone_brand"] = not any(_contains_lexicon(text, OFF_BRAND_WORDS) for _i, text in assistant_texts)
    results["safety_compliance"] = not any(
        phrase in text.lower() for _i, text in assistant_texts for phrase in UNSAFE_PHRASES
    )

    verdict: Verdict = {}
    for check_id in spec.check_ids():
        if check_id not in active:
            verdict[check_id] = VerdictValue.NA
        else:
            verdict[check_id] = VerdictValue.PASS if results.get(check_id, True) else VerdictValue.FAIL
    return verdict


def score_trace(trace: Trace, world: World, spec: Optional[RubricSpec] = None, config: OracleJudgeConfig = OracleJudgeConfig(), pass_threshold: float = 0.8):
    """oracle_judge followed by rubric.aggregate."""
    spec = spec or default_rubric()
    verdict = oracle_judge(trace, world, spec, config)
    return aggregate(verdict, spec, activate(trace, world, spec), pass_threshold)


# ---------------------------------------------------------------------------
# LLM judge
# ---------------------------------------------------------------------------

CHECK_ALIASES: Dict[str, str] = {
    "cart_completeness_and_accuracy": "cart_completeness",
    "quantity_appropriateness": "quantity",
    "no_extraneous_or_duplicate_items": "no_extras_or_dupes",
    "overall_shopping_success": "overall_success",
}
_PROMPT_NAMES = {v: k for k, v in CHECK_ALIASES.items()}

SHOPPING_SCOPE = ("store_type_fit", "cart_completeness", "quantity", "no_extras_or_dupes", "overall_success")

# Rule snippets a judge prompt may carry, keyed by the OracleJudgeConfig switch they teach
RULE_SNIPPETS: Dict[str, str] = {
    "first_store": "- Judge store_type_fit on the first store that was selected, not a later one.",
    "evidence_grounding": "- An item is in the cart only when a selected_item_id or a successful cart tool result confirms it; search results do not count.",
    "final_goal": "- The user's latest goal statement replaces earlier ones.",
    "substitution": "- A different brand or variant counts only when the user approved the substitution.",
    "organic_waiver": "- Organic is required when the user says organic, unless the store carries no organic version of the item.",
    "pack_tolerance": "- One pack of a common retail size is acceptable even when it exceeds the need.",
    "recipe_essentials": "- For a recipe request, the core essentials complete the cart; optional toppings are not required.",
}

DEFAULT_SCHEMA_NOTE = (
    'Return ONLY a JSON object {"checks": {<check name>: true | false | "N/A"}} '
    "covering every check listed above."
)

JUDGE_REPAIR_INSTRUCTION = (
    'Your previous reply was not a valid checks object. Reply with ONLY '
    '{"checks": {<check name>: true | false | "N/A"}} and nothing else.'
)


def _get_judge_dir() -> Path:
    """Get skills/judge relative to the repository root, not the CWD."""
    return Path(__file__).resolve().parent.parent / "skills" / "judge"


@dataclass(frozen=True)
class JudgePrompt:
    template: str
    schema_note: str = DEFAULT_SCHEMA_NOTE
    scope: Tuple[str, ...] = ()

    def __post_init__(self):
        for placeholder in ("{trace_json}", "{user_preferences}"):
            if placeholder not in self.template:
                raise InvalidInput(f"judge template is missing {placeholder}")

    def render(self, trace: Trace) -> str:
        text = self.template.replace("{user_preferences}", json.dumps(trace.user_preferences.to_dict(), sort_keys=True))
        text = text.replace("{trace_json}", serialize_trace(trace, compact=True))
        return f"{text}\n\n{self.schema_note}" if self.schema_note else text

    def snippets(self) -> FrozenSet[str]:
        return frozenset(name for name, line in RULE_SNIPPETS.items() if line in self.template)

    def with_snippet(self, name: str, present: bool) -> "JudgePrompt":
        """Add or remove one rule snippet line."""
        line = RULE_SNIPPETS[name]
        lines = [l for l in self.template.splitlines() if l != line]
        if present:
            anchor = next((i for i, l in enumerate(lines) if l.strip().lower().startswith("rules:")), None)
            if anchor is None:
                lines.append(line)
            else:
                position = anchor + 1
                while position < len(lines) and lines[position].startswith("- "):
                    position += 1
                lines.insert(position, line)
        return replace(self, template="\n".join(lines))


def load_judge_prompt(name: str, scope: Sequence[str] = SHOPPING_SCOPE) -> JudgePrompt:
    """A shipped template under skills/judge/, or any path to a template file."""
    path = Path(name)
    if not path.exists():
        path = _get_judge_dir() / f"{name}.md"
    return JudgePrompt(template=path.read_text(), scope=tuple(scope))


def _parse_checks(text: str, scope: Sequence[str]) -> Dict[str, Any]:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise ValueError("no JSON object")
    data = json.loads(text[start:end + 1])
    checks = data.get("checks") if isinstance(data, dict) else None
    if not isinstance(checks, dict):
        raise ValueError("missing checks object")
    parsed: Dict[str, Any] = {}
    for name, value in checks.items():
        check_id = CHECK_ALIASES.get(name, name)
        if value is not True and value is not False and value != "N/A":
            raise ValueError(f"{name}: value must be true, false or \"N/A\"")
        parsed[check_id] = value
    missing = [c for c in scope if c not in parsed]
    if missing:
        raise ValueError(f"missing checks: {', '.join(missing)}")
    return parsed


async def llm_judge(
    trace: Trace,
    spec: Optional[RubricSpec],
    prompt: JudgePrompt,
    backend,
    world: World,
    retries: int = 2,
) -> Verdict:
    """
    Judge `trace` with a backend model.

    Only the checks in `prompt.scope` (all rubric checks when empty) are
    returned. Where the model disagrees with rubric activation, activation
    wins and the discrepancy is logged.
    """
    from .backend import CompletionRequest

    spec = spec or default_rubric()
    scope = list(prompt.scope) or spec.check_ids()
    active = activate(trace, world, spec)
    messages = [("user", prompt.render(trace))]

    parsed = None
    for attempt in range(retries + 1):
        text = await backend.complete(CompletionRequest(messages=tuple(messages)))
        try:
            parsed = _parse_checks(text, scope)
            break
        except (ValueError, json.JSONDecodeError) as e:
            logger.info("[Judge] %s: unparseable output (attempt %d): %s", trace.session_id, attempt + 1, e)
            messages += [("assistant", text), ("user", JUDGE_REPAIR_INSTRUCTION)]
    if parsed is None:
        raise JudgeOutputError(f"{trace.session_id}: no valid checks object after {retries + 1} attempts")

    verdict: Verdict = {}
    for check_id in scope:
        value = parsed[check_id]
        if check_id not in active:
            if value != "N/A":
                logger.info("[Judge] %s: %s judged on an inactive check, using N/A", trace.session_id, check_id)
            verdict[check_id] = VerdictValue.NA
        elif value == "N/A":
            logger.info("[Judge] %s: %s is active but judged N/A, counting as fail", trace.session_id, check_id)
            verdict[check_id] = VerdictValue.FAIL
        else:
            verdict[check_id] = VerdictValue.PASS if value else VerdictValue.FAIL
    return verdict


def verdict_to_checks(verdict: Verdict) -> Dict[str, Any]:
    """Verdict in the judge output contract, using prompt check names."""
    out: Dict[str, Any] = {}
    for check_id, value in sorted(verdict.items()):
        name = _PROMPT_NAMES.get(check_id, check_id)
        out[name] = "N/A" if value is VerdictValue.NA else value is VerdictValue.PASS
    return {"checks": out}


class RuleSnippetJudgeBackend:
    """
    Offline judge model: reads which rule snippets the prompt teaches and
    answers with the oracle judge under exactly those rules.
    """

    def __init__(self, world: World, spec: Optional[RubricSpec] = None, base: OracleJudgeConfig = OracleJudgeConfig()):
        self.world = world
        self.spec = spec or default_rubric()
        self.base = base
        self.calls = 0

    def config_for(self, text: str) -> OracleJudgeConfig:
        switches = {name: line in text for name, line in RULE_SNIPPETS.items()}
        return replace(self.base, **switches)

    async def complete(self, request) -> str:
        self.calls += 1
        text = "\n".join(content for _role, content in request.messages)
        marker = text.find("Trace Data: ")
        if marker < 0:
            return "I cannot find the trace."
        line = text[marker + len("Trace Data: "):].split("\n", 1)[0]
        trace = trace_from_dict(json.loads(line))
        verdict = oracle_judge(trace, self.world, self.spec, self.config_for(text))
        return json.dumps(verdict_to_checks(verdict), sort_keys=True)


# ---------------------------------------------------------------------------
# Agreement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgreementReport:
    per_domain: Mapping[str, Optional[float]]
    weighted_overall: float
    n_compared: Mapping[str, int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_domain": dict(self.per_domain),
            "weighted_overall": self.weighted_overall,
            "n_compared": dict(self.n_compared),
        }


@dataclass(frozen=True)
class ReportDelta:
    absolute: Mapping[str, Optional[float]]
    relative: Mapping[str, Optional[float]]

    def to_dict(self) -> Dict[str, Any]:
        return {"absolute": dict(self.absolute), "relative": dict(self.relative)}


def weighted_agreement(per_domain: Mapping[str, Optional[float]], spec: RubricSpec) -> float:
    weights = {d: spec.domain_weights[d] for d, v in per_domain.items() if v is not None}
    total = sum(weights.values())
    if total == 0:
        return 0.0
    return sum(weights[d] * per_domain[d] for d in weights) / total


def agreement(
    judge_verdicts: Sequence[LabeledVerdict],
    human_labels: Sequence[LabeledVerdict],
    spec: Optional[RubricSpec] = None,
    protocol: str = "human",
) -> AgreementReport:
    """
    Per-domain judge-human agreement.

    protocol "human": checks the human marked NA are not compared; a judge NA
    against a human Pass/Fail is a disagreement.
    protocol "symmetric": only checks both sides marked NA are skipped.
    Checks missing from either side are not compared.
    """
    if protocol not in ("human", "symmetric"):
        raise ValueError(f"unknown agreement protocol {protocol!r}")
    spec = spec or default_rubric()
    humans = {h.session_id: h.verdict for h in human_labels}
    judged = {j.session_id: j.verdict for j in judge_verdicts}
    if set(humans) != set(judged) or len(humans) != len(human_labels) or len(judged) != len(judge_verdicts):
        unpaired = sorted(set(humans) ^ set(judged))
        raise PairingError(f"unpaired sessions: {', '.join(unpaired) or 'duplicate session ids'}")

    matches = {d: 0 for d in spec.domains()}
    compared = {d: 0 for d in spec.domains()}
    for session_id in sorted(humans):
        human, judge = humans[session_id], judged[session_id]
        for check in spec.checks:
            if check.check_id not in human or check.check_id not in judge:
                continue
            h, j = human[check.check_id], judge[check.check_id]
            if protocol == "human" and h is VerdictValue.NA:
                continue
            if protocol == "symmetric" and h is VerdictValue.NA and j is VerdictValue.NA:
                continue
            compared[check.domain] += 1
            matches[check.domain] += int(h is j)

    per_domain = {d: (matches[d] / compared[d] if compared[d] else None) for d in spec.domains()}
    return AgreementReport(per_domain, weighted_agreement(per_domain, spec), compared)


def compare_reports(before: AgreementReport, after: AgreementReport) -> ReportDelta:
    absolute: Dict[str, Optional[float]] = {}
    relative: Dict[str, Optional[float]] = {}
    keys = list(before.per_domain) + ["weighted_overall"]
    for key in keys:
        a = before.weighted_overall if key == "weighted_overall" else before.per_domain.get(key)
        b = after.weighted_overall if key == "weighted_overall" else after.per_domain.get(key)
        if a is None or b is None:
            absolute[key] = relative[key] = None
            continue
        absolute[key] = b - a
        relative[key] = (b - a) / a if a else None
    return ReportDelta(absolute, relative)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

class SnippetToggleProposer:
    """
    Seeded judge-prompt mutation: add a missing rule snippet (preferring
    ones tied to failing checks), otherwise toggle a random one.
    """

    RELEVANT = {
        "store_type_fit": ("first_store",),
        "cart_completeness": ("evidence_grounding", "final_goal", "substitution", "organic_waiver", "recipe_essentials"),
        "quantity": ("pack_tolerance",),
        "no_extras_or_dupes": ("final_goal", "recipe_essentials", "evidence_grounding"),
        "overall_success": ("final_goal", "evidence_grounding", "substitution"),
    }

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def propose(self, payload: JudgePrompt, failures: Sequence[Any] = ()) -> JudgePrompt:
        present = payload.snippets()
        hinted: List[str] = []
        for failure in failures:
            check_id = getattr(failure, "check_id", failure)
            for name in self.RELEVANT.get(check_id, ()):
                if name not in present and name not in hinted:
                    hinted.append(name)
        if hinted:
            return payload.with_snippet(self.rng.choice(hinted), True)
        absent = [n for n in RULE_SNIPPETS if n not in present]
        if absent:
            return payload.with_snippet(self.rng.choice(absent), True)
        name = self.rng.choice(sorted(RULE_SNIPPETS))
        return payload.with_snippet(name, name not in present)


@dataclass
class CalibrationResult:
    prompt: JudgePrompt
    curve: List[Tuple[int, float]]
    before: AgreementReport
    after: AgreementReport
    rollouts_used: int

    @property
    def delta(self) -> ReportDelta:
        return compare_reports(self.before, self.after)


async def judge_all(
    traces: Sequence[Trace],
    prompt: JudgePrompt,
    backend,
    world: World,
    spec: Optional[RubricSpec] = None,
) -> List[LabeledVerdict]:
    return [
        LabeledVerdict(t.session_id, await llm_judge(t, spec, prompt, backend, world))
        for t in traces
    ]


async def calibrate_judge(
    prompt0: JudgePrompt,
    labeled: Sequence[Tuple[Trace, LabeledVerdict]],
    proposer,
    budget: int,
    world: World,
    backend,
    spec: Optional[RubricSpec] = None,
    heldout_fraction: float = 0.5,
    seed: int = 0,
) -> CalibrationResult:
    """
    Search judge prompts for agreement with human labels.

    Train objective: per-trace weighted agreement. Selection: weighted
    agreement on the held-out traces. Never returns a prompt that agrees
    less than `prompt0` on held-out.
    """
    from .optimizer import PoolConfig, pareto_search

    if not labeled:
        raise InvalidInput("calibration needs at least one labeled trace")
    spec = spec or default_rubric()
    ordered = sorted(labeled, key=lambda pair: pair[0].session_id)
    cut = max(1, int(round(len(ordered) * (1 - heldout_fraction)))) if len(ordered) > 1 else 1
    train = ordered[:cut]
    heldout = ordered[cut:] or ordered[:cut]

    async def evaluate(prompt: JudgePrompt, task):
        from .optimizer import NodeEvaluation

        trace, human = task
        judged = LabeledVerdict(trace.session_id, await llm_judge(trace, spec, prompt, backend, world))
        report = agreement([judged], [human], spec)
        failed = sorted(
            c for c in judged.verdict
            if c in human.verdict and human.verdict[c] is not VerdictValue.NA and human.verdict[c] is not judged.verdict[c]
        )
        return NodeEvaluation(report.weighted_overall, tuple(failed))

    async def heldout_agreement(prompt: JudgePrompt) -> AgreementReport:
        judged = await judge_all([t for t, _h in heldout], prompt, backend, world, spec)
        return agreement(judged, [h for _t, h in heldout], spec)

    async def heldout_objective(prompt: JudgePrompt) -> float:
        return (await heldout_agreement(prompt)).weighted_overall

    before = await heldout_agreement(prompt0)
    result = await pareto_search(
        train_tasks=train,
        heldout_tasks=heldout,
        seed_payload=prompt0,
        evaluate=evaluate,
        proposer=proposer,
        config=PoolConfig(budget=budget, seed=seed),
        heldout_objective=heldout_objective,
        signature=lambda p: p.template,
    )
    after = await heldout_agreement(result.best)
    logger.info("[Judge] calibration: held-out agreement %.4f -> %.4f", before.weighted_overall, after.weighted_overall)
    return CalibrationResult(result.best, result.curve, before, after, result.rollouts_used)


# ---------------------------------------------------------------------------
# Node-level micro judging
# ---------------------------------------------------------------------------

async def score_node_invocation(
    node_name: str,
    payload: str,
    example: DatasetExample,
    world: World,
    policy=None,
):
    """
    Re-run one logged invocation under prompt `payload` and grade it with
    the node's micro-rubric. Returns a NodeEvaluation.
    """
    from .agentruntime import run_node
    from .optimizer import NodeEvaluation
    from .policies import ScriptedPolicy
    from .worldsim import ToolRequest, ToolSession

    spec = micro_rubric(node_name)
    context = dict(example.input_context)
    session = ToolSession(world, example.preferences.to_dict())
    store_id = context.get("store_id")
    if store_id:
        session.execute(ToolRequest("select_store", {"store_id": store_id}))
    run = await run_node(node_name, payload, context, session, policy or ScriptedPolicy())
    output = run.output

    results: Dict[str, bool] = {}
    if node_name == "item_selection":
        results.update(_grade_item_selection(context, output, run, example, world))
    elif node_name == "quantity_adjustment":
        results["context_consistent_scaling"] = output.get("quantity") == _expected_quantity(context)

    verdict = {c: VerdictValue.PASS if results.get(c, False) else VerdictValue.FAIL for c in spec.check_ids()}
    score = aggregate(verdict, spec, spec.check_ids())
    failed = tuple(c for c, v in verdict.items() if v is VerdictValue.FAIL)
    return NodeEvaluation(score.weighted_overall, failed)


def _expected_quantity(context: Mapping[str, Any]) -> int:
    goal = context.get("goal", {})
    item = context.get("item") or {}
    if goal.get("quantity"):
        return int(goal["quantity"])
    household = context.get("household_size")
    if household and "per-person" in item.get("attribute_tags", []):
        pack = max(1, int(item.get("pack_size", {}).get("count", 1)))
        return max(1, math.ceil(household / pack))
    return 1


def _grade_item_selection(context, output, run, example: DatasetExample, world: World) -> Dict[str, bool]:
    goal = GoalItem.from_dict(context["goal"])
    store_id = context["store_id"]
    prefs = example.preferences
    config = OracleJudgeConfig()
    catalog = world.catalog(store_id)

    def fits_request(item: CatalogItem) -> bool:
        return name_matches(goal.phrase, item) and attributes_ok(goal, item, world, store_id, config) and brand_ok(goal, item)

    def fits_profile(item: CatalogItem) -> bool:
        return not _dietary_violations(item, prefs.dietary)

    ideal = [i for i in catalog if fits_request(i) and fits_profile(i)]
    preferred_ideal = [i for i in ideal if i.brand in prefs.preferred_brands]
    decision = output.get("decision")
    item_id = output.get("item_id")
    chosen = world.item(store_id, item_id) if item_id and world.has_item(store_id, item_id) else None
    seen = {r.get("item_id") for res in run.tool_results for r in res.response.get("results", [])}

    if chosen is not None and decision in ("select", "ask"):
        attribute_ok = fits_profile(chosen) and attributes_ok(goal, chosen, world, store_id, config)
        if preferred_ideal and chosen.brand not in prefs.preferred_brands:
            attribute_ok = False
    else:
        attribute_ok = not ideal

    # only a brand mismatch is worth offering as a substitute
    substitutable = [
        i for i in catalog
        if name_matches(goal.phrase, i) and fits_profile(i) and attributes_ok(goal, i, world, store_id, config)
    ]
    if ideal:
        substitution_ok = decision == "select" and not output.get("substitution") and chosen in ideal
    elif substitutable:
        substitution_ok = decision == "ask"
    else:
        substitution_ok = decision == "unavailable"

    if chosen is not None and decision in ("select", "ask"):
        grounded = chosen.item_id in seen
    else:
        grounded = not ideal
    return {
        "attribute_satisfaction": attribute_ok,
        "substitution_discipline": substitution_ok,
        "tool_groundedness": grounded,
    }
