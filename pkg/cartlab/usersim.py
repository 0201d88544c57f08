# cartlab/usersim.py
"""
Hybrid simulated user: replay the logged user while the agent behaves as
logged, then answer from a persona once it diverges.

Divergence is permanent. The persona policy is deterministic and reads the
cart through the same evidence replay the judge uses, so it can never confirm
a cart that breaks its budget or dietary constraints.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Protocol, Sequence, Set, Tuple, Union

from .errors import ContractViolation, ValidationError
from .planner import merge_goals, parse_user_message, vocabulary_from_world
from .schemas import decode_json
from .tracemodel import Trace, Turn, UserPreferences, final_cart_state
from .worldsim import FOOD_CATEGORIES, Cart, CatalogItem, ToolRequest, World, cart_total, name_matches, tokenize

logger = logging.getLogger(__name__)

DEFAULT_PATIENCE = 12

CONFIRM_MESSAGE = "That's everything, thanks!"
GIVE_UP_MESSAGE = "I'll finish this another time."
BROWSING_MESSAGE = "Just browsing, thanks!"

Action = Union[ToolRequest, str]


# ---------------------------------------------------------------------------
# Personas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoalSpec:
    description: str
    attributes: FrozenSet[str] = frozenset()
    quantity: Optional[int] = None
    brand: Optional[str] = None

    def render(self, extra_attributes: FrozenSet[str] = frozenset()) -> str:
        words: List[str] = []
        if self.quantity:
            words.append(str(self.quantity))
        if self.brand:
            words.append(self.brand)
        words.extend(sorted(self.attributes | extra_attributes))
        words.append(self.description)
        return " ".join(words)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "description": self.description,
            "attributes": sorted(self.attributes),
            "quantity": self.quantity,
            "brand": self.brand,
        }


@dataclass(frozen=True)
class Persona:
    """The latent constraints of one simulated user."""

    goal_items: Tuple[GoalSpec, ...] = ()
    budget_cap: Optional[int] = None
    dietary: FrozenSet[str] = frozenset()
    household_size: int = 1
    preferred_brands: FrozenSet[str] = frozenset()
    preferred_store: Optional[str] = None
    patience: int = DEFAULT_PATIENCE

    def __post_init__(self):
        if self.patience < 1:
            raise ValidationError("persona patience must be >= 1")
        if self.household_size < 1:
            raise ValidationError("persona household_size must be >= 1")

    def preferences(self) -> UserPreferences:
        return UserPreferences(
            household_size=self.household_size,
            dietary=self.dietary,
            preferred_brands=self.preferred_brands,
            preferred_store=self.preferred_store,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "goal_items": [g.to_dict() for g in self.goal_items],
            "budget_cap": self.budget_cap,
            "dietary": sorted(self.dietary),
            "household_size": self.household_size,
            "preferred_brands": sorted(self.preferred_brands),
            "preferred_store": self.preferred_store,
            "patience": self.patience,
        }


def persona_from_dict(data: Mapping[str, Any]) -> Persona:
    return Persona(
        goal_items=tuple(
            GoalSpec(
                description=g["description"],
                attributes=frozenset(g.get("attributes", ())),
                quantity=g.get("quantity"),
                brand=g.get("brand"),
            )
            for g in data.get("goal_items", [])
        ),
        budget_cap=data.get("budget_cap"),
        dietary=frozenset(data.get("dietary", ())),
        household_size=data.get("household_size", 1),
        preferred_brands=frozenset(data.get("preferred_brands", ())),
        preferred_store=data.get("preferred_store"),
        patience=data.get("patience", DEFAULT_PATIENCE),
    )


def load_persona(source: Union[str, Path, bytes]) -> Persona:
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    return persona_from_dict(decode_json(raw, "persona"))


def persona_from_episode(logged: Trace, world: Optional[World] = None) -> Persona:
    """
    Recover a persona from a logged episode.

    Budget, dietary, household and brand statements come from the user turns;
    the preferences block seeds dietary, brands, household and store.
    Requested items become goal_items in request order.
    """
    vocabulary = vocabulary_from_world(world) if world is not None else None
    prefs = logged.user_preferences
    budget = None
    dietary: Set[str] = set(prefs.dietary)
    brands: Set[str] = set(prefs.preferred_brands)
    household = None
    goals = []
    for _index, turn in logged.user_turns():
        intent = parse_user_message(turn.text, vocabulary)
        if intent.budget is not None:
            budget = intent.budget
        if intent.household_size:
            household = intent.household_size
        dietary |= intent.dietary
        brands |= intent.preferred_brands
        if intent.goal_op is not None:
            goals = merge_goals(goals, intent.goal_op, intent.goals)

    return Persona(
        goal_items=tuple(
            GoalSpec(
                description=f"everything for {g.recipe}" if g.recipe else g.phrase,
                attributes=g.attributes if not g.recipe else frozenset(),
                quantity=g.quantity,
                brand=g.brand,
            )
            for g in goals
        ),
        budget_cap=budget,
        dietary=frozenset(dietary),
        household_size=household or prefs.household_size,
        preferred_brands=frozenset(brands),
        preferred_store=prefs.preferred_store,
    )


class PersonaValidator(Protocol):
    """Hook for persona realism metrics (Turing-style pass rate, intent-consistency Likert)."""

    def score(self, persona: Persona, trace: Trace) -> Mapping[str, float]:
        ...


class GoalRecallValidator:
    """
    Intent consistency read back from the episode: the persona recovered from
    the user turns is compared with the one that drove them.
    """

    def __init__(self, world: Optional[World] = None):
        self.world = world

    def score(self, persona: Persona, trace: Trace) -> Mapping[str, float]:
        recovered = persona_from_episode(trace, self.world)
        wanted = {g.description.casefold() for g in persona.goal_items}
        stated = {g.description.casefold() for g in recovered.goal_items}
        return {
            "goal_recall": len(wanted & stated) / len(wanted) if wanted else 1.0,
            "dietary_consistent": 1.0 if recovered.dietary <= persona.dietary else 0.0,
        }


# ---------------------------------------------------------------------------
# Equivalence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceVerdict:
    equivalent: bool
    reason: str = ""

    def __post_init__(self):
        if not self.equivalent and not self.reason:
            raise ValueError("a non-equivalent verdict needs a reason")


def _canonical(value: Any) -> Any:
    if isinstance(value, str):
        return value.casefold()
    if isinstance(value, Mapping):
        return {str(k): _canonical(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    return value


def normalize_message(text: str) -> str:
    return " ".join((text or "").casefold().split())


class EquivalenceChecker(Protocol):
    async def check(self, logged: Action, new: Action) -> EquivalenceVerdict:
        ...


class CanonicalChecker:
    """Reference checker: canonical equality of tool calls and normalized messages."""

    def compare(self, logged: Action, new: Action) -> EquivalenceVerdict:
        if isinstance(logged, ToolRequest) and isinstance(new, ToolRequest):
            if logged.tool_name != new.tool_name:
                return EquivalenceVerdict(False, f"tool_name differs: {logged.tool_name} vs {new.tool_name}")
            a, b = _canonical(dict(logged.arguments)), _canonical(dict(new.arguments))
            for key in sorted(set(a) | set(b)):
                if a.get(key) != b.get(key):
                    return EquivalenceVerdict(False, f"argument {key!r} differs: {a.get(key)!r} vs {b.get(key)!r}")
            return EquivalenceVerdict(True)
        if isinstance(logged, str) and isinstance(new, str):
            if normalize_message(logged) == normalize_message(new):
                return EquivalenceVerdict(True)
            return EquivalenceVerdict(False, "message text differs")
        return EquivalenceVerdict(False, "action kinds differ")

    async def check(self, logged: Action, new: Action) -> EquivalenceVerdict:
        return self.compare(logged, new)


class InferenceChecker:
    """
    Backend-powered entailment check for assistant messages.

    Canonical equality short-circuits; tool calls are never sent to the backend.
    """

    PROMPT = (
        "Statement A: {a}\nStatement B: {b}\n"
        "Do A and B commit the assistant to the same action and the same facts? "
        "Answer yes or no."
    )

    def __init__(self, backend):
        self.backend = backend
        self.canonical = CanonicalChecker()

    async def check(self, logged: Action, new: Action) -> EquivalenceVerdict:
        verdict = self.canonical.compare(logged, new)
        if verdict.equivalent or not (isinstance(logged, str) and isinstance(new, str)):
            return verdict
        from .backend import CompletionRequest

        answer = await self.backend.complete(CompletionRequest.user(self.PROMPT.format(a=logged, b=new)))
        if answer.strip().lower().startswith("yes"):
            return EquivalenceVerdict(True, "entailed")
        return EquivalenceVerdict(False, f"not entailed: {answer.strip()[:80]}")


async def action_equivalent(logged: Action, new: Action, checker: Optional[EquivalenceChecker] = None) -> EquivalenceVerdict:
    return await (checker or CanonicalChecker()).check(logged, new)


async def turn_equivalent(logged: Turn, new: Turn, checker: Optional[EquivalenceChecker] = None) -> EquivalenceVerdict:
    """Assistant turns match when every tool call and the reply are equivalent."""
    if logged.role != new.role:
        return EquivalenceVerdict(False, f"role differs: {logged.role} vs {new.role}")
    if len(logged.tool_calls) != len(new.tool_calls):
        return EquivalenceVerdict(False, f"{len(new.tool_calls)} tool calls, logged {len(logged.tool_calls)}")
    for position, (a, b) in enumerate(zip(logged.tool_calls, new.tool_calls)):
        verdict = await action_equivalent(a, b, checker)
        if not verdict.equivalent:
            return EquivalenceVerdict(False, f"tool call {position}: {verdict.reason}")
    return await action_equivalent(logged.text, new.text, checker)


async def find_divergence(
    prefix: Sequence[Turn],
    logged: Optional[Trace],
    checker: Optional[EquivalenceChecker] = None,
) -> Optional[int]:
    """
    Index of the first prefix turn that departs from the logged episode,
    or None while the whole prefix is still on the logged path.

    Raises ContractViolation when a user turn inside the replayed region
    differs from the logged one.
    """
    if logged is None:
        return 0
    for index, turn in enumerate(prefix):
        if index >= len(logged.turns):
            return index
        recorded = logged.turns[index]
        if turn.role == "user":
            if recorded.role != "user" or turn.text != recorded.text:
                raise ContractViolation(f"prefix turn {index} is not aligned with the logged episode")
            continue
        verdict = await turn_equivalent(recorded, turn, checker)
        if not verdict.equivalent:
            logger.info("[Replay] divergence at turn %d: %s", index, verdict.reason)
            return index
    return None


# ---------------------------------------------------------------------------
# Persona policy
# ---------------------------------------------------------------------------

_ASK_RE = re.compile(r"([^.!?]+?) isn't available as requested\. Would ([^?]+?) by ([^?]+?) work instead\?")
_UNFOUND_RE = re.compile(r"I couldn't find ([^.!?]+)\.")
_SKIP_RE = re.compile(r"I'll skip ([^.!?]+)\.")
_OVER_BUDGET_RE = re.compile(r"Please remove ([^,]+), it is over my budget\.")
_RECIPE_PREFIX = "everything for "


def _sentence_tail(text: str) -> str:
    """Drop anything before the last sentence break of a regex capture."""
    return re.split(r"[.!?]\s+", text)[-1].strip()


def _is_food(item: CatalogItem) -> bool:
    return item.category in FOOD_CATEGORIES


def _format_money(cents: int) -> str:
    return f"${cents // 100}" if cents % 100 == 0 else f"${cents / 100:.2f}"


def _join(parts: Sequence[str]) -> str:
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def _goal_for_phrase(persona: Persona, phrase: str) -> Optional[int]:
    tokens = set(tokenize(phrase))
    for i, goal in enumerate(persona.goal_items):
        if set(tokenize(goal.description)) == tokens:
            return i
    for i, goal in enumerate(persona.goal_items):
        if tokens and tokens <= set(tokenize(goal.description)):
            return i
    return None


def _goal_for_item(persona: Persona, name: str) -> Optional[int]:
    for i, goal in enumerate(persona.goal_items):
        if set(tokenize(goal.description)) <= set(tokenize(name)):
            return i
    return None


@dataclass
class PersonaMemory:
    """What the persona has already said: dropped goals and accepted substitutes."""

    dropped: Set[int] = field(default_factory=set)
    accepted: Dict[int, str] = field(default_factory=dict)


def recall(persona: Persona, prefix: Sequence[Turn]) -> PersonaMemory:
    memory = PersonaMemory()
    last_assistant = ""
    for turn in prefix:
        if turn.role == "assistant":
            last_assistant = turn.text
            continue
        text = turn.text
        ask = _ASK_RE.search(last_assistant)
        if ask and text.startswith("Yes"):
            goal = _goal_for_phrase(persona, _sentence_tail(ask.group(1)))
            if goal is not None:
                memory.accepted[goal] = ask.group(2).strip()
        for skipped in _SKIP_RE.findall(text):
            goal = _goal_for_phrase(persona, skipped)
            if goal is not None:
                memory.dropped.add(goal)
        for name in _OVER_BUDGET_RE.findall(text):
            goal = _goal_for_item(persona, name)
            if goal is not None:
                memory.dropped.add(goal)
    return memory


def dietary_ok(persona: Persona, item: CatalogItem) -> bool:
    return not _is_food(item) or persona.dietary <= item.attribute_tags


def goal_satisfied_by(persona: Persona, goal: GoalSpec, item: CatalogItem, accepted: Optional[str] = None) -> bool:
    if accepted is not None and item.name.casefold() == accepted.casefold():
        return dietary_ok(persona, item)
    if not name_matches(goal.description, item):
        return False
    if not goal.attributes <= item.attribute_tags:
        return False
    if goal.brand is not None and item.brand.casefold() != goal.brand.casefold():
        return False
    return dietary_ok(persona, item)


def _goal_satisfied(persona: Persona, index: int, cart: Cart, world: World, memory: PersonaMemory) -> bool:
    goal = persona.goal_items[index]
    items = [world.item(cart.store_id, l.item_id) for l in cart.lines] if cart.store_id else []
    if goal.description.startswith(_RECIPE_PREFIX):
        recipe = world.recipes.get(goal.description[len(_RECIPE_PREFIX):])
        if recipe is not None:
            return all(
                any(name_matches(e, i) and dietary_ok(persona, i) for i in items)
                for e in recipe.essentials
            )
    return any(goal_satisfied_by(persona, goal, i, memory.accepted.get(index)) for i in items)


def cart_violation(persona: Persona, cart: Cart, world: World, memory: Optional[PersonaMemory] = None) -> Optional[str]:
    """The objection the persona raises about the cart, if any."""
    accepted = {name.casefold() for name in (memory.accepted.values() if memory else ())}
    if not cart.store_id or not cart.lines:
        return None
    items = [(world.item(cart.store_id, l.item_id), l.quantity) for l in cart.lines]
    for item, _qty in items:
        missing = sorted(persona.dietary - item.attribute_tags)
        if _is_food(item) and missing:
            return f"Please remove {item.name}, it is not {missing[0]}."
    for item, _qty in items:
        for goal in persona.goal_items:
            if item.name.casefold() in accepted:
                continue
            if goal.brand and name_matches(goal.description, item) and item.brand.casefold() != goal.brand.casefold():
                return f"Please remove {item.name}, I asked for {goal.brand}."
    if persona.budget_cap is not None and cart_total(cart, world) > persona.budget_cap:
        priciest = max(items, key=lambda pair: (pair[0].price * pair[1], pair[0].item_id))[0]
        return f"Please remove {priciest.name}, it is over my budget."
    return None


def _find_offer(world: World, name: str, brand: str) -> Optional[CatalogItem]:
    for _store, item in world.all_items():
        if item.name.casefold() == name.casefold() and item.brand.casefold() == brand.casefold():
            return item
    return None


def opening_message(persona: Persona) -> Tuple[str, bool]:
    if not persona.goal_items:
        return BROWSING_MESSAGE, True
    text = f"I need {_join([g.render() for g in persona.goal_items])}."
    if persona.budget_cap is not None:
        text += f" My budget is under {_format_money(persona.budget_cap)}."
    return text, False


def synthesize_turn(persona: Persona, prefix: Sequence[Turn], world: World) -> Tuple[str, bool]:
    """
    The persona's next message.

    Priority: objection to a constraint violation, confirmation when every
    remaining goal is satisfied, giving up once patience runs out, then
    clarification answers, skips and requests for what is still missing.
    """
    if not any(t.role == "assistant" for t in prefix):
        return opening_message(persona)
    trace = Trace("persona-view", persona.preferences(), (), tuple(prefix))
    cart = final_cart_state(trace, world)
    memory = recall(persona, prefix)
    turn_number = sum(1 for t in prefix if t.role == "user") + 1

    objection = cart_violation(persona, cart, world, memory)
    if objection is not None and turn_number < persona.patience:
        return objection, False

    remaining = [
        i for i in range(len(persona.goal_items))
        if i not in memory.dropped and not _goal_satisfied(persona, i, cart, world, memory)
    ]
    if objection is None and not remaining:
        return CONFIRM_MESSAGE, True
    if turn_number >= persona.patience:
        return GIVE_UP_MESSAGE, True

    last = next(t for t in reversed(prefix) if t.role == "assistant").text
    parts: List[str] = []
    settled: Set[int] = set()
    awaiting_add = False

    if "How many people" in last:
        parts.append(f"We are {persona.household_size} people.")

    ask = _ASK_RE.search(last)
    if ask:
        goal = _goal_for_phrase(persona, _sentence_tail(ask.group(1)))
        offer = _find_offer(world, ask.group(2).strip(), ask.group(3).strip())
        if goal is not None and offer is not None and dietary_ok(persona, offer):
            parts.append("Yes, that works.")
            settled.add(goal)
            awaiting_add = True
        elif goal is not None:
            parts.append(f"No, thanks. I'll skip {persona.goal_items[goal].description}.")
            settled.add(goal)

    for phrase in _UNFOUND_RE.findall(last):
        goal = _goal_for_phrase(persona, _sentence_tail(phrase))
        if goal is not None and goal in remaining and goal not in settled:
            parts.append(f"I'll skip {persona.goal_items[goal].description}.")
            settled.add(goal)

    still = [i for i in remaining if i not in settled]
    if still:
        rendered = []
        for i in still:
            goal = persona.goal_items[i]
            category = None
            for _store, item in world.all_items():
                if name_matches(goal.description, item):
                    category = item.category
                    break
            extra = persona.dietary if category in FOOD_CATEGORIES else frozenset()
            rendered.append(goal.render(extra))
        parts.append(f"I still need {_join(rendered)}.")
    elif not awaiting_add:
        parts.append(CONFIRM_MESSAGE)
        return " ".join(parts), True
    return " ".join(parts), False


async def next_user_turn(
    persona: Persona,
    prefix: Sequence[Turn],
    logged: Optional[Trace],
    last_agent_action: Optional[Turn],
    checker: Optional[EquivalenceChecker],
    world: World,
) -> Tuple[Optional[str], bool]:
    """
    Replay-when-consistent.

    While every assistant turn in `prefix` is equivalent to its logged
    counterpart, the logged user's next message is returned verbatim; when
    the logged episode has no further user turn the session ends (None).
    After the first divergence the persona policy answers.
    """
    if last_agent_action is not None and prefix and prefix[-1] is not last_agent_action:
        raise ContractViolation("last_agent_action must be the final turn of the prefix")
    divergence = await find_divergence(prefix, logged, checker)
    if divergence is None and logged is not None:
        index = len(prefix)
        if index < len(logged.turns) and logged.turns[index].role == "user":
            return logged.turns[index].text, False
        return None, True
    return synthesize_turn(persona, prefix, world)


# ---------------------------------------------------------------------------
# User sources for run_episode
# ---------------------------------------------------------------------------

class UserSimulator:
    """Persona-driven user source, optionally replaying a logged episode first."""

    def __init__(
        self,
        persona: Persona,
        world: World,
        logged: Optional[Trace] = None,
        checker: Optional[EquivalenceChecker] = None,
    ):
        self.persona = persona
        self.world = world
        self.logged = logged
        self.checker = checker or CanonicalChecker()
        self.preferences = logged.user_preferences if logged is not None else persona.preferences()

    async def next_turn(self, turns: List[Turn]) -> Tuple[Optional[str], bool]:
        last = turns[-1] if turns else None
        return await next_user_turn(self.persona, turns, self.logged, last, self.checker, self.world)


class ScriptedUser:
    """Plays a fixed list of messages; the last one terminates the session."""

    def __init__(self, messages: Sequence[str], preferences: Optional[UserPreferences] = None):
        self.messages = list(messages)
        self.preferences = preferences or UserPreferences()

    async def next_turn(self, turns: List[Turn]) -> Tuple[Optional[str], bool]:
        index = sum(1 for t in turns if t.role == "user")
        if index >= len(self.messages):
            return None, True
        return self.messages[index], index == len(self.messages) - 1


def persona_to_json(persona: Persona) -> str:
    return json.dumps(persona.to_dict(), indent=2)
