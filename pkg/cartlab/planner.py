# cartlab/planner.py
"""
Orchestrator planning: the node registry, the user-utterance grammar and the
per-turn sub-agent task DAG.

Task plans are a dict of tasks keyed by id, each with a status and a
dependency list; `get_ready_tasks` releases them in dependency order.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

from .errors import NotFound
from .worldsim import World, tokenize

logger = logging.getLogger(__name__)

REGISTERED_NODES = (
    "orchestrator",
    "preference_search",
    "item_selection",
    "quantity_adjustment",
    "cart_ops",
)

ATTRIBUTE_WORDS = frozenset({"organic", "vegan", "gluten-free", "dairy-free", "inflated", "full", "slice"})
DIETARY_WORDS = frozenset({"vegan", "gluten-free", "dairy-free"})

_STOPWORDS = frozenset({"a", "an", "the", "some", "of", "please", "me", "my"})

_NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12,
}


class CircularDependencyError(Exception):
    """Raised when a task plan contains circular dependencies."""
    pass


def require_node(node_name: str) -> str:
    """Return `node_name` if registered, else raise NotFound."""
    if node_name not in REGISTERED_NODES:
        raise NotFound(f"unknown node: {node_name}")
    return node_name


# ---------------------------------------------------------------------------
# Utterance grammar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoalItem:
    """One requested item: a name phrase plus quantity, attributes and brand."""

    phrase: str
    attributes: FrozenSet[str] = frozenset()
    quantity: Optional[int] = None
    brand: Optional[str] = None
    recipe: Optional[str] = None

    def tokens(self) -> FrozenSet[str]:
        return frozenset(tokenize(self.phrase))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "phrase": self.phrase,
            "attributes": sorted(self.attributes),
            "quantity": self.quantity,
            "brand": self.brand,
            "recipe": self.recipe,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GoalItem":
        return cls(
            phrase=data["phrase"],
            attributes=frozenset(data.get("attributes", ())),
            quantity=data.get("quantity"),
            brand=data.get("brand"),
            recipe=data.get("recipe"),
        )


class GoalOp(Enum):
    SET = "set"
    ADD = "add"


@dataclass(frozen=True)
class UserIntent:
    """Everything the grammar recognized in one user message."""

    goal_op: Optional[GoalOp] = None
    goals: Tuple[GoalItem, ...] = ()
    removals: Tuple[str, ...] = ()
    skips: Tuple[str, ...] = ()
    budget: Optional[int] = None
    dietary: FrozenSet[str] = frozenset()
    household_size: Optional[int] = None
    preferred_brands: FrozenSet[str] = frozenset()
    approval: Optional[bool] = None
    close: bool = False

    @property
    def is_empty(self) -> bool:
        return self == UserIntent()


@dataclass(frozen=True)
class Vocabulary:
    """World-derived words the grammar needs: brand names and recipe names."""

    brands: Mapping[Tuple[str, ...], str] = field(default_factory=dict)
    recipes: FrozenSet[str] = frozenset()


def vocabulary_from_world(world: World) -> Vocabulary:
    brands: Dict[Tuple[str, ...], str] = {}
    for _store, item in world.all_items():
        brands.setdefault(tuple(tokenize(item.brand)), item.brand)
    return Vocabulary(brands=brands, recipes=frozenset(world.recipes))


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_BUDGET_RE = re.compile(r"under \$(\d+(?:\.\d{1,2})?)")
_HOUSEHOLD_RE = re.compile(r"\b(?:we are|we're|there are|for) (\d+|[a-z]+) people\b")
_DIETARY_RE = re.compile(r"^(?:i am|i'm|we are|we're|i eat|we eat|i only eat|we only eat) ([a-z-]+)\b")
_PREFER_RE = re.compile(r"^i prefer (.+)$")
_REMOVE_RE = re.compile(r"^(?:please )?(?:remove|take out) (.+?)(?:, (.+))?$")
_DONT_WANT_RE = re.compile(r"^i (?:don't|do not) want (.+)$")
_SKIP_RE = re.compile(r"^i'll skip (.+)$")
_NOT_TAG_RE = re.compile(r"it is not ([a-z-]+)")
_SET_RE = re.compile(r"^(?:i need|i want|i'm looking for|i am looking for|can you get me|get me) (.+)$")
_ADD_RE = re.compile(r"^(?:i also need|i still need|also add|please also add|also get me|add) (.+)$")
_RECIPE_RE = re.compile(r"^(?:everything|ingredients|stuff) for (.+)$")
_CLOSE_RE = re.compile(
    r"^(?:that's everything|that is everything|that's all|that is all|just browsing"
    r"|i'll finish this another time|goodbye|bye)\b"
)
_LIST_SPLIT = re.compile(r",\s*|\s+and\s+")


def _parse_count(word: str) -> Optional[int]:
    if word.isdigit():
        return int(word)
    return _NUMBER_WORDS.get(word)


def _match_brand(tokens: List[str], vocabulary: Vocabulary) -> Tuple[Optional[str], List[str]]:
    """Longest vocabulary brand that prefixes `tokens`."""
    for key in sorted(vocabulary.brands, key=len, reverse=True):
        if key and tuple(tokens[:len(key)]) == key:
            return vocabulary.brands[key], tokens[len(key):]
    return None, tokens


def parse_goal_phrase(text: str, vocabulary: Optional[Vocabulary] = None) -> Optional[GoalItem]:
    """
    Parse "2 organic bananas", "Nutty peanut butter" or "a slice of chocolate cake".

    Grammar: [count] [brand] {attribute | name word}. Stopwords are dropped.
    """
    vocabulary = vocabulary or Vocabulary()
    text = text.strip().lower()
    recipe = _RECIPE_RE.match(text)
    if recipe:
        name = " ".join(tokenize(recipe.group(1)))
        if name in vocabulary.recipes:
            return GoalItem(phrase=name, recipe=name)

    tokens = tokenize(text)
    quantity = None
    if tokens:
        quantity = _parse_count(tokens[0])
        if quantity is not None:
            tokens = tokens[1:]
    tokens = [t for t in tokens if t not in _STOPWORDS]
    brand, tokens = _match_brand(tokens, vocabulary)
    attributes = frozenset(t for t in tokens if t in ATTRIBUTE_WORDS)
    words = [t for t in tokens if t not in ATTRIBUTE_WORDS]
    if not words:
        return None
    return GoalItem(
        phrase=" ".join(words),
        attributes=attributes,
        quantity=quantity if quantity and quantity > 0 else None,
        brand=brand,
    )


def parse_goal_list(body: str, vocabulary: Optional[Vocabulary] = None) -> List[GoalItem]:
    goals = []
    for part in _LIST_SPLIT.split(body):
        goal = parse_goal_phrase(part, vocabulary)
        if goal is not None:
            goals.append(goal)
    return goals


def parse_user_message(text: str, vocabulary: Optional[Vocabulary] = None) -> UserIntent:
    """Parse one user message into a UserIntent. Unrecognized sentences are ignored."""
    vocabulary = vocabulary or Vocabulary()
    goal_op: Optional[GoalOp] = None
    goals: List[GoalItem] = []
    removals: List[str] = []
    skips: List[str] = []
    dietary = set()
    brands = set()
    budget = household = approval = None
    close = False

    for raw in _SENTENCE_SPLIT.split((text or "").strip()):
        sentence = raw.strip().rstrip(".!?").strip().lower()
        if not sentence:
            continue

        money = _BUDGET_RE.search(sentence)
        if money:
            budget = int(round(float(money.group(1)) * 100))
            sentence = _BUDGET_RE.sub("", sentence).strip().rstrip(",").strip()

        people = _HOUSEHOLD_RE.search(sentence)
        if people and _parse_count(people.group(1)):
            household = _parse_count(people.group(1))
            continue

        if _CLOSE_RE.match(sentence):
            close = True
            continue
        if re.match(r"^yes\b", sentence):
            approval = True
            continue
        if re.match(r"^no\b", sentence):
            approval = False
            continue

        m = _SKIP_RE.match(sentence)
        if m:
            skips.append(m.group(1).strip())
            continue
        m = _DIETARY_RE.match(sentence)
        if m and m.group(1) in DIETARY_WORDS:
            dietary.add(m.group(1))
            continue
        m = _PREFER_RE.match(sentence)
        if m:
            brand, _rest = _match_brand(tokenize(m.group(1)), vocabulary)
            if brand:
                brands.add(brand)
            continue
        m = _REMOVE_RE.match(sentence) or _DONT_WANT_RE.match(sentence)
        if m:
            removals.append(" ".join(tokenize(m.group(1))))
            reason = m.group(2) if m.re is _REMOVE_RE else None
            tag = _NOT_TAG_RE.search(reason or "")
            if tag and tag.group(1) in DIETARY_WORDS:
                dietary.add(tag.group(1))
            continue
        m = _ADD_RE.match(sentence)
        if m:
            goals.extend(parse_goal_list(m.group(1), vocabulary))
            goal_op = goal_op or GoalOp.ADD
            continue
        m = _SET_RE.match(sentence)
        if m:
            goals.extend(parse_goal_list(m.group(1), vocabulary))
            goal_op = GoalOp.SET
            continue
        logger.debug("[Planner] unrecognized sentence: %s", sentence)

    return UserIntent(
        goal_op=goal_op if goals else None,
        goals=tuple(goals),
        removals=tuple(removals),
        skips=tuple(skips),
        budget=budget,
        dietary=frozenset(dietary),
        household_size=household,
        preferred_brands=frozenset(brands),
        approval=approval,
        close=close,
    )


def merge_goals(goals: Iterable[GoalItem], op: Optional[GoalOp], new: Iterable[GoalItem]) -> List[GoalItem]:
    """
    Fold a goal statement into the running goal list.

    SET replaces the list; ADD appends, merging attributes into an existing
    goal with the same phrase.
    """
    new = list(new)
    if op is GoalOp.SET:
        return new
    merged = list(goals)
    for goal in new:
        for i, existing in enumerate(merged):
            if existing.phrase == goal.phrase:
                merged[i] = GoalItem(
                    phrase=existing.phrase,
                    attributes=existing.attributes | goal.attributes,
                    quantity=goal.quantity or existing.quantity,
                    brand=goal.brand or existing.brand,
                    recipe=existing.recipe or goal.recipe,
                )
                break
        else:
            merged.append(goal)
    return merged


# ---------------------------------------------------------------------------
# Per-turn task DAG
# ---------------------------------------------------------------------------

def new_plan(turn_index: int) -> Dict[str, Any]:
    return {"plan_id": f"turn-{turn_index}", "tasks": {}}


def add_task(
    plan: Dict[str, Any],
    node: str,
    title: str,
    dependencies: Iterable[str] = (),
    payload: Optional[Mapping[str, Any]] = None,
) -> str:
    """Append a pending task for a registered node; returns the new task id."""
    require_node(node)
    task_id = f"task-{len(plan['tasks']) + 1}"
    plan["tasks"][task_id] = {
        "id": task_id,
        "title": title,
        "node": node,
        "status": "pending",
        "dependencies": list(dependencies),
        "payload": dict(payload or {}),
    }
    return task_id


def detect_cycles(plan: Dict[str, Any]) -> None:
    """
    Detect circular dependencies in the task DAG.

    Uses DFS with 3-color marking:
    - white (unvisited), gray (in current path), black (fully processed)

    Raises CircularDependencyError with the cycle path if found.
    """
    tasks = plan["tasks"]
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {tid: WHITE for tid in tasks}
    parent: Dict[str, str] = {}

    def dfs(tid: str) -> None:
        color[tid] = GRAY
        for dep_id in tasks[tid].get("dependencies", []):
            if dep_id not in tasks:
                continue
            if color[dep_id] == GRAY:
                cycle = [dep_id, tid]
                current = tid
                while current != dep_id:
                    current = parent.get(current)
                    if current is None:
                        break
                    cycle.append(current)
                cycle.reverse()
                raise CircularDependencyError(
                    f"Circular dependency detected: {' -> '.join(cycle)}"
                )
            if color[dep_id] == WHITE:
                parent[dep_id] = tid
                dfs(dep_id)
        color[tid] = BLACK

    for tid in tasks:
        if color[tid] == WHITE:
            dfs(tid)


def get_ready_tasks(plan: Dict[str, Any]) -> List[str]:
    """Return task IDs whose dependencies are all completed, in insertion order."""
    ready = []
    for task_id, task in plan["tasks"].items():
        if task["status"] == "pending":
            deps_satisfied = all(
                plan["tasks"][dep_id]["status"] == "completed"
                for dep_id in task["dependencies"]
                if dep_id in plan["tasks"]
            )
            if deps_satisfied:
                ready.append(task_id)
    return ready


def update_task_status(plan: Dict[str, Any], task_id: str, status: str) -> None:
    plan["tasks"][task_id]["status"] = status


def skip_dependents(plan: Dict[str, Any], task_id: str) -> None:
    """Mark every task downstream of `task_id` as skipped."""
    for tid, task in plan["tasks"].items():
        if task_id in task["dependencies"] and task["status"] == "pending":
            task["status"] = "skipped"
            skip_dependents(plan, tid)
