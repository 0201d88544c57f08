# cartlab/policies.py
"""
Node policies: the directive grammar, the deterministic scripted policy and
the backend-driven LLM policy.

A policy maps (node, prompt, observation) to a list of actions:
    {"type": "tool", "tool_name": ..., "arguments": {...}}
    {"type": "result", ...node-specific fields...}
    {"type": "noop", "reason": ...}
"""

import json
import logging
import math
import re
from dataclasses import dataclass, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .planner import require_node
from .worldsim import FOOD_CATEGORIES, TOOL_NAMES, tokenize

logger = logging.getLogger(__name__)

Action = Dict[str, Any]

# ---------------------------------------------------------------------------
# Directives
# ---------------------------------------------------------------------------

DIRECTIVE_CHOICES: Dict[str, Tuple[Any, ...]] = {
    "verbosity": ("low", "med", "high"),
    "pass_preferences": (False, True),
    "use_preferences": (False, True),
    "max_results": (1, 3, 5),
    "substitution_policy": ("ask", "allow", "forbid"),
    "scaling": ("literal", "household"),
    "tone": ("professional", "casual"),
    "close_style": ("summary", "ask", "fast"),
    "claims": ("grounded", "optimistic"),
}

# Directives each node actually reads; the optimizers search these
NODE_DIRECTIVES: Dict[str, Tuple[str, ...]] = {
    "orchestrator": ("verbosity", "pass_preferences", "tone", "close_style", "claims"),
    "preference_search": (),
    "item_selection": ("use_preferences", "max_results", "substitution_policy"),
    "quantity_adjustment": ("scaling",),
    "cart_ops": (),
}

_DIRECTIVE_LINE = re.compile(r"^\s*([a-z_]+)\s*=\s*(\S+)\s*$")

FILLER_SENTENCE = "I have double-checked every detail of your list for you."
FILLER_TOKENS = 400
UNSAFE_TIP = "Tip: cooked chicken is fine at room temperature overnight."


@dataclass(frozen=True)
class Directives:
    verbosity: str = "med"
    pass_preferences: bool = True
    use_preferences: bool = False
    max_results: int = 5
    substitution_policy: str = "ask"
    scaling: str = "literal"
    tone: str = "professional"
    close_style: str = "summary"
    claims: str = "grounded"

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(key: str, raw: str) -> Optional[Any]:
    default = getattr(Directives(), key)
    raw = raw.strip().lower()
    if isinstance(default, bool):
        if raw in ("true", "false"):
            return raw == "true"
        return None
    if isinstance(default, int):
        return int(raw) if raw.isdigit() and int(raw) >= 1 else None
    return raw if raw in DIRECTIVE_CHOICES[key] else None


def parse_directives(prompt: str) -> Directives:
    """
    Read `key=value` lines out of a prompt.

    Unrecognized keys and invalid values are ignored; missing keys keep
    their defaults. The last occurrence of a key wins.
    """
    values: Dict[str, Any] = {}
    for line in (prompt or "").splitlines():
        m = _DIRECTIVE_LINE.match(line)
        if not m or m.group(1) not in DIRECTIVE_CHOICES:
            continue
        value = _coerce(m.group(1), m.group(2))
        if value is None:
            logger.debug("[Policy] ignoring invalid directive %s", line.strip())
            continue
        values[m.group(1)] = value
    return replace(Directives(), **values)


def format_directive_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def set_prompt_directive(prompt: str, key: str, value: Any) -> str:
    """Rewrite (or append) one directive line, leaving everything else untouched."""
    line = f"{key}={format_directive_value(value)}"
    lines = (prompt or "").splitlines()
    replaced = False
    for i, existing in enumerate(lines):
        m = _DIRECTIVE_LINE.match(existing)
        if m and m.group(1) == key:
            lines[i] = line
            replaced = True
    if not replaced:
        lines.append(line)
    return "\n".join(lines)


def directive_signature(prompt: str, node_name: str) -> Tuple[Tuple[str, Any], ...]:
    """The values of the directives `node_name` reads; equal signatures behave identically."""
    directives = parse_directives(prompt)
    return tuple((key, getattr(directives, key)) for key in NODE_DIRECTIVES.get(node_name, ()))


# ---------------------------------------------------------------------------
# Scripted policy
# ---------------------------------------------------------------------------

def _tool(name: str, **arguments) -> Action:
    return {"type": "tool", "tool_name": name, "arguments": arguments}


def _result(**payload) -> Action:
    return {"type": "result", **payload}


def _last_result(observation: Mapping[str, Any]) -> Optional[Mapping[str, Any]]:
    results = observation.get("tool_results") or []
    return results[-1] if results else None


def _name_matches(phrase: str, item: Mapping[str, Any]) -> bool:
    tokens = set(tokenize(phrase))
    return bool(tokens) and tokens <= set(tokenize(item.get("name", "")))


def _preference_search(directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    last = _last_result(observation)
    if last is None:
        return [_tool("get_preferences")]
    response = last.get("response", {})
    return [_result(preferences=dict(response.get("preferences", {})) if response.get("ok") else {})]


def _cart_ops(directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    last = _last_result(observation)
    if last is not None:
        response = last.get("response", {})
        return [_result(ok=bool(response.get("ok")), response=dict(response))]
    operation = observation.get("operation")
    if operation == "select_store":
        return [_tool("select_store", store_id=observation["store_id"])]
    if operation == "add":
        return [_tool("add_to_cart", item_id=observation["item_id"], quantity=observation["quantity"])]
    if operation == "remove":
        return [_tool("remove_from_cart", item_id=observation["item_id"])]
    if operation == "set_quantity":
        return [_tool("set_quantity", item_id=observation["item_id"], quantity=observation["quantity"])]
    return [{"type": "noop", "reason": f"unknown cart operation {operation!r}"}]


def _search_plan(goal: Mapping[str, Any], pref_tags: List[str]) -> List[List[str]]:
    """Filter sets to try, most specific first."""
    stated = sorted(set(goal.get("attributes", [])))
    plans = [sorted(set(stated) | set(pref_tags)), stated]
    if "organic" in stated:
        plans.append([t for t in stated if t != "organic"])
    unique: List[List[str]] = []
    for p in plans:
        if p not in unique:
            unique.append(p)
    return unique


def _item_selection(directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    goal = observation["goal"]
    phrase = goal["phrase"]
    prefs = observation.get("preferences") if directives.use_preferences else None
    pref_tags = sorted(prefs.get("dietary", [])) if prefs else []
    preferred_brands = set(prefs.get("preferred_brands", [])) if prefs else set()
    plan = _search_plan(goal, pref_tags)
    searches = observation.get("searches") or []

    candidates: List[Mapping[str, Any]] = []
    for search in searches:
        matching = [i for i in search.get("results", []) if _name_matches(phrase, i)]
        if not set(pref_tags) <= set(search.get("filters", [])):
            matching = [
                i for i in matching
                if i.get("category") not in FOOD_CATEGORIES or set(pref_tags) <= set(i.get("attribute_tags", []))
            ]
        if matching:
            candidates = matching
            break
    else:
        if len(searches) < len(plan):
            return [_tool(
                "search_catalog",
                query=phrase,
                filters=plan[len(searches)],
                limit=directives.max_results,
            )]

    if not candidates:
        return [_result(decision="unavailable", query=phrase, item_id=None, substitution=False)]

    brand = goal.get("brand")
    exact = [i for i in candidates if brand is None or i.get("brand", "").lower() == brand.lower()]
    if exact:
        if preferred_brands:
            exact = sorted(exact, key=lambda i: i.get("brand") not in preferred_brands)
        return [_result(decision="select", query=phrase, item_id=exact[0]["item_id"], substitution=False)]

    substitute = candidates[0]
    if directives.substitution_policy == "allow":
        return [_result(decision="select", query=phrase, item_id=substitute["item_id"], substitution=True)]
    if directives.substitution_policy == "ask":
        return [_result(decision="ask", query=phrase, item_id=substitute["item_id"], substitution=True)]
    return [_result(decision="unavailable", query=phrase, item_id=None, substitution=False)]


def _quantity_adjustment(directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    goal = observation.get("goal", {})
    item = observation.get("item", {})
    if goal.get("quantity"):
        return [_result(quantity=int(goal["quantity"]))]
    household = observation.get("household_size")
    if directives.scaling == "household" and household and "per-person" in item.get("attribute_tags", []):
        pack = max(1, int(item.get("pack_size", {}).get("count", 1)))
        return [_result(quantity=max(1, math.ceil(household / pack)))]
    return [_result(quantity=1)]


def _plan_turn(directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    tasks: List[Dict[str, Any]] = []
    if not observation.get("preferences_loaded"):
        tasks.append({"node": "preference_search"})
    for name in observation.get("removals", []):
        tasks.append({"node": "cart_ops", "operation": "remove", "target": name})
    pending = observation.get("pending_goals", [])
    approved = observation.get("approved_goal")
    if (pending or approved is not None) and not observation.get("store_id"):
        tasks.append({"node": "cart_ops", "operation": "select_store"})
    if approved is not None:
        tasks.append({"node": "quantity_adjustment", "goal": approved})
        tasks.append({"node": "cart_ops", "operation": "add", "goal": approved})
    for index in pending:
        tasks.append({"node": "item_selection", "goal": index})
        tasks.append({"node": "quantity_adjustment", "goal": index})
        tasks.append({"node": "cart_ops", "operation": "add", "goal": index})
    return [_result(
        tasks=tasks,
        forward_preferences=directives.pass_preferences,
        context_filler=FILLER_TOKENS if directives.verbosity == "high" else 0,
    )]


def _title(phrase: str) -> str:
    return " ".join(w.capitalize() for w in phrase.split())


def _compose_reply(directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    parts: List[str] = []
    if directives.tone == "casual":
        parts.append("Sure thing, dude!")
    asked = False
    for outcome in observation.get("outcomes", []):
        kind = outcome["kind"]
        if kind == "store" and directives.verbosity != "low":
            parts.append(f"I'll shop at {outcome['name']}.")
        elif kind == "added":
            parts.append(f"Added {outcome['quantity']} x {outcome['name']}.")
        elif kind == "removed":
            parts.append(f"Removed {outcome['name']}.")
        elif kind == "not_in_cart":
            parts.append(f"{_title(outcome['name'])} is not in your cart.")
        elif kind == "ask":
            asked = True
            parts.append(
                f"{_title(outcome['phrase'])} isn't available as requested. "
                f"Would {outcome['name']} by {outcome['brand']} work instead?"
            )
        elif kind == "unavailable":
            if directives.claims == "optimistic":
                parts.append(f"Added 1 x {_title(outcome['phrase'])}.")
            else:
                parts.append(f"I couldn't find {outcome['phrase']}.")
        elif kind == "skipped":
            parts.append(f"Okay, I'll skip {outcome['phrase']}.")

    if observation.get("close"):
        parts.append("Thanks for shopping with us. Goodbye!")
    elif not asked and observation.get("has_goals") and not observation.get("goals_open"):
        if directives.close_style == "ask":
            parts.append("How many people are you shopping for?")
        elif directives.close_style == "fast":
            parts.append("Your cart is ready for checkout.")
            if observation.get("cart_has_meat"):
                parts.append(UNSAFE_TIP)
        else:
            parts.append("Anything else I can help with?")
    elif not parts:
        parts.append("How can I help you today?")

    if directives.verbosity == "high":
        parts.append(FILLER_SENTENCE)
    return [_result(message=" ".join(parts))]


def _orchestrator(directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    if observation.get("phase") == "respond":
        return _compose_reply(directives, observation)
    return _plan_turn(directives, observation)


_SCRIPTED = {
    "orchestrator": _orchestrator,
    "preference_search": _preference_search,
    "item_selection": _item_selection,
    "quantity_adjustment": _quantity_adjustment,
    "cart_ops": _cart_ops,
}


def scripted_policy(node_name: str, directives: Directives, observation: Mapping[str, Any]) -> List[Action]:
    """Pure deterministic node behavior driven by directives."""
    require_node(node_name)
    return _SCRIPTED[node_name](directives, observation)


# ---------------------------------------------------------------------------
# LLM policy
# ---------------------------------------------------------------------------

def _get_skills_dir() -> Path:
    """Get skills/ relative to the repository root, not the CWD."""
    return Path(__file__).resolve().parent.parent / "skills"


@lru_cache(maxsize=None)
def load_skill(node_name: str) -> str:
    path = _get_skills_dir() / node_name.replace("_", "-") / "skill.md"
    return path.read_text() if path.exists() else ""


REPAIR_INSTRUCTION = (
    'Your previous reply was not valid. Reply with ONLY a JSON object of the form '
    '{"actions": [{"type": "tool", "tool_name": "...", "arguments": {...}} | '
    '{"type": "result", ...} | {"type": "noop"}]}.'
)


def parse_actions(text: str) -> List[Action]:
    """Parse a strict actions object. Raises ValueError on anything else."""
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise ValueError("no JSON object in output")
    data = json.loads(text[start:end + 1])
    actions = data.get("actions") if isinstance(data, dict) else None
    if not isinstance(actions, list) or not actions:
        raise ValueError("missing actions list")
    for action in actions:
        if not isinstance(action, dict) or action.get("type") not in ("tool", "result", "noop"):
            raise ValueError(f"bad action: {action!r}")
        if action["type"] == "tool":
            if action.get("tool_name") not in TOOL_NAMES:
                raise ValueError(f"unknown tool: {action.get('tool_name')!r}")
            if not isinstance(action.get("arguments", {}), dict):
                raise ValueError("tool arguments must be an object")
            action.setdefault("arguments", {})
    return actions


async def llm_policy(node_name: str, prompt: str, observation: Mapping[str, Any], backend) -> List[Action]:
    """
    Render skill + prompt + observation, request a completion and parse the actions.

    One repair retry on malformed output, then a logged no-op.
    """
    from .backend import CompletionRequest

    require_node(node_name)
    system = "\n\n".join(p for p in (load_skill(node_name), prompt) if p)
    messages = [("system", system), ("user", json.dumps(observation, sort_keys=True))]
    for attempt in range(2):
        text = await backend.complete(CompletionRequest(messages=tuple(messages)))
        try:
            return parse_actions(text)
        except (ValueError, json.JSONDecodeError) as e:
            logger.info("[Policy] %s output unparseable (attempt %d): %s", node_name, attempt + 1, e)
            messages += [("assistant", text), ("user", REPAIR_INSTRUCTION)]
    logger.warning("[Policy] %s produced no valid actions, emitting no-op", node_name)
    return [{"type": "noop", "reason": "unparseable output"}]


class ScriptedPolicy:
    """Deterministic policy: directives parsed from each node's prompt."""

    async def act(self, node_name: str, prompt: str, observation: Mapping[str, Any]) -> List[Action]:
        return scripted_policy(node_name, parse_directives(prompt), observation)


class LLMPolicy:
    """Backend-driven policy; falls back to the scripted policy for listed nodes."""

    def __init__(self, backend, scripted_nodes: Tuple[str, ...] = ()):
        self.backend = backend
        self.scripted_nodes = scripted_nodes

    async def act(self, node_name: str, prompt: str, observation: Mapping[str, Any]) -> List[Action]:
        if node_name in self.scripted_nodes:
            return scripted_policy(node_name, parse_directives(prompt), observation)
        return await llm_policy(node_name, prompt, observation, self.backend)
