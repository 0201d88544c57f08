# cartlab/agentruntime.py
"""
The orchestrator + sub-agent shopping assistant under test.

Each assistant turn: the orchestrator plans a task DAG for the sub-agents,
the tasks run in dependency order against the episode's ToolSession, and the
orchestrator composes the reply. Everything is logged into the Trace.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Tuple, Union

from .errors import ValidationError
from .planner import (
    REGISTERED_NODES,
    GoalItem,
    GoalOp,
    UserIntent,
    Vocabulary,
    add_task,
    detect_cycles,
    get_ready_tasks,
    merge_goals,
    new_plan,
    parse_user_message,
    skip_dependents,
    update_task_status,
    vocabulary_from_world,
)
from .policies import ScriptedPolicy, LLMPolicy, set_prompt_directive
from .schemas import decode_json
from .tracemodel import Invocation, ItemAttempt, StoreSelection, Trace, Turn, UserPreferences
from .worldsim import (
    CatalogItem,
    Store,
    ToolRequest,
    ToolResponse,
    ToolSession,
    World,
    goal_category,
    name_matches,
    store_suits,
    tokenize,
)

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_BUDGET = 2000
DEFAULT_MAX_TURNS = 12
MAX_NODE_STEPS = 4


# ---------------------------------------------------------------------------
# Prompt bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptBundle:
    """node_name -> prompt text, for every registered node."""

    prompts: Mapping[str, str]

    def __post_init__(self):
        missing = [n for n in REGISTERED_NODES if n not in self.prompts]
        if missing:
            raise ValidationError(f"bundle is missing prompts for: {', '.join(missing)}")

    def prompt(self, node_name: str) -> str:
        return self.prompts[node_name]

    def to_dict(self) -> Dict[str, str]:
        return {node: self.prompts[node] for node in sorted(self.prompts)}

    @property
    def digest(self) -> str:
        return bundle_digest(self)


def bundle_digest(bundle: PromptBundle) -> str:
    canonical = json.dumps(bundle.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def set_directive(bundle: PromptBundle, node_name: str, key: str, value: Any) -> PromptBundle:
    prompts = dict(bundle.prompts)
    prompts[node_name] = set_prompt_directive(prompts[node_name], key, value)
    return PromptBundle(prompts)


def with_prompt(bundle: PromptBundle, node_name: str, prompt: str) -> PromptBundle:
    prompts = dict(bundle.prompts)
    prompts[node_name] = prompt
    return PromptBundle(prompts)


def load_bundle(source: Union[str, Path, bytes]) -> PromptBundle:
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    return PromptBundle(dict(decode_json(raw, "bundle")))


def save_bundle(bundle: PromptBundle, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(bundle.to_dict(), indent=2) + "\n")


def default_bundle() -> PromptBundle:
    """A bundle whose directives make every node behave well."""
    return PromptBundle({
        "orchestrator": "Coordinate the shopping sub-agents and reply to the user.\n"
                        "verbosity=med\npass_preferences=true\nclose_style=summary\n"
                        "tone=professional\nclaims=grounded",
        "preference_search": "Load the user's saved profile.",
        "item_selection": "Pick the catalog item that fits the request.\n"
                          "use_preferences=true\nmax_results=5\nsubstitution_policy=ask",
        "quantity_adjustment": "Choose how many packs to add.\nscaling=household",
        "cart_ops": "Apply cart operations exactly as instructed.",
    })


# ---------------------------------------------------------------------------
# Shared context
# ---------------------------------------------------------------------------

@dataclass
class ContextEntry:
    source: str
    content: str
    size: int
    kind: str = "note"
    pinned: bool = False


def context_size(text: str) -> int:
    """Whitespace-token count."""
    return len(text.split())


class SharedContext:
    """
    Bounded context shared by the orchestrator and sub-agents.

    Total size never exceeds `budget`; the oldest non-pinned entries are
    evicted first. Only the current user goal is pinned.
    """

    def __init__(self, budget: int = DEFAULT_CONTEXT_BUDGET):
        if budget < 1:
            raise ValueError("context budget must be >= 1")
        self.budget = budget
        self.entries: List[ContextEntry] = []
        self.peak_size = 0
        self.evicted = 0

    @property
    def total_size(self) -> int:
        return sum(e.size for e in self.entries)

    def append(self, source: str, content: str, kind: str = "note", pinned: bool = False) -> ContextEntry:
        if context_size(content) > self.budget:
            content = " ".join(content.split()[:self.budget])
        entry = ContextEntry(source, content, context_size(content), kind, pinned)
        if pinned:
            for e in self.entries:
                e.pinned = False
        self.entries.append(entry)
        while self.total_size > self.budget:
            victim = next((e for e in self.entries if not e.pinned and e is not entry), None)
            if victim is None:
                victim = next(e for e in self.entries if e is not entry)
            self.entries.remove(victim)
            self.evicted += 1
        self.peak_size = max(self.peak_size, self.total_size)
        return entry

    def latest(self, kind: str) -> Optional[ContextEntry]:
        for entry in reversed(self.entries):
            if entry.kind == kind:
                return entry
        return None


# ---------------------------------------------------------------------------
# Node execution
# ---------------------------------------------------------------------------

class Policy(Protocol):
    async def act(self, node_name: str, prompt: str, observation: Mapping[str, Any]) -> List[Dict[str, Any]]:
        ...


@dataclass
class NodeRun:
    node: str
    context: Dict[str, Any]
    output: Dict[str, Any]
    tool_calls: List[ToolRequest] = field(default_factory=list)
    tool_results: List[ToolResponse] = field(default_factory=list)

    def invocation(self) -> Invocation:
        return Invocation(self.node, self.context, self.output)


async def run_node(
    node_name: str,
    prompt: str,
    context: Mapping[str, Any],
    session: ToolSession,
    policy: Policy,
) -> NodeRun:
    """
    Drive one sub-agent invocation to its result.

    Tool actions run against `session` and their responses are fed back into
    the observation; the first result action ends the invocation.
    """
    observation: Dict[str, Any] = json.loads(json.dumps(context))
    observation.setdefault("tool_results", [])
    run = NodeRun(node_name, dict(context), {"noop": True, "reason": "step limit"})
    for _step in range(MAX_NODE_STEPS):
        actions = await policy.act(node_name, prompt, observation)
        finished = None
        for action in actions:
            if action["type"] == "tool":
                request = ToolRequest(action["tool_name"], dict(action.get("arguments", {})))
                response = session.execute(request)
                run.tool_calls.append(request)
                run.tool_results.append(response)
                observation["tool_results"].append(response.to_dict())
                if request.tool_name == "search_catalog":
                    observation.setdefault("searches", []).append({
                        "query": request.arguments.get("query", ""),
                        "filters": list(request.arguments.get("filters", [])),
                        "results": list(response.response.get("results", [])),
                    })
            elif finished is None:
                finished = action
        if finished is not None:
            run.output = {k: v for k, v in finished.items() if k != "type"}
            if finished["type"] == "noop":
                run.output = {"noop": True, **run.output}
            break
    return run


# ---------------------------------------------------------------------------
# The agent
# ---------------------------------------------------------------------------

@dataclass
class GoalState:
    goal: GoalItem
    status: str = "pending"  # pending | added | asked | unavailable | declined | removed
    item_id: Optional[str] = None
    offer: Optional[Dict[str, Any]] = None
    substitution: bool = False


def _expand(goals: List[GoalItem], world: World) -> List[GoalItem]:
    """Replace recipe goals by their essential ingredients."""
    expanded: List[GoalItem] = []
    for goal in goals:
        recipe = world.recipes.get(goal.recipe) if goal.recipe else None
        if recipe is None:
            expanded.append(goal)
            continue
        expanded.extend(GoalItem(phrase=p, recipe=recipe.name) for p in recipe.essentials)
    return expanded


def _same_phrase(a: str, b: str) -> bool:
    return tokenize(a) == tokenize(b)


class ShoppingAgent:
    """Per-episode orchestrator state plus the sub-agent task runner."""

    def __init__(
        self,
        bundle: PromptBundle,
        world: World,
        policy: Policy,
        preferences: Optional[UserPreferences] = None,
        context_budget: int = DEFAULT_CONTEXT_BUDGET,
    ):
        self.bundle = bundle
        self.world = world
        self.policy = policy
        self.session = ToolSession(world, (preferences or UserPreferences()).to_dict())
        self.vocabulary: Vocabulary = vocabulary_from_world(world)
        self.context = SharedContext(context_budget)
        self.goals: List[GoalState] = []
        self.profile: Optional[Dict[str, Any]] = None
        self.store_id: Optional[str] = None
        self.stated_household: Optional[int] = None
        self.store_history: List[StoreSelection] = []

    # -- helpers ---------------------------------------------------------

    def _forwarded_preferences(self) -> Optional[Dict[str, Any]]:
        entry = self.context.latest("preferences")
        return json.loads(entry.content) if entry is not None else None

    def _household(self) -> Optional[int]:
        if self.stated_household:
            return self.stated_household
        prefs = self._forwarded_preferences()
        return prefs.get("household_size") if prefs else None

    def _item(self, item_id: str) -> CatalogItem:
        return self.world.item(self.store_id, item_id)

    def _choose_store(self) -> Store:
        phrases = [g.goal.phrase for g in self.goals if g.status in ("pending", "asked")]
        categories = {goal_category(self.world, p) for p in phrases}
        suitable = [s for s in self.world.stores if store_suits(s.store_type, categories)]
        preferred = (self.profile or {}).get("preferred_store")
        for store in suitable:
            if store.store_id == preferred:
                return store
        if suitable:
            return suitable[0]
        return max(
            self.world.stores,
            key=lambda s: (sum(store_suits(s.store_type, [c]) for c in categories), -self.world.stores.index(s)),
        )

    def _fold_intent(self, intent: UserIntent) -> Tuple[List[str], List[Dict[str, Any]], Optional[int]]:
        """Apply the message to orchestrator memory. Returns (removal targets, outcomes, approved goal)."""
        removals: List[str] = list(intent.removals)
        outcomes: List[Dict[str, Any]] = []
        approved: Optional[int] = None

        if intent.household_size:
            self.stated_household = intent.household_size

        asked = next((i for i, g in enumerate(self.goals) if g.status == "asked"), None)
        if asked is not None and intent.approval is True:
            approved = asked
        elif asked is not None and intent.approval is False:
            self.goals[asked].status = "declined"
            outcomes.append({"kind": "skipped", "phrase": self.goals[asked].goal.phrase})

        for skipped in intent.skips:
            for state in self.goals:
                if _same_phrase(state.goal.phrase, skipped) and state.status != "declined":
                    state.status = "declined"

        if intent.goal_op is GoalOp.SET:
            new_goals = _expand(list(intent.goals), self.world)
            kept = {g.phrase for g in new_goals}
            for state in self.goals:
                if state.goal.phrase not in kept and state.status == "added" and state.item_id:
                    removals.append(self._item(state.item_id).name.lower())
            self.goals = [GoalState(g) for g in new_goals]
            approved = None
        elif intent.goal_op is GoalOp.ADD:
            requested = _expand(list(intent.goals), self.world)
            phrases = {g.phrase for g in requested}
            merged = merge_goals([s.goal for s in self.goals], GoalOp.ADD, requested)
            states: List[GoalState] = []
            for goal in merged:
                old = next((s for s in self.goals if s.goal.phrase == goal.phrase), None)
                if old is None:
                    states.append(GoalState(goal))
                    continue
                if goal.phrase not in phrases or self.goals.index(old) == approved:
                    old.goal = goal
                    states.append(old)
                    continue
                changed = old.goal != goal
                if old.status == "added" and changed and old.item_id:
                    removals.append(self._item(old.item_id).name.lower())
                    states.append(GoalState(goal))
                elif old.status in ("removed", "unavailable", "declined", "asked"):
                    states.append(GoalState(goal))
                else:
                    old.goal = goal
                    states.append(old)
            self.goals = states
        return removals, outcomes, approved

    # -- the turn --------------------------------------------------------

    async def respond(self, text: str, turn_index: int) -> Turn:
        intent = parse_user_message(text, self.vocabulary)
        self.context.append("user", text, kind="user", pinned=intent.goal_op is not None)

        calls: List[ToolRequest] = []
        results: List[ToolResponse] = []
        invocations: List[Invocation] = []
        attempts: List[ItemAttempt] = []

        async def invoke(node: str, context: Mapping[str, Any]) -> Dict[str, Any]:
            run = await run_node(node, self.bundle.prompt(node), context, self.session, self.policy)
            calls.extend(run.tool_calls)
            results.extend(run.tool_results)
            invocations.append(run.invocation())
            return run.output

        removals, outcomes, approved = self._fold_intent(intent)
        pending = [i for i, g in enumerate(self.goals) if g.status == "pending"]
        if intent.close:
            pending, approved = [], None

        plan_output = await invoke("orchestrator", {
            "phase": "plan",
            "user_message": text,
            "pending_goals": pending,
            "approved_goal": approved,
            "removals": removals,
            "store_id": self.store_id,
            "preferences_loaded": self.profile is not None,
        })
        forward = bool(plan_output.get("forward_preferences", False))
        filler = int(plan_output.get("context_filler", 0) or 0)

        plan = new_plan(turn_index)
        pref_task = store_task = None
        chains: Dict[int, List[str]] = {}
        for spec in plan_output.get("tasks", []):
            node = spec.get("node")
            if node == "preference_search":
                pref_task = add_task(plan, node, "load profile")
            elif node == "cart_ops" and spec.get("operation") == "select_store":
                store_task = add_task(plan, node, "select store", [t for t in (pref_task,) if t])
            elif node == "cart_ops" and spec.get("operation") == "remove":
                add_task(plan, node, f"remove {spec.get('target')}", [], {"operation": "remove", "target": spec.get("target")})
            elif node in ("item_selection", "quantity_adjustment", "cart_ops") and spec.get("goal") is not None:
                goal = int(spec["goal"])
                chain = chains.setdefault(goal, [])
                deps = [chain[-1]] if chain else [t for t in (pref_task, store_task) if t]
                payload = {"goal": goal, "operation": spec.get("operation")}
                chain.append(add_task(plan, node, f"{node} for goal {goal}", deps, payload))
        detect_cycles(plan)

        while True:
            ready = get_ready_tasks(plan)
            if not ready:
                break
            for task_id in ready:
                task = plan["tasks"][task_id]
                update_task_status(plan, task_id, "in-progress")
                proceed = await self._execute_task(task, invoke, forward, turn_index, outcomes, attempts, approved)
                update_task_status(plan, task_id, "completed")
                if not proceed:
                    skip_dependents(plan, task_id)

        for state in self.goals:
            if state.status == "pending" and self.store_id is not None and not intent.close:
                state.status = "unavailable"

        if filler:
            self.context.append("orchestrator", " ".join(["note"] * filler), kind="filler")

        cart = self.session.cart
        reply = await invoke("orchestrator", {
            "phase": "respond",
            "outcomes": outcomes,
            "close": intent.close,
            "has_goals": bool(self.goals),
            "goals_open": any(g.status in ("pending", "asked") for g in self.goals),
            "cart_has_meat": bool(cart and any(self._item(l.item_id).category == "meat" for l in cart.lines)),
        })
        message = str(reply.get("message", "")) if not reply.get("noop") else ""
        self.context.append("orchestrator", message, kind="reply")
        logger.debug("[Episode] turn %d reply: %s", turn_index, message)
        return Turn("assistant", message, tuple(attempts), tuple(calls), tuple(results), tuple(invocations))

    async def _execute_task(self, task, invoke, forward, turn_index, outcomes, attempts, approved) -> bool:
        node = task["node"]
        payload = task["payload"]

        if node == "preference_search":
            output = await invoke(node, {"request": "profile"})
            self.profile = dict(output.get("preferences", {}))
            if forward:
                self.context.append("preference_search", json.dumps(self.profile, sort_keys=True), kind="preferences")
            return True

        if node == "cart_ops" and task["title"] == "select store":
            store = self._choose_store()
            output = await invoke(node, {"operation": "select_store", "store_id": store.store_id})
            if not output.get("ok"):
                return False
            self.store_id = store.store_id
            self.store_history.append(StoreSelection(turn_index, store.store_id, store.store_type))
            outcomes.append({"kind": "store", "name": store.name})
            return True

        if node == "cart_ops" and payload.get("operation") == "remove":
            target = payload.get("target") or ""
            cart = self.session.cart
            line = None
            if cart is not None:
                for l in cart.lines:
                    item = self._item(l.item_id)
                    if tokenize(item.name) == tokenize(target) or name_matches(target, item):
                        line = l
                        break
            if line is None:
                outcomes.append({"kind": "not_in_cart", "name": target})
                return False
            output = await invoke(node, {"operation": "remove", "item_id": line.item_id})
            if output.get("ok"):
                outcomes.append({"kind": "removed", "name": self._item(line.item_id).name})
                for state in self.goals:
                    if state.item_id == line.item_id and state.status == "added":
                        state.status = "removed"
                        state.item_id = None
            return bool(output.get("ok"))

        state = self.goals[payload["goal"]]
        if self.store_id is None:
            return False

        if node == "item_selection":
            context: Dict[str, Any] = {"goal": state.goal.to_dict(), "store_id": self.store_id, "searches": []}
            prefs = self._forwarded_preferences()
            if prefs is not None:
                context["preferences"] = prefs
            output = await invoke(node, context)
            decision = output.get("decision")
            item_id = output.get("item_id")
            if decision in ("select", "ask") and item_id and self.world.has_item(self.store_id, item_id):
                state.offer = self._item(item_id).to_dict()
                state.substitution = bool(output.get("substitution"))
                if decision == "select":
                    return True
                state.status = "asked"
                attempts.append(ItemAttempt(query=state.goal.phrase))
                outcomes.append({
                    "kind": "ask", "phrase": state.goal.phrase,
                    "name": state.offer["name"], "brand": state.offer["brand"],
                })
                return False
            state.status = "unavailable"
            attempts.append(ItemAttempt(query=state.goal.phrase))
            outcomes.append({"kind": "unavailable", "phrase": state.goal.phrase})
            return False

        if node == "quantity_adjustment":
            context = {"goal": state.goal.to_dict(), "item": state.offer}
            household = self._household()
            if household:
                context["household_size"] = household
            output = await invoke(node, context)
            quantity = output.get("quantity")
            state.offer = dict(state.offer, quantity=quantity if isinstance(quantity, int) and quantity >= 1 else 1)
            return True

        # cart_ops add
        item_id, quantity = state.offer["item_id"], state.offer.get("quantity", 1)
        output = await invoke(node, {"operation": "add", "item_id": item_id, "quantity": quantity})
        if not output.get("ok"):
            state.status = "unavailable"
            return False
        state.status = "added"
        state.item_id = item_id
        attempts.append(ItemAttempt(
            query=state.goal.phrase,
            selected_item_id=item_id,
            quantity=quantity,
            substitution_approved=approved == payload["goal"],
        ))
        outcomes.append({"kind": "added", "quantity": quantity, "name": state.offer["name"]})
        self.context.append("cart_ops", f"added {quantity} {state.offer['name']}", kind="cart")
        return True


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

class UserSource(Protocol):
    preferences: UserPreferences

    async def next_turn(self, turns: List[Turn]) -> Tuple[Optional[str], bool]:
        ...


def policy_for(backend=None) -> Policy:
    return LLMPolicy(backend) if backend is not None else ScriptedPolicy()


async def run_episode(
    bundle: PromptBundle,
    world: World,
    user_source: UserSource,
    backend=None,
    max_turns: int = DEFAULT_MAX_TURNS,
    session_id: str = "episode",
    policy: Optional[Policy] = None,
    context_budget: int = DEFAULT_CONTEXT_BUDGET,
) -> Trace:
    """
    Alternate user and assistant turns until the user terminates or
    `max_turns` user turns have been played.

    A user turn of None ends the episode at once; a message flagged as
    terminating still gets an assistant reply.
    """
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    policy = policy or policy_for(backend)
    preferences = getattr(user_source, "preferences", None) or UserPreferences()
    agent = ShoppingAgent(bundle, world, policy, preferences, context_budget)
    turns: List[Turn] = []

    for _ in range(max_turns):
        text, terminate = await user_source.next_turn(list(turns))
        if text is None:
            break
        turns.append(Turn("user", text))
        turns.append(await agent.respond(text, len(turns) - 1))
        if terminate:
            break

    logger.info("[Episode] %s finished after %d turns", session_id, len(turns))
    return Trace(session_id, preferences, tuple(agent.store_history), tuple(turns))
