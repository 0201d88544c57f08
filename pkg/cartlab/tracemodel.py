# cartlab/tracemodel.py
"""
Episode traces: data model, wire format and cart-evidence replay.

Wire field names follow the judge-prompt contract exactly, including the
mixed-case `storeSelectionHistory`.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

from .errors import InvalidInput, NoSuchLine, NotFound, ValidationError
from .planner import require_node
from .schemas import decode_json
from .worldsim import (
    CART_MUTATIONS,
    Cart,
    CartOp,
    ToolRequest,
    ToolResponse,
    World,
    apply_cart_op,
    name_matches,
)


class VerdictValue(Enum):
    PASS = "pass"
    FAIL = "fail"
    NA = "na"


Verdict = Dict[str, VerdictValue]


@dataclass(frozen=True)
class UserPreferences:
    household_size: int = 1
    dietary: FrozenSet[str] = frozenset()
    preferred_brands: FrozenSet[str] = frozenset()
    preferred_store: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "household_size": self.household_size,
            "dietary": sorted(self.dietary),
            "preferred_brands": sorted(self.preferred_brands),
            "preferred_store": self.preferred_store,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UserPreferences":
        return cls(
            household_size=data.get("household_size", 1),
            dietary=frozenset(data.get("dietary", ())),
            preferred_brands=frozenset(data.get("preferred_brands", ())),
            preferred_store=data.get("preferred_store"),
        )


@dataclass(frozen=True)
class ItemAttempt:
    query: str
    selected_item_id: Optional[str] = None
    quantity: Optional[int] = None
    substitution_approved: bool = False

    @property
    def selected(self) -> bool:
        return self.selected_item_id is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "query": self.query,
            "selected_item_id": self.selected_item_id,
            "quantity": self.quantity,
            "substitution_approved": self.substitution_approved,
        }


@dataclass(frozen=True)
class Invocation:
    """One sub-agent call: the bounded context it received and what it produced."""

    node: str
    context: Mapping[str, Any] = field(default_factory=dict)
    output: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"node": self.node, "context": dict(self.context), "output": dict(self.output)}


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    items: Tuple[ItemAttempt, ...] = ()
    tool_calls: Tuple[ToolRequest, ...] = ()
    tool_results: Tuple[ToolResponse, ...] = ()
    invocations: Tuple[Invocation, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        if self.role == "user":
            return {"role": self.role, "text": self.text}
        return {
            "role": self.role,
            "text": self.text,
            "items": [i.to_dict() for i in self.items],
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "tool_results": [r.to_dict() for r in self.tool_results],
            "invocations": [i.to_dict() for i in self.invocations],
        }


@dataclass(frozen=True)
class StoreSelection:
    turn: int
    store_id: str
    store_type: str

    def to_dict(self) -> Dict[str, Any]:
        return {"turn": self.turn, "store_id": self.store_id, "store_type": self.store_type}


@dataclass(frozen=True)
class Trace:
    session_id: str
    user_preferences: UserPreferences = field(default_factory=UserPreferences)
    store_selection_history: Tuple[StoreSelection, ...] = ()
    turns: Tuple[Turn, ...] = ()

    @property
    def first_selected_store(self) -> Optional[StoreSelection]:
        return self.store_selection_history[0] if self.store_selection_history else None

    def assistant_turns(self) -> List[Tuple[int, Turn]]:
        return [(i, t) for i, t in enumerate(self.turns) if t.role == "assistant"]

    def user_turns(self) -> List[Tuple[int, Turn]]:
        return [(i, t) for i, t in enumerate(self.turns) if t.role == "user"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "session_id": self.session_id,
            "user_preferences": self.user_preferences.to_dict(),
            "storeSelectionHistory": [s.to_dict() for s in self.store_selection_history],
            "turns": [t.to_dict() for t in self.turns],
        }


@dataclass(frozen=True)
class LabeledVerdict:
    """A verdict (judge output or human labels) tied to its session."""

    session_id: str
    verdict: Verdict


@dataclass(frozen=True)
class DatasetExample:
    input_context: Mapping[str, Any]
    logged_output: Mapping[str, Any]
    trace_id: str
    turn_index: int
    preferences: UserPreferences = field(default_factory=UserPreferences)


# ---------------------------------------------------------------------------
# Parsing and serialization
# ---------------------------------------------------------------------------

def _turn_from_dict(data: Mapping[str, Any], index: int) -> Turn:
    role = data["role"]
    items = tuple(
        ItemAttempt(
            query=i["query"],
            selected_item_id=i.get("selected_item_id"),
            quantity=i.get("quantity"),
            substitution_approved=bool(i.get("substitution_approved", False)),
        )
        for i in data.get("items", [])
    )
    calls = tuple(ToolRequest.from_dict(c) for c in data.get("tool_calls", []))
    results = tuple(ToolResponse.from_dict(r) for r in data.get("tool_results", []))
    invocations = tuple(
        Invocation(i["node"], dict(i.get("context", {})), dict(i.get("output", {})))
        for i in data.get("invocations", [])
    )

    if role == "user" and (items or calls or results or invocations):
        raise ValidationError(f"turn {index}: user turns carry no items or tool fields")
    if len(calls) != len(results):
        raise ValidationError(
            f"turn {index}: {len(calls)} tool_calls but {len(results)} tool_results"
        )
    for position, (call, result) in enumerate(zip(calls, results)):
        if call.tool_name != result.tool_name:
            raise ValidationError(
                f"turn {index}: tool_results[{position}] answers {result.tool_name}, "
                f"expected {call.tool_name}"
            )
    return Turn(role, data["text"], items, calls, results, invocations)


def trace_from_dict(data: Mapping[str, Any]) -> Trace:
    """Build a Trace from a schema-valid document, enforcing the domain invariants."""
    prefs = UserPreferences.from_dict(data.get("user_preferences", {}))
    if prefs.household_size < 1:
        raise ValidationError("user_preferences.household_size must be >= 1")

    turns = tuple(_turn_from_dict(t, i) for i, t in enumerate(data.get("turns", [])))
    history = tuple(
        StoreSelection(h["turn"], h["store_id"], h["store_type"])
        for h in data.get("storeSelectionHistory", [])
    )
    previous = -1
    for entry in history:
        if entry.turn < previous or entry.turn >= max(len(turns), 1):
            raise ValidationError(f"storeSelectionHistory turn {entry.turn} out of order or range")
        previous = entry.turn
    return Trace(data["session_id"], prefs, history, turns)


def parse_trace(document: Union[bytes, str]) -> Trace:
    """Parse the trace JSON format. ParseError on malformed input, ValidationError on invariants."""
    return trace_from_dict(decode_json(document, "trace"))


def serialize_trace(trace: Trace, compact: bool = False) -> str:
    """Inverse of parse_trace. `compact` renders a single line (judge prompt embedding)."""
    if compact:
        return json.dumps(trace.to_dict(), separators=(",", ":"))
    return json.dumps(trace.to_dict(), indent=2)


def load_trace(path: Union[str, Path]) -> Trace:
    return parse_trace(Path(path).read_bytes())


def load_labels(source: Union[str, Path, bytes]) -> LabeledVerdict:
    """Load a human-label file: {"session_id", "labels": {check_id: pass|fail|na}}."""
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    data = decode_json(raw, "labels")
    return LabeledVerdict(
        session_id=data["session_id"],
        verdict={cid: VerdictValue(v) for cid, v in data["labels"].items()},
    )


def labels_to_dict(labeled: LabeledVerdict) -> Dict[str, Any]:
    return {
        "session_id": labeled.session_id,
        "labels": {cid: v.value for cid, v in sorted(labeled.verdict.items())},
    }


# ---------------------------------------------------------------------------
# Cart evidence
# ---------------------------------------------------------------------------

class EvidenceKind(Enum):
    SELECT_STORE = "select_store"
    ADD = "add"
    REMOVE = "remove"
    SET_QUANTITY = "set_quantity"


_CART_OPS = {
    EvidenceKind.ADD: CartOp.ADD,
    EvidenceKind.REMOVE: CartOp.REMOVE,
    EvidenceKind.SET_QUANTITY: CartOp.SET_QUANTITY,
}


@dataclass(frozen=True)
class EvidenceEntry:
    turn_index: int
    kind: EvidenceKind
    store_id: str
    item_id: Optional[str] = None
    quantity: Optional[int] = None
    source: str = "tool_result"


def validate_against_world(trace: Trace, world: World) -> None:
    for entry in trace.store_selection_history:
        try:
            store = world.store(entry.store_id)
        except NotFound as e:
            raise ValidationError(f"storeSelectionHistory: {e}")
        if store.store_type != entry.store_type:
            raise ValidationError(
                f"storeSelectionHistory: {entry.store_id} is {store.store_type}, trace says {entry.store_type}"
            )


def _tool_evidence(turn_index: int, call: ToolRequest, result: ToolResponse, store_id: Optional[str]):
    """Evidence entries confirmed by one successful tool result."""
    response = result.response
    if result.tool_name == "select_store":
        return [EvidenceEntry(turn_index, EvidenceKind.SELECT_STORE, response.get("store_id") or call.arguments["store_id"])]
    if store_id is None:
        raise ValidationError(f"turn {turn_index}: {result.tool_name} before any store selection")
    if result.tool_name == "add_to_cart":
        added = response.get("added_items") or [call.arguments]
        return [
            EvidenceEntry(turn_index, EvidenceKind.ADD, store_id, a["item_id"], a.get("quantity", 1))
            for a in added
        ]
    if result.tool_name == "remove_from_cart":
        removed = response.get("removed_items") or [call.arguments]
        return [EvidenceEntry(turn_index, EvidenceKind.REMOVE, store_id, r["item_id"]) for r in removed]
    if result.tool_name == "set_quantity":
        updated = response.get("updated_items") or [call.arguments]
        return [
            EvidenceEntry(turn_index, EvidenceKind.SET_QUANTITY, store_id, u["item_id"], u["quantity"])
            for u in updated
        ]
    return []


def _naive_pick(world: World, store_id: str, turn: Turn, attempt: ItemAttempt) -> Optional[str]:
    """First search result in the turn whose name matches the attempt query."""
    for call, result in zip(turn.tool_calls, turn.tool_results):
        if result.tool_name != "search_catalog" or not result.ok:
            continue
        for item in result.response.get("results", []):
            if world.has_item(store_id, item.get("item_id", "")) and name_matches(
                attempt.query, world.item(store_id, item["item_id"])
            ):
                return item["item_id"]
    return None


def cart_evidence(trace: Trace, world: World, strict_grounding: bool = True) -> List[EvidenceEntry]:
    """
    The confirmed-evidence log, in turn order.

    Per assistant turn: successful cart tool results in call order, then
    ItemAttempts whose selected_item_id was not already confirmed by an
    add_to_cart result in the same turn. With `strict_grounding=False`,
    unselected attempts also pick up the first name-matching search result.
    """
    validate_against_world(trace, world)
    history_by_turn: Dict[int, List[StoreSelection]] = {}
    for entry in trace.store_selection_history:
        history_by_turn.setdefault(entry.turn, []).append(entry)

    evidence: List[EvidenceEntry] = []
    store_id: Optional[str] = None
    for index, turn in enumerate(trace.turns):
        pairs = list(zip(turn.tool_calls, turn.tool_results))
        selects_by_tool = any(r.tool_name == "select_store" and r.ok for _c, r in pairs)
        if not selects_by_tool:
            for entry in history_by_turn.get(index, []):
                evidence.append(EvidenceEntry(index, EvidenceKind.SELECT_STORE, entry.store_id, source="history"))
                store_id = entry.store_id
        if turn.role != "assistant":
            continue

        added_here = set()
        for call, result in pairs:
            if not result.ok or result.tool_name not in CART_MUTATIONS + ("select_store",):
                continue
            for entry in _tool_evidence(index, call, result, store_id):
                evidence.append(entry)
                if entry.kind is EvidenceKind.SELECT_STORE:
                    store_id = entry.store_id
                elif entry.kind is EvidenceKind.ADD:
                    added_here.add(entry.item_id)

        for attempt in turn.items:
            item_id, source = attempt.selected_item_id, "selected_item_id"
            if item_id is None and not strict_grounding and store_id is not None:
                item_id, source = _naive_pick(world, store_id, turn, attempt), "search_result"
            if item_id is None or item_id in added_here:
                continue
            if store_id is None:
                raise ValidationError(f"turn {index}: item evidence before any store selection")
            evidence.append(EvidenceEntry(index, EvidenceKind.ADD, store_id, item_id, attempt.quantity or 1, source))
            added_here.add(item_id)
    return evidence


def replay_evidence(
    evidence: Iterable[EvidenceEntry],
    world: World,
    turn_count: int = 0,
) -> Tuple[Cart, List[Optional[Cart]]]:
    """
    Replay an evidence log through worldsim.apply_cart_op.

    Returns the final cart and the cart after each turn index (None before
    any store was selected).
    """
    cart: Optional[Cart] = None
    per_turn: List[Optional[Cart]] = [None] * turn_count
    evidence = list(evidence)
    cursor = 0
    for index in range(max(turn_count, max((e.turn_index + 1 for e in evidence), default=0))):
        while cursor < len(evidence) and evidence[cursor].turn_index == index:
            entry = evidence[cursor]
            cursor += 1
            if entry.kind is EvidenceKind.SELECT_STORE:
                if cart is None or cart.store_id != entry.store_id:
                    cart = Cart(entry.store_id, ())
                continue
            if cart is None or cart.store_id != entry.store_id:
                cart = Cart(entry.store_id, ())
            try:
                cart, _response = apply_cart_op(cart, world, _CART_OPS[entry.kind], entry.item_id, entry.quantity)
            except (NotFound, NoSuchLine, InvalidInput) as e:
                raise ValidationError(f"turn {entry.turn_index}: {e}")
        if index < turn_count:
            per_turn[index] = cart
    final = cart if cart is not None else Cart("", ())
    return final, per_turn


def final_cart_state(trace: Trace, world: World, strict_grounding: bool = True) -> Cart:
    """Cart holding exactly the confirmed evidence, applied in turn order."""
    final, _ = replay_evidence(cart_evidence(trace, world, strict_grounding), world, len(trace.turns))
    return final


def cart_states(trace: Trace, world: World, strict_grounding: bool = True) -> List[Optional[Cart]]:
    """Cart after each turn."""
    _, per_turn = replay_evidence(cart_evidence(trace, world, strict_grounding), world, len(trace.turns))
    return per_turn


def cart_history(trace: Trace, world: World, strict_grounding: bool = True) -> List[Tuple[int, str, str]]:
    """Every confirmed addition as (turn_index, store_id, item_id), in order."""
    return [
        (e.turn_index, e.store_id, e.item_id)
        for e in cart_evidence(trace, world, strict_grounding)
        if e.kind is EvidenceKind.ADD
    ]


# ---------------------------------------------------------------------------
# Node datasets
# ---------------------------------------------------------------------------

def extract_subagent_dataset(traces: Iterable[Trace], node_name: str) -> List[DatasetExample]:
    """One example per logged invocation of `node_name`, ordered by (trace_id, turn_index)."""
    require_node(node_name)
    examples = []
    for trace in sorted(traces, key=lambda t: t.session_id):
        for index, turn in enumerate(trace.turns):
            for invocation in turn.invocations:
                if invocation.node == node_name:
                    examples.append(DatasetExample(
                        input_context=invocation.context,
                        logged_output=invocation.output,
                        trace_id=trace.session_id,
                        turn_index=index,
                        preferences=trace.user_preferences,
                    ))
    return examples
