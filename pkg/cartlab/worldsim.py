# cartlab/worldsim.py
"""Deterministic grocery world: stores, catalogs, carts and the tool APIs agents call."""

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

from .errors import InvalidInput, NoSuchLine, NotFound, ValidationError
from .schemas import decode_json

STORE_TYPES = ("grocery", "convenience", "drug", "liquor", "specialty")

CATEGORIES = (
    "dairy", "bakery", "produce", "meat", "pantry", "beverage", "snacks",
    "alcohol", "flowers", "party", "household", "pharmacy",
)

# Which store types are appropriate for which item categories
STORE_SUITABILITY: Dict[str, FrozenSet[str]] = {
    "grocery": frozenset({
        "dairy", "bakery", "produce", "meat", "pantry", "beverage", "snacks",
        "flowers", "party", "household",
    }),
    "convenience": frozenset({"dairy", "beverage", "snacks", "household"}),
    "drug": frozenset({"pharmacy", "household", "beverage", "snacks"}),
    "liquor": frozenset({"alcohol", "beverage", "snacks"}),
    "specialty": frozenset({"bakery", "flowers"}),
}

# Categories where dietary preferences are relevant
FOOD_CATEGORIES = frozenset({"dairy", "bakery", "produce", "meat", "pantry", "beverage", "snacks"})

TOOL_NAMES = (
    "select_store", "search_catalog", "add_to_cart", "remove_from_cart",
    "set_quantity", "get_cart", "get_preferences",
)

CART_MUTATIONS = ("add_to_cart", "remove_from_cart", "set_quantity")

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


def tokenize(text: str) -> List[str]:
    """Lower-case word tokens; hyphenated words stay whole ("gluten-free")."""
    return _TOKEN_RE.findall((text or "").lower())


@dataclass(frozen=True)
class Store:
    store_id: str
    store_type: str
    name: str

    def to_dict(self) -> Dict[str, Any]:
        return {"store_id": self.store_id, "store_type": self.store_type, "name": self.name}


@dataclass(frozen=True)
class PackSize:
    count: int
    unit: str


@dataclass(frozen=True)
class CatalogItem:
    item_id: str
    name: str
    brand: str
    attribute_tags: FrozenSet[str]
    price: int
    pack_size: PackSize
    category: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "item_id": self.item_id,
            "name": self.name,
            "brand": self.brand,
            "attribute_tags": sorted(self.attribute_tags),
            "price": self.price,
            "pack_size": {"count": self.pack_size.count, "unit": self.pack_size.unit},
            "category": self.category,
        }


@dataclass(frozen=True)
class Recipe:
    name: str
    essentials: Tuple[str, ...]
    optional: Tuple[str, ...] = ()


@dataclass(frozen=True)
class World:
    """Immutable after load; safe to share across parallel episodes."""

    stores: Tuple[Store, ...]
    catalogs: Mapping[str, Tuple[CatalogItem, ...]]
    recipes: Mapping[str, Recipe] = field(default_factory=dict)

    def store(self, store_id: str) -> Store:
        for store in self.stores:
            if store.store_id == store_id:
                return store
        raise NotFound(f"unknown store_id: {store_id}")

    def catalog(self, store_id: str) -> Tuple[CatalogItem, ...]:
        self.store(store_id)
        return self.catalogs.get(store_id, ())

    def item(self, store_id: str, item_id: str) -> CatalogItem:
        for item in self.catalog(store_id):
            if item.item_id == item_id:
                return item
        raise NotFound(f"unknown item {item_id} in store {store_id}")

    def has_item(self, store_id: str, item_id: str) -> bool:
        try:
            self.item(store_id, item_id)
            return True
        except NotFound:
            return False

    def all_items(self) -> Iterable[Tuple[Store, CatalogItem]]:
        """Every (store, item) pair in fixture store order, items by item_id."""
        for store in self.stores:
            for item in sorted(self.catalogs.get(store.store_id, ()), key=lambda i: i.item_id):
                yield store, item


@dataclass(frozen=True)
class CartLine:
    item_id: str
    quantity: int


@dataclass(frozen=True)
class Cart:
    store_id: str
    lines: Tuple[CartLine, ...] = ()

    def quantity_of(self, item_id: str) -> int:
        for line in self.lines:
            if line.item_id == item_id:
                return line.quantity
        return 0

    def item_ids(self) -> List[str]:
        return [line.item_id for line in self.lines]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "store_id": self.store_id,
            "lines": [{"item_id": l.item_id, "quantity": l.quantity} for l in self.lines],
        }


class CartOp(Enum):
    ADD = "add"
    REMOVE = "remove"
    SET_QUANTITY = "set_quantity"


@dataclass(frozen=True)
class ToolRequest:
    tool_name: str
    arguments: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"tool_name": self.tool_name, "arguments": dict(self.arguments)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolRequest":
        return cls(tool_name=data["tool_name"], arguments=dict(data.get("arguments", {})))


@dataclass(frozen=True)
class ToolResponse:
    tool_name: str
    response: Mapping[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(self.response.get("ok", False))

    def to_dict(self) -> Dict[str, Any]:
        return {"tool_name": self.tool_name, "response": dict(self.response)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolResponse":
        return cls(tool_name=data["tool_name"], response=dict(data.get("response", {})))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def world_from_dict(data: Mapping[str, Any]) -> World:
    """Build a World from an already schema-validated document."""
    stores = tuple(Store(s["store_id"], s["store_type"], s["name"]) for s in data["stores"])
    store_ids = [s.store_id for s in stores]
    if len(set(store_ids)) != len(store_ids):
        raise ValidationError("duplicate store_id in world fixture")

    catalogs: Dict[str, Tuple[CatalogItem, ...]] = {}
    for store_id, items in data["catalogs"].items():
        if store_id not in store_ids:
            raise ValidationError(f"catalog for unknown store {store_id}")
        parsed = tuple(
            CatalogItem(
                item_id=i["item_id"],
                name=i["name"],
                brand=i["brand"],
                attribute_tags=frozenset(t.lower() for t in i.get("attribute_tags", [])),
                price=i["price"],
                pack_size=PackSize(i["pack_size"]["count"], i["pack_size"]["unit"]),
                category=i.get("category", "pantry"),
            )
            for i in items
        )
        ids = [i.item_id for i in parsed]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate item_id in catalog of {store_id}")
        catalogs[store_id] = parsed

    recipes = {
        name: Recipe(name, tuple(r["essentials"]), tuple(r.get("optional", [])))
        for name, r in data.get("recipes", {}).items()
    }
    return World(stores=stores, catalogs=catalogs, recipes=recipes)


def load_world(source: Union[str, Path, bytes]) -> World:
    """Load a world fixture from a path or raw JSON bytes."""
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    return world_from_dict(decode_json(raw, "world"))


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def overlap_score(query: str, item: CatalogItem) -> int:
    """Number of distinct query tokens that also occur in the item name."""
    return len(set(tokenize(query)) & set(tokenize(item.name)))


def name_matches(phrase: str, item: CatalogItem) -> bool:
    """True when every token of `phrase` appears in the item name."""
    tokens = set(tokenize(phrase))
    return bool(tokens) and tokens <= set(tokenize(item.name))


def search_catalog(
    world: World,
    store_id: str,
    query: str,
    filters: Iterable[str] = (),
    limit: int = 5,
) -> List[CatalogItem]:
    """
    Rank a store's catalog against a query.

    Items must carry every tag in `filters`. Ranking is descending lexical
    overlap with the item name, ties broken by ascending item_id.
    """
    if limit < 1:
        raise InvalidInput(f"limit must be >= 1, got {limit}")
    required = {f.lower() for f in filters}
    candidates = [i for i in world.catalog(store_id) if required <= i.attribute_tags]
    candidates.sort(key=lambda i: (-overlap_score(query, i), i.item_id))
    return candidates[:limit]


def goal_category(world: World, phrase: str) -> Optional[str]:
    """Category of the first item in the world whose name matches `phrase`."""
    for _store, item in world.all_items():
        if name_matches(phrase, item):
            return item.category
    return None


def store_suits(store_type: str, categories: Iterable[Optional[str]]) -> bool:
    allowed = STORE_SUITABILITY.get(store_type, frozenset())
    return all(c in allowed for c in categories if c is not None)


# ---------------------------------------------------------------------------
# Carts
# ---------------------------------------------------------------------------

def cart_digest(cart: Optional[Cart]) -> str:
    """SHA-256 over the canonical cart lines."""
    payload = cart.to_dict() if cart is not None else {"store_id": None, "lines": []}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_cart_op(
    cart: Cart,
    world: World,
    op: CartOp,
    item_id: str,
    quantity: Optional[int] = None,
) -> Tuple[Cart, ToolResponse]:
    """
    Apply one cart mutation.

    Add merges into an existing line, Remove deletes the line, SetQuantity
    replaces the quantity. Returns the new cart and the tool response.
    """
    if op in (CartOp.ADD, CartOp.SET_QUANTITY):
        if not isinstance(quantity, int) or isinstance(quantity, bool) or quantity < 1:
            raise InvalidInput(f"quantity must be a positive integer, got {quantity!r}")
    world.item(cart.store_id, item_id)

    lines = list(cart.lines)
    index = next((i for i, l in enumerate(lines) if l.item_id == item_id), None)

    if op is CartOp.ADD:
        if index is None:
            lines.append(CartLine(item_id, quantity))
        else:
            lines[index] = CartLine(item_id, lines[index].quantity + quantity)
        new_cart = Cart(cart.store_id, tuple(lines))
        return new_cart, ToolResponse("add_to_cart", {
            "ok": True,
            "added_items": [{"item_id": item_id, "quantity": quantity}],
            "cart_digest": cart_digest(new_cart),
        })

    if index is None:
        raise NoSuchLine(f"no cart line for item {item_id}")

    if op is CartOp.REMOVE:
        del lines[index]
        new_cart = Cart(cart.store_id, tuple(lines))
        return new_cart, ToolResponse("remove_from_cart", {
            "ok": True,
            "removed_items": [{"item_id": item_id}],
            "cart_digest": cart_digest(new_cart),
        })

    lines[index] = CartLine(item_id, quantity)
    new_cart = Cart(cart.store_id, tuple(lines))
    return new_cart, ToolResponse("set_quantity", {
        "ok": True,
        "updated_items": [{"item_id": item_id, "quantity": quantity}],
        "cart_digest": cart_digest(new_cart),
    })


def cart_total(cart: Cart, world: World) -> int:
    """Total price in cents."""
    return sum(world.item(cart.store_id, l.item_id).price * l.quantity for l in cart.lines)


# ---------------------------------------------------------------------------
# Tool execution
# ---------------------------------------------------------------------------

class ToolSession:
    """Per-episode tool state: the world, the user's preferences block and the cart."""

    def __init__(self, world: World, preferences: Optional[Mapping[str, Any]] = None):
        self.world = world
        self.preferences = dict(preferences or {})
        self.cart: Optional[Cart] = None

    def execute(self, request: ToolRequest) -> ToolResponse:
        """Execute a tool call. World errors become `ok: false` responses, never exceptions."""
        handler = getattr(self, f"_tool_{request.tool_name}", None)
        if handler is None or request.tool_name not in TOOL_NAMES:
            return ToolResponse(request.tool_name, {"ok": False, "error": f"NotFound: unknown tool {request.tool_name}"})
        try:
            return handler(dict(request.arguments))
        except (NotFound, NoSuchLine, InvalidInput) as e:
            return ToolResponse(request.tool_name, {"ok": False, "error": f"{type(e).__name__}: {e}"})
        except (KeyError, TypeError) as e:
            return ToolResponse(request.tool_name, {"ok": False, "error": f"InvalidInput: bad arguments ({e})"})

    def _require_cart(self) -> Cart:
        if self.cart is None:
            raise NotFound("no store selected")
        return self.cart

    def _tool_select_store(self, args: Dict[str, Any]) -> ToolResponse:
        store = self.world.store(args["store_id"])
        if self.cart is None or self.cart.store_id != store.store_id:
            self.cart = Cart(store.store_id, ())
        return ToolResponse("select_store", {
            "ok": True,
            "store_id": store.store_id,
            "store_type": store.store_type,
            "cart_digest": cart_digest(self.cart),
        })

    def _tool_search_catalog(self, args: Dict[str, Any]) -> ToolResponse:
        store_id = args.get("store_id") or self._require_cart().store_id
        results = search_catalog(
            self.world, store_id, args.get("query", ""),
            filters=args.get("filters", ()), limit=int(args.get("limit", 5)),
        )
        return ToolResponse("search_catalog", {"ok": True, "results": [i.to_dict() for i in results]})

    def _mutate(self, op: CartOp, args: Dict[str, Any]) -> ToolResponse:
        self.cart, response = apply_cart_op(
            self._require_cart(), self.world, op, args["item_id"], args.get("quantity"),
        )
        return response

    def _tool_add_to_cart(self, args: Dict[str, Any]) -> ToolResponse:
        return self._mutate(CartOp.ADD, args)

    def _tool_remove_from_cart(self, args: Dict[str, Any]) -> ToolResponse:
        return self._mutate(CartOp.REMOVE, args)

    def _tool_set_quantity(self, args: Dict[str, Any]) -> ToolResponse:
        return self._mutate(CartOp.SET_QUANTITY, args)

    def _tool_get_cart(self, _args: Dict[str, Any]) -> ToolResponse:
        cart = self._require_cart()
        return ToolResponse("get_cart", {
            "ok": True,
            "cart": cart.to_dict(),
            "total": cart_total(cart, self.world),
            "cart_digest": cart_digest(cart),
        })

    def _tool_get_preferences(self, _args: Dict[str, Any]) -> ToolResponse:
        return ToolResponse("get_preferences", {"ok": True, "preferences": dict(self.preferences)})


def execute_tool(world: World, session: ToolSession, request: ToolRequest) -> ToolResponse:
    """Run one tool call against `session`, which must be bound to `world`."""
    if session.world is not world:
        raise InvalidInput("tool session belongs to a different world")
    return session.execute(request)
