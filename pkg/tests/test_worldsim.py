# tests/test_worldsim.py
"""Tests for the deterministic shopping world and its tool APIs."""

import json
import random
import re

import pytest

from cartlab.errors import InvalidInput, NoSuchLine, NotFound, ParseError, ValidationError
from cartlab.worldsim import (
    Cart,
    CartLine,
    CartOp,
    ToolRequest,
    ToolSession,
    apply_cart_op,
    cart_digest,
    cart_total,
    execute_tool,
    goal_category,
    load_world,
    name_matches,
    search_catalog,
    store_suits,
    tokenize,
    world_from_dict,
)


def minimal_world_doc(**overrides):
    doc = {
        "stores": [{"store_id": "s1", "store_type": "grocery", "name": "Corner"}],
        "catalogs": {
            "s1": [
                {"item_id": "a", "name": "Whole Milk", "brand": "B", "price": 100,
                 "pack_size": {"count": 1, "unit": "gal"}, "category": "dairy"},
            ],
        },
    }
    doc.update(overrides)
    return doc


class TestLoading:
    """World fixtures load from disk and bytes and are validated."""

    def test_fixture_stores(self, world):
        assert [s.store_id for s in world.stores][:2] == ["s-grocery-1", "s-grocery-2"]
        assert world.store("s-grocery-1").name == "FreshMart"
        assert "tacos" in world.recipes
        assert world.recipes["tacos"].essentials == ("taco shells", "ground beef", "cheese")

    def test_load_from_bytes(self):
        world = load_world(json.dumps(minimal_world_doc()).encode())
        item = world.item("s1", "a")
        assert item.price == 100
        assert item.attribute_tags == frozenset()

    def test_invalid_json(self):
        with pytest.raises(ParseError):
            load_world(b"{not json")

    def test_schema_violation_reports_path(self):
        doc = minimal_world_doc()
        doc["catalogs"]["s1"][0]["price"] = -5
        with pytest.raises(ParseError) as info:
            load_world(json.dumps(doc).encode())
        assert info.value.path == "$.catalogs.s1[0].price"

    def test_duplicate_item_ids(self):
        doc = minimal_world_doc()
        doc["catalogs"]["s1"].append(dict(doc["catalogs"]["s1"][0]))
        with pytest.raises(ValidationError):
            world_from_dict(doc)

    def test_catalog_for_unknown_store(self):
        doc = minimal_world_doc()
        doc["catalogs"]["ghost"] = []
        with pytest.raises(ValidationError):
            world_from_dict(doc)

    def test_unknown_lookups(self, world):
        with pytest.raises(NotFound):
            world.store("nowhere")
        with pytest.raises(NotFound):
            world.item("s-grocery-1", "zz-999")
        assert not world.has_item("s-conv-1", "g1-001")


class TestSearch:
    """Catalog ranking is lexical overlap, ties broken by item id."""

    def test_tokenize_keeps_hyphenated_words(self):
        assert tokenize("Gluten-Free Bread!") == ["gluten-free", "bread"]

    def test_ties_ordered_by_item_id(self, world):
        ids = [i.item_id for i in search_catalog(world, "s-grocery-1", "milk", limit=3)]
        assert ids == ["g1-001", "g1-002", "g1-003"]

    def test_higher_overlap_first(self, world):
        ids = [i.item_id for i in search_catalog(world, "s-grocery-1", "whole milk", limit=3)]
        assert ids == ["g1-001", "g1-003", "g1-002"]

    def test_filters_require_every_tag(self, world):
        results = search_catalog(world, "s-grocery-1", "milk", filters=["vegan"])
        assert results[0].item_id == "g1-002"
        assert all("vegan" in i.attribute_tags for i in results)
        assert len(results) == 5

    def test_limit_must_be_positive(self, world):
        with pytest.raises(InvalidInput):
            search_catalog(world, "s-grocery-1", "milk", limit=0)

    def test_search_is_deterministic(self, world):
        first = search_catalog(world, "s-grocery-1", "peanut butter")
        second = search_catalog(world, "s-grocery-1", "peanut butter")
        assert first == second
        assert [i.brand for i in first[:2]] == ["Nutty", "Goldspread"]

    @pytest.mark.parametrize("query,limit", [
        ("taco shells", 2), ("whole milk", 3), ("organic bananas", 4), ("peanut butter", 5), ("cake", 1),
    ])
    def test_matches_exhaustive_ranking(self, world, query, limit):
        words = set(re.findall(r"[a-z0-9]+(?:-[a-z0-9]+)*", query))
        ranked = sorted(
            (-len(words & set(re.findall(r"[a-z0-9]+(?:-[a-z0-9]+)*", item.name.lower()))), item.item_id)
            for item in world.catalog("s-grocery-1")
        )
        expected = [item_id for _score, item_id in ranked[:limit]]
        assert [i.item_id for i in search_catalog(world, "s-grocery-1", query, limit=limit)] == expected

    def test_taco_shells_top_two(self, world):
        results = search_catalog(world, "s-grocery-1", "taco shells", limit=2)
        assert [i.item_id for i in results] == ["g1-100", "g1-101"]

    def test_name_matches_requires_all_tokens(self, world):
        item = world.item("s-grocery-1", "g1-031")
        assert name_matches("cheddar cheese", item)
        assert not name_matches("swiss cheese", item)
        assert not name_matches("", item)

    def test_store_suitability(self, world):
        assert goal_category(world, "chicken breast") == "meat"
        assert store_suits("grocery", ["meat", "dairy"])
        assert not store_suits("convenience", ["meat"])
        assert store_suits("convenience", [None, "dairy"])


class TestCartOps:
    """Pure cart mutations."""

    @pytest.fixture
    def empty_cart(self):
        """An empty FreshMart cart."""
        return Cart("s-grocery-1")

    def test_add_merges_lines(self, world, empty_cart):
        cart, response = apply_cart_op(empty_cart, world, CartOp.ADD, "g1-001", 1)
        cart, response = apply_cart_op(cart, world, CartOp.ADD, "g1-001", 2)
        assert cart.lines == (CartLine("g1-001", 3),)
        assert response.ok
        assert response.response["added_items"] == [{"item_id": "g1-001", "quantity": 2}]
        assert response.response["cart_digest"] == cart_digest(cart)

    def test_set_quantity_and_remove(self, world, empty_cart):
        cart, _ = apply_cart_op(empty_cart, world, CartOp.ADD, "g1-001", 1)
        cart, response = apply_cart_op(cart, world, CartOp.SET_QUANTITY, "g1-001", 4)
        assert cart.quantity_of("g1-001") == 4
        assert response.response["updated_items"] == [{"item_id": "g1-001", "quantity": 4}]
        cart, response = apply_cart_op(cart, world, CartOp.REMOVE, "g1-001")
        assert cart.lines == ()
        assert response.response["removed_items"] == [{"item_id": "g1-001"}]

    def test_remove_missing_line(self, world, empty_cart):
        with pytest.raises(NoSuchLine):
            apply_cart_op(empty_cart, world, CartOp.REMOVE, "g1-001")

    def test_set_quantity_missing_line(self, world, empty_cart):
        with pytest.raises(NoSuchLine):
            apply_cart_op(empty_cart, world, CartOp.SET_QUANTITY, "g1-001", 2)

    @pytest.mark.parametrize("quantity", [0, -1, True, None, 1.5])
    def test_bad_quantity(self, world, empty_cart, quantity):
        with pytest.raises(InvalidInput):
            apply_cart_op(empty_cart, world, CartOp.ADD, "g1-001", quantity)

    def test_item_from_another_store(self, world, empty_cart):
        with pytest.raises(NotFound):
            apply_cart_op(empty_cart, world, CartOp.ADD, "c1-001", 1)

    def test_digest_depends_on_lines(self, world, empty_cart):
        one, _ = apply_cart_op(empty_cart, world, CartOp.ADD, "g1-001", 1)
        two, _ = apply_cart_op(empty_cart, world, CartOp.ADD, "g1-001", 2)
        assert cart_digest(one) != cart_digest(two)
        assert cart_digest(one) == cart_digest(Cart("s-grocery-1", (CartLine("g1-001", 1),)))

    @pytest.mark.parametrize("seed", range(5))
    def test_random_ops_match_dict_model(self, world, empty_cart, seed):
        rng = random.Random(seed)
        item_ids = [i.item_id for i in world.catalog("s-grocery-1")]
        cart, model = empty_cart, {}
        for _ in range(50):
            op = rng.choice([CartOp.ADD, CartOp.ADD, CartOp.REMOVE, CartOp.SET_QUANTITY]) if model else CartOp.ADD
            if op is CartOp.ADD:
                item_id, quantity = rng.choice(item_ids), rng.randint(1, 5)
                cart, _ = apply_cart_op(cart, world, op, item_id, quantity)
                model[item_id] = model.get(item_id, 0) + quantity
            elif op is CartOp.REMOVE:
                item_id = rng.choice(sorted(model))
                cart, _ = apply_cart_op(cart, world, op, item_id)
                del model[item_id]
            else:
                item_id, quantity = rng.choice(sorted(model)), rng.randint(1, 9)
                cart, _ = apply_cart_op(cart, world, op, item_id, quantity)
                model[item_id] = quantity
            assert [(l.item_id, l.quantity) for l in cart.lines] == list(model.items())
        assert cart_total(cart, world) == sum(world.item("s-grocery-1", i).price * q for i, q in model.items())

    def test_cart_total(self, world):
        cart = Cart("s-grocery-1", (CartLine("g1-001", 2), CartLine("g1-081", 3)))
        assert cart_total(cart, world) == 2 * 399 + 3 * 29


class TestToolSession:
    """Tool calls never raise for world errors."""

    @pytest.fixture
    def session(self, world):
        """A session with vegan preferences."""
        return ToolSession(world, {"dietary": ["vegan"]})

    def test_cart_mutation_before_store(self, session):
        response = session.execute(ToolRequest("add_to_cart", {"item_id": "g1-001", "quantity": 1}))
        assert not response.ok
        assert response.response["error"].startswith("NotFound")

    def test_unknown_tool(self, session):
        response = session.execute(ToolRequest("checkout", {}))
        assert not response.ok

    def test_shopping_flow(self, world, session):
        selected = execute_tool(world, session, ToolRequest("select_store", {"store_id": "s-grocery-1"}))
        assert selected.ok
        assert selected.response["store_type"] == "grocery"

        search = execute_tool(world, session, ToolRequest("search_catalog", {"query": "oat milk", "limit": 1}))
        assert [r["item_id"] for r in search.response["results"]] == ["g1-002"]

        added = execute_tool(world, session, ToolRequest("add_to_cart", {"item_id": "g1-002", "quantity": 2}))
        assert added.ok

        cart = execute_tool(world, session, ToolRequest("get_cart"))
        assert cart.response["cart"]["lines"] == [{"item_id": "g1-002", "quantity": 2}]
        assert cart.response["total"] == 898

        prefs = execute_tool(world, session, ToolRequest("get_preferences"))
        assert prefs.response["preferences"] == {"dietary": ["vegan"]}

    def test_missing_line_becomes_error_response(self, world, session):
        session.execute(ToolRequest("select_store", {"store_id": "s-grocery-1"}))
        response = session.execute(ToolRequest("remove_from_cart", {"item_id": "g1-001"}))
        assert not response.ok
        assert response.response["error"].startswith("NoSuchLine")

    def test_missing_argument(self, session):
        session.execute(ToolRequest("select_store", {"store_id": "s-grocery-1"}))
        response = session.execute(ToolRequest("add_to_cart", {"quantity": 1}))
        assert not response.ok
        assert response.response["error"].startswith("InvalidInput")

    def test_reselecting_same_store_keeps_cart(self, session):
        session.execute(ToolRequest("select_store", {"store_id": "s-grocery-1"}))
        session.execute(ToolRequest("add_to_cart", {"item_id": "g1-001", "quantity": 1}))
        session.execute(ToolRequest("select_store", {"store_id": "s-grocery-1"}))
        assert session.cart.quantity_of("g1-001") == 1
        session.execute(ToolRequest("select_store", {"store_id": "s-grocery-2"}))
        assert session.cart.lines == ()

    def test_session_bound_to_other_world(self, session):
        other = load_world(json.dumps(minimal_world_doc()).encode())
        with pytest.raises(InvalidInput):
            execute_tool(other, session, ToolRequest("get_preferences"))
