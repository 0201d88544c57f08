# tests/test_scenarios.py
"""Tests for scenario files and seeded scenario generation."""

import json

import pytest

from cartlab.agentruntime import DEFAULT_MAX_TURNS
from cartlab.errors import ParseError, ValidationError
from cartlab.scenarios import (
    GOAL_POOL,
    available_goals,
    dump_scenarios,
    generate_personas,
    generate_scenarios,
    load_scenario_files,
    load_scenarios,
)


class TestScenarioFiles:
    """Loading, duplicate detection and dumping."""

    @pytest.fixture
    def basic(self, data_dir):
        """The bundled scenario file."""
        return data_dir / "scenarios" / "basic.json"

    def test_load_basic(self, basic):
        scenarios = load_scenarios(basic)
        assert len(scenarios) == 6
        by_id = {s.session_id: s for s in scenarios}
        assert by_id["basic-budget-coffee"].max_turns == 8
        assert by_id["basic-budget-coffee"].persona.budget_cap == 3000
        assert by_id["basic-milk-bread"].max_turns == DEFAULT_MAX_TURNS
        assert by_id["basic-vegan-yogurt"].persona.dietary == frozenset({"vegan"})
        assert by_id["basic-chicken"].persona.preferred_store == "s-grocery-2"

    def test_duplicate_within_file(self):
        doc = {"scenarios": [
            {"session_id": "x", "persona": {"goal_items": [{"description": "milk"}]}},
            {"session_id": "x", "persona": {"goal_items": [{"description": "bread"}]}},
        ]}
        with pytest.raises(ValidationError):
            load_scenarios(json.dumps(doc).encode())

    def test_duplicate_across_files(self, basic):
        with pytest.raises(ValidationError, match="more than one"):
            load_scenario_files([basic, basic])

    def test_malformed(self):
        with pytest.raises(ParseError):
            load_scenarios(b'{"scenarios": [{"persona": {}}]}')

    def test_dump_reloads(self, basic, tmp_path):
        scenarios = load_scenarios(basic)
        path = tmp_path / "copy.json"
        path.write_text(dump_scenarios(scenarios))
        assert load_scenarios(path) == scenarios


class TestGeneration:
    """Seeded personas drawn from what the world can serve."""

    def test_goals_come_from_the_world(self, world):
        goals = available_goals(world)
        assert goals
        assert set(goals) <= set(GOAL_POOL)
        assert available_goals(world, ["unobtainium"]) == []

    def test_same_seed_same_scenarios(self, world):
        assert generate_scenarios(world, 5, seed=11) == generate_scenarios(world, 5, seed=11)
        assert generate_scenarios(world, 5, seed=11) != generate_scenarios(world, 5, seed=12)

    def test_ids_and_ranges(self, world):
        scenarios = generate_scenarios(world, 12, seed=4, prefix="batch")
        assert [s.session_id for s in scenarios][:2] == ["batch-4-000", "batch-4-001"]
        goals = set(available_goals(world))
        for scenario in scenarios:
            persona = scenario.persona
            assert 3 <= persona.patience <= 8
            assert 1 <= persona.household_size <= 4
            assert 1 <= len(persona.goal_items) <= 3
            assert {g.description for g in persona.goal_items} <= goals

    def test_world_without_matches(self, world):
        with pytest.raises(ValidationError):
            generate_personas(world, 1, pool=["unobtainium"])
