# cartlab/scenarios.py
"""Scenario files and seeded scenario generation for simulation runs."""

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from .agentruntime import DEFAULT_MAX_TURNS
from .errors import ValidationError
from .schemas import decode_json
from .usersim import GoalSpec, Persona, persona_from_dict
from .worldsim import World, name_matches

GOAL_POOL = (
    "milk", "bread", "eggs", "cheese", "yogurt", "pasta", "peanut butter",
    "coffee", "apples", "bananas", "spinach", "rice", "chicken breast", "paper towels",
)
DIETARY_CHOICES = ((), ("vegan",), ("dairy-free",), ("gluten-free",))


@dataclass(frozen=True)
class Scenario:
    session_id: str
    persona: Persona
    max_turns: int = DEFAULT_MAX_TURNS

    def to_dict(self) -> Dict[str, Any]:
        return {"session_id": self.session_id, "persona": self.persona.to_dict(), "max_turns": self.max_turns}


def scenarios_from_dict(data: Dict[str, Any]) -> List[Scenario]:
    scenarios = [
        Scenario(s["session_id"], persona_from_dict(s["persona"]), s.get("max_turns", DEFAULT_MAX_TURNS))
        for s in data["scenarios"]
    ]
    ids = [s.session_id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate session_id in scenario file")
    return scenarios


def load_scenarios(source: Union[str, Path, bytes]) -> List[Scenario]:
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    return scenarios_from_dict(decode_json(raw, "scenario"))


def load_scenario_files(paths: Iterable[Union[str, Path]]) -> List[Scenario]:
    """Concatenate scenario files; a session id may appear only once across all of them."""
    scenarios: List[Scenario] = []
    seen = set()
    for path in paths:
        for scenario in load_scenarios(path):
            if scenario.session_id in seen:
                raise ValidationError(f"session {scenario.session_id} appears in more than one scenario file")
            seen.add(scenario.session_id)
            scenarios.append(scenario)
    return scenarios


def dump_scenarios(scenarios: Sequence[Scenario]) -> str:
    return json.dumps({"scenarios": [s.to_dict() for s in scenarios]}, indent=2)


def available_goals(world: World, pool: Sequence[str] = GOAL_POOL) -> List[str]:
    """Pool phrases that name at least one catalog item somewhere in the world."""
    return [p for p in pool if any(name_matches(p, item) for _store, item in world.all_items())]


def generate_personas(world: World, n: int, seed: int = 0, pool: Optional[Sequence[str]] = None) -> List[Persona]:
    """
    `n` seeded random personas. Goals come from phrases the world can serve;
    dietary, budget, household, brand and patience settings vary independently.
    """
    rng = random.Random(seed)
    goals = available_goals(world, pool or GOAL_POOL)
    if not goals:
        raise ValidationError("no goal phrase matches any catalog item in this world")

    personas = []
    for _ in range(n):
        picked = rng.sample(goals, rng.randint(1, min(3, len(goals))))
        goal_items = tuple(
            GoalSpec(description=phrase, quantity=rng.choice((None, None, 2)))
            for phrase in picked
        )
        brands = set()
        if rng.random() < 0.3:
            matching = sorted({item.brand for _s, item in world.all_items() if name_matches(picked[0], item)})
            brands.add(rng.choice(matching))
        personas.append(Persona(
            goal_items=goal_items,
            budget_cap=rng.choice((None, None, 1500, 3000, 6000)),
            dietary=frozenset(rng.choice(DIETARY_CHOICES)),
            household_size=rng.randint(1, 4),
            preferred_brands=frozenset(brands),
            patience=rng.randint(3, 8),
        ))
    return personas


def generate_scenarios(world: World, n: int, seed: int = 0, prefix: str = "gen") -> List[Scenario]:
    return [
        Scenario(f"{prefix}-{seed}-{i:03d}", persona)
        for i, persona in enumerate(generate_personas(world, n, seed))
    ]
