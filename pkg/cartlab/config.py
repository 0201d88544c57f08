# cartlab/config.py
"""Run configuration: one YAML document per command invocation."""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml

from .errors import ParseError, ValidationError
from .judge import OracleJudgeConfig
from .planner import REGISTERED_NODES
from .rubric import DEFAULT_PASS_THRESHOLD, MICRO_RUBRICS
from .schemas import validate_document


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    mode: str = "strict"
    max_in_flight: int = 4
    max_retries: int = 3
    model: Optional[str] = None

    def http_kwargs(self) -> Dict[str, Any]:
        kwargs: Dict[str, Any] = {"max_in_flight": self.max_in_flight, "max_retries": self.max_retries}
        if self.model:
            kwargs["model"] = self.model
        return kwargs


@dataclass(frozen=True)
class OptimizeConfig:
    mode: str = "mamut"
    nodes: Tuple[str, ...] = ()
    heldout_fraction: float = 0.25

    def target_nodes(self) -> Tuple[str, ...]:
        """Nodes for sub-agent mode: the configured ones, else every node with a micro-rubric."""
        return self.nodes or tuple(n for n in REGISTERED_NODES if n in MICRO_RUBRICS)


@dataclass(frozen=True)
class RunConfig:
    """
    Resolved run configuration. Every path is absolute and was checked to
    exist when the config was loaded.
    """

    world: Path
    seed: int
    scenarios: Tuple[Path, ...] = ()
    bundle: Optional[Path] = None
    rubric: Optional[Path] = None
    labels: Optional[Path] = None
    traces: Optional[Path] = None
    cassette: Optional[Path] = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    workers: int = 4
    budget: int = 200
    batch_size: int = 8
    pass_threshold: float = DEFAULT_PASS_THRESHOLD
    context_budget: Optional[int] = None
    judge: OracleJudgeConfig = field(default_factory=OracleJudgeConfig)
    judge_prompt: Optional[str] = None
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply command-line overrides; None values leave the config untouched."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def label_files(self) -> List[Path]:
        if self.labels is None:
            return []
        if self.labels.is_dir():
            return sorted(self.labels.glob("*.json"))
        return [self.labels]

    def trace_files(self) -> List[Path]:
        if self.traces is None:
            return []
        if self.traces.is_dir():
            return sorted(self.traces.glob("*.json"))
        return [self.traces]


def _resolve(base: Path, raw: str, key: str, must_exist: bool = True) -> Path:
    path = Path(raw)
    if not path.is_absolute():
        path = base / path
    if must_exist and not path.exists():
        raise ValidationError(f"{key}: file not found: {raw}")
    return path.resolve()


def _judge_config(data: Mapping[str, Any]) -> OracleJudgeConfig:
    config = OracleJudgeConfig()
    bounds = {k: data[k] for k in ("quantity_low", "quantity_high") if k in data}
    config = replace(config, **bounds, **dict(data.get("rules", {})))
    if config.quantity_low > config.quantity_high:
        raise ValidationError("judge.quantity_low must not exceed judge.quantity_high")
    return config


def _optimize_config(data: Mapping[str, Any]) -> OptimizeConfig:
    nodes = tuple(data.get("nodes", ()))
    unknown = [n for n in nodes if n not in MICRO_RUBRICS]
    if unknown:
        raise ValidationError(f"optimize.nodes: no micro-rubric for {', '.join(unknown)}")
    return OptimizeConfig(
        mode=data.get("mode", "mamut"),
        nodes=nodes,
        heldout_fraction=data.get("heldout_fraction", 0.25),
    )


def run_config_from_dict(data: Mapping[str, Any], base: Path) -> RunConfig:
    """Build a RunConfig from a schema-valid mapping; relative paths resolve against `base`."""
    validate_document(data, "run-config")

    def optional(key: str) -> Optional[Path]:
        return _resolve(base, data[key], key) if key in data else None

    backend = BackendConfig(**data.get("backend", {}))
    # A record-mode cassette is created on first use
    cassette = None
    if "cassette" in data:
        cassette = _resolve(base, data["cassette"], "cassette", must_exist=backend.mode == "strict")

    judge_data = data.get("judge", {})
    return RunConfig(
        world=_resolve(base, data["world"], "world"),
        seed=data["seed"],
        scenarios=tuple(_resolve(base, p, "scenarios") for p in data.get("scenarios", [])),
        bundle=optional("bundle"),
        rubric=optional("rubric"),
        labels=optional("labels"),
        traces=optional("traces"),
        cassette=cassette,
        backend=backend,
        workers=data.get("workers", 4),
        budget=data.get("budget", 200),
        batch_size=data.get("batch_size", 8),
        pass_threshold=data.get("pass_threshold", DEFAULT_PASS_THRESHOLD),
        context_budget=data.get("context_budget"),
        judge=_judge_config(judge_data),
        judge_prompt=judge_data.get("prompt"),
        optimize=_optimize_config(data.get("optimize", {})),
    )


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """
    Load and validate a YAML run config.

    Raises:
        ParseError: not YAML, not a mapping, or fails the run-config schema
        ValidationError: a referenced file does not exist or values conflict
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ParseError(f"invalid YAML in {path}: {e}")
    if not isinstance(data, dict):
        raise ParseError(f"{path}: run config must be a mapping")
    return run_config_from_dict(data, path.resolve().parent)
