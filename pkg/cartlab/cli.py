# cartlab/cli.py
"""
Command-line entry points.

    cartlab simulate        roll out scenarios under a bundle, one trace file each
    cartlab evaluate        score traces against the rubric (plus human agreement when labels exist)
    cartlab calibrate-judge search judge prompts for agreement with human labels
    cartlab optimize        --mode subagent | mamut
    cartlab compare         baseline vs per-node vs joint optimization on held-out

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation failure.
"""

import argparse
import asyncio
import logging
import math
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import jsonschema
import yaml
from dotenv import load_dotenv

from .agentruntime import PromptBundle, default_bundle, load_bundle, run_episode, save_bundle
from .artifacts import RunArtifacts, format_report
from .backend import build_backend
from .config import RunConfig, load_run_config
from .errors import InvalidInput, NotFound, ParseError, ValidationError
from .failures import failed_check_counts, identify_failures
from .judge import (
    PairingError,
    RuleSnippetJudgeBackend,
    SnippetToggleProposer,
    agreement,
    calibrate_judge,
    load_judge_prompt,
    oracle_judge,
)
from .optimizer import (
    DirectiveMutationProposer,
    JointDirectiveProposer,
    PoolConfig,
    ReflectiveProposer,
    compare_strategies,
    mamut_optimize,
    optimize_subagent,
    split_dataset,
)
from .parallel_executor import RolloutExecutor
from .policies import LLMPolicy, ScriptedPolicy
from .rubric import RubricSpec, activate, aggregate, default_rubric, load_rubric, pass_rates
from .scenarios import Scenario, generate_scenarios, load_scenario_files
from .tracemodel import LabeledVerdict, Trace, extract_subagent_dataset, load_labels, load_trace
from .usersim import CanonicalChecker, GoalRecallValidator, InferenceChecker, PersonaValidator, UserSimulator, persona_to_json
from .worldsim import World, load_world

logger = logging.getLogger(__name__)

CONFIG_ERRORS = (
    ParseError,
    ValidationError,
    InvalidInput,
    NotFound,
    PairingError,
    jsonschema.ValidationError,
    yaml.YAMLError,
)


@dataclass
class RunContext:
    """Everything a command needs, built once from the run config."""

    config: RunConfig
    world: World
    bundle: PromptBundle
    spec: RubricSpec
    backend: Any
    policy: Any
    checker: Any
    artifacts: RunArtifacts

    @property
    def offline(self) -> bool:
        return self.config.backend.kind == "mock"

    def judge(self, trace: Trace):
        return oracle_judge(trace, self.world, self.spec, self.config.judge)

    def pool_config(self, budget: Optional[int] = None, seed_offset: int = 0) -> PoolConfig:
        return PoolConfig(
            budget=budget or self.config.budget,
            batch_size=self.config.batch_size,
            seed=self.config.seed + seed_offset,
            max_parallel=self.config.workers,
        )


def _build_context(args: argparse.Namespace) -> RunContext:
    config = load_run_config(args.config).with_overrides(
        seed=args.seed, workers=args.workers, budget=args.budget,
    )
    world = load_world(config.world)
    bundle = load_bundle(config.bundle) if config.bundle else default_bundle()
    spec = load_rubric(config.rubric) if config.rubric else default_rubric()

    if config.backend.kind == "mock":
        backend, policy, checker = None, ScriptedPolicy(), CanonicalChecker()
    else:
        backend = build_backend(
            config.backend.kind, config.cassette, config.backend.mode, **config.backend.http_kwargs()
        )
        policy, checker = LLMPolicy(backend), InferenceChecker(backend)

    out_dir = Path(args.out) if args.out else Path("runs") / args.command
    artifacts = RunArtifacts(out_dir).initialize()
    logger.info("[Run] %s: world %s, bundle %s, seed %d", args.command, config.world.name,
                bundle.digest[:12], config.seed)
    return RunContext(config, world, bundle, spec, backend, policy, checker, artifacts)


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------

def _scenarios(ctx: RunContext, generate: Optional[int] = None) -> List[Scenario]:
    scenarios = load_scenario_files(ctx.config.scenarios)
    if generate:
        scenarios += generate_scenarios(ctx.world, generate, ctx.config.seed)
    if not scenarios:
        raise InvalidInput("no scenarios: list scenario files in the config or pass --generate")
    return scenarios


async def _simulate(ctx: RunContext, scenarios: Sequence[Scenario], bundle: Optional[PromptBundle] = None) -> List[Trace]:
    bundle = bundle or ctx.bundle
    kwargs = {"context_budget": ctx.config.context_budget} if ctx.config.context_budget else {}

    def job(scenario: Scenario):
        user = UserSimulator(scenario.persona, ctx.world, checker=ctx.checker)
        return run_episode(bundle, ctx.world, user, ctx.backend, max_turns=scenario.max_turns,
                           session_id=scenario.session_id, policy=ctx.policy, **kwargs)

    executor = RolloutExecutor(ctx.config.workers)
    return await executor.run([lambda s=s: job(s) for s in scenarios], labels=[s.session_id for s in scenarios])


def _persona_consistency(
    validator: PersonaValidator, scenarios: Sequence[Scenario], traces: Sequence[Trace],
) -> Dict[str, float]:
    """Mean of each validator metric over the simulated sessions."""
    by_id = {t.session_id: t for t in traces}
    rows = [validator.score(s.persona, by_id[s.session_id]) for s in scenarios if s.session_id in by_id]
    if not rows:
        return {}
    return {key: sum(r[key] for r in rows) / len(rows) for key in rows[0]}


def _load_traces(ctx: RunContext, override: Optional[str] = None) -> List[Trace]:
    files = sorted(Path(override).glob("*.json")) if override and Path(override).is_dir() else (
        [Path(override)] if override else ctx.config.trace_files()
    )
    for path in files:
        if not path.exists():
            raise ValidationError(f"trace file not found: {path}")
    traces = [load_trace(p) for p in files]
    ids = [t.session_id for t in traces]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate session_id across trace files")
    return traces


async def _logged_episodes(ctx: RunContext) -> List[Trace]:
    """Logged traces from the config, or fresh rollouts of the scenarios under the starting bundle."""
    traces = _load_traces(ctx)
    if not traces and ctx.config.scenarios:
        traces = await _simulate(ctx, _scenarios(ctx))
    if not traces:
        raise InvalidInput("no episodes: configure traces or scenarios")
    return sorted(traces, key=lambda t: t.session_id)


def split_episodes(episodes: Sequence[Trace], heldout_fraction: float, seed: int) -> Tuple[List[Trace], List[Trace]]:
    """Seeded split of episodes into seed and held-out sets."""
    if len(episodes) < 2:
        raise InvalidInput("need at least two episodes to split seed and held-out sets")
    ordered = sorted(episodes, key=lambda t: t.session_id)
    random.Random(seed).shuffle(ordered)
    n_heldout = min(len(ordered) - 1, max(1, math.ceil(len(ordered) * heldout_fraction)))
    heldout = sorted(ordered[:n_heldout], key=lambda t: t.session_id)
    seed_set = sorted(ordered[n_heldout:], key=lambda t: t.session_id)
    return seed_set, heldout


def _labels(ctx: RunContext) -> List[LabeledVerdict]:
    return [load_labels(p) for p in ctx.config.label_files()]


def _pair(traces: Sequence[Trace], labels: Sequence[LabeledVerdict]) -> List[Tuple[Trace, LabeledVerdict]]:
    by_id = {t.session_id: t for t in traces}
    missing = sorted(l.session_id for l in labels if l.session_id not in by_id)
    if missing:
        raise PairingError(f"labels without traces: {', '.join(missing)}")
    return [(by_id[l.session_id], l) for l in sorted(labels, key=lambda l: l.session_id)]


def _rates_summary(title: str, rates: Dict[str, Any]) -> List[str]:
    lines = [title]
    for domain, rate in rates["per_domain"].items():
        lines.append(f"  {domain:<24} {'n/a' if rate is None else f'{rate:.1%}'}")
    overall = rates.get("overall")
    lines.append(f"  {'overall':<24} {'n/a' if overall is None else f'{overall:.1%}'}")
    return lines


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

async def cmd_simulate(args: argparse.Namespace) -> int:
    ctx = _build_context(args)
    scenarios = _scenarios(ctx, args.generate)
    traces = await _simulate(ctx, scenarios)
    ctx.artifacts.write_traces(traces)
    for scenario in scenarios:
        ctx.artifacts.write_text(f"personas/{scenario.session_id}.json", persona_to_json(scenario.persona))
    report = {
        "command": "simulate",
        "seed": ctx.config.seed,
        "bundle_digest": ctx.bundle.digest,
        "episodes": len(traces),
        "sessions": [t.session_id for t in traces],
        "persona_consistency": _persona_consistency(GoalRecallValidator(ctx.world), scenarios, traces),
    }
    ctx.artifacts.write_report(report)
    logger.info("[Run] wrote %d traces to %s", len(traces), ctx.artifacts.out_dir / "traces")
    return 0


async def cmd_evaluate(args: argparse.Namespace) -> int:
    ctx = _build_context(args)
    traces = _load_traces(ctx, args.traces)
    if not traces:
        raise InvalidInput("no traces to evaluate")

    per_trace: Dict[str, Any] = {}
    scores, verdicts = [], []
    for trace in traces:
        verdict = ctx.judge(trace)
        score = aggregate(verdict, ctx.spec, activate(trace, ctx.world, ctx.spec), ctx.config.pass_threshold)
        scores.append(score)
        verdicts.append(verdict)
        per_trace[trace.session_id] = dict(score.to_dict(), verdict={k: v.value for k, v in sorted(verdict.items())})

    rates = pass_rates(scores, ctx.spec.domains())
    failures = identify_failures(traces, verdicts, ctx.spec)
    report: Dict[str, Any] = {
        "command": "evaluate",
        "traces": per_trace,
        "pass_rates": rates,
        "failed_checks": dict(sorted(failed_check_counts(failures).items())),
    }
    lines = _rates_summary(f"Pass rates over {len(traces)} traces:", rates)

    labels = _labels(ctx)
    if labels:
        paired = _pair(traces, labels)
        judged = [LabeledVerdict(t.session_id, ctx.judge(t)) for t, _h in paired]
        result = agreement(judged, [h for _t, h in paired], ctx.spec)
        report["agreement"] = result.to_dict()
        lines.append(f"Judge-human agreement (weighted): {result.weighted_overall:.4f}")

    ctx.artifacts.write_report(report, "\n".join(lines))
    return 0


async def cmd_calibrate_judge(args: argparse.Namespace) -> int:
    ctx = _build_context(args)
    labels = _labels(ctx)
    if not labels:
        raise InvalidInput("calibration needs human labels (config key: labels)")
    labeled = _pair(_load_traces(ctx), labels)

    prompt0 = load_judge_prompt(ctx.config.judge_prompt or "shopping-execution-baseline")
    backend = RuleSnippetJudgeBackend(ctx.world, ctx.spec, ctx.config.judge) if ctx.offline else ctx.backend
    result = await calibrate_judge(
        prompt0, labeled, SnippetToggleProposer(ctx.config.seed), ctx.config.budget,
        ctx.world, backend, ctx.spec, seed=ctx.config.seed,
    )

    ctx.artifacts.write_text("best_judge_prompt.md", result.prompt.template)
    ctx.artifacts.write_curve(result.curve)
    report = {
        "command": "calibrate-judge",
        "seed": ctx.config.seed,
        "rollouts_used": result.rollouts_used,
        "before": result.before.to_dict(),
        "after": result.after.to_dict(),
        "delta": result.delta.to_dict(),
        "snippets": sorted(result.prompt.snippets()),
    }
    summary = (
        f"Held-out agreement {result.before.weighted_overall:.4f} -> {result.after.weighted_overall:.4f} "
        f"({result.rollouts_used} rollouts)"
    )
    ctx.artifacts.write_report(report, summary)
    return 0


async def _optimize_subagents(ctx: RunContext, episodes: Sequence[Trace]) -> Dict[str, Any]:
    bundle = ctx.bundle
    nodes: Dict[str, Any] = {}
    for index, node in enumerate(ctx.config.optimize.target_nodes()):
        dataset = extract_subagent_dataset(episodes, node)
        train, heldout = split_dataset(dataset, ctx.config.optimize.heldout_fraction, ctx.config.seed)
        proposer = (
            DirectiveMutationProposer(node, seed=ctx.config.seed + index) if ctx.offline
            else ReflectiveProposer(ctx.backend, node)
        )
        result = await optimize_subagent(
            node, train, heldout, proposer, ctx.pool_config(seed_offset=index), ctx.world,
            seed_prompt=bundle.prompt(node), policy=ctx.policy,
        )
        bundle = PromptBundle(dict(bundle.prompts, **{node: result.best}))
        ctx.artifacts.write_curve(result.curve, f"curve-{node}.csv")
        nodes[node] = {
            "train_examples": len(train),
            "heldout_examples": len(heldout),
            "rollouts_used": result.rollouts_used,
            "seed_heldout_score": result.seed_heldout_score,
            "best_heldout_score": result.best_heldout_score,
            "train_heldout_divergence": result.train_heldout_divergence,
        }
    save_bundle(bundle, ctx.artifacts.path("best_bundle.json"))
    return {"mode": "subagent", "nodes": nodes, "best_bundle_digest": bundle.digest}


async def _optimize_joint(ctx: RunContext, episodes: Sequence[Trace]) -> Dict[str, Any]:
    seed_set, heldout = split_episodes(episodes, ctx.config.optimize.heldout_fraction, ctx.config.seed)
    proposer = JointDirectiveProposer(seed=ctx.config.seed) if ctx.offline else ReflectiveProposer(ctx.backend)
    result = await mamut_optimize(
        ctx.bundle, seed_set, heldout, ctx.world, proposer, ctx.pool_config(),
        judge=ctx.judge, spec=ctx.spec, checker=ctx.checker, backend=ctx.backend, policy=ctx.policy,
    )
    save_bundle(result.best, ctx.artifacts.path("best_bundle.json"))
    ctx.artifacts.write_jsonl("acceptance.jsonl", result.log.records)
    ctx.artifacts.write_curve(result.curve)
    return {
        "mode": "mamut",
        "seed_episodes": [t.session_id for t in seed_set],
        "heldout_episodes": [t.session_id for t in heldout],
        "rollouts_used": result.rollouts_used,
        "initial_heldout_score": result.initial_heldout_score,
        "final_heldout_score": result.final_heldout_score,
        "accepted": len(result.log.accepted()),
        "vetoed": len(result.log.vetoes()),
        "best_bundle_digest": result.best.digest,
    }


async def cmd_optimize(args: argparse.Namespace) -> int:
    ctx = _build_context(args)
    mode = args.mode or ctx.config.optimize.mode
    episodes = await _logged_episodes(ctx)
    if mode == "subagent":
        report = await _optimize_subagents(ctx, episodes)
    else:
        report = await _optimize_joint(ctx, episodes)
    report.update(command="optimize", seed=ctx.config.seed, budget=ctx.config.budget)
    ctx.artifacts.write_report(report, format_report(report))
    return 0


async def cmd_compare(args: argparse.Namespace) -> int:
    ctx = _build_context(args)
    episodes = await _logged_episodes(ctx)
    seed_set, heldout = split_episodes(episodes, ctx.config.optimize.heldout_fraction, ctx.config.seed)
    comparison = await compare_strategies(
        ctx.bundle, seed_set, heldout, ctx.world, ctx.pool_config(),
        spec=ctx.spec, judge=ctx.judge, checker=ctx.checker,
    )
    for name, bundle in comparison.bundles.items():
        save_bundle(bundle, ctx.artifacts.path(f"bundle-{name}.json"))
    report = {
        "command": "compare",
        "seed": ctx.config.seed,
        "baseline": comparison.baseline,
        "per_node": comparison.per_node,
        "joint": comparison.joint,
    }
    lines: List[str] = []
    for name in ("baseline", "per_node", "joint"):
        lines += _rates_summary(f"{name}:", report[name])
    ctx.artifacts.write_report(report, "\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cartlab",
        description="Evaluate and optimize a multi-agent shopping assistant",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Run config (YAML)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--workers", type=int, help="Parallel rollouts")
    common.add_argument("--budget", type=int, help="Rollout budget")
    common.add_argument("--out", help="Output directory (default: runs/<command>)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="Roll out scenarios, one trace per scenario")
    sim.add_argument("--generate", type=int, default=0, help="Also generate N seeded scenarios")
    sim.set_defaults(func=cmd_simulate)

    ev = sub.add_parser("evaluate", parents=[common], help="Score traces against the rubric")
    ev.add_argument("--traces", help="Trace file or directory (overrides the config)")
    ev.set_defaults(func=cmd_evaluate)

    cal = sub.add_parser("calibrate-judge", parents=[common], help="Calibrate the judge prompt on human labels")
    cal.set_defaults(func=cmd_calibrate_judge)

    opt = sub.add_parser("optimize", parents=[common], help="Optimize prompts")
    opt.add_argument("--mode", choices=["subagent", "mamut"], help="Override optimize.mode")
    opt.set_defaults(func=cmd_optimize)

    cmp = sub.add_parser("compare", parents=[common], help="Baseline vs per-node vs joint optimization")
    cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return asyncio.run(args.func(args))
    except CONFIG_ERRORS as e:
        logger.error("[Run] configuration error: %s", e)
        return 2
    except Exception as e:
        logger.error("[Run] failed: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
