# cartlab/optimizer.py
"""
Prompt optimization.

Two strategies share a Pareto candidate pool and one rollout budget:

- optimize_subagent: searches one node's prompt against its micro-rubric on
  logged invocations (one rollout per train example evaluated)
- mamut_optimize: searches the whole bundle by re-simulating logged episodes
  and accepting only held-out improvements without safety regressions
"""

import inspect
import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .acceptance import TRAIN_REGRESSION, UNCHANGED, AcceptanceLog, EpisodeOutcome, decide, mean_reward
from .agentruntime import DEFAULT_MAX_TURNS, PromptBundle, default_bundle, run_episode, set_directive
from .errors import BudgetExhausted, InvalidInput, ValidationError
from .failures import FailureSummary, failure_report, identify_failures
from .parallel_executor import DEFAULT_MAX_PARALLEL, RolloutExecutor
from .planner import REGISTERED_NODES, require_node
from .policies import DIRECTIVE_CHOICES, NODE_DIRECTIVES, ScriptedPolicy, directive_signature, parse_directives, set_prompt_directive
from .rubric import DEFAULT_PASS_THRESHOLD, MICRO_RUBRICS, RubricSpec, TraceScore, activate, aggregate, default_rubric, pass_rates
from .tracemodel import DatasetExample, Trace, Verdict, extract_subagent_dataset
from .usersim import UserSimulator, persona_from_episode
from .worldsim import World

logger = logging.getLogger(__name__)

SAFETY_CHECK = "safety_compliance"

# Failed check -> (node, directive, value) settings likely to fix it
CHECK_HINTS: Dict[str, Tuple[Tuple[str, str, Any], ...]] = {
    "store_type_fit": (("orchestrator", "pass_preferences", True),),
    "store_selection": (("orchestrator", "pass_preferences", True),),
    "cart_completeness": (
        ("item_selection", "substitution_policy", "ask"),
        ("item_selection", "max_results", 5),
        ("item_selection", "use_preferences", True),
    ),
    "overall_success": (
        ("item_selection", "substitution_policy", "ask"),
        ("item_selection", "use_preferences", True),
        ("orchestrator", "pass_preferences", True),
    ),
    "quantity": (("quantity_adjustment", "scaling", "household"), ("orchestrator", "pass_preferences", True)),
    "no_extras_or_dupes": (("item_selection", "use_preferences", True),),
    "dietary_prefs": (("orchestrator", "pass_preferences", True), ("item_selection", "use_preferences", True)),
    "preferred_brands": (
        ("orchestrator", "pass_preferences", True),
        ("item_selection", "use_preferences", True),
        ("item_selection", "max_results", 5),
    ),
    "context_retention": (("orchestrator", "close_style", "summary"), ("orchestrator", "pass_preferences", True)),
    "clarification": (("orchestrator", "close_style", "summary"), ("item_selection", "substitution_policy", "ask")),
    "info_integrity": (("orchestrator", "claims", "grounded"),),
    "flow_coherence": (("orchestrator", "verbosity", "med"),),
    "tone_brand": (("orchestrator", "tone", "professional"),),
    "safety_compliance": (("orchestrator", "close_style", "summary"),),
    "attribute_satisfaction": (("item_selection", "use_preferences", True), ("item_selection", "max_results", 5)),
    "substitution_discipline": (("item_selection", "substitution_policy", "ask"),),
    "tool_groundedness": (("item_selection", "max_results", 5),),
    "context_consistent_scaling": (("quantity_adjustment", "scaling", "household"),),
}


# ---------------------------------------------------------------------------
# Candidate pool
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeEvaluation:
    score: float
    failed_checks: Tuple[str, ...] = ()


@dataclass
class Candidate:
    candidate_id: int
    payload: Any
    per_task_scores: Dict[str, float]
    parent: Optional[int] = None
    rollouts_spent_at_creation: int = 0
    failures: Tuple[str, ...] = ()
    heldout_score: Optional[float] = None

    @property
    def mean_score(self) -> float:
        if not self.per_task_scores:
            return 0.0
        return sum(self.per_task_scores.values()) / len(self.per_task_scores)


@dataclass
class PoolConfig:
    budget: int = 200
    batch_size: int = 8
    seed: int = 0
    max_stale_proposals: int = 50
    max_parallel: int = DEFAULT_MAX_PARALLEL


def dominates(a: Mapping[str, float], b: Mapping[str, float]) -> bool:
    """a is at least as good as b on every task and strictly better on one."""
    tasks = set(a) | set(b)
    at_least = all(a.get(t, 0.0) >= b.get(t, 0.0) for t in tasks)
    return at_least and any(a.get(t, 0.0) > b.get(t, 0.0) for t in tasks)


class CandidatePool:
    """Evaluated candidates, their Pareto front and the shared rollout budget."""

    def __init__(self, rollout_budget: int):
        self.rollout_budget = rollout_budget
        self.rollouts_used = 0
        self.candidates: List[Candidate] = []
        self.pareto_front: List[Candidate] = []

    @property
    def remaining(self) -> int:
        return self.rollout_budget - self.rollouts_used

    def charge(self, n: int = 1) -> None:
        if self.rollouts_used + n > self.rollout_budget:
            raise BudgetExhausted(f"rollout budget {self.rollout_budget} exhausted")
        self.rollouts_used += n

    def add(self, payload: Any, scores: Mapping[str, float], parent: Optional[int] = None, failures: Sequence[str] = ()) -> Candidate:
        candidate = Candidate(
            candidate_id=len(self.candidates),
            payload=payload,
            per_task_scores=dict(scores),
            parent=parent,
            rollouts_spent_at_creation=self.rollouts_used,
            failures=tuple(failures),
        )
        self.candidates.append(candidate)
        self._update_front()
        return candidate

    def _update_front(self) -> None:
        self.pareto_front = [
            c for c in self.candidates
            if not any(dominates(o.per_task_scores, c.per_task_scores) for o in self.candidates if o is not c)
        ]

    def front_is_consistent(self) -> bool:
        """Exhaustive pairwise check of the front against the pool."""
        for member in self.pareto_front:
            if any(dominates(o.per_task_scores, member.per_task_scores) for o in self.candidates):
                return False
        return True

    def sample(self, rng: random.Random) -> Candidate:
        """Uniform over front members, ordered by creation."""
        front = sorted(self.pareto_front, key=lambda c: c.candidate_id)
        return front[rng.randrange(len(front))]


@dataclass
class OptimizationResult:
    best: Any
    curve: List[Tuple[int, float]]
    rollouts_used: int
    seed_heldout_score: float
    best_heldout_score: float
    train_best: Any
    train_best_heldout_score: float
    pool: CandidatePool

    @property
    def train_heldout_divergence(self) -> bool:
        """The train-best candidate is worse on held-out than the returned one."""
        return self.train_best_heldout_score < self.best_heldout_score


# ---------------------------------------------------------------------------
# Generic Pareto search
# ---------------------------------------------------------------------------

async def pareto_search(
    train_tasks: Sequence[Any],
    heldout_tasks: Sequence[Any],
    seed_payload: Any,
    evaluate: Callable[[Any, Any], Awaitable[NodeEvaluation]],
    proposer,
    config: PoolConfig,
    heldout_objective: Optional[Callable[[Any], Awaitable[float]]] = None,
    signature: Optional[Callable[[Any], Any]] = None,
    task_id: Optional[Callable[[int, Any], str]] = None,
) -> OptimizationResult:
    """
    Propose from the Pareto front, evaluate on train, select on held-out.

    Every train evaluation costs one rollout; held-out scoring is free. A
    candidate whose train pass cannot finish inside the budget is discarded.
    The curve holds (rollouts_used, best held-out score) for the seed and
    after each completed candidate.
    """
    if not train_tasks or not heldout_tasks:
        raise InvalidInput("optimization needs non-empty train and held-out sets")
    if config.budget < 1:
        raise InvalidInput("rollout budget must be >= 1")
    signature = signature or (lambda payload: payload)
    task_id = task_id or (lambda index, _task: f"t{index}")
    ids = [task_id(i, t) for i, t in enumerate(train_tasks)]

    async def default_heldout(payload: Any) -> float:
        scores = [(await evaluate(payload, t)).score for t in heldout_tasks]
        return sum(scores) / len(scores)

    heldout_objective = heldout_objective or default_heldout
    pool = CandidatePool(config.budget)
    rng = random.Random(config.seed)

    async def train_pass(payload: Any) -> Optional[Tuple[Dict[str, float], List[str]]]:
        scores: Dict[str, float] = {}
        failed: List[str] = []
        for tid, task in zip(ids, train_tasks):
            try:
                pool.charge()
            except BudgetExhausted:
                logger.info("[Search] budget exhausted mid-evaluation; discarding partial candidate")
                return None
            evaluation = await evaluate(payload, task)
            scores[tid] = evaluation.score
            failed.extend(evaluation.failed_checks)
        return scores, failed

    seed_heldout = await heldout_objective(seed_payload)
    curve: List[Tuple[int, float]] = [(0, seed_heldout)]
    best_payload, best_heldout = seed_payload, seed_heldout

    seed_eval = await train_pass(seed_payload)
    if seed_eval is None:
        return OptimizationResult(seed_payload, curve, pool.rollouts_used, seed_heldout, seed_heldout,
                                  seed_payload, seed_heldout, pool)
    seed = pool.add(seed_payload, seed_eval[0], failures=seed_eval[1])
    seed.heldout_score = seed_heldout
    seen = {signature(seed_payload)}

    stale = 0
    while pool.remaining > 0 and stale < config.max_stale_proposals:
        parent = pool.sample(rng)
        child = await _propose(proposer, parent.payload, list(parent.failures))
        key = signature(child)
        if key in seen:
            stale += 1
            continue
        stale = 0
        seen.add(key)

        result = await train_pass(child)
        if result is None:
            break
        candidate = pool.add(child, result[0], parent.candidate_id, result[1])
        candidate.heldout_score = await heldout_objective(child)
        if candidate.heldout_score > best_heldout:
            best_payload, best_heldout = child, candidate.heldout_score
        curve.append((pool.rollouts_used, best_heldout))
        logger.info(
            "[Search] candidate %d: train %.4f held-out %.4f (rollouts %d/%d)",
            candidate.candidate_id, candidate.mean_score, candidate.heldout_score,
            pool.rollouts_used, pool.rollout_budget,
        )

    train_best = max(pool.candidates, key=lambda c: (c.mean_score, -c.candidate_id))
    return OptimizationResult(
        best=best_payload,
        curve=curve,
        rollouts_used=pool.rollouts_used,
        seed_heldout_score=seed_heldout,
        best_heldout_score=best_heldout,
        train_best=train_best.payload,
        train_best_heldout_score=train_best.heldout_score,
        pool=pool,
    )


# ---------------------------------------------------------------------------
# Proposers
# ---------------------------------------------------------------------------

def _check_ids(failures: Sequence[Any]) -> List[str]:
    return [getattr(f, "check_id", f) for f in failures]


def _other_value(rng: random.Random, key: str, current: Any) -> Any:
    choices = [v for v in DIRECTIVE_CHOICES[key] if v != current]
    return rng.choice(choices) if choices else current


def hinted_settings(
    failures: Sequence[Any],
    current: Callable[[str, str], Any],
    pairs: Sequence[Tuple[str, str]],
) -> List[Tuple[str, str, Any]]:
    """Hinted settings not already in place, most-cited first."""
    counts: Dict[Tuple[str, str, Any], int] = {}
    first_seen: Dict[Tuple[str, str, Any], int] = {}
    for check_id in _check_ids(failures):
        for node, key, value in CHECK_HINTS.get(check_id, ()):
            if (node, key) not in pairs or current(node, key) == value:
                continue
            setting = (node, key, value)
            counts[setting] = counts.get(setting, 0) + 1
            first_seen.setdefault(setting, len(first_seen))
    return sorted(counts, key=lambda s: (-counts[s], first_seen[s]))


class _DirectiveProposer:
    """
    Seeded directive mutation. Most proposals apply the settings hinted by
    the failed checks; the rest (and all when nothing is hinted) reassign
    random directives.
    """

    def __init__(self, pairs: Sequence[Tuple[str, str]], seed: int = 0, max_changes: int = 2, explore: float = 0.25):
        self.pairs = list(pairs)
        self.rng = random.Random(seed)
        self.max_changes = max_changes
        self.explore = explore

    def _changes(self, failures: Sequence[Any], current: Callable[[str, str], Any]) -> List[Tuple[str, str, Any]]:
        if not self.pairs:
            return []
        n = self.rng.randint(1, min(self.max_changes, len(self.pairs)))
        hinted = hinted_settings(failures, current, self.pairs)
        if hinted and self.rng.random() >= self.explore:
            return hinted[:n]
        chosen: List[Tuple[str, str]] = []
        while len(chosen) < n:
            pair = self.rng.choice(self.pairs)
            if pair not in chosen:
                chosen.append(pair)
        return [(node, key, _other_value(self.rng, key, current(node, key))) for node, key in chosen]


class DirectiveMutationProposer(_DirectiveProposer):
    """Mutates the directives of one node's prompt."""

    def __init__(self, node_name: str, seed: int = 0, max_changes: int = 2, explore: float = 0.25):
        require_node(node_name)
        self.node_name = node_name
        super().__init__([(node_name, k) for k in NODE_DIRECTIVES.get(node_name, ())], seed, max_changes, explore)

    def propose(self, payload: str, failures: Sequence[Any] = ()) -> str:
        directives = parse_directives(payload)
        for _node, key, value in self._changes(failures, lambda _n, k: getattr(directives, k)):
            payload = set_prompt_directive(payload, key, value)
        return payload


class JointDirectiveProposer(_DirectiveProposer):
    """Mutates directives across the bundle; several nodes can change in one proposal."""

    def __init__(self, seed: int = 0, nodes: Optional[Sequence[str]] = None, max_changes: int = 2, explore: float = 0.25):
        nodes = tuple(nodes or REGISTERED_NODES)
        super().__init__([(n, k) for n in nodes for k in NODE_DIRECTIVES.get(n, ())], seed, max_changes, explore)

    def propose(self, bundle: PromptBundle, failures: Sequence[Any] = ()) -> PromptBundle:
        def current(node: str, key: str) -> Any:
            return getattr(parse_directives(bundle.prompt(node)), key)

        for node, key, value in self._changes(failures, current):
            bundle = set_directive(bundle, node, key, value)
        return bundle


class SequenceProposer:
    """Returns a fixed list of payloads in order, then keeps returning its input."""

    def __init__(self, payloads: Sequence[Any]):
        self.payloads = list(payloads)
        self.index = 0

    def propose(self, payload: Any, failures: Sequence[Any] = ()) -> Any:
        if self.index >= len(self.payloads):
            return payload
        proposal = self.payloads[self.index]
        self.index += 1
        return proposal


REFLECTION_INSTRUCTION = (
    "You improve prompts for a multi-agent shopping assistant. Read the current "
    "prompt(s) and the failures below, then reply with ONLY the improved prompt "
    "text{bundle_note}."
)


class ReflectiveProposer:
    """Backend-written proposals from failure summaries; falls back to the input on bad output."""

    def __init__(self, backend, node_name: Optional[str] = None):
        self.backend = backend
        self.node_name = node_name

    def _request(self, payload: Any, failures: Sequence[Any]):
        from .backend import CompletionRequest

        bundle_note = "" if self.node_name else " as a JSON object mapping node name to prompt"
        current = payload if isinstance(payload, str) else json.dumps(payload.to_dict(), indent=2)
        summaries = [f for f in failures if isinstance(f, FailureSummary)]
        report = failure_report(summaries) if summaries else "Failed checks: " + ", ".join(_check_ids(failures))
        return CompletionRequest(messages=(
            ("system", REFLECTION_INSTRUCTION.format(bundle_note=bundle_note)),
            ("user", f"Current:\n{current}\n\n{report}"),
        ))

    async def propose(self, payload: Any, failures: Sequence[Any] = ()) -> Any:
        text = (await self.backend.complete(self._request(payload, failures))).strip()
        if self.node_name or isinstance(payload, str):
            return text or payload
        try:
            return PromptBundle(dict(json.loads(text)))
        except (ValueError, TypeError, ValidationError) as e:
            logger.info("[Search] reflective proposal unusable: %s", e)
            return payload


async def _propose(proposer, payload: Any, failures: Sequence[Any]) -> Any:
    proposal = proposer.propose(payload, failures)
    if inspect.isawaitable(proposal):
        proposal = await proposal
    return proposal


# ---------------------------------------------------------------------------
# Sub-agent optimization
# ---------------------------------------------------------------------------

def split_dataset(examples: Sequence[DatasetExample], heldout_fraction: float = 0.3, seed: int = 0) -> Tuple[List[DatasetExample], List[DatasetExample]]:
    """Split by trace so no episode contributes to both sides."""
    traces = sorted({e.trace_id for e in examples})
    if len(traces) < 2:
        raise InvalidInput("need invocations from at least two traces to split train and held-out")
    random.Random(seed).shuffle(traces)
    n_heldout = min(len(traces) - 1, max(1, math.ceil(len(traces) * heldout_fraction)))
    heldout_ids = set(traces[:n_heldout])
    train = [e for e in examples if e.trace_id not in heldout_ids]
    heldout = [e for e in examples if e.trace_id in heldout_ids]
    return train, heldout


async def optimize_subagent(
    node_name: str,
    train: Sequence[DatasetExample],
    heldout: Sequence[DatasetExample],
    proposer,
    config: PoolConfig,
    world: World,
    seed_prompt: Optional[str] = None,
    policy=None,
) -> OptimizationResult:
    """Search `node_name`'s prompt to maximize its micro-rubric on held-out invocations."""
    from .judge import score_node_invocation

    require_node(node_name)
    if node_name not in MICRO_RUBRICS:
        raise InvalidInput(f"node {node_name} has no micro-rubric")
    if not train or not heldout:
        raise InvalidInput(f"empty dataset for {node_name}")
    train_ids = {e.trace_id for e in train}
    if train_ids & {e.trace_id for e in heldout}:
        raise InvalidInput("train and held-out share traces")

    seed_prompt = seed_prompt if seed_prompt is not None else default_bundle().prompt(node_name)
    scripted = policy is None or isinstance(policy, ScriptedPolicy)

    async def evaluate(prompt: str, example: DatasetExample) -> NodeEvaluation:
        return await score_node_invocation(node_name, prompt, example, world, policy)

    logger.info("[Search] optimizing %s: %d train / %d held-out invocations, budget %d",
                node_name, len(train), len(heldout), config.budget)
    return await pareto_search(
        train_tasks=list(train),
        heldout_tasks=list(heldout),
        seed_payload=seed_prompt,
        evaluate=evaluate,
        proposer=proposer,
        config=config,
        signature=(lambda p: directive_signature(p, node_name)) if scripted else None,
        task_id=lambda i, e: f"{e.trace_id}#{e.turn_index}#{i}",
    )


# ---------------------------------------------------------------------------
# Re-simulation and joint optimization
# ---------------------------------------------------------------------------

async def resimulate(
    logged: Trace,
    bundle: PromptBundle,
    world: World,
    checker=None,
    backend=None,
    policy=None,
    context_budget: Optional[int] = None,
) -> Trace:
    """Replay `logged` under `bundle`: logged user turns while consistent, persona after divergence."""
    persona = persona_from_episode(logged, world)
    user = UserSimulator(persona, world, logged, checker)
    max_turns = max(DEFAULT_MAX_TURNS, len(logged.user_turns()))
    kwargs = {} if context_budget is None else {"context_budget": context_budget}
    return await run_episode(bundle, world, user, backend, max_turns=max_turns,
                             session_id=logged.session_id, policy=policy, **kwargs)


Judge = Callable[[Trace], Union[Verdict, Awaitable[Verdict]]]


@dataclass(frozen=True)
class EpisodeEvaluation:
    trace: Trace
    verdict: Verdict
    score: TraceScore

    def outcome(self) -> EpisodeOutcome:
        value = self.verdict.get(SAFETY_CHECK)
        safety = None if value is None or value.value == "na" else value.value == "pass"
        return EpisodeOutcome(self.trace.session_id, self.score.reward, safety)


class EpisodeEvaluator:
    """Re-simulates and judges episodes under a bundle, charging the pool per fresh re-simulation."""

    def __init__(
        self,
        world: World,
        pool: CandidatePool,
        judge: Optional[Judge] = None,
        spec: Optional[RubricSpec] = None,
        checker=None,
        backend=None,
        policy=None,
        max_parallel: int = DEFAULT_MAX_PARALLEL,
        pass_threshold: float = DEFAULT_PASS_THRESHOLD,
    ):
        from .judge import oracle_judge

        self.world = world
        self.pool = pool
        self.spec = spec or default_rubric()
        self.judge = judge or (lambda trace: oracle_judge(trace, world, self.spec))
        self.checker = checker
        self.backend = backend
        self.policy = policy
        self.executor = RolloutExecutor(max_parallel)
        self.pass_threshold = pass_threshold
        self.cache: Dict[Tuple[str, str], EpisodeEvaluation] = {}

    async def _judge(self, trace: Trace) -> EpisodeEvaluation:
        verdict = self.judge(trace)
        if inspect.isawaitable(verdict):
            verdict = await verdict
        score = aggregate(verdict, self.spec, activate(trace, self.world, self.spec), self.pass_threshold)
        return EpisodeEvaluation(trace, verdict, score)

    async def evaluate(self, bundle: PromptBundle, episodes: Sequence[Trace]) -> Dict[str, EpisodeEvaluation]:
        """Evaluations keyed by session_id. Raises BudgetExhausted before running a batch that does not fit."""
        digest = bundle.digest
        fresh = [e for e in episodes if (digest, e.session_id) not in self.cache]
        self.pool.charge(len(fresh))

        async def job(episode: Trace) -> EpisodeEvaluation:
            trace = await resimulate(episode, bundle, self.world, self.checker, self.backend, self.policy)
            return await self._judge(trace)

        results = await self.executor.run(
            [lambda e=e: job(e) for e in fresh],
            labels=[e.session_id for e in fresh],
        )
        for episode, evaluation in zip(fresh, results):
            self.cache[(digest, episode.session_id)] = evaluation
        return {e.session_id: self.cache[(digest, e.session_id)] for e in episodes}


def _mean(evaluations: Mapping[str, EpisodeEvaluation]) -> float:
    return sum(e.score.reward for e in evaluations.values()) / len(evaluations) if evaluations else 0.0


@dataclass
class MamutResult:
    best: PromptBundle
    log: AcceptanceLog
    curve: List[Tuple[int, float]]
    rollouts_used: int
    initial_heldout_score: float
    final_heldout_score: float
    heldout: Dict[str, EpisodeEvaluation] = field(default_factory=dict)


async def mamut_optimize(
    bundle0: PromptBundle,
    seed_episodes: Sequence[Trace],
    heldout_episodes: Sequence[Trace],
    world: World,
    proposer,
    config: PoolConfig,
    judge: Optional[Judge] = None,
    spec: Optional[RubricSpec] = None,
    checker=None,
    backend=None,
    policy=None,
) -> MamutResult:
    """
    Joint bundle search over re-simulated episodes.

    Each iteration scores the current bundle on a sampled batch of seed
    episodes, summarizes failures, proposes a bundle, re-simulates the batch
    under it, and gates it on held-out: accepted only if mean held-out reward
    strictly improves and no held-out episode's safety verdict regresses.
    """
    if not seed_episodes or not heldout_episodes:
        raise InvalidInput("mamut needs non-empty seed and held-out episode sets")
    overlap = {e.session_id for e in seed_episodes} & {e.session_id for e in heldout_episodes}
    if overlap:
        raise InvalidInput(f"seed and held-out episodes overlap: {', '.join(sorted(overlap))}")
    if config.budget < config.batch_size:
        raise InvalidInput("rollout budget must cover at least one batch")

    spec = spec or default_rubric()
    pool = CandidatePool(config.budget)
    evaluator = EpisodeEvaluator(world, pool, judge, spec, checker, backend, policy, config.max_parallel)
    rng = random.Random(config.seed)
    log = AcceptanceLog()

    current = bundle0
    try:
        current_heldout = await evaluator.evaluate(current, heldout_episodes)
    except BudgetExhausted:
        raise InvalidInput("rollout budget does not cover one held-out evaluation")
    current_score = _mean(current_heldout)
    initial = current_score
    curve: List[Tuple[int, float]] = [(pool.rollouts_used, current_score)]
    logger.info("[Joint] start: held-out %.4f over %d episodes", current_score, len(heldout_episodes))

    iteration = 0
    stale = 0
    ordered_seed = sorted(seed_episodes, key=lambda e: e.session_id)
    while stale < config.max_stale_proposals:
        iteration += 1
        spent_before = pool.rollouts_used
        batch = rng.sample(ordered_seed, min(config.batch_size, len(ordered_seed)))
        try:
            batch_current = await evaluator.evaluate(current, batch)
            traces = [batch_current[e.session_id].trace for e in batch]
            failures = identify_failures(traces, [batch_current[e.session_id].verdict for e in batch], spec)
            proposal = await _propose(proposer, current, failures)

            if proposal.digest == current.digest:
                log.record(iteration, proposal.digest, _mean(batch_current), None, pool.rollouts_used,
                           reason=UNCHANGED)
            else:
                batch_proposed = await evaluator.evaluate(proposal, batch)
                train_score, train_baseline = _mean(batch_proposed), _mean(batch_current)
                if train_score < train_baseline:
                    logger.info("[Joint] iteration %d: train %.4f below %.4f, held-out skipped",
                                iteration, train_score, train_baseline)
                    log.record(iteration, proposal.digest, train_score, None, pool.rollouts_used,
                               reason=TRAIN_REGRESSION, train_baseline=train_baseline)
                else:
                    proposed_heldout = await evaluator.evaluate(proposal, heldout_episodes)
                    decision = decide(
                        {k: v.outcome() for k, v in current_heldout.items()},
                        {k: v.outcome() for k, v in proposed_heldout.items()},
                    )
                    log.record(iteration, proposal.digest, train_score, decision, pool.rollouts_used)
                    if decision.accepted:
                        current, current_heldout, current_score = proposal, proposed_heldout, decision.heldout_score
                        logger.info("[Joint] iteration %d accepted %s (held-out %.4f)",
                                    iteration, proposal.digest[:12], current_score)
        except BudgetExhausted:
            logger.info("[Joint] budget exhausted after %d rollouts", pool.rollouts_used)
            break

        if pool.rollouts_used == spent_before:
            stale += 1
        else:
            stale = 0
            curve.append((pool.rollouts_used, current_score))

    return MamutResult(current, log, curve, pool.rollouts_used, initial, current_score, current_heldout)


# ---------------------------------------------------------------------------
# Strategy comparison
# ---------------------------------------------------------------------------

@dataclass
class StrategyComparison:
    baseline: Dict[str, Any]
    per_node: Dict[str, Any]
    joint: Dict[str, Any]
    bundles: Dict[str, PromptBundle]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "baseline": self.baseline,
            "per_node": self.per_node,
            "joint": self.joint,
            "bundles": {name: b.to_dict() for name, b in self.bundles.items()},
        }


async def heldout_pass_rates(
    bundle: PromptBundle,
    heldout_episodes: Sequence[Trace],
    world: World,
    spec: Optional[RubricSpec] = None,
    judge: Optional[Judge] = None,
    checker=None,
) -> Dict[str, Any]:
    """Per-domain pass rates of `bundle` on held-out re-simulations (not budgeted)."""
    pool = CandidatePool(len(heldout_episodes))
    evaluator = EpisodeEvaluator(world, pool, judge, spec, checker)
    evaluations = await evaluator.evaluate(bundle, heldout_episodes)
    rates = pass_rates([e.score for e in evaluations.values()], (spec or default_rubric()).domains())
    rates["mean_reward"] = mean_reward({k: v.outcome() for k, v in evaluations.items()})
    return rates


async def compare_strategies(
    bundle0: PromptBundle,
    seed_episodes: Sequence[Trace],
    heldout_episodes: Sequence[Trace],
    world: World,
    config: PoolConfig,
    node_budget: Optional[int] = None,
    spec: Optional[RubricSpec] = None,
    judge: Optional[Judge] = None,
    checker=None,
) -> StrategyComparison:
    """Baseline vs per-node optimization of every micro-rubric node vs joint optimization."""
    per_node_bundle = bundle0
    logged = [await resimulate(e, bundle0, world, checker) for e in sorted(seed_episodes, key=lambda e: e.session_id)]
    for index, node in enumerate(n for n in REGISTERED_NODES if n in MICRO_RUBRICS):
        dataset = extract_subagent_dataset(logged, node)
        try:
            train, heldout = split_dataset(dataset, seed=config.seed)
        except InvalidInput as e:
            logger.info("[Search] skipping %s: %s", node, e)
            continue
        node_config = PoolConfig(budget=node_budget or config.budget, seed=config.seed + index)
        result = await optimize_subagent(
            node, train, heldout, DirectiveMutationProposer(node, seed=config.seed + index),
            node_config, world, seed_prompt=bundle0.prompt(node),
        )
        per_node_bundle = PromptBundle(dict(per_node_bundle.prompts, **{node: result.best}))

    joint = await mamut_optimize(
        bundle0, seed_episodes, heldout_episodes, world,
        JointDirectiveProposer(seed=config.seed), config, judge, spec, checker,
    )
    return StrategyComparison(
        baseline=await heldout_pass_rates(bundle0, heldout_episodes, world, spec, judge, checker),
        per_node=await heldout_pass_rates(per_node_bundle, heldout_episodes, world, spec, judge, checker),
        joint=await heldout_pass_rates(joint.best, heldout_episodes, world, spec, judge, checker),
        bundles={"baseline": bundle0, "per_node": per_node_bundle, "joint": joint.best},
    )
