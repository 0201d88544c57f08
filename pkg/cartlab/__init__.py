# cartlab/__init__.py
"""Evaluation and prompt optimization for a multi-agent shopping assistant."""

from .acceptance import AcceptanceDecision, AcceptanceLog, EpisodeOutcome, decide
from .agentruntime import (
    PromptBundle,
    SharedContext,
    default_bundle,
    load_bundle,
    run_episode,
    run_node,
    save_bundle,
    set_directive,
)
from .backend import BackendError, CassetteBackend, CompletionRequest, HTTPBackend, MockBackend, ReplayMiss, build_backend
from .config import RunConfig, load_run_config
from .errors import (
    BudgetExhausted,
    CartlabError,
    ContractViolation,
    InvalidInput,
    NoSuchLine,
    NotFound,
    ParseError,
    ValidationError,
)
from .failures import FailureSummary, identify_failures
from .judge import (
    AgreementReport,
    JudgePrompt,
    OracleJudgeConfig,
    RuleSnippetJudgeBackend,
    agreement,
    calibrate_judge,
    llm_judge,
    oracle_judge,
    score_node_invocation,
    score_trace,
)
from .optimizer import (
    CandidatePool,
    DirectiveMutationProposer,
    JointDirectiveProposer,
    PoolConfig,
    compare_strategies,
    mamut_optimize,
    optimize_subagent,
    resimulate,
)
from .rubric import RubricSpec, TraceScore, activate, aggregate, default_rubric, micro_rubric, pass_rates
from .scenarios import Scenario, generate_scenarios, load_scenarios
from .tracemodel import Trace, VerdictValue, extract_subagent_dataset, parse_trace, serialize_trace
from .usersim import Persona, UserSimulator, find_divergence, synthesize_turn
from .worldsim import Cart, World, execute_tool, load_world, search_catalog

__version__ = "0.1.0"

__all__ = [
    "AcceptanceDecision", "AcceptanceLog", "EpisodeOutcome", "decide",
    "PromptBundle", "SharedContext", "default_bundle", "load_bundle", "run_episode", "run_node",
    "save_bundle", "set_directive",
    "BackendError", "CassetteBackend", "CompletionRequest", "HTTPBackend", "MockBackend", "ReplayMiss",
    "build_backend",
    "RunConfig", "load_run_config",
    "BudgetExhausted", "CartlabError", "ContractViolation", "InvalidInput", "NoSuchLine", "NotFound",
    "ParseError", "ValidationError",
    "FailureSummary", "identify_failures",
    "AgreementReport", "JudgePrompt", "OracleJudgeConfig", "RuleSnippetJudgeBackend", "agreement",
    "calibrate_judge", "llm_judge", "oracle_judge", "score_node_invocation", "score_trace",
    "CandidatePool", "DirectiveMutationProposer", "JointDirectiveProposer", "PoolConfig",
    "compare_strategies", "mamut_optimize", "optimize_subagent", "resimulate",
    "RubricSpec", "TraceScore", "activate", "aggregate", "default_rubric", "micro_rubric", "pass_rates",
    "Scenario", "generate_scenarios", "load_scenarios",
    "Trace", "VerdictValue", "extract_subagent_dataset", "parse_trace", "serialize_trace",
    "Persona", "UserSimulator", "find_divergence", "synthesize_turn",
    "Cart", "World", "execute_tool", "load_world", "search_catalog",
]
