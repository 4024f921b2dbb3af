"""Iterative subset optimization over example pools.

The library alternates two phases: search for the best small subset of an
example pool under a black-box metric (Gaussian-process surrogate over binary
membership vectors, sparsity-regularized scalarization, expected-improvement
proposals), then regenerate the pool seeded by the winner. Synthetic oracles
make the whole loop runnable and testable on a desk.
"""

from .acquisition import (
    ProposalConfig,
    SearchSpaceExhausted,
    expected_improvement,
    propose,
)
from .baselines import (
    EmbeddingMatrix,
    HashEmbedder,
    diverse_k,
    embed_pool,
    load_embeddings,
    mean_query,
    retrieve_topk,
    save_embeddings,
)
from .config import AnalysisConfig, ConfigError, RunConfig, config_hash, parse_config
from .importance import (
    ImportanceVector,
    RankedSweep,
    SweepRow,
    build_ranked_sets,
    importance_scores,
    sweep,
)
from .ledgers import LedgerWriter, ResumeConflict, RunIO, load_run_ledger
from .optimizer import OptimizerConfig, OptimizerResult, bayes_opt, random_search
from .orchestrator import (
    DatasetRefs,
    MilestoneEntry,
    MilestoneLedger,
    OrchestratorConfig,
    dispatch_run,
    run_bridge,
    run_iterative_reinforced,
    run_mt,
    run_restricted,
)
from .pool import (
    EvaluationRecord,
    Example,
    ExamplePool,
    PoolFormatError,
    SubsetVector,
    base_id,
    load_pool,
    sample_subset,
    save_pool,
    subset_from_ids,
)
from .runtime import (
    EvaluationError,
    EvaluatorSpec,
    ExternalEmbedder,
    ExternalEvaluator,
    ExternalGenerator,
    ExternalWorker,
    GenerationModelSpec,
    ProtocolError,
    SyntheticBackend,
    SyntheticPopulation,
    additive_oracle,
    interference_oracle,
    population_from_spec,
    random_population,
    synthetic_bootstrap,
    synthetic_generate,
)
from .scalarization import ScalarizationConfig, sample_beta, tch
from .surrogate import GPModel, KernelParams, fit_gp, kernel, posterior, posterior_gradient

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig",
    "ConfigError",
    "DatasetRefs",
    "EmbeddingMatrix",
    "EvaluationError",
    "EvaluationRecord",
    "EvaluatorSpec",
    "Example",
    "ExamplePool",
    "ExternalEmbedder",
    "ExternalEvaluator",
    "ExternalGenerator",
    "ExternalWorker",
    "GPModel",
    "GenerationModelSpec",
    "HashEmbedder",
    "ImportanceVector",
    "KernelParams",
    "LedgerWriter",
    "MilestoneEntry",
    "MilestoneLedger",
    "OptimizerConfig",
    "OptimizerResult",
    "OrchestratorConfig",
    "PoolFormatError",
    "ProposalConfig",
    "ProtocolError",
    "RankedSweep",
    "ResumeConflict",
    "RunConfig",
    "RunIO",
    "ScalarizationConfig",
    "SearchSpaceExhausted",
    "SubsetVector",
    "SweepRow",
    "SyntheticBackend",
    "SyntheticPopulation",
    "additive_oracle",
    "base_id",
    "bayes_opt",
    "build_ranked_sets",
    "config_hash",
    "dispatch_run",
    "diverse_k",
    "embed_pool",
    "expected_improvement",
    "fit_gp",
    "importance_scores",
    "interference_oracle",
    "kernel",
    "load_embeddings",
    "load_pool",
    "load_run_ledger",
    "mean_query",
    "parse_config",
    "population_from_spec",
    "posterior",
    "posterior_gradient",
    "propose",
    "random_population",
    "random_search",
    "retrieve_topk",
    "run_bridge",
    "run_iterative_reinforced",
    "run_mt",
    "run_restricted",
    "sample_beta",
    "sample_subset",
    "save_embeddings",
    "save_pool",
    "subset_from_ids",
    "sweep",
    "synthetic_bootstrap",
    "synthetic_generate",
    "tch",
]
