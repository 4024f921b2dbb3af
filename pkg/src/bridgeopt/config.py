"""Strict run-configuration files.

One JSON document holds everything a run needs; unknown keys anywhere are
errors naming the full key path, and the seed is mandatory. The config hash
(seed and output directory excluded) identifies a configuration family, so
multi-seed aggregation can refuse to mix incompatible runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .acquisition import ProposalConfig
from .optimizer import OptimizerConfig
from .orchestrator import DatasetRefs, OrchestratorConfig
from .runtime import EvaluatorSpec, GenerationModelSpec
from .scalarization import ScalarizationConfig


class ConfigError(ValueError):
    """A config file is malformed; the message names the offending key."""


@dataclass(frozen=True)
class AnalysisConfig:
    n_design: int = 64
    step: int = 1
    replicates: int = 3

    def __post_init__(self) -> None:
        if self.n_design < 2:
            raise ValueError("n_design must be at least 2")
        if self.step < 1:
            raise ValueError("step must be at least 1")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str | None
    pool: str | None
    orchestrator: OrchestratorConfig
    evaluator: EvaluatorSpec
    generation: GenerationModelSpec
    datasets: DatasetRefs
    analysis: AnalysisConfig


_TOP_KEYS = {
    "seed", "output_dir", "pool", "orchestrator", "optimizer",
    "evaluator", "generation", "datasets", "analysis",
}
_ORCH_KEYS = {"rounds", "optimize_slot", "mode", "milestones", "slot_k", "embedding_dim"}
_OPT_KEYS = {"n_eval", "n_init", "beta_lb", "beta_ub", "n_starts", "max_steps"}
_EVAL_KEYS = {"kind", "params", "noise_sd", "seed"}
_GEN_KEYS = {"kind", "pull_rate", "quality_noise_sd", "correctness_slope", "params"}
_DATA_KEYS = {"train", "validation", "unlabeled"}
_ANALYSIS_KEYS = {"n_design", "step", "replicates"}


def _check_keys(d: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key: {where}")


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError(f"config key {key} must be an object")
    return value


def _typed(value, types, path, type_name):
    if isinstance(value, bool) or not isinstance(value, types):
        raise ConfigError(f"config key {path} must be {type_name}")
    return value


def _int(d: dict, key: str, default, path: str):
    if key not in d or d[key] is None:
        return default
    return _typed(d[key], int, f"{path}.{key}" if path else key, "an integer")


def _float(d: dict, key: str, default, path: str):
    if key not in d or d[key] is None:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"config key {path}.{key} must be a number")
    return float(v)


def _str(d: dict, key: str, default, path: str):
    if key not in d or d[key] is None:
        return default
    return _typed(d[key], str, f"{path}.{key}" if path else key, "a string")


def _str_list(d: dict, key: str, default, path: str):
    if key not in d or d[key] is None:
        return default
    v = d[key]
    if not isinstance(v, list) or any(not isinstance(x, str) for x in v):
        raise ConfigError(f"config key {path}.{key} must be a list of strings")
    return tuple(v)


def _build(section: str, ctor, **kwargs):
    try:
        return ctor(**kwargs)
    except ValueError as err:
        raise ConfigError(f"config section {section}: {err}") from None


def parse_config(path: str | Path) -> RunConfig:
    """Parse and validate one config file; any violation is a ConfigError."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err.msg} (line {err.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    _check_keys(raw, _TOP_KEYS, "")

    if "seed" not in raw:
        raise ConfigError("config key seed is mandatory")
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("config key seed must be a non-negative integer")

    output_dir = _str(raw, "output_dir", None, "")
    pool = _str(raw, "pool", None, "")

    orch_raw = _section(raw, "orchestrator")
    _check_keys(orch_raw, _ORCH_KEYS, "orchestrator")
    opt_raw = _section(raw, "optimizer")
    _check_keys(opt_raw, _OPT_KEYS, "optimizer")

    scal = _build(
        "optimizer",
        ScalarizationConfig,
        beta_lb=_float(opt_raw, "beta_lb", 0.25, "optimizer"),
        beta_ub=_float(opt_raw, "beta_ub", 1.0, "optimizer"),
    )
    prop = _build(
        "optimizer",
        ProposalConfig,
        n_starts=_int(opt_raw, "n_starts", 16, "optimizer"),
        max_steps=_int(opt_raw, "max_steps", None, "optimizer"),
    )
    opt = _build(
        "optimizer",
        OptimizerConfig,
        n_eval=_int(opt_raw, "n_eval", 32, "optimizer"),
        n_init=_int(opt_raw, "n_init", None, "optimizer"),
        scalarization=scal,
        proposal=prop,
    )

    milestones = None
    if orch_raw.get("milestones") is not None:
        milestones = _str_list(orch_raw, "milestones", None, "orchestrator")
    slot_k = orch_raw.get("slot_k", 10)
    if not (isinstance(slot_k, int) and not isinstance(slot_k, bool)) and not isinstance(slot_k, str):
        raise ConfigError("config key orchestrator.slot_k must be an integer or 'all'")
    orch = _build(
        "orchestrator",
        OrchestratorConfig,
        rounds=_int(orch_raw, "rounds", 3, "orchestrator"),
        optimize_slot=_str(orch_raw, "optimize_slot", "bo", "orchestrator"),
        mode=_str(orch_raw, "mode", "standard", "orchestrator"),
        milestones=milestones,
        slot_k=slot_k,
        embedding_dim=_int(orch_raw, "embedding_dim", 32, "orchestrator"),
        optimizer=opt,
    )

    eval_raw = _section(raw, "evaluator")
    _check_keys(eval_raw, _EVAL_KEYS, "evaluator")
    params = eval_raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("config key evaluator.params must be an object")
    evaluator = _build(
        "evaluator",
        EvaluatorSpec,
        kind=_str(eval_raw, "kind", "interference", "evaluator"),
        params=params,
        noise_sd=_float(eval_raw, "noise_sd", 0.0, "evaluator"),
        seed=_int(eval_raw, "seed", 0, "evaluator"),
    )

    gen_raw = _section(raw, "generation")
    _check_keys(gen_raw, _GEN_KEYS, "generation")
    gparams = gen_raw.get("params", {})
    if not isinstance(gparams, dict):
        raise ConfigError("config key generation.params must be an object")
    generation = _build(
        "generation",
        GenerationModelSpec,
        kind=_str(gen_raw, "kind", "synthetic", "generation"),
        pull_rate=_float(gen_raw, "pull_rate", 0.5, "generation"),
        quality_noise_sd=_float(gen_raw, "quality_noise_sd", 0.05, "generation"),
        correctness_slope=_float(gen_raw, "correctness_slope", 4.0, "generation"),
        params=gparams,
    )

    data_raw = _section(raw, "datasets")
    _check_keys(data_raw, _DATA_KEYS, "datasets")
    datasets = DatasetRefs(
        train=_str_list(data_raw, "train", (), "datasets"),
        validation=_str_list(data_raw, "validation", (), "datasets"),
        unlabeled=_str_list(data_raw, "unlabeled", None, "datasets"),
    )

    an_raw = _section(raw, "analysis")
    _check_keys(an_raw, _ANALYSIS_KEYS, "analysis")
    analysis = _build(
        "analysis",
        AnalysisConfig,
        n_design=_int(an_raw, "n_design", 64, "analysis"),
        step=_int(an_raw, "step", 1, "analysis"),
        replicates=_int(an_raw, "replicates", 3, "analysis"),
    )

    return RunConfig(
        seed=seed,
        output_dir=output_dir,
        pool=pool,
        orchestrator=orch,
        evaluator=evaluator,
        generation=generation,
        datasets=datasets,
        analysis=analysis,
    )


def normalized_dict(cfg: RunConfig) -> dict:
    """Fully explicit, key-ordered form of the config (defaults included)."""
    o = cfg.orchestrator
    opt = o.optimizer
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "pool": cfg.pool,
        "orchestrator": {
            "rounds": o.rounds,
            "optimize_slot": o.optimize_slot,
            "mode": o.mode,
            "milestones": list(o.milestones) if o.milestones is not None else None,
            "slot_k": o.slot_k,
            "embedding_dim": o.embedding_dim,
        },
        "optimizer": {
            "n_eval": opt.n_eval,
            "n_init": opt.n_init,
            "beta_lb": opt.scalarization.beta_lb,
            "beta_ub": opt.scalarization.beta_ub,
            "n_starts": opt.proposal.n_starts,
            "max_steps": opt.proposal.max_steps,
        },
        "evaluator": {
            "kind": cfg.evaluator.kind,
            "params": cfg.evaluator.params,
            "noise_sd": cfg.evaluator.noise_sd,
            "seed": cfg.evaluator.seed,
        },
        "generation": {
            "kind": cfg.generation.kind,
            "pull_rate": cfg.generation.pull_rate,
            "quality_noise_sd": cfg.generation.quality_noise_sd,
            "correctness_slope": cfg.generation.correctness_slope,
            "params": cfg.generation.params,
        },
        "datasets": {
            "train": list(cfg.datasets.train),
            "validation": list(cfg.datasets.validation),
            "unlabeled": list(cfg.datasets.unlabeled) if cfg.datasets.unlabeled is not None else None,
        },
        "analysis": {
            "n_design": cfg.analysis.n_design,
            "step": cfg.analysis.step,
            "replicates": cfg.analysis.replicates,
        },
    }


def config_hash(cfg: RunConfig) -> str:
    """Identity of the configuration family: seed and output location excluded."""
    d = normalized_dict(cfg)
    d.pop("seed")
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
