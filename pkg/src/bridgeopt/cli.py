"""Command-line front end.

Four subcommands: ``optimize`` runs the full loop, ``baseline`` runs it with a
non-default subset-selection slot, ``analyze`` produces importance scores and
the ranked-subset sweep, ``report`` aggregates milestone ledgers across run
directories. Every artifact a run emits is tagged with the config hash and
seed, either inline (CSV comments, chart title) or through the run directory's
``meta.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from .baselines import HashEmbedder
from .config import AnalysisConfig, ConfigError, RunConfig, config_hash, normalized_dict, parse_config
from .importance import DIRECTIONS, RankedSweep, importance_scores, sweep
from .ledgers import MILESTONES_NAME, ResumeConflict, RunIO
from .orchestrator import DatasetRefs, dispatch_run
from .pool import ExamplePool, PoolFormatError, load_pool
from .rng import STREAM_ANALYZE, digest_int, substream
from .runtime import (
    EvaluationError,
    ExternalEvaluator,
    ExternalGenerator,
    ExternalWorker,
    ProtocolError,
    SyntheticBackend,
    population_from_spec,
)

OUT_ENV = "BRIDGE_OUT"
META_NAME = "meta.json"
LOCK_NAME = ".lock"

_GOLD_QUALITY_RANGE = (0.6, 0.95)


class CliError(RuntimeError):
    """User-facing failure; printed to stderr and mapped to exit code 1."""


def _resolve_out(cfg: RunConfig) -> Path:
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    raise CliError(f"no output directory: set output_dir in the config or the {OUT_ENV} variable")


class _Lock:
    """Pid lock file guarding one output directory.

    A lock held by a dead process is reclaimed; a live one is an error.
    """

    def __init__(self, out_dir: Path) -> None:
        self.path = out_dir / LOCK_NAME
        self._held = False

    def _alive(self, pid: int) -> bool:
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return False
        except PermissionError:
            return True
        return True

    def acquire(self) -> None:
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_WRONLY | os.O_CREAT | os.O_EXCL)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text(encoding="utf-8").strip())
                except (OSError, ValueError):
                    pid = -1
                if pid > 0 and self._alive(pid):
                    raise CliError(
                        f"output directory is locked by running process {pid}: {self.path}"
                    ) from None
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(str(os.getpid()))
            self._held = True
            return
        raise CliError(f"could not acquire lock: {self.path}")

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False


def _write_meta(out_dir: Path, cfg: RunConfig) -> None:
    """Create or verify the run directory's identity record."""
    meta_path = out_dir / META_NAME
    meta = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "config": normalized_dict(cfg),
    }
    if meta_path.exists():
        existing = json.loads(meta_path.read_text(encoding="utf-8"))
        if existing.get("config_hash") != meta["config_hash"]:
            raise CliError(
                f"config hash mismatch: {meta_path} records {existing.get('config_hash')}, "
                f"current config hashes to {meta['config_hash']}"
            )
        if existing.get("seed") != cfg.seed:
            raise CliError(
                f"seed mismatch: {meta_path} records seed {existing.get('seed')}, config has {cfg.seed}"
            )
        return
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclasses.dataclass
class _Stack:
    """Evaluator, generator and helpers assembled from one config."""

    evaluator: object
    generator: object
    milestone_evaluator: object
    analysis_evaluator: object
    embedder: object
    datasets: DatasetRefs
    workers: list

    def close(self) -> None:
        for w in self.workers:
            w.close()


def _gold_quality(eval_seed: int, example_id: str) -> float:
    lo, hi = _GOLD_QUALITY_RANGE
    rng = np.random.default_rng(np.random.SeedSequence([eval_seed, digest_int("gold", example_id)]))
    return float(rng.uniform(lo, hi))


def _build_stack(cfg: RunConfig) -> _Stack:
    workers = []
    datasets = cfg.datasets
    mt = cfg.orchestrator.mode == "mt"

    if cfg.evaluator.kind == "external":
        worker = ExternalWorker(
            cfg.evaluator.params["command"],
            timeout_s=float(cfg.evaluator.params.get("timeout_s", 60.0)),
        )
        workers.append(worker)
        evaluator = ExternalEvaluator(worker)
        milestone_evaluator = None
        analysis_evaluator = evaluator
        if cfg.generation.kind != "external":
            raise CliError("an external evaluator requires an external generation model")
        generator = ExternalGenerator(worker)
    else:
        aux = None
        if mt:
            # round 0 conditions on every labeled id, later rounds on train only
            labeled = tuple(datasets.train) + tuple(datasets.validation)
            aux = {tid: _gold_quality(cfg.evaluator.seed, tid) for tid in labeled}
        backend = SyntheticBackend(cfg.evaluator, cfg.generation, aux_quality=aux, mt_mode=mt)
        evaluator = backend.evaluator()
        milestone_evaluator = backend.milestone_evaluator()
        analysis_evaluator = backend.analysis_evaluator()
        generator = backend
        if mt and datasets.unlabeled is None:
            population = population_from_spec(cfg.evaluator)
            datasets = dataclasses.replace(datasets, unlabeled=tuple(population.ids))

    embedder = HashEmbedder(cfg.orchestrator.embedding_dim)
    return _Stack(
        evaluator=evaluator,
        generator=generator,
        milestone_evaluator=milestone_evaluator,
        analysis_evaluator=analysis_evaluator,
        embedder=embedder,
        datasets=datasets,
        workers=workers,
    )


def _load_initial_pool(cfg: RunConfig) -> ExamplePool | None:
    if cfg.pool is None:
        return None
    return load_pool(cfg.pool)


def _run_optimize(cfg: RunConfig, out_dir: Path, resume: bool) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    has_run = (out_dir / "run_ledger.jsonl").exists() or (out_dir / MILESTONES_NAME).exists()
    if has_run and not resume:
        raise CliError(
            f"output directory already holds a run: {out_dir} (pass --resume to continue it)"
        )

    lock = _Lock(out_dir)
    lock.acquire()
    stack = None
    io = None
    try:
        _write_meta(out_dir, cfg)
        stack = _build_stack(cfg)
        io = RunIO(out_dir)
        ledger = dispatch_run(
            cfg.orchestrator,
            stack.datasets,
            stack.evaluator,
            stack.generator,
            seed=cfg.seed,
            initial_pool=_load_initial_pool(cfg),
            milestone_evaluator=stack.milestone_evaluator,
            io=io,
            embedder=stack.embedder,
        )
        for entry in ledger.entries:
            metric = "n/a" if entry.metric is None else f"{entry.metric:.6f}"
            print(
                f"milestone {entry.milestone}: metric={metric} "
                f"subset_size={len(entry.subset_ids)} pool={entry.pool_path}"
            )
        print(f"run complete: {out_dir}")
        return 0
    finally:
        if io is not None:
            io.close()
        if stack is not None:
            stack.close()
        lock.release()


def _metric_only(result) -> float:
    if isinstance(result, tuple):
        return float(result[0])
    return float(result)


def _bootstrap_analysis_pool(cfg: RunConfig, stack: _Stack) -> ExamplePool:
    pool = _load_initial_pool(cfg)
    if pool is None:
        rng = substream(cfg.seed, 0, STREAM_ANALYZE)
        pool = stack.generator.generate(None, (), 0, rng)
    kept = [ex for ex in pool.examples if ex.correct]
    if not kept:
        raise EvaluationError("analysis pool has no correct examples")
    return ExamplePool(tuple(kept), pool.round)


def _write_sweep_csv(path: Path, sw: RankedSweep, chash: str, seed: int) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={chash}\n# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["direction", "t", "replicate", "metric"])
        for row in sw.rows:
            writer.writerow([row.direction, row.t, row.replicate, repr(row.metric)])


def _write_importance_csv(path: Path, pool: ExamplePool, scores, chash: str, seed: int) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={chash}\n# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "id", "score"])
        for i, s in enumerate(scores.scores):
            writer.writerow([i, pool.examples[i].id, repr(float(s))])


def _write_sweep_chart(path: Path, sw: RankedSweep, chash: str, seed: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = chash
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    styles = {"ascending": ("tab:red", "o"), "descending": ("tab:green", "s")}
    for direction in DIRECTIONS:
        color, marker = styles[direction]
        pts = [(row.t, row.metric) for row in sw.rows if row.direction == direction]
        xs = np.array([p[0] for p in pts], dtype=float)
        ys = np.array([p[1] for p in pts], dtype=float)
        ax.scatter(xs, ys, s=14.0, color=color, alpha=0.35, marker=marker)
        means = [(t, float(ys[xs == t].mean())) for t in sw.t_grid]
        ax.plot(
            [p[0] for p in means],
            [p[1] for p in means],
            color=color,
            marker=marker,
            label=direction,
        )
    ax.set_xlabel("subset size t")
    ax.set_ylabel("metric")
    ax.set_title(f"ranked-subset sweep (config {chash[:12]}, seed {seed})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _run_analyze(cfg: RunConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = _Lock(out_dir)
    lock.acquire()
    stack = None
    try:
        _write_meta(out_dir, cfg)
        chash = config_hash(cfg)
        stack = _build_stack(cfg)
        pool = _bootstrap_analysis_pool(cfg, stack)
        an: AnalysisConfig = cfg.analysis

        rng = substream(cfg.seed, 1, STREAM_ANALYZE)
        handle = stack.analysis_evaluator

        def point_eval(subset):
            return _metric_only(handle.evaluate(pool, subset))

        scores = importance_scores(point_eval, pool, an.n_design, rng, seed=cfg.seed)

        def sweep_eval(subset, noise_tag):
            return _metric_only(handle.evaluate(pool, subset, noise_tag=noise_tag))

        sw = sweep(sweep_eval, np.array(scores.scores), an.step, an.replicates, rng)

        _write_importance_csv(out_dir / "importance.csv", pool, scores, chash, cfg.seed)
        _write_sweep_csv(out_dir / "sweep.csv", sw, chash, cfg.seed)
        _write_sweep_chart(out_dir / "sweep_chart.svg", sw, chash, cfg.seed)
        print(f"analysis complete: {out_dir} (pool size {len(pool)}, {len(sw.rows)} sweep rows)")
        return 0
    finally:
        if stack is not None:
            stack.close()
        lock.release()


def _milestone_sort_key(name: str):
    digits = ""
    for ch in name:
        if ch.isdigit():
            digits += ch
        else:
            break
    return (int(digits) if digits else 0, name[len(digits):])


def _run_report(root: Path) -> int:
    if not root.exists():
        raise CliError(f"no such directory: {root}")
    if (root / MILESTONES_NAME).exists():
        run_dirs = [root]
    else:
        run_dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / MILESTONES_NAME).exists())
    if not run_dirs:
        raise CliError(f"no milestone ledgers found under {root}")

    hashes: dict[str, str] = {}
    seeds = []
    for d in run_dirs:
        meta_path = d / META_NAME
        if not meta_path.exists():
            raise CliError(f"run directory has no {META_NAME}: {d}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        hashes[str(d)] = meta["config_hash"]
        seeds.append(meta["seed"])
    distinct = sorted(set(hashes.values()))
    if len(distinct) > 1:
        detail = ", ".join(f"{d}={h[:12]}" for d, h in sorted(hashes.items()))
        raise CliError(f"refusing to aggregate runs with different config hashes: {detail}")
    chash = distinct[0]

    by_milestone: dict[str, list[float]] = {}
    for d in run_dirs:
        with (d / MILESTONES_NAME).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec["metric"] is None:
                    continue
                by_milestone.setdefault(rec["milestone"], []).append(float(rec["metric"]))

    if not by_milestone:
        raise CliError(f"milestone ledgers under {root} hold no metrics")

    names = sorted(by_milestone, key=_milestone_sort_key)
    rows = []
    for name in names:
        values = by_milestone[name]
        rows.append(
            {
                "milestone": name,
                "n": len(values),
                "mean": statistics.fmean(values),
                "stdev": statistics.pstdev(values),
            }
        )
    ranked = sorted(rows, key=lambda r: (-r["mean"], r["stdev"]))
    flags = {}
    if ranked:
        flags[ranked[0]["milestone"]] = "best"
    if len(ranked) > 1:
        flags[ranked[1]["milestone"]] = "second"

    table_path = root / "milestone_table.csv"
    with table_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={chash}\n# seeds={','.join(str(s) for s in seeds)}\n")
        writer = csv.writer(fh)
        writer.writerow(["milestone", "n", "mean", "stdev", "flag"])
        for row in rows:
            writer.writerow(
                [
                    row["milestone"],
                    row["n"],
                    f"{row['mean']:.6f}",
                    f"{row['stdev']:.6f}",
                    flags.get(row["milestone"], ""),
                ]
            )

    print(f"config {chash[:12]}, {len(run_dirs)} run(s), seeds: {', '.join(str(s) for s in seeds)}")
    header = f"{'milestone':<12} {'n':>3} {'mean':>10} {'stdev':>10} flag"
    print(header)
    for row in rows:
        print(
            f"{row['milestone']:<12} {row['n']:>3} {row['mean']:>10.6f} "
            f"{row['stdev']:>10.6f} {flags.get(row['milestone'], '')}"
        )
    if len(run_dirs) == 1:
        print("warning: single run, spread columns are degenerate")
    print(f"wrote {table_path}")
    return 0


def _cmd_optimize(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    return _run_optimize(cfg, _resolve_out(cfg), resume=args.resume)


def _cmd_baseline(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    orch = dataclasses.replace(cfg.orchestrator, optimize_slot=args.slot)
    cfg = dataclasses.replace(cfg, orchestrator=orch)
    return _run_optimize(cfg, _resolve_out(cfg), resume=args.resume)


def _cmd_analyze(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    return _run_analyze(cfg, _resolve_out(cfg))


def _cmd_report(args: argparse.Namespace) -> int:
    return _run_report(Path(args.dir))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridge",
        description="iterative subset optimization over example pools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="run the full optimize/generate loop")
    p_opt.add_argument("--config", required=True, help="path to a JSON run config")
    p_opt.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p_opt.set_defaults(fn=_cmd_optimize)

    p_base = sub.add_parser("baseline", help="run the loop with a baseline selection slot")
    p_base.add_argument("--config", required=True, help="path to a JSON run config")
    p_base.add_argument(
        "--slot",
        required=True,
        choices=["rs", "retrieval", "diversity"],
        help="subset selection baseline to use",
    )
    p_base.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p_base.set_defaults(fn=_cmd_baseline)

    p_an = sub.add_parser("analyze", help="importance scores and ranked-subset sweep")
    p_an.add_argument("--config", required=True, help="path to a JSON run config")
    p_an.set_defaults(fn=_cmd_analyze)

    p_rep = sub.add_parser("report", help="aggregate milestone ledgers into a table")
    p_rep.add_argument("--dir", required=True, help="run directory or directory of run directories")
    p_rep.set_defaults(fn=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (
        CliError,
        ConfigError,
        PoolFormatError,
        ProtocolError,
        EvaluationError,
        ResumeConflict,
        OSError,
        KeyError,
        ValueError,
    ) as err:
        if isinstance(err, KeyError):
            message = f"missing key {err.args[0]!r}" if err.args else str(err)
        else:
            message = str(err)
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
