"""Evaluation and generation backends: synthetic worlds and external workers.

The synthetic side models a candidate universe with one latent quality per
example and optional pairwise interference; oracles are pure functions of
(population, subset, seed), so repeated calls agree bit-exactly and resumed
runs replay without drift. The external side talks newline-delimited JSON to
a child process over stdio; it is deliberately not a network server.
"""

from __future__ import annotations

import json
import math
import queue
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .pool import (
    Example,
    ExamplePool,
    PoolFormatError,
    SubsetVector,
    base_id,
    example_from_record,
)
from .rng import digest_int, substream

EVALUATOR_KINDS = ("additive", "interference", "external")
GENERATION_KINDS = ("synthetic", "external")

_SYNTH_PARAM_KEYS = {"m", "q", "w", "q_low", "q_high", "neg_frac", "neg_scale"}
_EXTERNAL_PARAM_KEYS = {"command", "timeout_s"}


class ProtocolError(RuntimeError):
    """The external worker violated the wire protocol."""


class EvaluationError(RuntimeError):
    """An evaluation or generation request failed."""


@dataclass(frozen=True)
class EvaluatorSpec:
    """How to score a subset: a synthetic oracle family or an external worker."""

    kind: str
    params: dict = field(default_factory=dict)
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in EVALUATOR_KINDS:
            raise ValueError(f"unknown evaluator kind {self.kind!r}; expected one of {EVALUATOR_KINDS}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        allowed = _EXTERNAL_PARAM_KEYS if self.kind == "external" else _SYNTH_PARAM_KEYS
        unknown = sorted(set(self.params) - allowed)
        if unknown:
            raise ValueError(f"unknown evaluator params for kind {self.kind!r}: {unknown}")


@dataclass(frozen=True)
class GenerationModelSpec:
    """Pool regeneration dynamics (synthetic) or an external generate op."""

    kind: str = "synthetic"
    pull_rate: float = 0.5
    quality_noise_sd: float = 0.05
    correctness_slope: float = 4.0
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in GENERATION_KINDS:
            raise ValueError(f"unknown generation kind {self.kind!r}; expected one of {GENERATION_KINDS}")
        if not (0.0 <= self.pull_rate <= 1.0):
            raise ValueError("pull_rate must lie in [0, 1]")
        if self.quality_noise_sd < 0:
            raise ValueError("quality_noise_sd must be non-negative")
        if self.correctness_slope <= 0:
            raise ValueError("correctness_slope must be positive")
        allowed = _EXTERNAL_PARAM_KEYS if self.kind == "external" else set()
        unknown = sorted(set(self.params) - allowed)
        if unknown:
            raise ValueError(f"unknown generation params for kind {self.kind!r}: {unknown}")


class SyntheticPopulation:
    """Latent state behind a synthetic task: quality per example, interference between pairs."""

    def __init__(self, ids: Sequence[str], q: np.ndarray, w: np.ndarray):
        self.ids = tuple(ids)
        self.q = np.asarray(q, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        n = len(self.ids)
        if self.q.shape != (n,):
            raise ValueError("quality vector must have one entry per id")
        if self.w.shape != (n, n):
            raise ValueError("interaction matrix must be square over the ids")
        if not np.allclose(self.w, self.w.T):
            raise ValueError("interaction matrix must be symmetric")
        if np.any(np.diag(self.w) != 0.0):
            raise ValueError("interaction matrix must have a zero diagonal")
        self._index = {eid: i for i, eid in enumerate(self.ids)}
        if len(self._index) != n:
            raise ValueError("population ids must be unique")

    @property
    def size(self) -> int:
        return len(self.ids)

    def index_of(self, example_id: str) -> int:
        try:
            return self._index[example_id]
        except KeyError:
            raise KeyError(f"unknown population id {example_id!r}") from None


def random_population(
    m: int,
    rng: np.random.Generator,
    *,
    q_low: float = 0.05,
    q_high: float = 0.95,
    neg_frac: float = 0.3,
    neg_scale: float = 0.35,
    interference: bool = True,
    id_prefix: str = "ex",
) -> SyntheticPopulation:
    """Sample a task instance: qualities uniform, harmful pairs sparse and negative."""
    if m < 1:
        raise ValueError("population size must be at least 1")
    q = rng.uniform(q_low, q_high, m)
    w = np.zeros((m, m))
    if interference and m > 1:
        upper = np.triu(rng.random((m, m)) < neg_frac, k=1)
        vals = -np.abs(rng.normal(0.0, neg_scale, (m, m)))
        w = np.where(upper, vals, 0.0)
        w = w + w.T
    ids = tuple(f"{id_prefix}{j}" for j in range(m))
    return SyntheticPopulation(ids, q, w)


def _noise(seed: int, noise_tag: int, bits_code: int, noise_sd: float) -> float:
    if noise_sd == 0.0:
        return 0.0
    ss = np.random.SeedSequence([int(seed), int(noise_tag), int(bits_code)])
    return float(np.random.default_rng(ss).normal(0.0, noise_sd))


def _bits_code(bits: np.ndarray) -> int:
    code = 0
    for b in bits:
        code = (code << 1) | int(b)
    return code


def default_normalizer(population: SyntheticPopulation) -> float:
    s = float(np.sum(np.maximum(population.q, 0.0)))
    return s if s > 0.0 else 1.0


def additive_oracle(
    population: SyntheticPopulation,
    subset: SubsetVector,
    *,
    noise_sd: float = 0.0,
    seed: int = 0,
    noise_tag: int = 0,
    normalizer: float | None = None,
) -> float:
    """clamp01(sum of selected qualities / normalizer + noise).

    The normalizer defaults to the positive quality mass of this population
    (1 when that mass is 0); callers tracking an evolving population may pin
    it to a fixed task scale instead.
    """
    b = subset.to_numpy()
    if b.shape[0] != population.size:
        raise ValueError("subset length must equal population size")
    norm = default_normalizer(population) if normalizer is None else float(normalizer)
    raw = float(population.q @ b) / norm
    raw += _noise(seed, noise_tag, _bits_code(b), noise_sd)
    return min(max(raw, 0.0), 1.0)


def interference_oracle(
    population: SyntheticPopulation,
    subset: SubsetVector,
    *,
    noise_sd: float = 0.0,
    seed: int = 0,
    noise_tag: int = 0,
    normalizer: float | None = None,
) -> float:
    """Additive value plus the pairwise interaction term over selected pairs."""
    b = subset.to_numpy()
    if b.shape[0] != population.size:
        raise ValueError("subset length must equal population size")
    norm = default_normalizer(population) if normalizer is None else float(normalizer)
    lin = float(population.q @ b)
    pairs = 0.5 * float(b @ population.w @ b)  # symmetric, zero diagonal: sum over i<j
    raw = (lin + pairs) / norm
    raw += _noise(seed, noise_tag, _bits_code(b), noise_sd)
    return min(max(raw, 0.0), 1.0)


def _logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _pool_view(
    population: SyntheticPopulation,
    correct: np.ndarray,
    round_index: int,
    filter_correct: bool,
) -> ExamplePool:
    examples = []
    for j, bid in enumerate(population.ids):
        ok = bool(correct[j])
        if filter_correct and not ok:
            continue
        eid = bid if round_index == 0 else f"{bid}#r{round_index}"
        examples.append(
            Example(
                id=eid,
                input=f"task {bid}",
                rationale=f"round {round_index} rationale for {bid}",
                output=f"answer {bid}",
                correct=True if not filter_correct else ok,
                meta={"q": float(population.q[j])},
            )
        )
    return ExamplePool(examples, round_index)


def synthetic_bootstrap(
    population: SyntheticPopulation,
    spec: GenerationModelSpec,
    rng: np.random.Generator,
    *,
    filter_correct: bool = True,
) -> ExamplePool:
    """Round-0 pool: correctness sampled from the current qualities, no pull."""
    p = _logistic(spec.correctness_slope * population.q)
    correct = rng.random(population.size) < p
    return _pool_view(population, correct, 0, filter_correct)


def synthetic_generate(
    population: SyntheticPopulation,
    seed_subset: SubsetVector | None,
    spec: GenerationModelSpec,
    rng: np.random.Generator,
    *,
    round_index: int = 1,
    filter_correct: bool = True,
    seed_mean_override: float | None = None,
) -> tuple[SyntheticPopulation, ExamplePool]:
    """Regenerate the universe, pulled toward the seed subset's mean quality.

    q' = q + pull_rate * (mean_seed q - q) + noise; correctness is resampled
    from logistic(correctness_slope * q'). The returned pool keeps only
    correct examples (unless filtering is disabled, in which case every
    regenerated example enters the pool marked correct). Regenerated ids are
    suffixed with the round index: ex7 becomes ex7#r2 at round 2.
    """
    q = population.q
    if seed_mean_override is not None:
        qbar = float(seed_mean_override)
    else:
        if seed_subset is None:
            raise ValueError("seed_subset is required when no seed mean override is given")
        b = seed_subset.to_numpy()
        if b.shape[0] != population.size:
            raise ValueError("seed subset length must equal population size")
        card = float(b.sum())
        if card < 1:
            raise ValueError("seed subset must be non-empty")
        qbar = float(q @ b) / card
    q2 = q + spec.pull_rate * (qbar - q)
    if spec.quality_noise_sd > 0:
        q2 = q2 + rng.normal(0.0, spec.quality_noise_sd, population.size)
    p = _logistic(spec.correctness_slope * q2)
    correct = rng.random(population.size) < p
    new_pop = SyntheticPopulation(population.ids, q2, population.w)
    return new_pop, _pool_view(new_pop, correct, round_index, filter_correct)


class EvaluatorHandle(Protocol):
    def evaluate(self, pool: ExamplePool, subset: SubsetVector, noise_tag: int = 0): ...


class GeneratorHandle(Protocol):
    prefers_snapshot: bool

    def generate(
        self,
        pool: ExamplePool | None,
        seed_ids: Sequence[str],
        round_index: int,
        rng: np.random.Generator,
    ) -> ExamplePool: ...


def population_from_spec(spec: EvaluatorSpec) -> SyntheticPopulation:
    """Build the synthetic universe an evaluator spec describes."""
    if spec.kind == "external":
        raise ValueError("external evaluators have no synthetic population")
    params = dict(spec.params)
    if "q" in params:
        q = np.asarray(params["q"], dtype=np.float64)
        m = q.shape[0]
        if "w" in params:
            if spec.kind == "additive":
                raise ValueError("additive evaluators do not accept an interaction matrix")
            w = np.asarray(params["w"], dtype=np.float64)
        else:
            w = np.zeros((m, m))
        ids = tuple(f"ex{j}" for j in range(m))
        return SyntheticPopulation(ids, q, w)
    if "m" not in params:
        raise ValueError("evaluator params need either explicit 'q' or a size 'm'")
    kwargs = {
        k: params[k] for k in ("q_low", "q_high", "neg_frac", "neg_scale") if k in params
    }
    return random_population(
        int(params["m"]),
        substream(spec.seed, 90),
        interference=(spec.kind == "interference"),
        **kwargs,
    )


class SyntheticBackend:
    """A linked evaluator/generator pair over one evolving synthetic universe.

    Populations are kept per round so sub-pools (restricted mode) and
    deterministic replay both resolve against the right state. The oracle
    normalizer is pinned to the universe size: metrics measure quality mass
    per slot on one fixed scale across rounds, with headroom below the clamp,
    so milestone values from different rounds are directly comparable.
    """

    def __init__(
        self,
        eval_spec: EvaluatorSpec,
        gen_spec: GenerationModelSpec,
        *,
        aux_quality: dict[str, float] | None = None,
        mt_mode: bool = False,
    ):
        if eval_spec.kind == "external":
            raise ValueError("SyntheticBackend requires a synthetic evaluator kind")
        self.eval_spec = eval_spec
        self.gen_spec = gen_spec
        self.mt_mode = mt_mode
        self.aux_quality = dict(aux_quality or {})
        base = population_from_spec(eval_spec)
        self.populations: dict[int, SyntheticPopulation] = {0: base}
        self.anchor = float(base.size)

    # -- evaluation ---------------------------------------------------------

    def _evaluate(self, pool: ExamplePool, subset: SubsetVector, namespace: str, noise_tag: int) -> float:
        pop = self.populations[pool.round]
        sel_ids = sorted(subset.ids(pool))
        bits = np.zeros(pop.size)
        for eid in sel_ids:
            bits[pop.index_of(base_id(eid))] = 1.0
        tag = digest_int(namespace, pool.round, noise_tag, *sel_ids)
        oracle = additive_oracle if self.eval_spec.kind == "additive" else interference_oracle
        return oracle(
            pop,
            SubsetVector.from_numpy(bits),
            noise_sd=self.eval_spec.noise_sd,
            seed=self.eval_spec.seed,
            noise_tag=tag,
            normalizer=self.anchor,
        )

    def evaluator(self) -> "SyntheticEvaluator":
        return SyntheticEvaluator(self, "opt")

    def milestone_evaluator(self) -> "SyntheticEvaluator":
        # Held-out metric handle: same task, independent noise stream.
        return SyntheticEvaluator(self, "milestone")

    def analysis_evaluator(self) -> "SyntheticEvaluator":
        return SyntheticEvaluator(self, "analysis")

    # -- generation ---------------------------------------------------------

    def _seed_mean(self, prev: SyntheticPopulation, seed_ids: Sequence[str]) -> float:
        vals = []
        for sid in seed_ids:
            bid = base_id(sid)
            if bid in self.aux_quality:
                vals.append(float(self.aux_quality[bid]))
            else:
                vals.append(float(prev.q[prev.index_of(bid)]))
        if not vals:
            raise ValueError("seed ids must be non-empty")
        return float(np.mean(vals))

    def generate(
        self,
        pool: ExamplePool | None,
        seed_ids: Sequence[str],
        round_index: int,
        rng: np.random.Generator,
    ) -> ExamplePool:
        filter_correct = not self.mt_mode
        if round_index == 0:
            base = self.populations[0]
            if not seed_ids:
                return synthetic_bootstrap(base, self.gen_spec, rng, filter_correct=filter_correct)
            qbar = self._seed_mean(base, seed_ids)
            new_pop, new_pool = synthetic_generate(
                base,
                None,
                self.gen_spec,
                rng,
                round_index=0,
                filter_correct=filter_correct,
                seed_mean_override=qbar,
            )
            self.populations[0] = new_pop
            return new_pool
        prev = self.populations[round_index - 1]
        qbar = self._seed_mean(prev, seed_ids)
        new_pop, new_pool = synthetic_generate(
            prev,
            None,
            self.gen_spec,
            rng,
            round_index=round_index,
            filter_correct=filter_correct,
            seed_mean_override=qbar,
        )
        self.populations[round_index] = new_pop
        return new_pool

    prefers_snapshot = False


@dataclass
class SyntheticEvaluator:
    backend: SyntheticBackend
    namespace: str

    def evaluate(self, pool: ExamplePool, subset: SubsetVector, noise_tag: int = 0) -> float:
        return self.backend._evaluate(pool, subset, self.namespace, noise_tag)


# -- external worker protocol -------------------------------------------------


class ExternalWorker:
    """One child process speaking newline-delimited JSON over stdio.

    Requests carry a strictly increasing integer id; the response must echo
    it. One request is in flight at a time. Timeouts, malformed lines, and
    child exits all surface as ProtocolError with diagnostics.
    """

    def __init__(self, command: Sequence[str], timeout_s: float = 60.0):
        if not command:
            raise ValueError("worker command must be non-empty")
        if timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        self.command = list(command)
        self.timeout_s = float(timeout_s)
        self._proc: subprocess.Popen | None = None
        self._next_id = 1
        self._out_queue: queue.Queue = queue.Queue()
        self._stderr_tail: deque = deque(maxlen=50)
        self._broken = False

    def _ensure_started(self) -> None:
        if self._proc is not None:
            return
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )

        def read_stdout(stream, q):
            for line in stream:
                q.put(line)
            q.put(None)

        def read_stderr(stream, tail):
            for line in stream:
                tail.append(line.rstrip("\n"))

        threading.Thread(
            target=read_stdout, args=(self._proc.stdout, self._out_queue), daemon=True
        ).start()
        threading.Thread(
            target=read_stderr, args=(self._proc.stderr, self._stderr_tail), daemon=True
        ).start()

    def _exit_diagnostics(self, req_id: int) -> ProtocolError:
        code = self._proc.poll() if self._proc else None
        if code is None and self._proc is not None:
            try:
                code = self._proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                code = None
        tail = "; ".join(list(self._stderr_tail)[-5:]) or "<no stderr>"
        self._broken = True
        return ProtocolError(
            f"worker exited (code {code}) before responding to request id={req_id}; stderr: {tail}"
        )

    def request(self, op: str, payload: dict) -> dict:
        """Send one request and return the parsed, id-matched response body."""
        if self._broken:
            raise ProtocolError("worker is in a failed state; create a new one")
        self._ensure_started()
        req_id = self._next_id
        self._next_id += 1
        message = {"id": req_id, "op": op, **payload}
        line = json.dumps(message, ensure_ascii=False)
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            raise self._exit_diagnostics(req_id) from None
        try:
            raw = self._out_queue.get(timeout=self.timeout_s)
        except queue.Empty:
            self._broken = True
            raise ProtocolError(
                f"timeout after {self.timeout_s:g}s waiting for response to request id={req_id}"
            ) from None
        if raw is None:
            raise self._exit_diagnostics(req_id)
        try:
            response = json.loads(raw)
        except json.JSONDecodeError:
            self._broken = True
            raise ProtocolError(f"malformed response line: {raw.rstrip()!r}") from None
        if not isinstance(response, dict):
            self._broken = True
            raise ProtocolError(f"malformed response line: {raw.rstrip()!r}")
        if response.get("id") != req_id:
            self._broken = True
            raise ProtocolError(
                f"response id {response.get('id')!r} does not match request id {req_id}"
            )
        if response.get("ok") is not True:
            raise EvaluationError(
                f"worker refused request id={req_id}: {response.get('error', '<no error field>')}"
            )
        return response

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _example_record(ex: Example) -> dict:
    return {
        "id": ex.id,
        "input": ex.input,
        "rationale": ex.rationale,
        "output": ex.output,
        "correct": ex.correct,
        "meta": ex.meta,
    }


class ExternalEvaluator:
    """Evaluate op adapter: sends the selected demonstrations, returns the metric."""

    def __init__(self, worker: ExternalWorker):
        self.worker = worker

    def evaluate(self, pool: ExamplePool, subset: SubsetVector, noise_tag: int = 0) -> tuple[float, int]:
        selected = [pool.examples[i] for i in subset.indices]
        payload = {
            "round": pool.round,
            "subset_ids": [ex.id for ex in selected],
            "examples": [_example_record(ex) for ex in selected],
        }
        start = time.perf_counter()
        response = self.worker.request("evaluate", payload)
        elapsed_ms = int((time.perf_counter() - start) * 1000)
        metric = response.get("metric")
        if not isinstance(metric, (int, float)) or not math.isfinite(float(metric)):
            raise ProtocolError(f"evaluate response carried a non-finite metric: {metric!r}")
        return float(metric), elapsed_ms


class ExternalGenerator:
    """Generate op adapter: new pools get round-suffixed, id-deduplicated examples."""

    prefers_snapshot = True

    def __init__(self, worker: ExternalWorker):
        self.worker = worker

    def generate(
        self,
        pool: ExamplePool | None,
        seed_ids: Sequence[str],
        round_index: int,
        rng: np.random.Generator,
    ) -> ExamplePool:
        seed_examples = []
        if pool is not None:
            resolvable = set(pool.ids)
            seed_examples = [
                _example_record(pool.examples[pool.index_of(sid)])
                for sid in seed_ids
                if sid in resolvable
            ]
        payload = {
            "round": round_index,
            "seed_ids": list(seed_ids),
            "seed_examples": seed_examples,
        }
        response = self.worker.request("generate", payload)
        raw_examples = response.get("examples")
        if not isinstance(raw_examples, list):
            raise ProtocolError("generate response must carry an 'examples' list")
        out: list[Example] = []
        seen: set[str] = set()
        for i, record in enumerate(raw_examples):
            try:
                ex = example_from_record(record, where=f"generate response example {i}")
            except PoolFormatError as err:
                raise ProtocolError(str(err)) from None
            if ex.id in seen:
                continue  # first occurrence wins
            seen.add(ex.id)
            if round_index >= 1:
                ex = Example(
                    id=f"{base_id(ex.id)}#r{round_index}",
                    input=ex.input,
                    rationale=ex.rationale,
                    output=ex.output,
                    correct=ex.correct,
                    meta=ex.meta,
                )
            out.append(ex)
        return ExamplePool(out, round_index)


class ExternalEmbedder:
    """Embed op adapter: ids + texts in, a dense vector per id out."""

    def __init__(self, worker: ExternalWorker):
        self.worker = worker

    def embed(self, ids: Sequence[str], texts: Sequence[str]) -> np.ndarray:
        if len(ids) != len(texts):
            raise ValueError("ids and texts must have equal length")
        response = self.worker.request("embed", {"ids": list(ids), "texts": list(texts)})
        vectors = response.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(ids):
            raise ProtocolError("embed response must carry one vector per id")
        try:
            arr = np.asarray(vectors, dtype=np.float64)
        except ValueError:
            raise ProtocolError("embed response vectors must be finite and rectangular") from None
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise ProtocolError("embed response vectors must be finite and rectangular")
        return arr
