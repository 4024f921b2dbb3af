"""Selection baselines: similarity retrieval and diversity clustering.

Both consume an embedding matrix aligned with a pool. Retrieval ranks by
cosine similarity to a query vector and returns the winners in ascending
similarity (most similar last, the position nearest the query in a prompt).
Diversity clusters the embeddings and keeps the example nearest each
centroid. A hash-based pseudo-embedder ships for tests and synthetic runs;
real embeddings come from an embedding provider.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from sklearn.cluster import KMeans

ALL = "all"


@dataclass(frozen=True)
class EmbeddingMatrix:
    """One dense vector per pool example, aligned by position."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # (n, d)

    def __post_init__(self) -> None:
        v = self.vectors
        if v.ndim != 2 or v.shape[0] != len(self.ids):
            raise ValueError("vectors must be a (n, d) matrix aligned with ids")
        if v.shape[1] < 1:
            raise ValueError("embedding dimension must be at least 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding vectors must be finite")


class Embedder(Protocol):
    def embed(self, ids: Sequence[str], texts: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic pseudo-embedder: digests of the text, no semantics.

    For tests and synthetic worlds only; it guarantees stable nonzero
    vectors without any model dependency.
    """

    def __init__(self, dim: int = 32):
        if dim < 1:
            raise ValueError("dim must be at least 1")
        self.dim = dim

    def embed(self, ids: Sequence[str], texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for k in range(self.dim):
                h = hashlib.sha256(f"{text}\x1f{k}".encode("utf-8")).digest()
                out[i, k] = 2.0 * (int.from_bytes(h[:8], "big") / float(2**64)) - 1.0
            if float(np.linalg.norm(out[i])) < 1e-12:
                out[i, 0] = 1.0
        return out


def retrieve_topk(
    embeddings: EmbeddingMatrix,
    query: np.ndarray,
    k: "int | str",
) -> list[int]:
    """Indices of the k most query-similar examples, ascending by similarity.

    Ties break toward the lower pool index. k may be the string "all".
    Zero-norm vectors are errors naming the offender.
    """
    X = embeddings.vectors
    n = X.shape[0]
    if isinstance(k, str):
        if k.lower() != ALL:
            raise ValueError(f"k must be a positive integer or 'all', got {k!r}")
        k = n
    if not (1 <= k <= n):
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != X.shape[1]:
        raise ValueError("query dimension does not match the embeddings")
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise ValueError("zero-norm vector: query")
    norms = np.linalg.norm(X, axis=1)
    for i, nv in enumerate(norms):
        if nv == 0.0:
            raise ValueError(f"zero-norm vector: example {embeddings.ids[i]!r} (index {i})")
    sims = (X @ q) / (norms * qn)
    # Select by (similarity desc, index asc), then emit ascending.
    chosen = sorted(range(n), key=lambda i: (-sims[i], i))[:k]
    return sorted(chosen, key=lambda i: (sims[i], i))


def diverse_k(
    embeddings: EmbeddingMatrix,
    k: int,
    rng: np.random.Generator,
) -> list[int]:
    """k examples covering the embedding space: nearest-to-centroid per cluster.

    k-means++ seeded clustering (at most 300 iterations, tol 1e-6), then each
    centroid claims its globally nearest still-unclaimed example, so the
    selection has exactly k distinct indices even with duplicate points.
    """
    X = embeddings.vectors
    n = X.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    km = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=1,
        max_iter=300,
        tol=1e-6,
        random_state=int(rng.integers(0, 2**32)),
    )
    km.fit(X)
    centroids = km.cluster_centers_
    dists = np.linalg.norm(X[:, None, :] - centroids[None, :, :], axis=2)  # (n, k)
    taken_examples: set[int] = set()
    taken_centroids: set[int] = set()
    order = np.dstack(np.unravel_index(np.argsort(dists, axis=None), dists.shape))[0]
    chosen: list[int] = []
    for i, c in order:
        if int(c) in taken_centroids or int(i) in taken_examples:
            continue
        taken_centroids.add(int(c))
        taken_examples.add(int(i))
        chosen.append(int(i))
        if len(chosen) == k:
            break
    return sorted(chosen)


def example_text(example) -> str:
    """Canonical text an embedder sees for one example."""
    return f"{example.input}\n{example.rationale}\n{example.output}"


def embed_pool(pool, embedder: Embedder) -> EmbeddingMatrix:
    texts = [example_text(ex) for ex in pool.examples]
    vectors = embedder.embed(list(pool.ids), texts)
    return EmbeddingMatrix(tuple(pool.ids), np.asarray(vectors, dtype=np.float64))


def mean_query(embeddings: EmbeddingMatrix) -> np.ndarray:
    """Per-dataset query vector: the mean of the pool's embeddings."""
    return np.asarray(embeddings.vectors.mean(axis=0))


def save_embeddings(path, embeddings: EmbeddingMatrix) -> None:
    """Cache format: a 'd=<dim>' header, then one 'id v1 .. vd' line per example."""
    d = embeddings.vectors.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"d={d}\n")
        for eid, vec in zip(embeddings.ids, embeddings.vectors):
            if any(ch.isspace() for ch in eid):
                raise ValueError(f"embedding cache ids may not contain whitespace: {eid!r}")
            fh.write(eid + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def load_embeddings(path) -> EmbeddingMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("d="):
            raise ValueError(f"line 1: embedding cache must start with a 'd=<dim>' header, got {header!r}")
        try:
            d = int(header[2:])
        except ValueError:
            raise ValueError(f"line 1: invalid dimension in header {header!r}") from None
        ids: list[str] = []
        rows: list[list[float]] = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                raise ValueError(f"line {lineno}: empty line in embedding cache")
            if len(parts) != d + 1:
                raise ValueError(
                    f"line {lineno}: expected id plus {d} values, got {len(parts) - 1}"
                )
            ids.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric embedding value") from None
    if not ids:
        raise ValueError("embedding cache holds no vectors")
    return EmbeddingMatrix(tuple(ids), np.asarray(rows, dtype=np.float64))
