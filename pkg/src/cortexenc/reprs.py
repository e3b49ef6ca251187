"""Word-representation builders.

Three in-house models plus an import path for externally computed embeddings:

* LSM: co-occurrence counts weighted by positive PMI, reduced with a
  truncated SVD (300 dimensions by default).
* NTM: cosine-similarity kNN graph over a base embedding, weighted random
  walks, then PPMI + SVD over the walk co-occurrences (300 dims by default).
* EBM: six semantic norm ratings per word (vision, motor, socialness,
  emotion, time, space), optionally z-scored.

Everything is a pure function of its inputs and an explicit seed.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .corpus import CooccurrenceMatrix, Vocabulary, build_vocab, count_cooccurrences
from .errors import CortexencError, FormatError

EBM_DIMENSIONS = ("vision", "motor", "socialness", "emotion", "time", "space")
EMBL_MAGIC = b"EMBL"
EMBL_VERSION = 1


@dataclass
class EmbeddingMatrix:
    """Dense V x d representation matrix tied to a vocabulary."""

    vocab: Vocabulary
    data: np.ndarray
    model_name: str
    layer: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise CortexencError("embedding data must be 2-dimensional")
        if self.data.shape[0] != len(self.vocab):
            raise CortexencError(
                f"embedding rows ({self.data.shape[0]}) != vocabulary size ({len(self.vocab)})"
            )
        if not np.isfinite(self.data).all():
            raise CortexencError("embedding contains NaN or Inf")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, word: str) -> np.ndarray:
        return self.data[self.vocab.index[word]]


@dataclass
class SimilarityGraph:
    """Symmetric cosine-similarity graph stored as a sparse matrix.

    Weights live in (0, 1]: negatives are floored away so they can act as
    walk transition probabilities, and zero-weight edges are dropped.
    """

    matrix: sp.csr_matrix
    k: int
    dropped_nodes: list[int] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_edges(self) -> int:
        return self.matrix.nnz // 2

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Sequence[tuple[int, int, float]], k: int = 0) -> "SimilarityGraph":
        """Build a symmetric graph from undirected (i, j, weight) triples."""
        rows, cols, data = [], [], []
        for i, j, w in edges:
            if i == j:
                raise CortexencError("self-loops are not allowed")
            if not 0.0 < w <= 1.0:
                raise CortexencError("edge weights must lie in (0, 1]")
            rows += [i, j]
            cols += [j, i]
            data += [w, w]
        m = sp.coo_matrix((data, (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()
        return cls(matrix=m, k=k or n_nodes - 1)


class SvdResult(NamedTuple):
    embedding: np.ndarray        # U_k * sigma_k**alpha
    singular_values: np.ndarray  # non-increasing, length k
    u: np.ndarray
    vt: np.ndarray


def ppmi_weight(cooc: CooccurrenceMatrix) -> sp.csr_matrix:
    """Positive pointwise mutual information over a count matrix.

    entry(i, j) = max(0, log(p(i,j) / (p(i) p(j)))) with probabilities taken
    from the counts; absent counts stay 0 rather than -inf.
    """
    return ppmi_from_counts(cooc.matrix)


def ppmi_from_counts(counts: sp.spmatrix) -> sp.csr_matrix:
    m = counts.tocsr().astype(np.float64)
    total = m.sum()
    if total <= 0:
        raise CortexencError("co-occurrence matrix has no counts")
    row = np.asarray(m.sum(axis=1)).ravel()
    col = np.asarray(m.sum(axis=0)).ravel()
    coo = m.tocoo()
    # pmi = log(c_ij * total / (row_i * col_j)), evaluated on nonzeros only
    vals = np.log(coo.data * total / (row[coo.row] * col[coo.col]))
    np.maximum(vals, 0.0, out=vals)
    out = sp.coo_matrix((vals, (coo.row, coo.col)), shape=m.shape).tocsr()
    out.eliminate_zeros()
    return out


def truncated_svd(
    matrix,
    k: int,
    seed: int = 0,
    alpha: float = 0.5,
    dense_cutoff: int = 2048,
) -> SvdResult:
    """Rank-k SVD with embedding rows U_k * sigma_k**alpha.

    Small problems take an exact dense SVD; larger ones use an iterative
    sparse solver with a seed-derived start vector, so the result is a
    deterministic function of (matrix, k, seed). Columns beyond the numerical
    rank are padded with zero singular directions and reported via a warning.
    """
    shape = matrix.shape
    if k < 1 or k > min(shape):
        raise CortexencError(f"k={k} must lie in 1..min{shape}")
    use_dense = min(shape) <= dense_cutoff or k == min(shape)
    if use_dense:
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
        u, s, vt = np.linalg.svd(dense, full_matrices=False)
        u, s, vt = u[:, :k], s[:k], vt[:k]
    else:
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(min(shape))
        u, s, vt = spla.svds(matrix.astype(np.float64), k=k, v0=v0)
        order = np.argsort(s)[::-1]
        u, s, vt = u[:, order], s[order], vt[order]

    tol = max(shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < k:
        warnings.warn(f"requested k={k} exceeds numerical rank {rank}; padding with zero directions")
        s = s.copy()
        s[rank:] = 0.0
    # canonical signs: largest-magnitude entry of each left vector is positive
    signs = np.ones(k)
    for j in range(k):
        i = np.argmax(np.abs(u[:, j]))
        if u[i, j] < 0:
            signs[j] = -1.0
    u = u * signs
    vt = vt * signs[:, None]
    emb = u * (s ** alpha)
    return SvdResult(embedding=emb, singular_values=s, u=u, vt=vt)


def lsm_from_cooccurrence(cooc: CooccurrenceMatrix, k: int = 300, alpha: float = 0.5, seed: int = 0) -> EmbeddingMatrix:
    ppmi = ppmi_from_counts(cooc.matrix)
    res = truncated_svd(ppmi, k=k, seed=seed, alpha=alpha)
    meta = {
        "window": cooc.window,
        "weighting": cooc.weighting,
        "k": k,
        "alpha": alpha,
        "seed": seed,
        "total_pairs": cooc.total_pairs,
    }
    return EmbeddingMatrix(vocab=cooc.vocab, data=res.embedding, model_name="LSM", meta=meta)


def build_lsm(
    docs: Sequence[Sequence[str]],
    min_count: int = 1,
    max_size: int | None = None,
    window: int = 2,
    weighting: str = "flat",
    k: int = 300,
    alpha: float = 0.5,
    seed: int = 0,
    threads: int = 1,
) -> EmbeddingMatrix:
    """Count -> PPMI -> truncated SVD over a tokenized corpus."""
    vocab = build_vocab((t for doc in docs for t in doc), min_count=min_count, max_size=max_size)
    cooc = count_cooccurrences(docs, vocab, window=window, weighting=weighting, threads=threads)
    return lsm_from_cooccurrence(cooc, k=k, alpha=alpha, seed=seed)


def cosine_knn_graph(emb: EmbeddingMatrix, k: int) -> SimilarityGraph:
    """Keep each node's k highest-cosine neighbors and symmetrize by union.

    Zero-norm rows cannot be normalized; they are dropped from the graph
    (left isolated) with a warning. Negative similarities are floored to 0
    and such edges removed, since walk probabilities must be non-negative.
    """
    X = emb.data
    V = X.shape[0]
    if V < 2:
        raise CortexencError("need at least 2 nodes to build a similarity graph")
    if not 1 <= k < V:
        raise CortexencError(f"k={k} must satisfy 1 <= k < V={V}")
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        warnings.warn(f"dropping {zero.size} zero-norm rows from the similarity graph")
    safe = norms.copy()
    safe[safe == 0] = 1.0
    Xn = X / safe[:, None]
    sims = Xn @ Xn.T
    np.clip(sims, -1.0, 1.0, out=sims)
    sims[zero, :] = -np.inf
    sims[:, zero] = -np.inf
    np.fill_diagonal(sims, -np.inf)

    zero_set = set(zero.tolist())
    rows, cols, data = [], [], []
    for i in range(V):
        if i in zero_set:
            continue
        srow = sims[i]
        cand = np.argpartition(srow, -k)[-k:]
        # deterministic order: similarity descending, index ascending on ties
        order = np.lexsort((cand, -srow[cand]))
        for j in cand[order]:
            w = srow[j]
            if w <= 0.0:
                continue
            rows.append(i)
            cols.append(int(j))
            data.append(float(w))
    directed = sp.coo_matrix((data, (rows, cols)), shape=(V, V)).tocsr()
    sym = directed.maximum(directed.T)
    return SimilarityGraph(matrix=sym, k=k, dropped_nodes=zero.tolist())


def random_walks(
    graph: SimilarityGraph,
    walks_per_node: int = 10,
    walk_length: int = 40,
    seed: int = 0,
    threads: int = 1,
) -> list[list[int]]:
    """Weighted first-order random walks, `walks_per_node` from every node.

    Each start node draws from its own generator seeded with (seed, node),
    so the stream is identical for any thread count. Isolated nodes emit a
    single-node walk.
    """
    if graph.matrix.nnz == 0:
        raise CortexencError("graph has no edges")
    if walks_per_node < 1 or walk_length < 1:
        raise CortexencError("walks_per_node and walk_length must be >= 1")
    m = graph.matrix
    indptr, indices, weights = m.indptr, m.indices, m.data
    cums = [np.cumsum(weights[indptr[i]:indptr[i + 1]]) for i in range(m.shape[0])]

    def walks_from(node: int) -> list[list[int]]:
        rng = np.random.default_rng((seed, node))
        out = []
        for _ in range(walks_per_node):
            walk = [node]
            cur = node
            while len(walk) < walk_length:
                lo, hi = indptr[cur], indptr[cur + 1]
                if lo == hi:
                    break
                cum = cums[cur]
                r = rng.random() * cum[-1]
                step = int(np.searchsorted(cum, r, side="right"))
                cur = int(indices[lo + min(step, hi - lo - 1)])
                walk.append(cur)
            out.append(walk)
        return out

    nodes = range(m.shape[0])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_node = list(pool.map(walks_from, nodes))
    else:
        per_node = [walks_from(n) for n in nodes]
    return [w for group in per_node for w in group]


def ntm_from_graph(
    graph: SimilarityGraph,
    vocab: Vocabulary,
    walks_per_node: int = 10,
    walk_length: int = 40,
    window: int = 5,
    dim: int = 300,
    alpha: float = 0.5,
    seed: int = 0,
    threads: int = 1,
) -> tuple[EmbeddingMatrix, list[list[int]]]:
    """Walk the graph, count walk co-occurrences, reduce with PPMI + SVD."""
    walks = random_walks(graph, walks_per_node=walks_per_node, walk_length=walk_length,
                         seed=seed, threads=threads)
    counts = walk_cooccurrence(walks, graph.n_nodes, window=window)
    ppmi = ppmi_from_counts(counts)
    res = truncated_svd(ppmi, k=dim, seed=seed, alpha=alpha)
    meta = {
        "walks_per_node": walks_per_node,
        "walk_length": walk_length,
        "walk_window": window,
        "dim": dim,
        "alpha": alpha,
        "seed": seed,
        "knn_k": graph.k,
    }
    emb = EmbeddingMatrix(vocab=vocab, data=res.embedding, model_name="NTM", meta=meta)
    return emb, walks


def walk_cooccurrence(walks: Sequence[Sequence[int]], n_nodes: int, window: int = 5) -> sp.csr_matrix:
    """Symmetric flat co-occurrence counts over walks; windows stay inside a walk."""
    from .corpus import _pairs_for_doc

    rows, cols, data = [], [], []
    wbd = [1] * window
    for walk in walks:
        r, c, w = _pairs_for_doc(np.asarray(walk, dtype=np.int64), window, wbd)
        rows.extend(r)
        cols.extend(c)
        data.extend(w)
    if not rows:
        return sp.csr_matrix((n_nodes, n_nodes), dtype=np.int64)
    coo = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_nodes, n_nodes), dtype=np.int64,
    )
    out = coo.tocsr()
    out.sum_duplicates()
    return out


def build_ntm(
    emb: EmbeddingMatrix,
    knn_k: int = 50,
    walks_per_node: int = 10,
    walk_length: int = 40,
    window: int = 5,
    dim: int = 300,
    alpha: float = 0.5,
    seed: int = 0,
    threads: int = 1,
) -> EmbeddingMatrix:
    """Network-topological representation derived from a base embedding."""
    graph = cosine_knn_graph(emb, k=knn_k)
    ntm, _ = ntm_from_graph(
        graph, emb.vocab, walks_per_node=walks_per_node, walk_length=walk_length,
        window=window, dim=dim, alpha=alpha, seed=seed, threads=threads,
    )
    ntm.meta["base_model"] = emb.model_name
    return ntm


@dataclass
class SemanticNormTable:
    """Per-word ratings on the six embodied dimensions."""

    ratings: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.ratings)

    def __contains__(self, word: str) -> bool:
        return word in self.ratings


def load_norms(path) -> SemanticNormTable:
    """Read a TSV of `word` plus the six ratings; a header line is allowed."""
    ratings = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if ln == 1 and parts[0].lower() == "word":
            continue
        if len(parts) != 7:
            raise FormatError(f"{path}:{ln}: expected word plus 6 ratings, got {len(parts)} fields")
        try:
            vals = np.array([float(x) for x in parts[1:]], dtype=np.float64)
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: non-numeric rating") from e
        if not np.isfinite(vals).all():
            raise FormatError(f"{path}:{ln}: rating is NaN or Inf")
        ratings[parts[0]] = vals
    if not ratings:
        raise FormatError(f"{path}: no rating rows")
    return SemanticNormTable(ratings=ratings)


def save_norms(table: SemanticNormTable, path) -> None:
    lines = ["word\t" + "\t".join(EBM_DIMENSIONS)]
    for w in sorted(table.ratings):
        lines.append(w + "\t" + "\t".join(repr(float(x)) for x in table.ratings[w]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_ebm(norms: SemanticNormTable, vocab: Vocabulary, scaling: str = "zscore") -> EmbeddingMatrix:
    """Six-dimensional embodied representation for the covered vocabulary.

    Words without ratings are excluded (never zero-filled); the coverage
    fraction is recorded in the result metadata.
    """
    if scaling not in ("zscore", "none"):
        raise CortexencError(f"unknown scaling {scaling!r}")
    covered = [w for w in vocab.words if w in norms.ratings]
    if not covered:
        raise CortexencError("no vocabulary word has norm ratings (zero coverage)")
    sub = vocab.subset(covered)
    data = np.stack([norms.ratings[w] for w in sub.words])
    if scaling == "zscore":
        mean = data.mean(axis=0)
        sd = data.std(axis=0)
        sd[sd == 0] = 1.0
        data = (data - mean) / sd
    meta = {"scaling": scaling, "coverage": {"retained": len(covered), "vocab": len(vocab)}}
    return EmbeddingMatrix(vocab=sub, data=data, model_name="EBM", meta=meta)


def average_subwords(pieces: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of sub-word vectors, used to pool one word's pieces."""
    if len(pieces) == 0:
        raise CortexencError("cannot average zero sub-word vectors")
    arrs = [np.asarray(p, dtype=np.float64) for p in pieces]
    d = arrs[0].shape
    if any(a.shape != d for a in arrs):
        raise CortexencError("sub-word vectors have mixed dimensions")
    return np.mean(arrs, axis=0)


# ---------------------------------------------------------------------------
# embedding file formats


def write_text_vec(emb: EmbeddingMatrix, path) -> None:
    """gensim-style text format: header `V d`, then `word v1 ... vd` lines."""
    lines = [f"{len(emb.vocab)} {emb.dim}"]
    for i, w in enumerate(emb.vocab.words):
        lines.append(w + " " + " ".join(repr(float(x)) for x in emb.data[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_text_vec(path, model_name: str | None = None) -> EmbeddingMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty embedding file")
    start = 0
    first = lines[0].split()
    if len(first) == 2:
        try:
            int(first[0]), int(first[1])
            start = 1
        except ValueError:
            start = 0
    words, rows = [], []
    dim = None
    for ln, line in enumerate(lines[start:], start + 1):
        parts = line.rstrip().split(" ")
        if dim is None:
            dim = len(parts) - 1
            if dim < 1:
                raise FormatError(f"{path}:{ln}: no vector values")
        if len(parts) - 1 != dim:
            raise FormatError(f"{path}:{ln}: expected {dim} values, got {len(parts) - 1}")
        words.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    vocab = Vocabulary.from_words(words)
    name = model_name or Path(path).stem
    return EmbeddingMatrix(vocab=vocab, data=np.array(rows), model_name=name)


def write_layer_table(path, vocab: Vocabulary, layers: Sequence[np.ndarray]) -> None:
    """Binary multi-layer table: EMBL magic, counts, vocab, then f32 matrices."""
    layers = [np.asarray(l, dtype=np.float32) for l in layers]
    V = len(vocab)
    d = layers[0].shape[1]
    for l in layers:
        if l.shape != (V, d):
            raise CortexencError("all layers must share the same V x d shape")
    buf = bytearray()
    buf += EMBL_MAGIC
    buf += struct.pack("<IIII", EMBL_VERSION, len(layers), V, d)
    for w in vocab.words:
        enc = w.encode("utf-8")
        buf += struct.pack("<I", len(enc)) + enc
    for l in layers:
        buf += l.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def read_layer_table(path, model_name: str | None = None) -> list[EmbeddingMatrix]:
    raw = Path(path).read_bytes()
    if raw[:4] != EMBL_MAGIC:
        raise FormatError(f"{path}: unknown magic bytes {raw[:4]!r}")
    version, n_layers, V, d = struct.unpack_from("<IIII", raw, 4)
    if version != EMBL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 20
    words = []
    for _ in range(V):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        words.append(raw[off:off + n].decode("utf-8"))
        off += n
    vocab = Vocabulary.from_words(words)
    need = off + 4 * n_layers * V * d
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data section ({len(raw)} < {need} bytes)")
    name = model_name or Path(path).stem
    out = []
    for layer in range(1, n_layers + 1):
        mat = np.frombuffer(raw, dtype="<f4", count=V * d, offset=off).reshape(V, d)
        off += 4 * V * d
        out.append(EmbeddingMatrix(vocab=vocab, data=mat.astype(np.float64),
                                   model_name=name, layer=layer))
    return out


def import_embeddings(path, format: str = "text-vec", model_name: str | None = None) -> list[EmbeddingMatrix]:
    """Load external embeddings as a list of per-layer matrices."""
    if format == "text-vec":
        return [read_text_vec(path, model_name=model_name)]
    if format == "per-layer-table":
        return read_layer_table(path, model_name=model_name)
    raise CortexencError(f"unknown embedding format {format!r}")
