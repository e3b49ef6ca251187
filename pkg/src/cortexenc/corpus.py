"""Corpus ingestion: tokenization, vocabulary construction, co-occurrence counting.

Counting follows the symmetric center/context rule: every in-vocabulary token
within `window` positions of an in-vocabulary center contributes one pair in
each direction. Out-of-vocabulary tokens still occupy positions, so they
widen gaps but never shift the window.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CortexencError, FormatError

TOKENIZE_MODES = ("whitespace", "pre-tokenized-lines")
WEIGHTINGS = ("flat", "distance-decay")


@dataclass
class Vocabulary:
    """Bidirectional word <-> index map with occurrence counts.

    `index` is a bijection onto 0..V-1 and `words[index[w]] == w` for all w.
    """

    words: list[str]
    index: dict[str, int]
    counts: dict[str, int]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @classmethod
    def from_words(cls, words: Sequence[str], counts: dict[str, int] | None = None) -> "Vocabulary":
        words = list(words)
        if len(set(words)) != len(words):
            raise CortexencError("vocabulary words must be unique")
        counts = dict(counts) if counts else {w: 1 for w in words}
        return cls(words=words, index={w: i for i, w in enumerate(words)}, counts=counts)

    def subset(self, keep: Iterable[str]) -> "Vocabulary":
        """Restrict to `keep`, preserving the original relative order."""
        keep = set(keep)
        words = [w for w in self.words if w in keep]
        if not words:
            raise CortexencError("subset produced an empty vocabulary")
        return Vocabulary.from_words(words, {w: self.counts[w] for w in words})


def tokenize(text: str, mode: str = "whitespace") -> list[str]:
    """Split text into tokens.

    whitespace mode lowercases and splits on any whitespace.
    pre-tokenized-lines mode splits on newlines and tabs only and keeps case,
    for corpora segmented by an external tool (e.g. segmented Chinese).
    """
    if mode == "whitespace":
        return text.lower().split()
    if mode == "pre-tokenized-lines":
        toks = []
        for line in text.splitlines():
            toks.extend(t for t in line.split("\t") if t)
        return toks
    raise CortexencError(f"unknown tokenize mode {mode!r}; expected one of {TOKENIZE_MODES}")


def read_documents(path, mode: str = "whitespace", sentence_per_line: bool = False) -> list[list[str]]:
    """Read a corpus file into a list of token documents.

    With sentence_per_line each line becomes its own document, so window
    counting never crosses line boundaries. Otherwise the whole file is one
    document (the default: no boundary reset).
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: invalid UTF-8 at byte offset {e.start}") from e
    if not sentence_per_line:
        return [tokenize(text, mode)]
    docs = []
    for line in text.splitlines():
        toks = tokenize(line, mode)
        if toks:
            docs.append(toks)
    return docs


def build_vocab(tokens: Iterable[str], min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Count tokens and keep those with count >= min_count, at most max_size.

    Words are ordered by descending count with lexicographic tie-breaking, so
    index assignment is reproducible.
    """
    if min_count < 1:
        raise CortexencError("min_count must be >= 1")
    if max_size is not None and max_size < 1:
        raise CortexencError("max_size must be >= 1")
    counts = Counter(tokens)
    if not counts:
        raise CortexencError("empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    if max_size is not None:
        kept = kept[:max_size]
    if not kept:
        raise CortexencError(f"no token reaches min_count={min_count}")
    return Vocabulary.from_words(kept, {w: counts[w] for w in kept})


@dataclass
class CooccurrenceMatrix:
    """Sparse symmetric word-context counts.

    For flat weighting `matrix` holds int64 pair counts and its total equals
    2 * (number of within-window center/context pairs). Distance-decay counts
    are accumulated as scaled integers (lcm(1..window) / distance) and
    materialized as float64, so shard merging stays exact.
    """

    vocab: Vocabulary
    matrix: sp.csr_matrix
    window: int
    weighting: str = "flat"
    symmetric: bool = True
    total_pairs: int = 0
    meta: dict = field(default_factory=dict)


def _pairs_for_doc(idx: np.ndarray, window: int, weight_by_distance: list[int]):
    """COO arrays of all directed pairs within `window` for one index sequence.

    `idx` uses -1 for out-of-vocabulary positions.
    """
    rows, cols, data = [], [], []
    n = idx.shape[0]
    for d in range(1, window + 1):
        if n <= d:
            break
        a = idx[:-d]
        b = idx[d:]
        mask = (a >= 0) & (b >= 0)
        if not mask.any():
            continue
        ai = a[mask]
        bi = b[mask]
        w = np.full(ai.shape[0], weight_by_distance[d - 1], dtype=np.int64)
        rows.append(ai)
        cols.append(bi)
        data.append(w)
        rows.append(bi)
        cols.append(ai)
        data.append(w)
    return rows, cols, data


def count_cooccurrences(
    docs: Sequence[Sequence[str]] | Sequence[str],
    vocab: Vocabulary,
    window: int = 2,
    weighting: str = "flat",
    threads: int = 1,
) -> CooccurrenceMatrix:
    """Count symmetric co-occurrences over one or more token documents.

    Windows never cross document boundaries. Counting may be sharded over
    documents; shard merge is plain addition of integer counts, so the result
    is independent of the thread count.
    """
    if window < 1:
        raise CortexencError("window must be >= 1")
    if weighting not in WEIGHTINGS:
        raise CortexencError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")
    if docs and isinstance(docs[0], str):
        docs = [docs]  # single flat token list

    if weighting == "flat":
        scale = 1
        weight_by_distance = [1] * window
    else:
        scale = math.lcm(*range(1, window + 1))
        weight_by_distance = [scale // d for d in range(1, window + 1)]
    index = vocab.index
    idx_docs = [np.array([index.get(t, -1) for t in doc], dtype=np.int64) for doc in docs]

    def shard(chunk):
        rows, cols, data = [], [], []
        for idx in chunk:
            r, c, w = _pairs_for_doc(idx, window, weight_by_distance)
            rows.extend(r)
            cols.extend(c)
            data.extend(w)
        return rows, cols, data

    if threads > 1 and len(idx_docs) > 1:
        chunks = [idx_docs[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(shard, chunks))
    else:
        parts = [shard(idx_docs)]

    rows = [a for p in parts for a in p[0]]
    cols = [a for p in parts for a in p[1]]
    data = [a for p in parts for a in p[2]]
    V = len(vocab)
    if rows:
        coo = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(V, V), dtype=np.int64,
        )
        counts = coo.tocsr()
        counts.sum_duplicates()
        # one (center, context) pair per emitted element, both directions included
        total_pairs = int(sum(a.shape[0] for a in data))
    else:
        counts = sp.csr_matrix((V, V), dtype=np.int64)
        total_pairs = 0

    if weighting == "flat":
        matrix = counts
    else:
        matrix = counts.astype(np.float64)
        matrix.data /= float(scale)
    return CooccurrenceMatrix(
        vocab=vocab, matrix=matrix, window=window, weighting=weighting,
        symmetric=True, total_pairs=total_pairs,
    )


def save_vocab(vocab: Vocabulary, path) -> None:
    """Write one `word<TAB>count` line per word, in index order."""
    lines = [f"{w}\t{vocab.counts[w]}" for w in vocab.words]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    words, counts = [], {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{ln}: expected 'word<TAB>count'")
        words.append(parts[0])
        counts[parts[0]] = int(parts[1])
    if not words:
        raise FormatError(f"{path}: empty vocabulary file")
    return Vocabulary.from_words(words, counts)


def save_cooccurrence(cooc: CooccurrenceMatrix, triples_path, sidecar_path, vocab_file: str) -> None:
    """Write `i<TAB>j<TAB>count` triples plus a JSON sidecar with the counting setup."""
    m = cooc.matrix.tocoo()
    order = np.lexsort((m.col, m.row))
    lines = []
    flat = cooc.weighting == "flat"
    for r, c, v in zip(m.row[order], m.col[order], m.data[order]):
        val = int(v) if flat else repr(float(v))
        lines.append(f"{r}\t{c}\t{val}")
    Path(triples_path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    sidecar = {
        "vocab_file": vocab_file,
        "window": cooc.window,
        "weighting": cooc.weighting,
        "total_pairs": cooc.total_pairs,
    }
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_cooccurrence(triples_path, sidecar_path, vocab: Vocabulary | None = None) -> CooccurrenceMatrix:
    sidecar = json.loads(Path(sidecar_path).read_text(encoding="utf-8"))
    if vocab is None:
        vocab_path = Path(triples_path).parent / sidecar["vocab_file"]
        vocab = load_vocab(vocab_path)
    flat = sidecar["weighting"] == "flat"
    rows, cols, data = [], [], []
    for ln, line in enumerate(Path(triples_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{triples_path}:{ln}: expected 'i<TAB>j<TAB>count'")
        rows.append(int(parts[0]))
        cols.append(int(parts[1]))
        data.append(int(parts[2]) if flat else float(parts[2]))
    V = len(vocab)
    dtype = np.int64 if flat else np.float64
    matrix = sp.coo_matrix((np.array(data, dtype=dtype), (rows, cols)), shape=(V, V)).tocsr()
    return CooccurrenceMatrix(
        vocab=vocab, matrix=matrix, window=int(sidecar["window"]),
        weighting=sidecar["weighting"], symmetric=True, total_pairs=int(sidecar["total_pairs"]),
    )
