"""Synthetic data with known ground truth.

Everything here is a pure function of an explicit seed: corpora whose words
live in planted co-occurrence clusters, linear brain responses Y = X W0 + e
with Gaussian noise, and the closed-form ceiling on the correlation any
encoder can reach against such targets. The writers emit the same file
formats the real-data loaders read, so synthetic runs exercise identical
code paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import BrainResponse
from .corpus import Vocabulary
from .errors import CortexencError
from .reprs import EmbeddingMatrix, SemanticNormTable

# fixed sub-stream tags so distinct generators never share a raw stream
_STREAM_CORPUS = 1
_STREAM_LATENT = 2
_STREAM_NOISE = 3
_STREAM_WORDS = 4
_STREAM_NORMS = 5
_STREAM_EYE = 6
_STREAM_WEIGHTS = 7


@dataclass(frozen=True)
class SynthSpec:
    """Sizes, noise level, and seed for one synthetic dataset."""

    seed: int
    V: int
    d: int
    n_samples: int
    n_targets: int
    noise_sigma: float
    kind: str = "clustered"

    def __post_init__(self):
        for name in ("V", "d", "n_samples", "n_targets"):
            if getattr(self, name) < 1:
                raise CortexencError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise CortexencError("noise_sigma must be >= 0")


def word_names(V: int) -> list[str]:
    width = max(4, len(str(V - 1)))
    return [f"w{i:0{width}d}" for i in range(V)]


def cluster_assignments(V: int, n_clusters: int) -> np.ndarray:
    """Contiguous blocks; the first V mod C clusters take the extra word."""
    if n_clusters < 1 or n_clusters > V:
        raise CortexencError(f"need 1 <= n_clusters <= V, got {n_clusters} for V={V}")
    base, extra = divmod(V, n_clusters)
    sizes = [base + 1 if c < extra else base for c in range(n_clusters)]
    return np.repeat(np.arange(n_clusters), sizes)


def gen_corpus(
    spec: SynthSpec,
    n_clusters: int = 4,
    p_in: float = 0.8,
    p_out: float = 0.05,
    n_tokens: int = 10_000,
    sentence_length: int = 10,
) -> list[list[str]]:
    """Sentences whose consecutive tokens keep their cluster with weight p_in.

    The next token's cluster is the current one with relative weight p_in,
    or any particular other cluster with weight p_out; words are uniform
    inside a cluster. With p_out = 0 a sentence never leaves its cluster, so
    cross-cluster co-occurrence is structurally zero (sentences are separate
    documents). Deterministic given spec.seed.
    """
    if spec.V < 2 * n_clusters:
        raise CortexencError(
            f"V={spec.V} is too small for {n_clusters} clusters of at least 2 words"
        )
    if not 0 <= p_out < p_in:
        raise CortexencError("need 0 <= p_out < p_in")
    if sentence_length < 1 or n_tokens < 1:
        raise CortexencError("sentence_length and n_tokens must be >= 1")
    rng = np.random.default_rng((spec.seed, _STREAM_CORPUS))
    names = word_names(spec.V)
    clusters = cluster_assignments(spec.V, n_clusters)
    members = [np.flatnonzero(clusters == c) for c in range(n_clusters)]
    stay = p_in / (p_in + (n_clusters - 1) * p_out)
    docs: list[list[str]] = []
    emitted = 0
    while emitted < n_tokens:
        length = min(sentence_length, n_tokens - emitted)
        cluster = int(rng.integers(0, n_clusters))
        sentence = []
        for _ in range(length):
            pool = members[cluster]
            word = int(pool[rng.integers(0, pool.shape[0])])
            sentence.append(names[word])
            if n_clusters > 1 and rng.random() >= stay:
                hop = int(rng.integers(0, n_clusters - 1))
                cluster = hop if hop < cluster else hop + 1
        docs.append(sentence)
        emitted += length
    return docs


def write_corpus(docs: Sequence[Sequence[str]], path) -> None:
    """One sentence per line, space-separated (read back sentence_per_line)."""
    lines = [" ".join(doc) for doc in docs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def latent_embedding(spec: SynthSpec, n_clusters: int = 4, jitter: float = 0.1) -> EmbeddingMatrix:
    """Ground-truth word vectors: one Gaussian center per cluster plus jitter."""
    rng = np.random.default_rng((spec.seed, _STREAM_LATENT))
    centers = rng.standard_normal((n_clusters, spec.d))
    clusters = cluster_assignments(spec.V, n_clusters)
    data = centers[clusters] + jitter * rng.standard_normal((spec.V, spec.d))
    vocab = Vocabulary.from_words(word_names(spec.V))
    return EmbeddingMatrix(vocab=vocab, data=data, model_name="latent",
                           meta={"n_clusters": n_clusters, "jitter": jitter})


def random_embedding(vocab: Vocabulary, d: int, seed: int, model_name: str = "random") -> EmbeddingMatrix:
    """Structure-free iid Gaussian baseline over an existing vocabulary."""
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(vocab=vocab, data=rng.standard_normal((len(vocab), d)),
                           model_name=model_name, meta={"seed": seed})


def sample_word_rows(emb: EmbeddingMatrix, n: int, seed: int) -> tuple[list[str], np.ndarray]:
    """Draw n word tokens uniformly; rows of X are their embedding vectors."""
    if n < 1:
        raise CortexencError("n must be >= 1")
    rng = np.random.default_rng((seed, _STREAM_WORDS))
    idx = rng.integers(0, len(emb.vocab), size=n)
    words = [emb.vocab.words[i] for i in idx]
    return words, emb.data[idx]


def gen_weights(d: int, n_targets: int, seed: int) -> np.ndarray:
    """Ground-truth linear map W0, iid standard normal."""
    rng = np.random.default_rng((seed, _STREAM_WEIGHTS))
    return rng.standard_normal((d, n_targets))


def gen_brain(
    X: np.ndarray,
    W0: np.ndarray,
    noise_sigma: float,
    seed: int,
    subject_id: str = "synth",
    kind: str = "word-tvalue",
    tr: float | None = None,
    target_names: list[str] | None = None,
) -> BrainResponse:
    """Y = X W0 + iid Gaussian noise; sigma=0 skips the noise stream entirely."""
    X = np.asarray(X, dtype=np.float64)
    W0 = np.asarray(W0, dtype=np.float64)
    if not (np.isfinite(X).all() and np.isfinite(W0).all()):
        raise CortexencError("X and W0 must be finite")
    if noise_sigma < 0:
        raise CortexencError("noise_sigma must be >= 0")
    Y = X @ W0
    if noise_sigma > 0:
        rng = np.random.default_rng((seed, _STREAM_NOISE))
        Y = Y + noise_sigma * rng.standard_normal(Y.shape)
    return BrainResponse(subject_id=subject_id, data=Y, kind=kind, tr=tr,
                         target_names=target_names)


def theoretical_ceiling(X: np.ndarray, W0: np.ndarray, noise_sigma: float) -> np.ndarray:
    """Best reachable correlation per target: sqrt(var_s / (var_s + sigma^2)).

    var_s is the realized variance of the noiseless signal column. A target
    with constant signal has ceiling 0 (nothing to correlate with).
    """
    X = np.asarray(X, dtype=np.float64)
    W0 = np.asarray(W0, dtype=np.float64)
    signal = X @ W0
    var_s = signal.var(axis=0)
    out = np.zeros(var_s.shape)
    nz = var_s > 0
    out[nz] = np.sqrt(var_s[nz] / (var_s[nz] + noise_sigma**2))
    return out


def gen_norms(vocab: Vocabulary, seed: int, coverage: float = 1.0) -> SemanticNormTable:
    """Uniform ratings on [1, 7] for a random `coverage` fraction of words."""
    if not 0 < coverage <= 1:
        raise CortexencError("coverage must lie in (0, 1]")
    rng = np.random.default_rng((seed, _STREAM_NORMS))
    ratings = {}
    for w in vocab.words:
        if coverage >= 1.0 or rng.random() < coverage:
            ratings[w] = rng.uniform(1.0, 7.0, size=6)
    if not ratings:
        ratings[vocab.words[0]] = rng.uniform(1.0, 7.0, size=6)
    return SemanticNormTable(ratings=ratings)


def gen_eye_table(words: Sequence[str], seed: int) -> list[tuple[str, float, float, float, float]]:
    """Plausible reading measures per word: durations in ms, a fixation count."""
    rng = np.random.default_rng((seed, _STREAM_EYE))
    rows = []
    for w in words:
        gd = float(rng.uniform(120.0, 380.0))
        ffd = float(rng.uniform(80.0, min(gd, 250.0)))
        nfix = float(rng.integers(1, 5))
        trt = gd + float(rng.uniform(0.0, 200.0))
        rows.append((w, round(trt, 3), round(gd, 3), nfix, round(ffd, 3)))
    return rows


def write_eye_table(rows: Sequence[tuple], path) -> None:
    lines = ["word\tTRT\tGD\tnFixations\tFFD"]
    for w, trt, gd, nfix, ffd in rows:
        lines.append(f"{w}\t{trt!r}\t{gd!r}\t{nfix!r}\t{ffd!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def gen_stimulus_events(words: Sequence[str], word_duration: float = 0.4,
                        gap: float = 0.1) -> list[tuple[str, float, float]]:
    """Evenly spaced presentation schedule for a word list."""
    if word_duration <= 0 or gap < 0:
        raise CortexencError("word_duration must be > 0 and gap >= 0")
    events = []
    t = 0.0
    for w in words:
        events.append((w, round(t, 9), word_duration))
        t += word_duration + gap
    return events
