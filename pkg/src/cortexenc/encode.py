"""Ridge encoding models with K-fold cross-validation and Pearson scoring.

The solver standardizes features and targets inside each training fold
(never with held-out rows), solves the d x d normal equations with one
symmetric positive-definite factorization shared by all targets, and maps
the weights back to original units. Scores are per-target correlations
between held-out predictions and measurements, averaged over folds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import CortexencError, SingularModelError

FOLD_SCHEMES = ("contiguous", "shuffled")
SCORE_MODES = ("fold-mean", "concatenated")


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of 0..n-1 into K folds with sizes differing by at most 1."""

    n: int
    K: int
    fold_of: np.ndarray
    seed: int
    scheme: str

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.fold_of == f)) for f in range(self.K)]


def kfold_split(n: int, K: int, seed: int = 0, scheme: str = "contiguous") -> FoldAssignment:
    """Deterministic K-fold assignment.

    Contiguous folds keep temporal order (the right choice for time series);
    the shuffled scheme permutes samples with the seed first. The first
    n mod K folds carry the extra sample.
    """
    if scheme not in FOLD_SCHEMES:
        raise CortexencError(f"unknown fold scheme {scheme!r}")
    if K < 2:
        raise CortexencError("need at least 2 folds")
    if K > n:
        raise CortexencError(f"K={K} exceeds sample count n={n}")
    base, extra = divmod(n, K)
    sizes = [base + 1 if f < extra else base for f in range(K)]
    fold_of = np.repeat(np.arange(K), sizes)
    if scheme == "shuffled":
        perm = np.random.default_rng(seed).permutation(n)
        shuffled = np.empty(n, dtype=np.int64)
        shuffled[perm] = fold_of
        fold_of = shuffled
    return FoldAssignment(n=n, K=K, fold_of=fold_of, seed=seed, scheme=scheme)


@dataclass
class RidgeModel:
    """Closed-form ridge solution plus the training standardization stats.

    `weights`/`intercepts` act on raw inputs; `weights_std` is the solution
    in centered-and-scaled space, which is what the normal-equation residual
    bound refers to.
    """

    weights: np.ndarray
    intercepts: np.ndarray
    lam: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    weights_std: np.ndarray
    normal_eq_residual: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.weights + self.intercepts


def _standardize_stats(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = M.mean(axis=0)
    scale = M.std(axis=0)
    scale = np.where(scale == 0, 1.0, scale)
    return mean, scale


def fit_ridge(X, Y, lam: float = 1.0, standardize: bool = True) -> RidgeModel:
    """Solve (Xs'Xs + lam I) W = Xs'Ys by Cholesky factorization.

    Zero-variance columns get scale 1 so standardization never divides by
    zero. lam=0 demands full column rank and otherwise raises a
    SingularModelError suggesting lam > 0.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or Y.ndim != 2:
        raise CortexencError("X and Y must be 2-dimensional")
    if X.shape[0] != Y.shape[0]:
        raise CortexencError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    if X.shape[0] < 2:
        raise CortexencError("need at least 2 samples")
    if lam < 0:
        raise CortexencError("lambda must be non-negative")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise CortexencError("X and Y must be finite")
    n, d = X.shape
    if standardize:
        x_mean, x_scale = _standardize_stats(X)
        y_mean, y_scale = _standardize_stats(Y)
    else:
        x_mean, x_scale = np.zeros(d), np.ones(d)
        y_mean, y_scale = np.zeros(Y.shape[1]), np.ones(Y.shape[1])
    Xs = (X - x_mean) / x_scale
    Ys = (Y - y_mean) / y_scale
    G = Xs.T @ Xs + lam * np.eye(d)
    B = Xs.T @ Ys
    if lam == 0 and np.linalg.matrix_rank(Xs) < d:
        raise SingularModelError(
            "X'X is rank-deficient at lambda=0; refit with lambda > 0"
        )
    try:
        cho = scipy.linalg.cho_factor(G, lower=True)
    except np.linalg.LinAlgError as e:
        raise SingularModelError(
            f"normal equations not positive definite (lambda={lam}); "
            "refit with lambda > 0"
        ) from e
    W = scipy.linalg.cho_solve(cho, B)
    b_norm = np.linalg.norm(B)
    residual = np.linalg.norm(G @ W - B) / b_norm if b_norm > 0 else 0.0
    if residual > 1e-8:
        raise SingularModelError(
            f"normal-equation residual {residual:.3e} exceeds 1e-8; "
            "the system is too ill-conditioned at this lambda"
        )
    weights = (W / x_scale[:, None]) * y_scale[None, :]
    intercepts = y_mean - x_mean @ weights
    return RidgeModel(
        weights=weights,
        intercepts=intercepts,
        lam=float(lam),
        x_mean=x_mean,
        x_scale=x_scale,
        y_mean=y_mean,
        y_scale=y_scale,
        weights_std=W,
        normal_eq_residual=float(residual),
    )


def pearson(a, b) -> float:
    """Sample correlation; zero-variance input yields 0 rather than NaN."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise CortexencError("pearson expects 1-dimensional vectors")
    if a.shape[0] != b.shape[0]:
        raise CortexencError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise CortexencError("pearson needs at least 2 points")
    am = a - a.mean()
    bm = b - b.mean()
    va = am @ am
    vb = bm @ bm
    if va == 0.0 or vb == 0.0:
        return 0.0
    r = (am @ bm) / math.sqrt(va * vb)
    return float(min(1.0, max(-1.0, r)))


def pearson_columns(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise correlations plus flags marking zero-variance columns."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise CortexencError(f"shape mismatch: {A.shape} vs {B.shape}")
    if A.shape[0] < 2:
        raise CortexencError("pearson needs at least 2 points")
    Am = A - A.mean(axis=0)
    Bm = B - B.mean(axis=0)
    va = np.sum(Am * Am, axis=0)
    vb = np.sum(Bm * Bm, axis=0)
    flags = (va == 0.0) | (vb == 0.0)
    denom = np.sqrt(np.where(flags, 1.0, va * vb))
    r = np.sum(Am * Bm, axis=0) / denom
    np.clip(r, -1.0, 1.0, out=r)
    r[flags] = 0.0
    return r, flags


@dataclass
class EncodingResult:
    """Cross-validated per-target correlations for one (subject, model, layer)."""

    subject_id: str
    model_name: str
    per_target_r: np.ndarray
    degenerate_flags: np.ndarray
    lam: float
    K: int
    seed: int
    layer: int | None = None
    scheme: str | None = None
    mode: str = "fold-mean"
    fold_rs: np.ndarray | None = None
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_target_r = np.asarray(self.per_target_r, dtype=np.float64)
        self.degenerate_flags = np.asarray(self.degenerate_flags, dtype=bool)
        if self.per_target_r.shape != self.degenerate_flags.shape:
            raise CortexencError("per_target_r and degenerate_flags must align")
        if np.any(np.abs(self.per_target_r) > 1.0 + 1e-12):
            raise CortexencError("correlations must lie in [-1, 1]")
        if self.fold_rs is not None:
            self.fold_rs = np.asarray(self.fold_rs, dtype=np.float64)
            if self.mode == "fold-mean":
                gap = np.max(np.abs(self.fold_rs.mean(axis=0) - self.per_target_r))
                if gap > 1e-12:
                    raise CortexencError(
                        f"per_target_r disagrees with fold average by {gap:.3e}"
                    )

    @property
    def n_targets(self) -> int:
        return self.per_target_r.shape[0]

    def mean_r(self) -> float:
        return float(self.per_target_r.mean())


def crossval_encode(
    X,
    Y,
    folds: FoldAssignment,
    lam: float = 1.0,
    subject_id: str = "",
    model_name: str = "",
    layer: int | None = None,
    mode: str = "fold-mean",
    config_hash: str = "",
) -> EncodingResult:
    """Fit on K-1 folds, score held-out predictions, average over folds.

    Standardization statistics are recomputed from each training split, so
    held-out rows never inform the fit. Folds of fewer than 2 samples are
    rejected because a correlation there is undefined.
    """
    if mode not in SCORE_MODES:
        raise CortexencError(f"unknown scoring mode {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != folds.n or Y.shape[0] != folds.n:
        raise CortexencError(
            f"fold assignment covers {folds.n} samples but X has {X.shape[0]} and Y has {Y.shape[0]}"
        )
    sizes = folds.sizes()
    small = [f for f, s in enumerate(sizes) if s < 2]
    if small:
        raise CortexencError(
            f"fold {small[0]} has {sizes[small[0]]} sample(s); correlations need >= 2"
        )
    T = Y.shape[1]
    fold_rs = np.zeros((folds.K, T))
    degenerate = np.zeros(T, dtype=bool)
    predictions = np.zeros_like(Y) if mode == "concatenated" else None
    for f in range(folds.K):
        tr = folds.train_indices(f)
        te = folds.test_indices(f)
        model = fit_ridge(X[tr], Y[tr], lam=lam)
        pred = model.predict(X[te])
        r, flags = pearson_columns(pred, Y[te])
        fold_rs[f] = r
        degenerate |= flags
        if predictions is not None:
            predictions[te] = pred
    if mode == "fold-mean":
        per_target = fold_rs.mean(axis=0)
    else:
        per_target, concat_flags = pearson_columns(predictions, Y)
        degenerate |= concat_flags
    return EncodingResult(
        subject_id=subject_id,
        model_name=model_name,
        per_target_r=per_target,
        degenerate_flags=degenerate,
        lam=float(lam),
        K=folds.K,
        seed=folds.seed,
        layer=layer,
        scheme=folds.scheme,
        mode=mode,
        fold_rs=fold_rs,
        config_hash=config_hash,
    )


def best_layer(results: list[EncodingResult], selector: str = "mean-over-targets") -> int:
    """Layer whose mean per-target correlation is highest; ties go low."""
    if selector != "mean-over-targets":
        raise CortexencError(f"unknown layer selector {selector!r}")
    if not results:
        raise CortexencError("no results to select a layer from")
    key = (results[0].subject_id, results[0].model_name)
    for res in results:
        if (res.subject_id, res.model_name) != key:
            raise CortexencError(
                f"mixed results: {key} vs {(res.subject_id, res.model_name)}"
            )
        if res.layer is None:
            raise CortexencError("layer selection needs per-layer results")
    ordered = sorted(results, key=lambda r: r.layer)
    scores = [r.mean_r() for r in ordered]
    return ordered[int(np.argmax(scores))].layer


def save_result(result: EncodingResult, json_path, csv_path=None, target_names=None) -> None:
    """Write the JSON summary and, optionally, the per-target CSV table."""
    payload = {
        "subject": result.subject_id,
        "model": result.model_name,
        "layer": result.layer,
        "lambda": result.lam,
        "K": result.K,
        "seed": result.seed,
        "per_target_r": [float(x) for x in result.per_target_r],
        "degenerate_flags": [bool(x) for x in result.degenerate_flags],
        "config_hash": result.config_hash,
    }
    Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
    if csv_path is not None:
        if target_names is not None and len(target_names) != result.n_targets:
            raise CortexencError("target_names length mismatch")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target", "r", "degenerate"])
            for i in range(result.n_targets):
                name = target_names[i] if target_names else str(i)
                writer.writerow([name, repr(float(result.per_target_r[i])),
                                 int(result.degenerate_flags[i])])


def load_result(path) -> EncodingResult:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return EncodingResult(
        subject_id=payload["subject"],
        model_name=payload["model"],
        per_target_r=np.array(payload["per_target_r"], dtype=np.float64),
        degenerate_flags=np.array(payload["degenerate_flags"], dtype=bool),
        lam=payload["lambda"],
        K=payload["K"],
        seed=payload["seed"],
        layer=payload["layer"],
        config_hash=payload.get("config_hash", ""),
    )
