"""Group-level inference over encoding scores.

Paired t-tests across subjects (p-values through the regularized incomplete
beta function), Benjamini-Hochberg step-up FDR across units, unweighted ROI
averaging, and per-target winning-model label maps.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import betainc

from .encode import EncodingResult
from .errors import CortexencError, FormatError, SchemaError

logger = logging.getLogger("cortexenc.stats")

COMPARISON_UNITS = ("voxel", "roi", "global")
UNLABELED = "unlabeled"


@dataclass
class ROIAtlas:
    """Maps integer target ids to ROIs, and ROIs to names and networks."""

    target_roi: dict[int, int]
    roi_names: dict[int, str]
    roi_networks: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.target_roi:
            raise CortexencError("atlas maps no targets")
        rois = set(self.target_roi.values())
        missing = rois - set(self.roi_names)
        if missing:
            raise CortexencError(f"ROI {sorted(missing)[0]} has no name")
        names = list(self.roi_names.values())
        if len(set(names)) != len(names):
            raise CortexencError("ROI names must be unique")

    @property
    def roi_ids(self) -> list[int]:
        return sorted(set(self.target_roi.values()))

    def network_of(self, roi_id: int) -> str:
        return self.roi_networks.get(roi_id, "")


def load_atlas(path) -> ROIAtlas:
    """TSV rows `target TAB roi_id TAB roi_name TAB network`; header optional."""
    target_roi: dict[int, int] = {}
    roi_names: dict[int, str] = {}
    roi_networks: dict[int, str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if ln == 1 and parts[0].lower() == "target":
            continue
        if len(parts) != 4:
            raise FormatError(f"{path}:{ln}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            target, roi = int(parts[0]), int(parts[1])
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: target and roi_id must be integers") from e
        name, network = parts[2], parts[3]
        if target in target_roi:
            raise SchemaError(f"{path}:{ln}: target {target} mapped to more than one ROI")
        if roi in roi_names and roi_names[roi] != name:
            raise SchemaError(f"{path}:{ln}: ROI {roi} renamed from {roi_names[roi]!r} to {name!r}")
        target_roi[target] = roi
        roi_names[roi] = name
        roi_networks[roi] = network
    if not target_roi:
        raise FormatError(f"{path}: no atlas rows")
    return ROIAtlas(target_roi=target_roi, roi_names=roi_names, roi_networks=roi_networks)


def save_atlas(atlas: ROIAtlas, path) -> None:
    lines = ["target\troi_id\troi_name\tnetwork"]
    for target in sorted(atlas.target_roi):
        roi = atlas.target_roi[target]
        lines.append(f"{target}\t{roi}\t{atlas.roi_names[roi]}\t{atlas.network_of(roi)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def roi_aggregate(result: EncodingResult, atlas: ROIAtlas) -> dict[int, float]:
    """Unweighted mean r per ROI; targets outside the atlas are skipped."""
    T = result.n_targets
    buckets: dict[int, list[float]] = {}
    covered = 0
    for target, roi in atlas.target_roi.items():
        if 0 <= target < T:
            buckets.setdefault(roi, []).append(float(result.per_target_r[target]))
            covered += 1
    if not buckets:
        raise CortexencError("atlas covers none of the result's targets")
    unmapped = T - covered
    if unmapped:
        logger.info("%d of %d targets are outside the atlas", unmapped, T)
    return {roi: float(np.mean(vals)) for roi, vals in sorted(buckets.items())}


class TTestResult(NamedTuple):
    t: float
    p: float
    degenerate: bool


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test on d = a - b.

    p comes from the Student-t survival function expressed with the
    regularized incomplete beta: p = I_{df/(df+t^2)}(df/2, 1/2). Identical
    inputs give (t=0, p=1); a constant nonzero difference has no variance,
    so t is signed infinity with p = 0 and the degenerate flag set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise CortexencError(f"paired scores must be equal-length vectors, got {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise CortexencError("paired t-test needs at least 2 subjects")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, False)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True)
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), p, False)


def fdr_bh(pvals, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up over a family of p-values.

    Sort ascending; reject all ranks up to the largest i with
    p(i) <= (i/m)*q; adjusted p(i) = min over j >= i of (m/j)*p(j), capped
    at 1. Both arrays come back in the input order.
    """
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] == 0:
        raise CortexencError("fdr_bh expects a non-empty 1-dimensional p-value family")
    if np.any(p < 0) or np.any(p > 1):
        raise CortexencError("p-values must lie in [0, 1]")
    if not 0 < q < 1:
        raise CortexencError("q must lie strictly between 0 and 1")
    m = p.shape[0]
    order = np.argsort(p, kind="stable")
    p_sorted = p[order]
    ranks = np.arange(1, m + 1, dtype=np.float64)
    scaled = (m / ranks) * p_sorted
    adj_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    np.minimum(adj_sorted, 1.0, out=adj_sorted)
    passing = np.flatnonzero(p_sorted <= (ranks / m) * q)
    rejected_sorted = np.zeros(m, dtype=bool)
    if passing.size:
        rejected_sorted[: passing[-1] + 1] = True
    rejected = np.zeros(m, dtype=bool)
    adjusted = np.zeros(m, dtype=np.float64)
    rejected[order] = rejected_sorted
    adjusted[order] = adj_sorted
    return rejected, adjusted


@dataclass
class GroupComparison:
    """Per-unit paired test between two models with FDR across units."""

    model_a: str
    model_b: str
    unit: str
    unit_names: list[str]
    t: np.ndarray
    p_raw: np.ndarray
    p_adj: np.ndarray
    rejected: np.ndarray
    degenerate: np.ndarray
    q: float
    n_subjects: int

    def __post_init__(self):
        if self.unit not in COMPARISON_UNITS:
            raise CortexencError(f"unknown comparison unit {self.unit!r}")
        if np.any(self.p_adj < self.p_raw - 1e-15):
            raise CortexencError("adjusted p fell below raw p")

    @property
    def n_units(self) -> int:
        return len(self.unit_names)

    def n_rejected(self) -> int:
        return int(self.rejected.sum())


def _subject_table(results: Sequence[EncodingResult]) -> dict[str, EncodingResult]:
    table = {}
    for res in results:
        if res.subject_id in table:
            raise CortexencError(f"duplicate subject {res.subject_id!r}")
        table[res.subject_id] = res
    return table


def compare_models(
    results_a: Sequence[EncodingResult],
    results_b: Sequence[EncodingResult],
    unit: str = "voxel",
    q: float = 0.05,
    atlas: ROIAtlas | None = None,
) -> GroupComparison:
    """Subject-paired t-tests per unit, then one FDR pass across units.

    Units are voxels (targets), atlas ROIs, or a single global mean score.
    The two result lists must cover the same subjects and the same targets.
    """
    if unit not in COMPARISON_UNITS:
        raise CortexencError(f"unknown comparison unit {unit!r}")
    if unit == "roi" and atlas is None:
        raise CortexencError("roi comparisons need an atlas")
    if not results_a or not results_b:
        raise CortexencError("both sides need at least one subject result")
    ta = _subject_table(results_a)
    tb = _subject_table(results_b)
    if set(ta) != set(tb):
        raise CortexencError(
            f"subject sets differ: {sorted(set(ta) ^ set(tb))} not shared"
        )
    subjects = sorted(ta)
    T = results_a[0].n_targets
    for res in list(ta.values()) + list(tb.values()):
        if res.n_targets != T:
            raise CortexencError("all results must share one target set")

    def unit_scores(res: EncodingResult) -> np.ndarray:
        if unit == "voxel":
            return res.per_target_r
        if unit == "global":
            return np.array([res.per_target_r.mean()])
        rois = roi_aggregate(res, atlas)
        return np.array([rois[r] for r in sorted(rois)])

    A = np.stack([unit_scores(ta[s]) for s in subjects])
    B = np.stack([unit_scores(tb[s]) for s in subjects])
    if unit == "voxel":
        names = [str(i) for i in range(T)]
    elif unit == "global":
        names = ["global"]
    else:
        names = [atlas.roi_names[r] for r in sorted(roi_aggregate(results_a[0], atlas))]
    tvals = np.zeros(A.shape[1])
    pvals = np.zeros(A.shape[1])
    degenerate = np.zeros(A.shape[1], dtype=bool)
    for u in range(A.shape[1]):
        tt = paired_ttest(A[:, u], B[:, u])
        tvals[u], pvals[u], degenerate[u] = tt.t, tt.p, tt.degenerate
    rejected, adjusted = fdr_bh(pvals, q)
    return GroupComparison(
        model_a=results_a[0].model_name,
        model_b=results_b[0].model_name,
        unit=unit,
        unit_names=names,
        t=tvals,
        p_raw=pvals,
        p_adj=adjusted,
        rejected=rejected,
        degenerate=degenerate,
        q=q,
        n_subjects=len(subjects),
    )


def save_comparison(comp: GroupComparison, csv_path, json_path=None, config_hash: str = "") -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "t", "p_raw", "p_adj", "rejected"])
        for i, name in enumerate(comp.unit_names):
            writer.writerow([name, repr(float(comp.t[i])), repr(float(comp.p_raw[i])),
                             repr(float(comp.p_adj[i])), int(comp.rejected[i])])
    if json_path is not None:
        payload = {
            "model_a": comp.model_a,
            "model_b": comp.model_b,
            "unit": comp.unit,
            "q": comp.q,
            "n_subjects": comp.n_subjects,
            "n_units": comp.n_units,
            "n_rejected": comp.n_rejected(),
            "degenerate_units": [comp.unit_names[i] for i in np.flatnonzero(comp.degenerate)],
            "config_hash": config_hash,
        }
        Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")


def subject_mean(results: Sequence[EncodingResult]) -> np.ndarray:
    """Mean per-target r across subjects (the Fig.-style group average)."""
    if not results:
        raise CortexencError("no results to average")
    T = results[0].n_targets
    for res in results:
        if res.n_targets != T:
            raise CortexencError("subject results must share one target set")
    return np.mean([res.per_target_r for res in results], axis=0)


@dataclass
class LabelMap:
    """Per-target winning model with its score and an exact-tie flag."""

    winners: list[str]
    scores: np.ndarray
    ties: np.ndarray
    models: list[str]
    r_min: float | None = None

    @property
    def n_targets(self) -> int:
        return len(self.winners)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {m: 0 for m in self.models}
        for w in self.winners:
            out[w] = out.get(w, 0) + 1
        return out


def label_voxels(scores_by_model: dict[str, np.ndarray], r_min: float | None = None,
                 tie_tol: float = 1e-12) -> LabelMap:
    """Winning model per target from subject-mean scores.

    Models within tie_tol of the maximum are tied; the lexicographically
    first name wins and the target is flagged. With r_min set, targets whose
    best score falls below it are labeled "unlabeled" (the recorded score is
    still the honest maximum); r_min=None labels everything.
    """
    if len(scores_by_model) < 2:
        raise CortexencError("label map needs at least 2 models")
    models = sorted(scores_by_model)
    mats = [np.asarray(scores_by_model[m], dtype=np.float64) for m in models]
    T = mats[0].shape[0]
    for m, arr in zip(models, mats):
        if arr.shape != (T,):
            raise CortexencError(f"model {m!r} has a different target set")
    S = np.stack(mats)  # models x targets
    best = S.max(axis=0)
    winners = []
    ties = np.zeros(T, dtype=bool)
    for t in range(T):
        contenders = [models[i] for i in range(len(models)) if S[i, t] >= best[t] - tie_tol]
        ties[t] = len(contenders) > 1
        if r_min is not None and best[t] < r_min:
            winners.append(UNLABELED)
        else:
            winners.append(min(contenders))
    return LabelMap(winners=winners, scores=best, ties=ties, models=models, r_min=r_min)


def save_label_map(lm: LabelMap, csv_path, json_path=None, atlas: ROIAtlas | None = None,
                   config_hash: str = "") -> None:
    """CSV `target,winner,score,tie` and a JSON label-count histogram.

    Given an atlas, the histogram also breaks counts down per ROI for
    downstream plotting.
    """
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "winner", "score", "tie"])
        for t in range(lm.n_targets):
            writer.writerow([t, lm.winners[t], repr(float(lm.scores[t])), int(lm.ties[t])])
    if json_path is not None:
        payload: dict = {
            "models": lm.models,
            "r_min": lm.r_min,
            "n_targets": lm.n_targets,
            "counts": lm.counts(),
            "config_hash": config_hash,
        }
        if atlas is not None:
            per_roi: dict[str, dict[str, int]] = {}
            for t in range(lm.n_targets):
                roi = atlas.target_roi.get(t)
                if roi is None:
                    continue
                bucket = per_roi.setdefault(atlas.roi_names[roi], {})
                bucket[lm.winners[t]] = bucket.get(lm.winners[t], 0) + 1
            payload["per_roi"] = per_roi
        Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")


def load_label_map(path) -> LabelMap:
    """Rebuild a LabelMap from its CSV table (models inferred from winners)."""
    winners, scores, ties = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["target", "winner", "score", "tie"]:
            raise FormatError(f"{path}: unexpected label-map header {header}")
        for row in reader:
            winners.append(row[1])
            scores.append(float(row[2]))
            ties.append(bool(int(row[3])))
    models = sorted(set(winners) - {UNLABELED})
    return LabelMap(winners=winners, scores=np.array(scores), ties=np.array(ties, dtype=bool),
                    models=models)
