"""Declarative run configuration for every pipeline stage.

One JSON document fully determines a run. Unknown keys are rejected, and the
sha256 of the validated document (defaults filled in, keys sorted) becomes
the run's config_hash, which output artifacts and manifests embed.
"""

from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StageConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class HrfConfig(StageConfig):
    peak_shape: float = 6.0
    undershoot_shape: float = 16.0
    scale: float = 1.0
    undershoot_ratio: float = 1.0 / 6.0
    duration: float = 32.0


class BuildCoocConfig(StageConfig):
    corpus: str
    tokenize_mode: Literal["whitespace", "pre-tokenized-lines"] = "whitespace"
    # by default windows run straight through line breaks; set True to make
    # each line its own counting unit
    sentence_per_line: bool = False
    min_count: int = 1
    max_size: Optional[int] = None
    window: int = 2
    weighting: Literal["flat", "distance-decay"] = "flat"


class BuildLsmConfig(StageConfig):
    corpus: str
    tokenize_mode: Literal["whitespace", "pre-tokenized-lines"] = "whitespace"
    sentence_per_line: bool = False
    min_count: int = 1
    max_size: Optional[int] = None
    window: int = 2
    weighting: Literal["flat", "distance-decay"] = "flat"
    dim: int = 300
    alpha: float = 0.5
    seed: int = 0


class BuildNtmConfig(StageConfig):
    base_embedding: str
    knn_k: int = 50
    walks_per_node: int = 10
    walk_length: int = 40
    walk_window: int = 5
    dim: int = 300
    alpha: float = 0.5
    seed: int = 0
    dump_walks: bool = False


class BuildEbmConfig(StageConfig):
    norms: str
    vocab: str
    scaling: Literal["zscore", "none"] = "zscore"


class ImportEmbConfig(StageConfig):
    path: str
    format: Literal["text-vec", "per-layer-table"] = "text-vec"
    model_name: Optional[str] = None


class AlignConfig(StageConfig):
    mode: Literal["discourse", "word", "eye"]
    embedding: str
    stimulus: Optional[str] = None
    brain: Optional[str] = None
    words: Optional[str] = None
    eye_table: Optional[str] = None
    subject_id: str = "group"
    dt: float = 0.1
    hrf: HrfConfig = HrfConfig()

    @model_validator(mode="after")
    def _check_mode_fields(self):
        required = {
            "discourse": ("stimulus", "brain"),
            "word": ("words", "brain"),
            "eye": ("eye_table",),
        }[self.mode]
        allowed = set(required)
        for name in ("stimulus", "brain", "words", "eye_table"):
            val = getattr(self, name)
            if name in allowed and val is None:
                raise ValueError(f"align mode {self.mode!r} requires {name!r}")
            if name not in allowed and val is not None:
                raise ValueError(f"align mode {self.mode!r} does not use {name!r}")
        return self


class EncodeConfig(StageConfig):
    design: str
    targets: str
    lam: float = Field(1.0, alias="lambda")
    K: int = 10
    seed: int = 0
    scheme: Optional[Literal["contiguous", "shuffled"]] = None
    score_mode: Literal["fold-mean", "concatenated"] = "fold-mean"
    model_name: Optional[str] = None
    layer: Optional[int] = None


class CompareConfig(StageConfig):
    results_a: list[str]
    results_b: list[str]
    unit: Literal["voxel", "roi", "global"] = "voxel"
    q: float = 0.05
    atlas: Optional[str] = None


class LabelMapConfig(StageConfig):
    results: dict[str, list[str]]
    r_min: Optional[float] = None
    atlas: Optional[str] = None


class SynthConfig(StageConfig):
    seed: int
    V: int = 100
    d: int = 10
    n_samples: int = 200
    n_targets: int = 50
    noise_sigma: float = 0.1
    relative_noise: bool = True
    n_clusters: int = 4
    p_in: float = 0.8
    p_out: float = 0.05
    n_tokens: int = 10000
    sentence_length: int = 10
    jitter: float = 0.1
    subjects: list[str] = ["synth-01"]
    norm_coverage: float = 1.0


class ReportConfig(StageConfig):
    results: list[str]
    atlas: Optional[str] = None


def config_hash(cfg: BaseModel) -> str:
    """sha256 of the canonical JSON rendering of a validated config."""
    payload = json.dumps(cfg.model_dump(mode="json", by_alias=True),
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
