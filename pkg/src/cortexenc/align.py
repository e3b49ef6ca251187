"""Alignment of word representations to measured brain and behavioral targets.

Three target flavors share one design-matrix abstraction:

* discourse BOLD: per-word vectors are laid out on a fine time grid as
  boxcars, convolved with a double-gamma hemodynamic response, and sampled
  at the scanner repetition time;
* word t-values: one design row per word, paired with that word's
  activation map row;
* eye-movement features: design rows joined against a reading-measure
  table (TRT, GD, nFixations, FFD).
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import gamma as gamma_dist

from .errors import CortexencError, FormatError, SchemaError
from .reprs import EmbeddingMatrix

logger = logging.getLogger("cortexenc.align")

RESPONSE_KINDS = ("word-tvalue", "discourse-bold", "eye-features")
EYE_FEATURES = ("TRT", "GD", "nFixations", "FFD")
BRN_MAGIC = b"BRN1"
BRN_VERSION = 1
_KIND_CODES = {"word-tvalue": 1, "discourse-bold": 2, "eye-features": 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class HrfParams:
    """Double-gamma response parameters (SPM-style canonical defaults)."""

    peak_shape: float = 6.0
    undershoot_shape: float = 16.0
    scale: float = 1.0
    undershoot_ratio: float = 1.0 / 6.0
    duration: float = 32.0


def hrf(t, params: HrfParams | None = None) -> np.ndarray:
    """Canonical hemodynamic response h(t) = g(t;6,1) - (1/6) g(t;16,1).

    g is the gamma density; h(0) = 0 and the peak sits near 5 s.
    """
    p = params or HrfParams()
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0):
        raise CortexencError("hrf is undefined for negative time")
    out = gamma_dist.pdf(arr, p.peak_shape, scale=p.scale)
    out = out - p.undershoot_ratio * gamma_dist.pdf(arr, p.undershoot_shape, scale=p.scale)
    return out if arr.ndim else float(out)


def hrf_kernel(dt: float, params: HrfParams | None = None) -> np.ndarray:
    """h sampled at 0, dt, 2*dt, ... through `duration` (inclusive)."""
    p = params or HrfParams()
    if dt <= 0:
        raise CortexencError("dt must be positive")
    n = int(round(p.duration / dt))
    return hrf(np.arange(n + 1) * dt, p)


@dataclass
class StimulusSequence:
    """Word presentation events: (word, onset seconds, duration seconds)."""

    events: list[tuple[str, float, float]]
    total_duration: float

    def __post_init__(self):
        prev = -math.inf
        for i, (word, onset, dur) in enumerate(self.events):
            if onset < prev:
                raise CortexencError(f"event {i} ({word!r}): onsets must be non-decreasing")
            if dur <= 0:
                raise CortexencError(f"event {i} ({word!r}): duration must be > 0")
            if onset + dur > self.total_duration + 1e-9:
                raise CortexencError(
                    f"event {i} ({word!r}) ends at {onset + dur} s, past total_duration {self.total_duration} s"
                )
            prev = onset

    @property
    def words(self) -> list[str]:
        return [w for w, _, _ in self.events]

    def __len__(self) -> int:
        return len(self.events)


def load_stimulus(path, total_duration: float | None = None) -> StimulusSequence:
    """Read a `word TAB onset_s TAB duration_s` table; header line optional.

    Without an explicit total_duration the sequence ends when the last
    event does.
    """
    events = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if ln == 1 and parts[0].lower() == "word":
            continue
        if len(parts) != 3:
            raise FormatError(f"{path}:{ln}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            events.append((parts[0], float(parts[1]), float(parts[2])))
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: non-numeric onset or duration") from e
    if not events:
        raise FormatError(f"{path}: no stimulus events")
    if total_duration is None:
        total_duration = max(onset + dur for _, onset, dur in events)
    return StimulusSequence(events=events, total_duration=total_duration)


def save_stimulus(stim: StimulusSequence, path) -> None:
    lines = ["word\tonset_s\tduration_s"]
    for word, onset, dur in stim.events:
        lines.append(f"{word}\t{onset!r}\t{dur!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class BrainResponse:
    """samples x targets measurement matrix with its acquisition metadata.

    `tr` is required for discourse BOLD (it defines the sampling grid) and
    forbidden otherwise. Eye-feature responses carry exactly the four named
    reading measures.
    """

    subject_id: str
    data: np.ndarray
    kind: str
    tr: float | None = None
    target_names: list[str] | None = None

    def __post_init__(self):
        if self.kind not in RESPONSE_KINDS:
            raise CortexencError(f"unknown response kind {self.kind!r}")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise CortexencError("response data must be samples x targets")
        if not np.isfinite(self.data).all():
            raise CortexencError("response data contains NaN or Inf")
        if self.kind == "discourse-bold":
            if self.tr is None or self.tr <= 0:
                raise CortexencError("discourse-bold responses need a positive tr")
        elif self.tr is not None:
            raise CortexencError(f"tr is only meaningful for discourse-bold, not {self.kind!r}")
        if self.target_names is not None and len(self.target_names) != self.data.shape[1]:
            raise CortexencError(
                f"{len(self.target_names)} target names for {self.data.shape[1]} targets"
            )
        if self.kind == "eye-features":
            if self.target_names is None or tuple(self.target_names) != EYE_FEATURES:
                raise CortexencError(f"eye-features targets must be {EYE_FEATURES}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_targets(self) -> int:
        return self.data.shape[1]


def write_brain(resp: BrainResponse, path) -> None:
    """Binary layout: BRN1 magic, version, kind code, subject id, shape,
    tr (0 when absent), target-name table, row-major little-endian f32."""
    buf = bytearray()
    buf += BRN_MAGIC
    buf += struct.pack("<IB", BRN_VERSION, _KIND_CODES[resp.kind])
    sid = resp.subject_id.encode("utf-8")
    buf += struct.pack("<I", len(sid)) + sid
    s, t = resp.data.shape
    buf += struct.pack("<IId", s, t, 0.0 if resp.tr is None else float(resp.tr))
    names = resp.target_names or []
    buf += struct.pack("<I", len(names))
    for nm in names:
        enc = nm.encode("utf-8")
        buf += struct.pack("<I", len(enc)) + enc
    buf += resp.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def read_brain(path) -> BrainResponse:
    raw = Path(path).read_bytes()
    if raw[:4] != BRN_MAGIC:
        raise FormatError(f"{path}: unknown magic bytes {raw[:4]!r}")
    version, kind_code = struct.unpack_from("<IB", raw, 4)
    if version != BRN_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind_code not in _CODE_KINDS:
        raise FormatError(f"{path}: unknown kind code {kind_code}")
    kind = _CODE_KINDS[kind_code]
    off = 9
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    subject_id = raw[off:off + n].decode("utf-8")
    off += n
    samples, targets, tr = struct.unpack_from("<IId", raw, off)
    off += 16
    (n_names,) = struct.unpack_from("<I", raw, off)
    off += 4
    names = []
    for _ in range(n_names):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        names.append(raw[off:off + n].decode("utf-8"))
        off += n
    need = off + 4 * samples * targets
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data section ({len(raw)} < {need} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=samples * targets, offset=off)
    data = data.reshape(samples, targets).astype(np.float64)
    if kind == "discourse-bold" and tr == 0.0:
        raise FormatError(f"{path}: discourse-bold file is missing its tr")
    return BrainResponse(
        subject_id=subject_id,
        data=data,
        kind=kind,
        tr=tr if kind == "discourse-bold" else None,
        target_names=names or None,
    )


@dataclass
class DesignMatrix:
    """samples x dims regressor matrix plus the recipe that produced it."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise CortexencError("design matrix must be 2-dimensional")
        if not np.isfinite(self.data).all():
            raise CortexencError("design matrix contains NaN or Inf")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]


def save_design(design: DesignMatrix, path) -> None:
    import json

    np.savez(path, data=design.data, meta=json.dumps(design.meta, sort_keys=True))


def load_design(path) -> DesignMatrix:
    import json

    with np.load(path, allow_pickle=False) as z:
        return DesignMatrix(data=z["data"], meta=json.loads(str(z["meta"])))


def _grid_index(t: float, dt: float) -> int:
    # first grid index at or after t, tolerant of float division noise
    return int(math.ceil(t / dt - 1e-9))


def build_feature_series(stim: StimulusSequence, emb: EmbeddingMatrix, dt: float) -> np.ndarray:
    """Boxcar superposition of word vectors on a fine time grid.

    Grid point k covers time k*dt; an event occupies [onset, onset+duration).
    Words without an embedding row contribute nothing (logged once).
    """
    if dt <= 0:
        raise CortexencError("dt must be positive")
    if len(stim) == 0:
        raise CortexencError("stimulus has no events")
    n_grid = _grid_index(stim.total_duration, dt)
    series = np.zeros((n_grid, emb.dim))
    missing = []
    for word, onset, dur in stim.events:
        i = emb.vocab.index.get(word)
        if i is None:
            missing.append(word)
            continue
        lo = _grid_index(onset, dt)
        hi = min(_grid_index(onset + dur, dt), n_grid)
        series[lo:hi] += emb.data[i]
    if missing:
        logger.warning(
            "%d of %d stimulus events lack an embedding row (e.g. %r); they contribute zeros",
            len(missing), len(stim), missing[0],
        )
    return series


def convolve_downsample(
    series: np.ndarray,
    dt: float,
    tr: float,
    n_volumes: int,
    hrf_params: HrfParams | None = None,
    pad: bool = True,
    threads: int = 1,
) -> DesignMatrix:
    """Convolve each channel with the sampled response and read off volumes.

    The convolution is the plain causal discrete sum (an impulse therefore
    reproduces the sampled kernel bit for bit), and volume k is the value at
    time k*tr. tr must be an integer multiple of dt; with pad=True the tail
    past the series end is the natural zero-padded convolution.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    if dt <= 0 or tr <= 0:
        raise CortexencError("dt and tr must be positive")
    ratio = tr / dt
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9:
        raise CortexencError(f"tr={tr} is not an integer multiple of dt={dt}")
    if n_volumes < 1:
        raise CortexencError("n_volumes must be >= 1")
    kernel = hrf_kernel(dt, hrf_params)
    n = series.shape[0]
    last = (n_volumes - 1) * steps
    if pad:
        if last > n + kernel.shape[0] - 2:
            raise CortexencError(
                f"{n_volumes} volumes at tr={tr} overrun even the zero-padded series"
            )
    elif last > n - 1:
        raise CortexencError(f"{n_volumes} volumes at tr={tr} overrun the series (pad=False)")

    idx = np.arange(n_volumes) * steps

    def one_channel(c: int) -> np.ndarray:
        full = np.convolve(series[:, c], kernel)
        out = np.zeros(n_volumes)
        take = idx[idx < full.shape[0]]
        out[: take.shape[0]] = full[take]
        return out

    channels = range(series.shape[1])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(one_channel, channels))
    else:
        cols = [one_channel(c) for c in channels]
    data = np.column_stack(cols)
    p = hrf_params or HrfParams()
    meta = {
        "mode": "discourse",
        "dt": dt,
        "tr": tr,
        "n_volumes": n_volumes,
        "hrf": {
            "peak_shape": p.peak_shape,
            "undershoot_shape": p.undershoot_shape,
            "scale": p.scale,
            "undershoot_ratio": p.undershoot_ratio,
            "duration": p.duration,
        },
    }
    return DesignMatrix(data=data, meta=meta)


def discourse_design(
    stim: StimulusSequence,
    emb: EmbeddingMatrix,
    tr: float,
    n_volumes: int,
    dt: float = 0.1,
    hrf_params: HrfParams | None = None,
    threads: int = 1,
) -> DesignMatrix:
    """Stimulus + embedding straight through to a volume-aligned design."""
    series = build_feature_series(stim, emb, dt)
    design = convolve_downsample(series, dt, tr, n_volumes, hrf_params=hrf_params, threads=threads)
    design.meta["model"] = emb.model_name
    return design


def word_targets(
    words: list[str],
    response: BrainResponse,
    emb: EmbeddingMatrix,
) -> tuple[DesignMatrix, BrainResponse]:
    """Pair per-word activation rows with embedding rows, dropping pairwise.

    Row i of the response must belong to words[i]; any word missing from the
    embedding removes both its design row and its response row, so X and Y
    never desynchronize.
    """
    if response.kind != "word-tvalue":
        raise CortexencError(f"word_targets needs a word-tvalue response, got {response.kind!r}")
    if len(words) != response.n_samples:
        raise CortexencError(
            f"{len(words)} word labels for {response.n_samples} response rows"
        )
    keep = [i for i, w in enumerate(words) if w in emb.vocab.index]
    if not keep:
        raise CortexencError("no labeled word has an embedding row (zero overlap)")
    dropped = len(words) - len(keep)
    if dropped:
        logger.warning("dropping %d of %d words missing from the embedding", dropped, len(words))
    X = emb.data[[emb.vocab.index[words[i]] for i in keep]]
    design = DesignMatrix(data=X, meta={"mode": "word", "model": emb.model_name,
                                        "n_words": len(keep), "n_dropped": dropped})
    filtered = BrainResponse(
        subject_id=response.subject_id,
        data=response.data[keep],
        kind=response.kind,
        target_names=response.target_names,
    )
    return design, filtered


def load_eye_table(path) -> tuple[list[str], np.ndarray]:
    """Eye-movement TSV with header columns exactly word + the four measures."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty eye-feature table")
    header = lines[0].split("\t")
    required = ("word",) + EYE_FEATURES
    for col in required:
        if col not in header:
            raise SchemaError(f"{path}: missing required column {col!r}")
    extra = [c for c in header if c not in required]
    if extra:
        raise SchemaError(f"{path}: unexpected column {extra[0]!r}")
    pos = {c: header.index(c) for c in required}
    words, rows = [], []
    for ln, line in enumerate(lines[1:], 2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise FormatError(f"{path}:{ln}: expected {len(header)} fields, got {len(parts)}")
        try:
            rows.append([float(parts[pos[c]]) for c in EYE_FEATURES])
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: non-numeric feature value") from e
        words.append(parts[pos["word"]])
    if not words:
        raise FormatError(f"{path}: no data rows")
    return words, np.array(rows, dtype=np.float64)


def eye_targets(path, emb: EmbeddingMatrix, subject_id: str = "group") -> tuple[DesignMatrix, BrainResponse]:
    """Join a reading-measure table against embedding rows.

    Table rows whose word has no embedding are dropped; all-zero feature rows
    are kept, since a skipped word is a legitimate observation.
    """
    words, Y = load_eye_table(path)
    keep = [i for i, w in enumerate(words) if w in emb.vocab.index]
    if not keep:
        raise CortexencError("no table word has an embedding row (zero overlap)")
    dropped = len(words) - len(keep)
    if dropped:
        logger.warning("dropping %d of %d eye-table rows missing from the embedding",
                       dropped, len(words))
    X = emb.data[[emb.vocab.index[words[i]] for i in keep]]
    design = DesignMatrix(data=X, meta={"mode": "eye", "model": emb.model_name,
                                        "n_words": len(keep), "n_dropped": dropped})
    response = BrainResponse(
        subject_id=subject_id,
        data=Y[keep],
        kind="eye-features",
        target_names=list(EYE_FEATURES),
    )
    return design, response


def warmup_mask(n_volumes: int, tr: float, warmup_s: float = 20.0) -> np.ndarray:
    """Boolean keep-mask that drops the first ceil(warmup_s / tr) volumes.

    Convolution warm-up underestimates early signal; masking is optional and
    off by default in scoring.
    """
    if n_volumes < 1 or tr <= 0:
        raise CortexencError("need n_volumes >= 1 and tr > 0")
    drop = min(math.ceil(warmup_s / tr), n_volumes)
    mask = np.ones(n_volumes, dtype=bool)
    mask[:drop] = False
    return mask
