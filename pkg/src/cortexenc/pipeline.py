"""Stage orchestration: validated config in, artifact files plus manifest out.

Each stage is a pure function of its config (plus the files it names), writes
its outputs atomically (staged under a temp name, then renamed into place),
and records what it did in `<stage>.manifest.json`. Reruns with the same
config therefore overwrite byte-identical artifacts, and a crash mid-write
never leaves a half-written file under the final name.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__, align, config as cfgmod, corpus, encode, reprs, stats, synth
from .errors import CortexencError, SchemaError

logger = logging.getLogger("cortexenc.pipeline")


@contextmanager
def _staged(final: Path):
    """Yield a temp path next to `final`; rename over it only on success.

    The temp name keeps the real extension (writers like np.savez append one
    when it is missing) and embeds the pid so concurrent runs cannot collide.
    """
    tmp = final.with_name(f".{final.stem}.{os.getpid()}.tmp{final.suffix}")
    try:
        yield tmp
        os.replace(tmp, final)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _write_json(final: Path, payload: dict) -> None:
    with _staged(final) as tmp:
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_docs(path, mode, sentence_per_line):
    return corpus.read_documents(path, mode=mode, sentence_per_line=sentence_per_line)


# ---------------------------------------------------------------------------
# stage runners: (cfg, out_dir, threads, config_hash) -> (inputs, outputs)
# ---------------------------------------------------------------------------

def _run_build_cooc(cfg: cfgmod.BuildCoocConfig, out: Path, threads: int, chash: str):
    docs = _read_docs(cfg.corpus, cfg.tokenize_mode, cfg.sentence_per_line)
    vocab = corpus.build_vocab((t for d in docs for t in d),
                               min_count=cfg.min_count, max_size=cfg.max_size)
    cooc = corpus.count_cooccurrences(docs, vocab, window=cfg.window,
                                      weighting=cfg.weighting, threads=threads)
    with _staged(out / "vocab.tsv") as tmp:
        corpus.save_vocab(vocab, tmp)
    with _staged(out / "cooc.tsv") as t1, _staged(out / "cooc.json") as t2:
        corpus.save_cooccurrence(cooc, t1, t2, vocab_file="vocab.tsv")
    return [cfg.corpus], ["cooc.json", "cooc.tsv", "vocab.tsv"]


def _run_build_lsm(cfg: cfgmod.BuildLsmConfig, out: Path, threads: int, chash: str):
    docs = _read_docs(cfg.corpus, cfg.tokenize_mode, cfg.sentence_per_line)
    emb = reprs.build_lsm(docs, min_count=cfg.min_count, max_size=cfg.max_size,
                          window=cfg.window, weighting=cfg.weighting,
                          k=cfg.dim, alpha=cfg.alpha, seed=cfg.seed, threads=threads)
    with _staged(out / "vocab.tsv") as tmp:
        corpus.save_vocab(emb.vocab, tmp)
    with _staged(out / "lsm.vec") as tmp:
        reprs.write_text_vec(emb, tmp)
    return [cfg.corpus], ["lsm.vec", "vocab.tsv"]


def _run_build_ntm(cfg: cfgmod.BuildNtmConfig, out: Path, threads: int, chash: str):
    base = reprs.read_text_vec(cfg.base_embedding)
    graph = reprs.cosine_knn_graph(base, k=cfg.knn_k)
    ntm, walks = reprs.ntm_from_graph(
        graph, base.vocab, walks_per_node=cfg.walks_per_node,
        walk_length=cfg.walk_length, window=cfg.walk_window,
        dim=cfg.dim, alpha=cfg.alpha, seed=cfg.seed, threads=threads)
    ntm.meta["base_model"] = base.model_name
    with _staged(out / "ntm.vec") as tmp:
        reprs.write_text_vec(ntm, tmp)
    outputs = ["ntm.vec"]
    if cfg.dump_walks:
        with _staged(out / "walks.txt") as tmp:
            tmp.write_text("\n".join(" ".join(str(n) for n in w) for w in walks) + "\n",
                           encoding="utf-8")
        outputs.append("walks.txt")
    return [cfg.base_embedding], sorted(outputs)


def _run_build_ebm(cfg: cfgmod.BuildEbmConfig, out: Path, threads: int, chash: str):
    norms = reprs.load_norms(cfg.norms)
    vocab = corpus.load_vocab(cfg.vocab)
    emb = reprs.build_ebm(norms, vocab, scaling=cfg.scaling)
    with _staged(out / "ebm.vec") as tmp:
        reprs.write_text_vec(emb, tmp)
    return [cfg.norms, cfg.vocab], ["ebm.vec"]


def _run_import_emb(cfg: cfgmod.ImportEmbConfig, out: Path, threads: int, chash: str):
    matrices = reprs.import_embeddings(cfg.path, format=cfg.format, model_name=cfg.model_name)
    name = matrices[0].model_name
    files = []
    for m in matrices:
        fname = f"{name}.vec" if m.layer is None else f"{name}_layer{m.layer:02d}.vec"
        with _staged(out / fname) as tmp:
            reprs.write_text_vec(m, tmp)
        files.append(fname)
    _write_json(out / "import.json", {
        "model": name,
        "format": cfg.format,
        "n_layers": len(matrices) if matrices[0].layer is not None else 0,
        "vocab_size": len(matrices[0].vocab),
        "dim": matrices[0].dim,
        "files": sorted(files),
        "config_hash": chash,
    })
    return [cfg.path], sorted(files + ["import.json"])


def _run_align(cfg: cfgmod.AlignConfig, out: Path, threads: int, chash: str):
    emb = reprs.read_text_vec(cfg.embedding)
    hrf_params = align.HrfParams(**cfg.hrf.model_dump())
    inputs = [cfg.embedding]
    if cfg.mode == "discourse":
        brain = align.read_brain(cfg.brain)
        if brain.kind != "discourse-bold":
            raise CortexencError(
                f"discourse alignment needs a discourse-bold response, got {brain.kind!r}")
        stim = align.load_stimulus(cfg.stimulus,
                                   total_duration=brain.n_samples * brain.tr)
        design = align.discourse_design(stim, emb, tr=brain.tr, n_volumes=brain.n_samples,
                                        dt=cfg.dt, hrf_params=hrf_params, threads=threads)
        targets = brain
        inputs += [cfg.stimulus, cfg.brain]
    elif cfg.mode == "word":
        brain = align.read_brain(cfg.brain)
        words = [ln.strip() for ln in Path(cfg.words).read_text(encoding="utf-8").splitlines()
                 if ln.strip()]
        design, targets = align.word_targets(words, brain, emb)
        inputs += [cfg.words, cfg.brain]
    else:  # eye
        design, targets = align.eye_targets(cfg.eye_table, emb, subject_id=cfg.subject_id)
        inputs += [cfg.eye_table]
    design.meta["config_hash"] = chash
    with _staged(out / "design.npz") as tmp:
        align.save_design(design, tmp)
    with _staged(out / "targets.brn") as tmp:
        align.write_brain(targets, tmp)
    return sorted(inputs), ["design.npz", "targets.brn"]


def _run_encode(cfg: cfgmod.EncodeConfig, out: Path, threads: int, chash: str):
    design = align.load_design(cfg.design)
    targets = align.read_brain(cfg.targets)
    scheme = cfg.scheme or ("contiguous" if targets.kind == "discourse-bold" else "shuffled")
    folds = encode.kfold_split(design.data.shape[0], cfg.K, seed=cfg.seed, scheme=scheme)
    model_name = cfg.model_name or design.meta.get("model") or "model"
    result = encode.crossval_encode(
        design.data, targets.data, folds, lam=cfg.lam,
        subject_id=targets.subject_id, model_name=model_name,
        layer=cfg.layer, mode=cfg.score_mode, config_hash=chash)
    with _staged(out / "result.json") as t1, _staged(out / "result.csv") as t2:
        encode.save_result(result, t1, t2, target_names=targets.target_names)
    return [cfg.design, cfg.targets], ["result.csv", "result.json"]


def _run_compare(cfg: cfgmod.CompareConfig, out: Path, threads: int, chash: str):
    ra = [encode.load_result(p) for p in cfg.results_a]
    rb = [encode.load_result(p) for p in cfg.results_b]
    atlas = stats.load_atlas(cfg.atlas) if cfg.atlas else None
    comp = stats.compare_models(ra, rb, unit=cfg.unit, q=cfg.q, atlas=atlas)
    with _staged(out / "comparison.csv") as t1, _staged(out / "comparison.json") as t2:
        stats.save_comparison(comp, t1, t2, config_hash=chash)
    inputs = list(cfg.results_a) + list(cfg.results_b) + ([cfg.atlas] if cfg.atlas else [])
    return sorted(inputs), ["comparison.csv", "comparison.json"]


def _run_label_map(cfg: cfgmod.LabelMapConfig, out: Path, threads: int, chash: str):
    scores = {}
    inputs = []
    for model, paths in cfg.results.items():
        if not paths:
            raise CortexencError(f"model {model!r} lists no result files")
        scores[model] = stats.subject_mean([encode.load_result(p) for p in paths])
        inputs.extend(paths)
    atlas = stats.load_atlas(cfg.atlas) if cfg.atlas else None
    if cfg.atlas:
        inputs.append(cfg.atlas)
    lm = stats.label_voxels(scores, r_min=cfg.r_min)
    with _staged(out / "label_map.csv") as t1, _staged(out / "label_map.json") as t2:
        stats.save_label_map(lm, t1, t2, atlas=atlas, config_hash=chash)
    return sorted(inputs), ["label_map.csv", "label_map.json"]


def _run_synth(cfg: cfgmod.SynthConfig, out: Path, threads: int, chash: str):
    for sid in cfg.subjects:
        if not sid or os.sep in sid or sid != sid.strip():
            raise CortexencError(f"subject id {sid!r} is not a usable file-name part")
    if len(set(cfg.subjects)) != len(cfg.subjects):
        raise CortexencError("subject ids must be unique")
    spec = synth.SynthSpec(seed=cfg.seed, V=cfg.V, d=cfg.d, n_samples=cfg.n_samples,
                           n_targets=cfg.n_targets, noise_sigma=cfg.noise_sigma)
    docs = synth.gen_corpus(spec, n_clusters=cfg.n_clusters, p_in=cfg.p_in,
                            p_out=cfg.p_out, n_tokens=cfg.n_tokens,
                            sentence_length=cfg.sentence_length)
    latent = synth.latent_embedding(spec, n_clusters=cfg.n_clusters, jitter=cfg.jitter)
    words, X = synth.sample_word_rows(latent, cfg.n_samples, cfg.seed)
    W0 = synth.gen_weights(cfg.d, cfg.n_targets, cfg.seed)
    signal_sd = float((X @ W0).std())
    sigma = cfg.noise_sigma * signal_sd if cfg.relative_noise else cfg.noise_sigma
    ceiling = synth.theoretical_ceiling(X, W0, sigma)

    with _staged(out / "corpus.txt") as tmp:
        synth.write_corpus(docs, tmp)
    with _staged(out / "latent.vec") as tmp:
        reprs.write_text_vec(latent, tmp)
    with _staged(out / "words.txt") as tmp:
        tmp.write_text("\n".join(words) + "\n", encoding="utf-8")
    with _staged(out / "norms.tsv") as tmp:
        reprs.save_norms(synth.gen_norms(latent.vocab, cfg.seed, coverage=cfg.norm_coverage), tmp)
    with _staged(out / "eye.tsv") as tmp:
        synth.write_eye_table(synth.gen_eye_table(words, cfg.seed), tmp)
    with _staged(out / "stimulus.tsv") as tmp:
        events = synth.gen_stimulus_events(words)
        align.save_stimulus(align.StimulusSequence(
            events=events, total_duration=events[-1][1] + events[-1][2]), tmp)
    outputs = ["corpus.txt", "eye.tsv", "latent.vec", "norms.tsv", "stimulus.tsv", "words.txt"]
    for i, sid in enumerate(cfg.subjects):
        resp = synth.gen_brain(X, W0, sigma, seed=cfg.seed + i, subject_id=sid)
        fname = f"brain_{sid}.brn"
        with _staged(out / fname) as tmp:
            align.write_brain(resp, tmp)
        outputs.append(fname)
    _write_json(out / "synth.json", {
        "seed": cfg.seed,
        "V": cfg.V,
        "d": cfg.d,
        "n_samples": cfg.n_samples,
        "n_targets": cfg.n_targets,
        "subjects": list(cfg.subjects),
        "noise_sigma_used": sigma,
        "signal_sd": signal_sd,
        "ceiling_mean": float(ceiling.mean()),
        "config_hash": chash,
    })
    outputs.append("synth.json")
    return [], sorted(outputs)


def _run_report(cfg: cfgmod.ReportConfig, out: Path, threads: int, chash: str):
    if not cfg.results:
        raise CortexencError("report needs at least one result file")
    loaded = [(p, encode.load_result(p)) for p in cfg.results]

    tally = Counter(res.n_targets for _, res in loaded)
    expected = tally.most_common(1)[0][0]
    offenders = [f"{res.subject_id}/{res.model_name} ({p}): {res.n_targets} targets"
                 for p, res in loaded if res.n_targets != expected]
    if offenders:
        raise CortexencError(
            f"inconsistent target sets (expected {expected}): " + "; ".join(offenders))

    # group subject results per (model, layer)
    groups: dict[tuple[str, int | None], list] = {}
    for _, res in loaded:
        groups.setdefault((res.model_name, res.layer), []).append(res)

    models = sorted({m for m, _ in groups})
    best_layer: dict[str, int] = {}
    layer_rows = []
    for model in models:
        layered = sorted((lay, rs) for (m, lay), rs in groups.items()
                         if m == model and lay is not None)
        if not layered:
            continue
        means = [float(stats.subject_mean(rs).mean()) for _, rs in layered]
        best = layered[int(np.argmax(means))][0]
        best_layer[model] = best
        for (lay, _), mean in zip(layered, means):
            layer_rows.append((model, lay, mean, int(lay == best)))
    with _staged(out / "layers.csv") as tmp:
        lines = ["model,layer,mean_r,best"]
        lines += [f"{m},{lay},{mean!r},{b}" for m, lay, mean, b in layer_rows]
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")

    # per-network table from each model's representative results: the
    # layer-free group when present, otherwise the best layer's group
    atlas = stats.load_atlas(cfg.atlas) if cfg.atlas else None
    network_rows = []
    for model in models:
        rep = groups.get((model, None)) or groups[(model, best_layer[model])]
        mean_r = stats.subject_mean(rep)
        if atlas is None:
            network_rows.append(("all", model, float(mean_r.mean())))
            continue
        by_network: dict[str, list[float]] = {}
        for t, roi in atlas.target_roi.items():
            if t < mean_r.shape[0]:
                net = atlas.network_of(roi) or atlas.roi_names[roi]
                by_network.setdefault(net, []).append(float(mean_r[t]))
        for net in sorted(by_network):
            network_rows.append((net, model, float(np.mean(by_network[net]))))
    network_rows.sort(key=lambda row: (row[0], row[1]))
    with _staged(out / "networks.csv") as tmp:
        lines = ["network,model,mean_r"]
        lines += [f"{net},{m},{mean!r}" for net, m, mean in network_rows]
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")

    _write_json(out / "report.json", {
        "models": models,
        "subjects": sorted({res.subject_id for _, res in loaded}),
        "n_results": len(loaded),
        "n_targets": expected,
        "best_layer": best_layer,
        "config_hash": chash,
    })
    inputs = list(cfg.results) + ([cfg.atlas] if cfg.atlas else [])
    return sorted(inputs), ["layers.csv", "networks.csv", "report.json"]


STAGES = {
    "build-cooc": (cfgmod.BuildCoocConfig, _run_build_cooc),
    "build-lsm": (cfgmod.BuildLsmConfig, _run_build_lsm),
    "build-ntm": (cfgmod.BuildNtmConfig, _run_build_ntm),
    "build-ebm": (cfgmod.BuildEbmConfig, _run_build_ebm),
    "import-emb": (cfgmod.ImportEmbConfig, _run_import_emb),
    "align": (cfgmod.AlignConfig, _run_align),
    "encode": (cfgmod.EncodeConfig, _run_encode),
    "compare": (cfgmod.CompareConfig, _run_compare),
    "label-map": (cfgmod.LabelMapConfig, _run_label_map),
    "synth": (cfgmod.SynthConfig, _run_synth),
    "report": (cfgmod.ReportConfig, _run_report),
}


def run_stage(stage: str, config, out_dir, threads: int | None = None,
              seed: int | None = None) -> dict:
    """Validate, execute, and manifest one pipeline stage.

    `config` may be a dict (validated here; unknown keys rejected) or an
    already-built config model. `seed` and `threads` override the config and
    defaults; the config_hash is taken after overrides so the recorded hash
    always matches what actually ran.
    """
    if stage not in STAGES:
        raise CortexencError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}")
    cls, fn = STAGES[stage]
    try:
        cfg = config if isinstance(config, cls) else cls.model_validate(config)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "config"
        raise SchemaError(f"{stage} config: {loc}: {first['msg']}") from e
    if seed is not None:
        if "seed" in cls.model_fields:
            cfg = cfg.model_copy(update={"seed": seed})
        else:
            logger.warning("stage %s takes no seed; ignoring --seed %d", stage, seed)
    threads = int(threads) if threads else 1
    if threads < 1:
        raise CortexencError("threads must be >= 1")
    chash = cfgmod.config_hash(cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    inputs, outputs = fn(cfg, out, threads, chash)
    manifest = {
        "stage": stage,
        "version": __version__,
        "config_hash": chash,
        "out_dir": str(out),
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": round(time.perf_counter() - t0, 6),
    }
    _write_json(out / f"{stage}.manifest.json", manifest)
    return manifest
