"""Stage orchestration: config validation, hashing, manifests, reruns."""

import json
from pathlib import Path

import numpy as np
import pytest

from cortexenc import align, reprs
from cortexenc.config import (
    BuildLsmConfig,
    EncodeConfig,
    SynthConfig,
    config_hash,
)
from cortexenc.errors import CortexencError, SchemaError
from cortexenc.pipeline import STAGES, run_stage

SYNTH_CFG = {"seed": 11, "V": 40, "d": 4, "n_samples": 36, "n_targets": 6,
             "n_tokens": 3000, "subjects": ["s1", "s2"]}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One synthetic workspace shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("pipe")
    run_stage("synth", SYNTH_CFG, root / "synth")
    run_stage("build-lsm", {"corpus": str(root / "synth" / "corpus.txt"), "dim": 8},
              root / "lsm")
    return root


# ---------------------------------------------------------------- configs

def test_unknown_config_key_rejected():
    with pytest.raises(SchemaError, match="bogus"):
        run_stage("synth", {"seed": 1, "bogus": 3}, "/tmp/should-not-be-written")


def test_missing_required_key_rejected():
    with pytest.raises(SchemaError, match="corpus"):
        run_stage("build-lsm", {"dim": 10}, "/tmp/should-not-be-written")


def test_unknown_stage():
    with pytest.raises(CortexencError, match="unknown stage"):
        run_stage("frobnicate", {}, "/tmp/x")


def test_config_hash_ignores_key_order_and_fills_defaults():
    a = BuildLsmConfig.model_validate({"corpus": "c.txt", "dim": 300})
    b = BuildLsmConfig.model_validate({"dim": 300, "corpus": "c.txt"})
    c = BuildLsmConfig.model_validate({"corpus": "c.txt"})  # dim defaults to 300
    assert config_hash(a) == config_hash(b) == config_hash(c)
    d = BuildLsmConfig.model_validate({"corpus": "c.txt", "dim": 299})
    assert config_hash(d) != config_hash(a)


def test_encode_config_accepts_lambda_alias():
    cfg = EncodeConfig.model_validate({"design": "d", "targets": "t", "lambda": 0.5})
    assert cfg.lam == 0.5
    # the alias spelling is what lands in the canonical JSON
    assert EncodeConfig.model_validate({"design": "d", "targets": "t", "lam": 0.5}).lam == 0.5
    assert config_hash(cfg) == config_hash(
        EncodeConfig.model_validate({"design": "d", "targets": "t", "lam": 0.5}))


def test_align_config_mode_field_rules():
    from cortexenc.config import AlignConfig
    with pytest.raises(ValueError, match="requires"):
        AlignConfig.model_validate({"mode": "discourse", "embedding": "e.vec",
                                    "stimulus": "s.tsv"})  # brain missing
    with pytest.raises(ValueError, match="does not use"):
        AlignConfig.model_validate({"mode": "eye", "embedding": "e.vec",
                                    "eye_table": "t.tsv", "stimulus": "s.tsv"})


def test_seed_override_changes_hash_and_output(tmp_path):
    m1 = run_stage("synth", SYNTH_CFG, tmp_path / "a")
    m2 = run_stage("synth", SYNTH_CFG, tmp_path / "b", seed=99)
    assert m1["config_hash"] != m2["config_hash"]
    a = (tmp_path / "a" / "corpus.txt").read_bytes()
    b = (tmp_path / "b" / "corpus.txt").read_bytes()
    assert a != b


def test_seed_override_on_seedless_stage_is_ignored(ws, tmp_path):
    cfg = {"norms": str(ws / "synth" / "norms.tsv"), "vocab": str(ws / "lsm" / "vocab.tsv")}
    m = run_stage("build-ebm", cfg, tmp_path, seed=123)
    assert m["config_hash"] == run_stage("build-ebm", cfg, tmp_path)["config_hash"]


# ---------------------------------------------------------------- manifests

def test_manifest_contents(ws):
    manifest = json.loads((ws / "lsm" / "build-lsm.manifest.json").read_text())
    assert manifest["stage"] == "build-lsm"
    assert manifest["inputs"] == [str(ws / "synth" / "corpus.txt")]
    assert manifest["outputs"] == ["lsm.vec", "vocab.tsv"]
    assert len(manifest["config_hash"]) == 64
    assert manifest["wall_time_s"] >= 0
    # complete in both directions: listed files exist, existing files are listed
    on_disk = {p.name for p in (ws / "lsm").iterdir()}
    assert on_disk == set(manifest["outputs"]) | {"build-lsm.manifest.json"}


def test_no_temp_files_left_behind(ws):
    for d in (ws / "synth", ws / "lsm"):
        leftovers = [p.name for p in d.iterdir() if ".tmp" in p.name]
        assert leftovers == []


def test_failed_stage_writes_nothing(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_stage("build-lsm", {"corpus": str(tmp_path / "no-such.txt")}, tmp_path / "out")
    out = tmp_path / "out"
    assert not out.exists() or list(out.iterdir()) == []


def test_config_hash_embedded_in_artifacts(ws, tmp_path):
    m = run_stage("align", {"mode": "word", "embedding": str(ws / "lsm" / "lsm.vec"),
                            "words": str(ws / "synth" / "words.txt"),
                            "brain": str(ws / "synth" / "brain_s1.brn")}, tmp_path / "al")
    design = align.load_design(tmp_path / "al" / "design.npz")
    assert design.meta["config_hash"] == m["config_hash"]

    m2 = run_stage("encode", {"design": str(tmp_path / "al" / "design.npz"),
                              "targets": str(tmp_path / "al" / "targets.brn"), "K": 4},
                   tmp_path / "enc")
    res = json.loads((tmp_path / "enc" / "result.json").read_text())
    assert res["config_hash"] == m2["config_hash"]


# ---------------------------------------------------------------- determinism

def _artifacts(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())
            if p.is_file() and not p.name.endswith(".manifest.json")}


def test_rerun_is_byte_identical(tmp_path):
    run_stage("synth", SYNTH_CFG, tmp_path / "a")
    run_stage("synth", SYNTH_CFG, tmp_path / "b")
    assert _artifacts(tmp_path / "a") == _artifacts(tmp_path / "b")


def test_thread_count_does_not_change_bytes(ws, tmp_path):
    corpus = str(ws / "synth" / "corpus.txt")
    run_stage("build-lsm", {"corpus": corpus, "dim": 8}, tmp_path / "t1", threads=1)
    run_stage("build-lsm", {"corpus": corpus, "dim": 8}, tmp_path / "t4", threads=4)
    assert _artifacts(tmp_path / "t1") == _artifacts(tmp_path / "t4")

    ntm_cfg = {"base_embedding": str(tmp_path / "t1" / "lsm.vec"), "knn_k": 5,
               "dim": 6, "walks_per_node": 3, "walk_length": 12, "dump_walks": True}
    run_stage("build-ntm", ntm_cfg, tmp_path / "n1", threads=1)
    run_stage("build-ntm", ntm_cfg, tmp_path / "n8", threads=8)
    assert _artifacts(tmp_path / "n1") == _artifacts(tmp_path / "n8")


def test_rerun_into_same_dir_overwrites_cleanly(tmp_path):
    run_stage("synth", SYNTH_CFG, tmp_path)
    before = _artifacts(tmp_path)
    run_stage("synth", SYNTH_CFG, tmp_path)
    assert _artifacts(tmp_path) == before


# ---------------------------------------------------------------- stage behavior

def test_walks_dump_matches_walk_count(ws, tmp_path):
    run_stage("build-ntm", {"base_embedding": str(ws / "lsm" / "lsm.vec"), "knn_k": 5,
                            "dim": 6, "walks_per_node": 3, "walk_length": 12,
                            "dump_walks": True}, tmp_path)
    lines = (tmp_path / "walks.txt").read_text().splitlines()
    emb = reprs.read_text_vec(ws / "lsm" / "lsm.vec")
    assert len(lines) == 3 * len(emb.vocab)
    lengths = {len(ln.split()) for ln in lines}
    assert lengths == {12}


def test_import_emb_layer_files(ws, tmp_path):
    emb = reprs.read_text_vec(ws / "lsm" / "lsm.vec")
    table = tmp_path / "m.embl"
    rng = np.random.default_rng(0)
    reprs.write_layer_table(table, emb.vocab,
                            [rng.standard_normal((len(emb.vocab), 5)) for _ in range(3)])
    m = run_stage("import-emb", {"path": str(table), "format": "per-layer-table",
                                 "model_name": "nlm"}, tmp_path / "imp")
    assert m["outputs"] == ["import.json", "nlm_layer01.vec", "nlm_layer02.vec",
                            "nlm_layer03.vec"]
    info = json.loads((tmp_path / "imp" / "import.json").read_text())
    assert info["n_layers"] == 3 and info["model"] == "nlm"


def test_encode_default_scheme_matches_target_kind(ws, tmp_path):
    run_stage("align", {"mode": "word", "embedding": str(ws / "lsm" / "lsm.vec"),
                        "words": str(ws / "synth" / "words.txt"),
                        "brain": str(ws / "synth" / "brain_s1.brn")}, tmp_path / "al")
    base = {"design": str(tmp_path / "al" / "design.npz"),
            "targets": str(tmp_path / "al" / "targets.brn"), "K": 4}
    run_stage("encode", base, tmp_path / "default")
    run_stage("encode", {**base, "scheme": "shuffled"}, tmp_path / "explicit")
    # word-level targets shuffle by default; only the config hash may differ
    csv = lambda d: (d / "result.csv").read_bytes()  # noqa: E731
    assert csv(tmp_path / "default") == csv(tmp_path / "explicit")
    run_stage("encode", {**base, "scheme": "contiguous"}, tmp_path / "contig")
    assert csv(tmp_path / "contig") != csv(tmp_path / "default")


def test_synth_rejects_bad_subject_ids(tmp_path):
    with pytest.raises(CortexencError, match="file-name"):
        run_stage("synth", {**SYNTH_CFG, "subjects": ["a/b"]}, tmp_path)
    with pytest.raises(CortexencError, match="unique"):
        run_stage("synth", {**SYNTH_CFG, "subjects": ["s1", "s1"]}, tmp_path)


@pytest.fixture(scope="module")
def encoded(ws, tmp_path_factory):
    """Encode two subjects under two models; returns result-file paths."""
    root = tmp_path_factory.mktemp("enc")
    paths = {}
    for model, vec in (("lsm", ws / "lsm" / "lsm.vec"),
                       ("latent", ws / "synth" / "latent.vec")):
        for sid in ("s1", "s2"):
            al = root / f"al-{model}-{sid}"
            run_stage("align", {"mode": "word", "embedding": str(vec),
                                "words": str(ws / "synth" / "words.txt"),
                                "brain": str(ws / "synth" / f"brain_{sid}.brn")}, al)
            enc = root / f"enc-{model}-{sid}"
            run_stage("encode", {"design": str(al / "design.npz"),
                                 "targets": str(al / "targets.brn"), "K": 4}, enc)
            paths[(model, sid)] = str(enc / "result.json")
    return paths


def test_compare_stage(encoded, tmp_path):
    m = run_stage("compare", {
        "results_a": [encoded[("latent", "s1")], encoded[("latent", "s2")]],
        "results_b": [encoded[("lsm", "s1")], encoded[("lsm", "s2")]],
    }, tmp_path)
    comp = json.loads((tmp_path / "comparison.json").read_text())
    assert comp["model_a"] == "latent" and comp["model_b"] == "lsm"
    assert comp["config_hash"] == m["config_hash"]
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0] == "unit,t,p_raw,p_adj,rejected"
    assert len(lines) == 1 + SYNTH_CFG["n_targets"]


def test_label_map_stage(encoded, tmp_path):
    run_stage("label-map", {"results": {
        "latent": [encoded[("latent", "s1")], encoded[("latent", "s2")]],
        "lsm": [encoded[("lsm", "s1")], encoded[("lsm", "s2")]],
    }}, tmp_path)
    lm = json.loads((tmp_path / "label_map.json").read_text())
    assert lm["n_targets"] == SYNTH_CFG["n_targets"]
    # the generating embedding should dominate the noisy reconstruction
    assert lm["counts"].get("latent", 0) > lm["counts"].get("lsm", 0)


def test_report_stage(encoded, tmp_path):
    m = run_stage("report", {"results": list(encoded.values())}, tmp_path)
    assert m["outputs"] == ["layers.csv", "networks.csv", "report.json"]
    net = (tmp_path / "networks.csv").read_text().splitlines()
    assert net[0] == "network,model,mean_r"
    rows = dict()
    for line in net[1:]:
        network, model, r = line.split(",")
        assert network == "all"
        rows[model] = float(r)
    assert set(rows) == {"latent", "lsm"}
    assert rows["latent"] > rows["lsm"]
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["subjects"] == ["s1", "s2"] and rep["n_results"] == 4


def test_report_rejects_inconsistent_targets(encoded, tmp_path):
    from cortexenc import encode as enc
    short = enc.EncodingResult(
        subject_id="s3", model_name="lsm", per_target_r=np.zeros(3),
        degenerate_flags=np.zeros(3, dtype=bool), lam=1.0, K=4, seed=0)
    bad = tmp_path / "short.json"
    enc.save_result(short, bad)
    with pytest.raises(CortexencError, match="s3/lsm"):
        run_stage("report", {"results": list(encoded.values()) + [str(bad)]}, tmp_path)


def test_report_layer_table_marks_best(encoded, tmp_path, ws):
    # re-tag scaled copies of one result as 12 layers of a layered model,
    # peaking at layer 8
    from cortexenc import encode as enc
    base = enc.load_result(encoded[("latent", "s1")])
    files = []
    for layer in range(1, 13):
        scale = 1.0 - abs(layer - 8) / 12.0
        res = enc.EncodingResult(
            subject_id="s1", model_name="nlm", per_target_r=base.per_target_r * scale,
            degenerate_flags=base.degenerate_flags, lam=1.0, K=4, seed=0, layer=layer)
        p = tmp_path / f"layer{layer}.json"
        enc.save_result(res, p)
        files.append(str(p))
    run_stage("report", {"results": files}, tmp_path / "rep")
    lines = (tmp_path / "rep" / "layers.csv").read_text().splitlines()
    assert lines[0] == "model,layer,mean_r,best"
    assert len(lines) == 13
    marks = {int(line.split(",")[1]): int(line.split(",")[3]) for line in lines[1:]}
    assert marks == {lay: int(lay == 8) for lay in range(1, 13)}
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert rep["best_layer"] == {"nlm": 8}


def test_report_single_subject_equals_own_means(encoded, tmp_path):
    # an atlas whose ROIs carry no network labels falls back to per-ROI rows
    atlas = tmp_path / "atlas.tsv"
    atlas.write_text("target\troi_id\troi_name\tnetwork\n" +
                     "".join(f"{t}\t{1 if t < 3 else 2}\t{'IFG' if t < 3 else 'STG'}\t\n"
                             for t in range(6)))
    from cortexenc import encode as enc
    res = enc.load_result(encoded[("lsm", "s1")])
    run_stage("report", {"results": [encoded[("lsm", "s1")]], "atlas": str(atlas)},
              tmp_path / "rep")
    rows = {}
    for line in (tmp_path / "rep" / "networks.csv").read_text().splitlines()[1:]:
        name, model, r = line.split(",")
        rows[name] = float(r)
    assert rows["IFG"] == pytest.approx(res.per_target_r[:3].mean(), abs=1e-15)
    assert rows["STG"] == pytest.approx(res.per_target_r[3:].mean(), abs=1e-15)


def test_report_opposite_subjects_cancel(tmp_path):
    from cortexenc import encode as enc
    rng = np.random.default_rng(9)
    r = rng.uniform(-0.5, 0.5, 5)
    for sid, sign in (("p", 1.0), ("q", -1.0)):
        res = enc.EncodingResult(
            subject_id=sid, model_name="m", per_target_r=sign * r,
            degenerate_flags=np.zeros(5, dtype=bool), lam=1.0, K=3, seed=0)
        enc.save_result(res, tmp_path / f"{sid}.json")
    run_stage("report", {"results": [str(tmp_path / "p.json"), str(tmp_path / "q.json")]},
              tmp_path / "rep")
    line = (tmp_path / "rep" / "networks.csv").read_text().splitlines()[1]
    assert float(line.split(",")[2]) == 0.0


def test_every_stage_registered():
    assert sorted(STAGES) == ["align", "build-cooc", "build-ebm", "build-lsm",
                              "build-ntm", "compare", "encode", "import-emb",
                              "label-map", "report", "synth"]
