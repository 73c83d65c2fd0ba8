import os

import numpy as np
import pytest

from oracles import recount
from vcnn.cli import (EXIT_DATA, EXIT_OK, EXIT_USAGE, ConfigError, LockError, Pipeline, StageError,
                      compute_metrics, defaults_text, emit_report, error_taxonomy, main,
                      output_lock, parse_config)
from vcnn.ingest import DatasetManifest, box_mesh, sphere_mesh, write_manifest, write_off

SMALL = """
[synth]
train_per_class = 12
test_per_class = 4
resolution = 14
[design]
conv_k = 2,4 ; 2,4
fc_k = 4,8
samples = 30
max_samples = 500
[train]
epochs = 2
[refine]
trees = 5
"""


def write_cfg(tmp_path, text=SMALL):
    p = tmp_path / "cfg.ini"
    p.write_text(text)
    return str(p)


def test_metrics_hand_example():
    y = np.array([0] * 10 + [1] * 40)
    p = y.copy()
    p[0] = 1  # class A: 9/10
    p[10:30] = 0  # class B: 20/40
    m = compute_metrics(p, y, 2)
    assert m.aca == pytest.approx(0.70, abs=1e-15)
    assert m.aia == pytest.approx(0.58, abs=1e-15)
    assert (m.aca, m.aia) == recount(p, y, 2)


def test_metrics_all_correct_and_errors():
    y = np.arange(6) % 3
    m = compute_metrics(y, y, 3)
    assert m.aca == m.aia == 1.0
    with pytest.raises(ValueError, match="class 3"):
        compute_metrics(y, y, 4)
    with pytest.raises(ValueError):
        compute_metrics(y[:-1], y, 3)


def test_metrics_random_recount():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = int(rng.integers(2, 8))
        y = np.concatenate([np.arange(c), rng.integers(0, c, 40)])
        p = rng.integers(0, c, len(y))
        m = compute_metrics(p, y, c)
        aca, aia = recount(p, y, c)
        assert m.aca == pytest.approx(aca, abs=1e-15) and m.aia == pytest.approx(aia, abs=1e-15)


def test_error_taxonomy_partitions_errors():
    y = np.array([0, 0, 1, 1, 2, 2, 0])
    base = np.array([1, 1, 0, 1, 2, 0, 0])
    ref = np.array([0, 1, 1, 0, 2, 0, 0])
    routes = ["pure_leaf", "forest", "forest", "forest", "pure_set", "pure_set", "pure_leaf"]
    t = error_taxonomy(y, base, ref, routes)
    assert t == {"analyzed_errors": 3, "pure_leaf_corrections": 1, "forest_corrections": 1,
                 "residual_errors": 1, "introduced": 1}
    assert t["pure_leaf_corrections"] + t["forest_corrections"] + t["residual_errors"] == t["analyzed_errors"]


def test_config_defaults_and_overrides():
    cfg = parse_config("")
    assert cfg.seed == 0 and cfg.train.epochs == 10 and cfg.eta == 8 and cfg.refine_on
    cfg = parse_config("[run]\nseed = 4\n[refine]\nzeta = 0.5\n", {"run": {"refine": "off"}})
    assert cfg.seed == 4 and cfg.zeta == 0.5 and not cfg.refine_on
    assert cfg.train.seed == 4 + 2000 and cfg.forest.seed == 4 + 4000
    # the documented defaults are themselves a valid config
    assert parse_config(defaults_text()).raw == parse_config("").raw


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[train]\nepochs = many\n", "[run]\nrefine = maybe\n",
                                  "[data]\nsource = manifest\n", "[train]\nbogus = 1\n", "garbage"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_stage_keys_track_upstream_config():
    a, b = parse_config(""), parse_config("[train]\nepochs = 3\n")
    assert a.stage_key("design") == b.stage_key("design")
    assert a.stage_key("train") != b.stage_key("train")
    assert a.stage_key("refine") != b.stage_key("refine")


def test_missing_prerequisite_names_stage(tmp_path):
    cfg = parse_config(SMALL, {"run": {"out": str(tmp_path / "o")}})
    with pytest.raises(StageError, match="'train' stage"):
        Pipeline(cfg).run("analyze") if os.makedirs(tmp_path / "o/voxelize", exist_ok=True) or \
            (tmp_path / "o/voxelize/classes.txt").write_text("a\n") else None


def test_emit_report_empty_dir(tmp_path):
    with pytest.raises(StageError):
        emit_report(str(tmp_path))


def test_lock_excludes_second_owner(tmp_path):
    with output_lock(str(tmp_path)):
        with pytest.raises(LockError):
            with output_lock(str(tmp_path)):
                pass
    # stale lock from a dead process is reclaimed
    (tmp_path / ".lock").write_text("999999999")
    with output_lock(str(tmp_path)):
        pass
    assert not (tmp_path / ".lock").exists()


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = str(tmp_path / "o")
    assert main(["bogus", "--config", cfg]) == EXIT_USAGE
    assert main(["synth", "--config", str(tmp_path / "missing.ini")]) == EXIT_USAGE
    assert main(["train", "--config", cfg, "--out", out, "-q"]) == EXIT_DATA
    bad = write_cfg(tmp_path, "[data]\nsource = manifest\nmanifest = nothere.tsv\n")
    assert main(["voxelize", "--config", bad, "--out", out, "-q"]) == EXIT_DATA
    assert main(["synth", "--config", cfg, "--out", out, "--threads", "0"]) == EXIT_USAGE


def test_full_pipeline_small(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert main(["all", "--config", cfg, "--out", str(out), "--seed", "1", "-q"]) == EXIT_OK
    for rel in ["synth/manifest.tsv", "voxelize/train.npz", "design/curves.csv", "design/report.txt",
                "train/checkpoint.vcnn", "analyze/cf.csv", "analyze/partition.txt", "refine/model.vcnr",
                "eval/metrics.txt", "eval/predictions.tsv", "report/summary.txt",
                "report/per_class.csv", "report/bic_curves.csv", "report/architecture.csv"]:
        assert (out / rel).exists(), rel
    metrics = (out / "eval/metrics.txt").read_text()
    assert "[baseline]" in metrics and "[refined]" in metrics and "[errors]" in metrics
    summary = (out / "report/summary.txt").read_text()
    assert "Confusion sets" in summary and "VoxNet" in summary
    assert "class,baseline,refined" in summary or "per_class.csv" in summary
    # the predictions log recounts to the reported metrics
    rows = [l.split("\t") for l in (out / "eval/predictions.tsv").read_text().splitlines()[1:]]
    names = sorted({r[1] for r in rows})
    y = [names.index(r[1]) for r in rows]
    base = [names.index(r[2]) for r in rows]
    aca, aia = recount(base, y, len(names))
    assert f"aca = {aca:.6f}" in metrics and f"aia = {aia:.6f}" in metrics
    # the refine switch: off emits only the baseline row
    assert main(["eval", "--config", cfg, "--out", str(out), "--seed", "1", "--refine", "off", "-q"]) == 0
    assert "[refined]" not in (out / "eval/metrics.txt").read_text()
    # re-running an up-to-date stage is a no-op
    cfg_obj = parse_config(SMALL, {"run": {"out": str(out), "seed": "1"}})
    before = (out / "train/checkpoint.vcnn").stat().st_mtime_ns
    assert Pipeline(cfg_obj).run("train") is False
    assert (out / "train/checkpoint.vcnn").stat().st_mtime_ns == before


def test_pipeline_reruns_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    texts = []
    for name in ("a", "b"):
        assert main(["all", "--config", cfg, "--out", str(tmp_path / name), "--seed", "1", "-q"]) == 0
        texts.append((tmp_path / name / "eval/metrics.txt").read_bytes())
    assert texts[0] == texts[1]


def test_manifest_source_with_meshes(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    entries = []
    for i in range(4):
        for cls, mesh in (("box", box_mesh((0, 0, 0), (1, 1 + i * 0.2, 1))), ("ball", sphere_mesh(1.0, 1))):
            for split in ("train", "test"):
                name = f"{cls}_{split}_{i}.off"
                (data / name).write_text(write_off(mesh))
                entries.append((name, 0 if cls == "ball" else 1, split))
    write_manifest(DatasetManifest(entries, ["ball", "box"]), data / "m.tsv")
    cfg = write_cfg(tmp_path, "[data]\nsource = manifest\nmanifest = data/m.tsv\nresolution = 12\n"
                              "[design]\nmode = fixed\nfixed_layers = 3:2\nfixed_fc = 4\n"
                              "[train]\nepochs = 1\n[refine]\ntrees = 3\n")
    out = tmp_path / "o"
    assert main(["all", "--config", cfg, "--out", str(out), "-q"]) == 0
    assert (out / "voxelize/train.npz").exists() and not (out / "synth").exists()
    assert "fixed" in (out / "design/report.txt").read_text()
    assert main(["synth", "--config", cfg, "--out", str(out), "-q"]) == EXIT_USAGE
