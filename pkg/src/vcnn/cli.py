"""Pipeline orchestration: config, stages, metrics and reports, plus the ``vcnn`` entry point.

Stages read their inputs from, and write their artifacts to, one output directory::

    synth/     manifest.tsv + binvox grids
    voxelize/  manifest.tsv + train/test stacks
    design/    report.txt, curves.csv, architecture.json, filters.npz
    train/     checkpoint.vcnn, history.csv
    analyze/   cf.csv, partition.txt
    refine/    model.vcnr
    eval/      metrics.txt, predictions.tsv
    report/    summary.txt, per_class.csv, bic_curves.csv, architecture.csv

Every stage directory carries a ``stamp`` file: a hash of the config that
feeds the stage and everything upstream of it.  Re-running a stage whose stamp
matches is a no-op.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .confusion import (ConfusionSetPartition, ScoreMatrix, cf_to_csv, confusion_factor_matrix,
                        spectral_cluster)
from .design import ScreeningConfig, design_network
from .ingest import (BinvoxError, DatasetManifest, ManifestError, OffParseError, SynthSpec,
                     default_recipes, generate_synthetic_dataset, load_grids, load_manifest,
                     write_binvox, write_manifest)
from .network import (CheckpointError, DivergenceError, LayerSpec, NetworkSpec, SpecError,
                      TrainConfig, extract_features, init_weights, load_checkpoint, predict_probs,
                      save_checkpoint, train, voxnet_spec)
from .refine import (ForestConfig, RefineFormatError, build_refine_model, load_refine_model,
                     refine_all, save_refine_model)
from .voxelcore import DTYPE

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

STAGES = ("synth", "voxelize", "design", "train", "analyze", "refine", "eval", "report")

# global seed + offset gives each stochastic stage its own stream
SEED_OFFSETS = {"synth": 0, "design": 1000, "train": 2000, "analyze": 3000, "refine": 4000}

# config sections each stage depends on (its own and everything upstream)
_STAGE_SECTIONS = {
    "synth": ("data", "synth"),
    "voxelize": ("data", "synth"),
    "design": ("data", "synth", "design"),
    "train": ("data", "synth", "design", "train"),
    "analyze": ("data", "synth", "design", "train", "confusion"),
    "refine": ("data", "synth", "design", "train", "confusion", "refine"),
    "eval": ("data", "synth", "design", "train", "confusion", "refine"),
    "report": ("data", "synth", "design", "train", "confusion", "refine"),
}

# section -> key -> (default, help)
DEFAULTS: Dict[str, Dict[str, tuple]] = {
    "data": {
        "source": ("synth", "synth | manifest"),
        "manifest": ("", "TSV manifest (path<TAB>class<TAB>split) when source = manifest"),
        "root": ("", "directory manifest paths are relative to (default: the manifest's directory)"),
        "resolution": ("30", "grid edge length for voxelized meshes"),
        "solid": ("on", "fill mesh interiors when voxelizing (on | off)"),
    },
    "synth": {
        "train_per_class": ("200", "training samples per class"),
        "test_per_class": ("50", "test samples per class"),
        "resolution": ("30", "grid edge length"),
        "flip_noise": ("0.02", "probability of flipping each voxel"),
    },
    "design": {
        "mode": ("bic", "bic (filter counts from BIC valleys) | fixed"),
        "edges": ("3", "candidate filter edges, comma separated"),
        "conv_k": ("4,8,16,32 ; 4,8,16,32", "K grid per conv layer; layers separated by ';'"),
        "fc_k": ("32,64,128", "K grid for the fully connected layer"),
        "epsilon": ("1e-4", "minimum patch variance kept by screening"),
        "top_percent": ("20", "percentage of highest-variance patches kept"),
        "max_samples": ("3000", "cap on screened patches per edge"),
        "fc_epsilon": ("auto", "FC-layer variance floor; auto = epsilon * 27 / FC input dimension"),
        "fc_top_percent": ("100", "top_percent used for the FC-layer screening"),
        "samples": ("200", "training grids used for design (0 = all)"),
        "restarts": ("3", "k-means restarts per K"),
        "max_iter": ("100", "Lloyd iterations per restart"),
        "fixed_layers": ("3:8, 3:16", "mode = fixed: edge:count per conv layer"),
        "fixed_fc": ("32", "mode = fixed: FC width"),
        "filter_scale": ("0.1", "norm of centroid-initialized filters"),
    },
    "train": {
        "learning_rate": ("0.01", "SGD step size"),
        "momentum": ("0.9", "momentum coefficient"),
        "batch_size": ("32", "mini-batch size"),
        "epochs": ("10", "passes over the training split"),
        "lr_decay": ("0.5", "learning-rate multiplier at each decay step"),
        "lr_decay_every": ("10", "epochs between decay steps (0 = never)"),
        "weight_decay": ("1e-4", "L2 coefficient on weights (biases exempt)"),
    },
    "confusion": {
        "k": ("auto", "number of confusion sets, or auto (largest eigengap)"),
        "split": ("train", "split whose soft scores feed the confusion factors"),
    },
    "refine": {
        "zeta": ("auto", "variance threshold, or auto = zeta_fraction x root feature variance"),
        "zeta_fraction": ("0.1", "used when zeta = auto"),
        "eta": ("8", "minimum size of a node that may still split"),
        "trees": ("200", "trees per forest"),
        "max_depth": ("0", "tree depth limit (0 = unlimited)"),
        "features_per_split": ("auto", "features tried per split (auto = sqrt(dim))"),
        "rule": ("tree", "routing: tree (descend by nearest child) | leaf (nearest leaf)"),
    },
    "run": {
        "out": ("vcnn_out", "output directory"),
        "seed": ("0", "global seed; stages add fixed offsets"),
        "threads": ("1", "BLAS threads (1 gives bit-reproducible runs)"),
        "refine": ("on", "eval/report with refinement rows (on | off)"),
    },
}


class ConfigError(ValueError):
    """Malformed config or command line (exit code 1)."""


class StageError(RuntimeError):
    """A prerequisite artifact is missing (exit code 2)."""


class LockError(RuntimeError):
    """Another pipeline holds the output directory (exit code 1)."""


# --------------------------------------------------------------------- config


def _ints(text: str) -> List[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _onoff(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected on|off, got {text!r}")


@dataclass
class PipelineConfig:
    raw: Dict[str, Dict[str, str]]
    out: str
    seed: int
    threads: int
    refine_on: bool
    source: str
    manifest: str
    data_root: str
    resolution: int
    solid: bool
    synth: SynthSpec
    design_mode: str
    edges: List[int]
    conv_k: List[List[int]]
    fc_k: List[int]
    screening: ScreeningConfig
    fc_screening: ScreeningConfig
    fc_epsilon: Optional[float]
    design_samples: int
    restarts: int
    max_iter: int
    fixed_layers: List[tuple]
    fixed_fc: int
    filter_scale: float
    train: TrainConfig
    confusion_k: object
    confusion_split: str
    zeta: Optional[float]
    zeta_fraction: float
    eta: int
    forest: ForestConfig
    rule: str
    config_path: str = ""
    timings: Dict[str, float] = field(default_factory=dict)

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    def stage_key(self, stage: str) -> str:
        """Hash of every config value the stage (and its upstream) depends on."""
        payload = {s: self.raw[s] for s in _STAGE_SECTIONS[stage]}
        payload["seed"] = self.seed
        payload["version"] = __version__
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_config(text: str = "", overrides: Optional[Dict[str, Dict[str, str]]] = None,
                 path: str = "") -> PipelineConfig:
    """Parse ``key = value`` sections over the documented defaults."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    raw = {s: {k: v[0] for k, v in keys.items()} for s, keys in DEFAULTS.items()}
    for section in cp.sections():
        if section not in raw:
            raise ConfigError(f"config: unknown section [{section}]")
        for key, value in cp.items(section):
            if key not in raw[section]:
                raise ConfigError(f"config: unknown key {key!r} in [{section}]")
            raw[section][key] = value.strip()
    for section, kv in (overrides or {}).items():
        raw[section].update({k: str(v) for k, v in kv.items()})
    try:
        return _build(raw, path)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"config: {exc}") from None


def _build(raw, path) -> PipelineConfig:
    d, s, g, t, c, r, run = (raw[k] for k in ("data", "synth", "design", "train", "confusion",
                                              "refine", "run"))
    seed = int(run["seed"])
    if d["source"] not in ("synth", "manifest"):
        raise ConfigError(f"data.source must be synth or manifest, got {d['source']!r}")
    if d["source"] == "manifest" and not d["manifest"]:
        raise ConfigError("data.manifest is required when data.source = manifest")
    manifest = d["manifest"]
    if manifest and path and not os.path.isabs(manifest):
        manifest = os.path.join(os.path.dirname(os.path.abspath(path)), manifest)
    root = d["root"] or (os.path.dirname(manifest) if manifest else "")
    synth = SynthSpec(default_recipes(), int(s["train_per_class"]), int(s["test_per_class"]),
                      int(s["resolution"]), seed + SEED_OFFSETS["synth"], float(s["flip_noise"]))
    if g["mode"] not in ("bic", "fixed"):
        raise ConfigError(f"design.mode must be bic or fixed, got {g['mode']!r}")
    design_seed = seed + SEED_OFFSETS["design"]
    screening = ScreeningConfig(float(g["epsilon"]), float(g["top_percent"]), int(g["max_samples"]),
                                design_seed)
    fc_screening = ScreeningConfig(float(g["epsilon"]), float(g["fc_top_percent"]),
                                   int(g["max_samples"]), design_seed)
    fixed = []
    for item in g["fixed_layers"].split(","):
        if item.strip():
            m, k = item.split(":")
            fixed.append((int(m), int(k)))
    tc = TrainConfig(float(t["learning_rate"]), float(t["momentum"]), int(t["batch_size"]),
                     int(t["epochs"]), float(t["lr_decay"]), int(t["lr_decay_every"]),
                     float(t["weight_decay"]), seed + SEED_OFFSETS["train"])
    k = c["k"].strip().lower()
    k = "auto" if k == "auto" else int(k)
    if c["split"] not in ("train", "test"):
        raise ConfigError("confusion.split must be train or test")
    fps = r["features_per_split"].strip().lower()
    forest = ForestConfig(int(r["trees"]), int(r["max_depth"]), None if fps == "auto" else int(fps),
                          seed + SEED_OFFSETS["refine"])
    if r["rule"] not in ("tree", "leaf"):
        raise ConfigError("refine.rule must be tree or leaf")
    zeta = None if r["zeta"].strip().lower() == "auto" else float(r["zeta"])
    threads = int(run["threads"])
    if threads < 1:
        raise ConfigError("run.threads must be >= 1")
    return PipelineConfig(
        raw=raw, out=run["out"], seed=seed, threads=threads,
        refine_on=_onoff(run["refine"], "run.refine"), source=d["source"], manifest=manifest,
        data_root=root, resolution=int(d["resolution"]), solid=_onoff(d["solid"], "data.solid"),
        synth=synth, design_mode=g["mode"], edges=_ints(g["edges"]),
        conv_k=[_ints(part) for part in g["conv_k"].split(";") if part.strip()],
        fc_k=_ints(g["fc_k"]), screening=screening, fc_screening=fc_screening,
        fc_epsilon=None if g["fc_epsilon"].strip().lower() == "auto" else float(g["fc_epsilon"]),
        design_samples=int(g["samples"]), restarts=int(g["restarts"]), max_iter=int(g["max_iter"]),
        fixed_layers=fixed, fixed_fc=int(g["fixed_fc"]), filter_scale=float(g["filter_scale"]),
        train=tc, confusion_k=k, confusion_split=c["split"], zeta=zeta,
        zeta_fraction=float(r["zeta_fraction"]), eta=int(r["eta"]), forest=forest, rule=r["rule"],
        config_path=path)


def load_config(path: str, overrides=None) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    return parse_config(text, overrides, path)


def defaults_text() -> str:
    """The default config, one documented key per line (valid config syntax)."""
    lines = []
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        for key, (value, doc) in keys.items():
            lines.append(f"{key} = {value}    # {doc}")
        lines.append("")
    return "\n".join(lines)


# -------------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    per_class: np.ndarray  # accuracy per class
    counts: np.ndarray  # test samples per class
    correct: np.ndarray  # correct predictions per class
    aca: float
    aia: float

    def to_text(self, name: str, class_names: Sequence[str]) -> str:
        out = [f"[{name}]", f"aca = {self.aca:.6f}", f"aia = {self.aia:.6f}",
               f"correct = {int(self.correct.sum())}", f"total = {int(self.counts.sum())}"]
        for cname, acc, k, n in zip(class_names, self.per_class, self.correct, self.counts):
            out.append(f"class.{cname} = {acc:.6f}  # {int(k)}/{int(n)}")
        return "\n".join(out) + "\n"


def compute_metrics(predictions, labels, class_count: int) -> MetricsReport:
    """Average class accuracy (mean of per-class accuracies) and average instance accuracy."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise ValueError("label out of range")
    counts = np.bincount(y, minlength=class_count)
    absent = np.flatnonzero(counts == 0)
    if len(absent):
        raise ValueError(f"class {int(absent[0])} has no samples; ACA is undefined")
    correct = np.bincount(y[p == y], minlength=class_count)
    per_class = correct / counts
    # plain left-to-right summation so the value is reproducible by a hand recount
    aca = sum(float(a) for a in per_class) / class_count
    return MetricsReport(per_class, counts, correct, aca, int(correct.sum()) / int(counts.sum()))


def error_taxonomy(labels, baseline, refined, routes) -> Dict[str, int]:
    """Fate of every baseline error routed into a mixed confusion set.

    The three categories are exclusive and sum to ``analyzed_errors``;
    ``introduced`` counts baseline-correct samples the refinement broke.
    """
    y, b, r = (np.asarray(a) for a in (labels, baseline, refined))
    routes = np.asarray(routes)
    mixed = routes != "pure_set"
    err = mixed & (b != y)
    fixed = err & (r == y)
    out = {
        "analyzed_errors": int(err.sum()),
        "pure_leaf_corrections": int((fixed & (routes == "pure_leaf")).sum()),
        "forest_corrections": int((fixed & (routes == "forest")).sum()),
        "residual_errors": int((err & (r != y)).sum()),
        "introduced": int((mixed & (b == y) & (r != y)).sum()),
    }
    return out


# ------------------------------------------------------------------ plumbing


@contextlib.contextmanager
def output_lock(out_dir: str):
    """Exclusive ownership of ``out_dir``; a lock left by a dead process is reclaimed."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                with open(path) as fh:
                    pid = int(fh.read().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise LockError(f"{out_dir} is locked by process {pid}") from None
            with contextlib.suppress(FileNotFoundError):
                os.unlink(path)
    else:
        raise LockError(f"cannot lock {out_dir}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(path)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _write(path: str, data) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    kw = {} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"}
    with open(path, mode, **kw) as fh:
        fh.write(data)


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


class Pipeline:
    """Runs stages against one output directory."""

    def __init__(self, config: PipelineConfig, log=None):
        self.cfg = config
        self.out = config.out
        self.log = log or (lambda msg: None)

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    # stamps ----------------------------------------------------------------
    def _fresh(self, stage: str, outputs: Sequence[str]) -> bool:
        stamp = self.path(stage, "stamp")
        if not os.path.exists(stamp) or not all(os.path.exists(self.path(stage, o)) for o in outputs):
            return False
        return _read(stamp).strip() == self.cfg.stage_key(stage)

    def _stamp(self, stage: str) -> None:
        _write(self.path(stage, "stamp"), self.cfg.stage_key(stage) + "\n")

    def _need(self, stage: str, artifact: str) -> str:
        p = self.path(stage, artifact)
        if not os.path.exists(p):
            raise StageError(f"missing {stage}/{artifact}: run the '{stage}' stage first")
        return p

    def run(self, stage: str, force: bool = False) -> bool:
        """Run one stage; returns False when it was already up to date."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        outputs = {"synth": ["manifest.tsv"], "voxelize": ["train.npz", "test.npz"],
                   "design": ["architecture.json", "filters.npz"], "train": ["checkpoint.vcnn"],
                   "analyze": ["partition.txt", "cf.csv"], "refine": ["model.vcnr"],
                   "eval": ["metrics.txt"], "report": ["summary.txt"]}[stage]
        # eval/report also depend on the refine switch
        if stage in ("eval", "report"):
            outputs = outputs + [f"refine-{'on' if self.cfg.refine_on else 'off'}"]
        if not force and self._fresh(stage, outputs):
            self.log(f"{stage}: up to date")
            return False
        os.makedirs(self.path(stage), exist_ok=True)
        with contextlib.suppress(FileNotFoundError):
            os.unlink(self.path(stage, "stamp"))
        t0 = time.perf_counter()
        getattr(self, f"_stage_{stage}")()
        elapsed = time.perf_counter() - t0
        _write(self.path(stage, "timing.txt"), f"{stage} seconds = {elapsed:.3f}\n")
        if stage in ("eval", "report"):
            for flag in ("on", "off"):
                with contextlib.suppress(FileNotFoundError):
                    os.unlink(self.path(stage, f"refine-{flag}"))
            _write(self.path(stage, f"refine-{'on' if self.cfg.refine_on else 'off'}"), "")
        self._stamp(stage)
        self.log(f"{stage}: done in {elapsed:.1f}s")
        return True

    # data ------------------------------------------------------------------
    def _stage_synth(self):
        cfg = self.cfg
        if cfg.source != "synth":
            raise ConfigError("the synth stage needs data.source = synth")
        manifest, grids = generate_synthetic_dataset(cfg.synth)
        for (rel, _, _), g in zip(manifest.entries, grids):
            full = self.path("synth", rel)
            os.makedirs(os.path.dirname(full), exist_ok=True)
            _write(full, write_binvox(g))
        write_manifest(manifest, self.path("synth", "manifest.tsv"))
        self.log(f"synth: {len(grids)} grids, {len(manifest.class_names)} classes")

    def _source_manifest(self):
        if self.cfg.source == "synth":
            p = self._need("synth", "manifest.tsv")
            return load_manifest(p), self.path("synth")
        if not os.path.exists(self.cfg.manifest):
            raise ManifestError(f"manifest {self.cfg.manifest!r} does not exist")
        return load_manifest(self.cfg.manifest), self.cfg.data_root

    def _stage_voxelize(self):
        manifest, root = self._source_manifest()
        for split in ("train", "test"):
            if not manifest.indices(split):
                raise ManifestError(f"manifest has no {split} entries")
        for split in ("train", "test"):
            grids = load_grids(manifest, root, split, self.cfg.resolution, self.cfg.solid)
            shapes = {g.values.shape for g in grids}
            if len(shapes) != 1:
                raise ManifestError(f"{split} grids have mixed shapes {sorted(shapes)}")
            x = np.stack([g.values for g in grids]).astype(np.uint8)
            y = np.array([g.label for g in grids], dtype=np.int64)
            buf = io.BytesIO()
            np.savez_compressed(buf, x=x, y=y)
            _write(self.path("voxelize", f"{split}.npz"), buf.getvalue())
        # paths rewritten relative to this stage's directory
        here = os.path.abspath(self.path("voxelize"))
        entries = [(os.path.relpath(os.path.abspath(os.path.join(root, p)), here), c, s)
                   for p, c, s in manifest.entries]
        write_manifest(DatasetManifest(entries, manifest.class_names),
                       self.path("voxelize", "manifest.tsv"))
        _write(self.path("voxelize", "classes.txt"), "\n".join(manifest.class_names) + "\n")

    def load_split(self, split: str):
        with np.load(self._need("voxelize", f"{split}.npz")) as z:
            return z["x"].astype(DTYPE), z["y"]

    def class_names(self) -> List[str]:
        return _read(self._need("voxelize", "classes.txt")).split()

    # design ----------------------------------------------------------------
    def _stage_design(self):
        cfg = self.cfg
        x, y = self.load_split("train")
        names = self.class_names()
        if cfg.design_mode == "fixed":
            layers = [LayerSpec("conv3", k, m, True) for m, k in cfg.fixed_layers]
            spec = NetworkSpec(x.shape[1], layers + [LayerSpec("fc", cfg.fixed_fc),
                                                     LayerSpec("output", len(names))], len(names))
            spec.validate()
            filters: Dict[str, np.ndarray] = {}
            report = "# design report\n# mode fixed (no BIC scan)\n" + "".join(
                f"conv{j} edge={m} count={k}\n" for j, (m, k) in enumerate(cfg.fixed_layers, 1))
            report += f"fc count={cfg.fixed_fc}\n"
            curves_rows: List[list] = []
        else:
            rng = np.random.default_rng(cfg.stage_seed("design"))
            idx = np.arange(len(x))
            if 0 < cfg.design_samples < len(x):
                idx = np.sort(rng.choice(len(x), cfg.design_samples, replace=False))
            result = design_network(x[idx], cfg.edges, cfg.conv_k, cfg.fc_k, cfg.screening,
                                    cfg.fc_screening, cfg.restarts, cfg.max_iter, log=self.log,
                                    fc_epsilon=cfg.fc_epsilon)
            spec = result.network_spec(x.shape[1], len(names))
            filters = {f"conv{j}": c for j, c in enumerate(result.centroids, 1)}
            report = result.report()
            curves_rows = []
            for j, layer_curves in enumerate(result.curves, 1):
                for c in layer_curves:
                    curves_rows += [[f"conv{j}", c.edge, k, f"{v:.10g}", int(k == c.valley)]
                                    for k, v in zip(c.ks, c.scores)]
            fc = result.fc_curve
            curves_rows += [["fc", fc.edge, k, f"{v:.10g}", int(k == fc.valley)]
                            for k, v in zip(fc.ks, fc.scores)]
        _write(self.path("design", "report.txt"), report)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "edge", "K", "bic", "is_valley"])
        w.writerows(curves_rows)
        _write(self.path("design", "curves.csv"), buf.getvalue())
        _write(self.path("design", "architecture.json"), json.dumps(spec.to_dict(), indent=1) + "\n")
        buf = io.BytesIO()
        np.savez(buf, **filters)
        _write(self.path("design", "filters.npz"), buf.getvalue())

    def load_spec(self) -> NetworkSpec:
        return NetworkSpec.from_dict(json.loads(_read(self._need("design", "architecture.json"))))

    # training --------------------------------------------------------------
    def _stage_train(self):
        cfg = self.cfg
        spec = self.load_spec()
        x, y = self.load_split("train")
        with np.load(self._need("design", "filters.npz")) as z:
            n_conv = sum(l.kind == "conv3" for l in spec.layers)
            filters = [z[f"conv{j}"] if f"conv{j}" in z.files else None for j in range(1, n_conv + 1)]
        init = init_weights(spec, cfg.stage_seed("train"), filters, cfg.filter_scale)
        weights, history = train(spec, init, x, y, cfg.train, log=self.log)
        save_checkpoint(spec, weights, self.path("train", "checkpoint.vcnn"))
        _write(self.path("train", "history.csv"),
               "epoch,loss\n" + "".join(f"{i},{v:.10g}\n" for i, v in enumerate(history, 1)))

    def load_network(self):
        return load_checkpoint(self._need("train", "checkpoint.vcnn"))

    def _outputs(self, split: str):
        """Network probabilities and FC features for a split, cached per checkpoint."""
        cache = self.path("train", f"outputs-{split}.npz")
        ckpt = self._need("train", "checkpoint.vcnn")
        with open(ckpt, "rb") as fh:
            key = hashlib.sha256(fh.read()).hexdigest()
        if os.path.exists(cache):
            with np.load(cache) as z:
                if str(z["key"]) == key:
                    return z["probs"], z["features"], z["y"]
        spec, weights = self.load_network()
        x, y = self.load_split(split)
        probs = predict_probs(spec, weights, x)
        feats = extract_features(spec, weights, x)
        buf = io.BytesIO()
        np.savez(buf, probs=probs, features=feats, y=y, key=np.array(key))
        _write(cache, buf.getvalue())
        return probs, feats, y

    # analysis --------------------------------------------------------------
    def _stage_analyze(self):
        cfg = self.cfg
        names = self.class_names()
        probs, _, y = self._outputs(cfg.confusion_split)
        cf = confusion_factor_matrix(ScoreMatrix(probs, y))
        partition = spectral_cluster(cf, k=cfg.confusion_k, seed=cfg.stage_seed("analyze"))
        _write(self.path("analyze", "cf.csv"), cf_to_csv(cf, names))
        _write(self.path("analyze", "partition.txt"), partition.to_text(names))

    def load_partition(self) -> ConfusionSetPartition:
        return ConfusionSetPartition.from_text(_read(self._need("analyze", "partition.txt")),
                                               self.class_names())

    def _stage_refine(self):
        cfg = self.cfg
        partition = self.load_partition()
        _, feats, y = self._outputs("train")
        model = build_refine_model(partition, feats, y, cfg.zeta, cfg.eta, cfg.forest,
                                   seed=cfg.stage_seed("refine"), zeta_fraction=cfg.zeta_fraction)
        save_refine_model(model, self.path("refine", "model.vcnr"))
        lines = [f"zeta = {model.zeta:.10g}", f"eta = {model.eta}"]
        for members, root in model.trees.items():
            leaves = root.leaves()
            pure = sum(l.kind == "pure" for l in leaves)
            lines.append(f"set {','.join(self.class_names()[c] for c in members)}: "
                         f"{len(leaves)} leaves ({pure} pure, {len(leaves) - pure} mixed)")
        _write(self.path("refine", "summary.txt"), "\n".join(lines) + "\n")

    # evaluation ------------------------------------------------------------
    def _stage_eval(self):
        cfg = self.cfg
        names = self.class_names()
        probs, feats, y = self._outputs("test")
        base = np.argmax(probs, axis=1)
        rows = [("baseline", base)]
        routes = ["pure_set"] * len(y)
        text = io.StringIO()
        text.write(f"# vcnn metrics; seed = {cfg.seed}\n")
        text.write(compute_metrics(base, y, len(names)).to_text("baseline", names))
        if cfg.refine_on:
            model = load_refine_model(self._need("refine", "model.vcnr"))
            refined, routes = refine_all(model, probs, feats, cfg.rule)
            pure_sets = np.array([r == "pure_set" for r in routes])
            if np.any(refined[pure_sets] != base[pure_sets]):
                raise AssertionError("refinement altered a pure-set prediction")
            rows.append(("refined", refined))
            text.write("\n" + compute_metrics(refined, y, len(names)).to_text("refined", names))
            tax = error_taxonomy(y, base, refined, routes)
            text.write("\n[errors]\n" + "".join(f"{k} = {v}\n" for k, v in tax.items()))
        _write(self.path("eval", "metrics.txt"), text.getvalue())
        buf = io.StringIO()
        buf.write("index\tlabel\tbaseline\trefined\troute\n")
        final = rows[-1][1]
        for i in range(len(y)):
            buf.write(f"{i}\t{names[y[i]]}\t{names[base[i]]}\t{names[final[i]]}\t{routes[i]}\n")
        _write(self.path("eval", "predictions.tsv"), buf.getvalue())

    # report ----------------------------------------------------------------
    def _stage_report(self):
        emit_report(self.out, self.cfg)

    def run_all(self, force: bool = False) -> None:
        stages = STAGES if self.cfg.source == "synth" else STAGES[1:]
        for s in stages:
            if s == "refine" and not self.cfg.refine_on:
                continue
            self.run(s, force)


# --------------------------------------------------------------------- report


def _parse_metrics(text: str) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {}
    section = None
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            out[section] = {}
        elif section is not None:
            k, v = (p.strip() for p in line.split("=", 1))
            out[section][k] = v
    return out


def emit_report(out_dir: str, cfg: Optional[PipelineConfig] = None) -> str:
    """Consolidate whatever stage artifacts exist into ``report/``; returns the summary."""
    present = [s for s in STAGES[:-1] if os.path.isdir(os.path.join(out_dir, s))]
    if not present:
        raise StageError(f"{out_dir} holds no stage artifacts; run a stage first")
    rep = os.path.join(out_dir, "report")
    os.makedirs(rep, exist_ok=True)
    p = lambda *a: os.path.join(out_dir, *a)  # noqa: E731
    s = io.StringIO()
    s.write("VCNN pipeline report\n====================\n\n")
    s.write("CSV files in this directory:\n"
            "  architecture.csv  network,layer,kind,edge,count,output_size  (chosen vs. baseline)\n"
            "  bic_curves.csv    layer,edge,K,bic,is_valley  (one curve per layer and edge)\n"
            "  per_class.csv     class,baseline,refined  (test accuracy per class)\n\n")
    names = _read(p("voxelize", "classes.txt")).split() if os.path.exists(p("voxelize", "classes.txt")) else []

    if os.path.exists(p("design", "architecture.json")):
        spec = NetworkSpec.from_dict(json.loads(_read(p("design", "architecture.json"))))
        ref = voxnet_spec(spec.class_count, spec.input_resolution)
        rows = []
        s.write("Architecture (chosen vs. VoxNet-style baseline)\n")
        s.write(f"  {'layer':<8}{'chosen':>18}{'baseline':>18}\n")
        for net_name, net in (("chosen", spec), ("voxnet", ref)):
            sizes = net.spatial_sizes()
            conv_i = 0
            for j, layer in enumerate(net.layers, 1):
                edge = layer.size if layer.kind == "conv3" else ""
                size = ""
                if layer.kind == "conv3":
                    size = sizes[conv_i]
                    conv_i += 1
                rows.append([net_name, j, layer.kind, edge, layer.count, size])
        for j in range(max(len(spec.layers), len(ref.layers))):
            cells = []
            for net in (spec, ref):
                if j < len(net.layers):
                    l = net.layers[j]
                    cells.append(f"{l.kind} {l.size}^3 x{l.count}" if l.kind == "conv3"
                                 else f"{l.kind} x{l.count}")
                else:
                    cells.append("-")
            s.write(f"  {j + 1:<8}{cells[0]:>18}{cells[1]:>18}\n")
        n_chosen = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in spec.param_shapes())
        n_ref = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in ref.param_shapes())
        s.write(f"  {'params':<8}{n_chosen:>18}{n_ref:>18}\n\n")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["network", "layer", "kind", "edge", "count", "output_size"])
        w.writerows(rows)
        _write(os.path.join(rep, "architecture.csv"), buf.getvalue())
    if os.path.exists(p("design", "curves.csv")):
        _write(os.path.join(rep, "bic_curves.csv"), _read(p("design", "curves.csv")))
        valleys = [r for r in csv.DictReader(io.StringIO(_read(p("design", "curves.csv"))))
                   if r["is_valley"] == "1"]
        if valleys:
            s.write("BIC valleys\n")
            for r in valleys:
                where = (f"input {r['edge']}^3" if r["layer"] == "fc" else f"edge {r['edge']}")
                s.write(f"  {r['layer']} {where}: K = {r['K']}\n")
            s.write("\n")

    if os.path.exists(p("analyze", "partition.txt")) and names:
        part = ConfusionSetPartition.from_text(_read(p("analyze", "partition.txt")), names)
        s.write("Confusion sets\n")
        for cs in part.sets:
            s.write(f"  {cs.kind:<6}{', '.join(names[c] for c in cs.members)}\n")
        s.write("\n")

    if os.path.exists(p("eval", "metrics.txt")):
        m = _parse_metrics(_read(p("eval", "metrics.txt")))
        s.write("Metrics (test split)\n")
        s.write(f"  {'':<10}{'ACA':>10}{'AIA':>10}\n")
        for row in ("baseline", "refined"):
            if row in m:
                s.write(f"  {row:<10}{float(m[row]['aca']):>10.4f}{float(m[row]['aia']):>10.4f}\n")
        if "errors" in m:
            e = m["errors"]
            s.write("\nBaseline errors inside mixed confusion sets\n")
            s.write(f"  total                  {e['analyzed_errors']}\n")
            s.write(f"  fixed by a pure leaf   {e['pure_leaf_corrections']}\n")
            s.write(f"  fixed by a forest      {e['forest_corrections']}\n")
            s.write(f"  still wrong            {e['residual_errors']}\n")
            s.write(f"  (correct samples broken by refinement: {e['introduced']})\n")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "baseline", "refined"])
        for cname in names:
            key = f"class.{cname}"
            w.writerow([cname, m["baseline"][key], m.get("refined", {}).get(key, "")])
        _write(os.path.join(rep, "per_class.csv"), buf.getvalue())
        s.write("\n")
    summary = s.getvalue()
    _write(os.path.join(rep, "summary.txt"), summary)
    return summary


# ------------------------------------------------------------------------ CLI


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vcnn",
        description="Volumetric CNN pipeline: synthetic data -> filter design -> training -> "
                    "confusion analysis -> refinement -> evaluation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric divergence\n\n"
               "config defaults (INI: [section] then key = value):\n\n" + defaults_text())
    ap.add_argument("stage", choices=STAGES + ("all",), help="stage to run ('all' runs every stage)")
    ap.add_argument("--config", required=True, help="config file (may be empty)")
    ap.add_argument("--out", help="output directory (overrides run.out)")
    ap.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    ap.add_argument("--threads", type=int, help="BLAS threads (overrides run.threads)")
    ap.add_argument("--refine", choices=("on", "off"), help="eval with refinement (overrides run.refine)")
    ap.add_argument("--force", action="store_true", help="re-run even when the stage is up to date")
    ap.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    return ap


@contextlib.contextmanager
def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        yield
        return
    with threadpool_limits(limits=n):
        yield


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    overrides = {"run": {}}
    for key in ("out", "seed", "threads", "refine"):
        val = getattr(args, key)
        if val is not None:
            overrides["run"][key] = val
    try:
        cfg = load_config(args.config, overrides)
        pipe = Pipeline(cfg, log)
        with output_lock(cfg.out), _thread_limit(cfg.threads):
            if args.stage == "all":
                pipe.run_all(args.force)
            else:
                pipe.run(args.stage, args.force)
            if args.stage in ("report", "all") and not args.quiet:
                print(_read(pipe.path("report", "summary.txt")), end="")
    except (ConfigError, LockError, SpecError) as exc:
        print(f"vcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"vcnn: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (StageError, ManifestError, OffParseError, BinvoxError, CheckpointError,
            RefineFormatError, OSError, ValueError) as exc:
        print(f"vcnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
