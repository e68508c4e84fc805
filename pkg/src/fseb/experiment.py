"""Configuration-driven experiment runner.

A config is a JSON document (see ``README.md`` for the full field list)::

    {
      "name": "moons-fseb",
      "model": {"hidden_widths": [32, 32], "activation": "tanh"},
      "train": {"objective": "eb-map", "lr": 0.05, "epochs": 500, "batch_size": 500,
                "prior": {"tau_f": 50.0, "tau_theta": 0.001, "context_batch_size": 100}},
      "data": {"kind": "two-moons", "n": 500, "noise_sd": 0.1},
      "context": {"kind": "uniform-box", "margin": 4.0},
      "eval": {"m_bins": 15, "grid": {"margin": 4.0, "resolution": [60, 60]}, "far_radius": 1.5},
      "seeds": [0, 1, 2, 3, 4],
      "output_dir": "runs/moons-fseb"
    }

Every seed is a root seed; data generation, initialization, minibatch order
and context sampling all derive from it through fixed stream ids, so an
ablation that changes one field leaves every other stream untouched.
"""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data import (
    ContextDistribution,
    CorruptionSpec,
    Dataset,
    bounding_box,
    corrupt,
    gen_gaussian_blobs,
    gen_two_moons,
    load_tabular,
    take_fraction,
)
from .metrics import GridSpec, PredictionSet, evaluate, far_field_entropy_gap, predictive_entropy
from .model import (
    MlpConfig,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    snapshot_feature_params,
)
from .prior import PriorConfig
from .training import TrainConfig, _stream, train

logger = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
WORKERS_ENV = "FSEB_WORKERS"
AXES = ("context-batch-size", "context-distribution", "data-fraction", "corruption-level")
METRICS = ("accuracy", "train_accuracy", "nll", "ece", "sel_pred_auc", "ood_auroc", "far_entropy", "near_entropy")

STREAM_DATA, STREAM_TEST, STREAM_OOD, STREAM_FRACTION, STREAM_CORRUPT = 10, 11, 12, 13, 14


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    base = path.parent
    validate_config(cfg, base)
    cfg.setdefault("_base_dir", str(base.resolve()))
    return cfg


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _dataset_paths(spec: dict) -> list[str]:
    return [spec[k] for k in ("path", "labels_path") if k in spec]


def validate_config(cfg: dict, base: Path | None = None) -> None:
    _require(isinstance(cfg, dict), "<root>", "config must be a JSON object")
    for key in ("model", "train", "data"):
        _require(isinstance(cfg.get(key), dict), key, "missing or not an object")
    seeds = cfg.get("seeds", [0])
    _require(isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds),
             "seeds", "must be a non-empty list of integers")
    frac = cfg["data"].get("fraction", 1.0)
    _require(isinstance(frac, (int, float)) and 0 < frac <= 1, "data.fraction", "must lie in (0, 1]")
    base = base or Path(cfg.get("_base_dir", "."))
    specs = [("data", cfg["data"])]
    if "test" in cfg["data"]:
        specs.append(("data.test", cfg["data"]["test"]))
    if isinstance(cfg.get("context"), dict) and isinstance(cfg["context"].get("dataset"), dict):
        specs.append(("context.dataset", cfg["context"]["dataset"]))
    if isinstance(cfg.get("eval"), dict) and isinstance(cfg["eval"].get("ood"), dict):
        specs.append(("eval.ood", cfg["eval"]["ood"]))
    for where, spec in specs:
        kind = spec.get("kind")
        _require(kind in ("two-moons", "blobs", "csv", "idx"), f"{where}.kind", f"unknown dataset kind {kind!r}")
        for p in _dataset_paths(spec):
            _require((base / p).exists(), f"{where}.path", f"file not found: {base / p}")
    try:
        build_train_config(cfg, 0)
        _mlp_kwargs(cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train/model: {exc}") from exc
    if cfg["train"].get("objective", "eb-map") != "ps-map":
        _require(isinstance(cfg.get("context"), dict), "context", "required for empirical-Bayes objectives")


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()[:16]


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _mlp_kwargs(model: dict) -> dict:
    allowed = {"hidden_widths", "activation", "init_scheme"}
    unknown = set(model) - allowed
    if unknown:
        raise ValueError(f"unknown model fields {sorted(unknown)}")
    return {"hidden_widths": tuple(model.get("hidden_widths", (32, 32))),
            "activation": model.get("activation", "tanh"),
            "init_scheme": model.get("init_scheme")}


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg["train"])
    prior = PriorConfig(**t.pop("prior", {}))
    return TrainConfig(prior=prior, seed=seed, **t)


# ---------------------------------------------------------------------------
# datasets


def make_dataset(spec: dict, seed: int, base: Path, split: str = "train") -> Dataset:
    kind = spec["kind"]
    if kind == "two-moons":
        ds = gen_two_moons(spec.get("n", 500), spec.get("noise_sd", 0.1), seed, spec.get("label_noise", 0.0))
    elif kind == "blobs":
        ds = gen_gaussian_blobs(spec.get("n", 200), spec["centers"], spec.get("sd", 1.0), seed, spec.get("name", "blobs"))
    elif kind == "csv":
        ds = load_tabular(base / spec["path"], "csv-labeled", n_classes=spec.get("n_classes"))
    else:
        ds = load_tabular(base / spec["path"], "idx-pair", base / spec["labels_path"], spec.get("n_classes"))
    return Dataset(ds.inputs, ds.labels, ds.name, split, ds.n_classes)


def _data_seed(spec: dict, root: int, stream: int) -> int:
    # an explicit data seed pins the dataset across run seeds
    return spec["seed"] if "seed" in spec else _stream(root, stream) % 2**31


def make_context(cfg: dict, train_set: Dataset, seed: int, base: Path) -> ContextDistribution | None:
    spec = cfg.get("context")
    if spec is None:
        return None
    kind = spec.get("kind", "train-inputs")
    corruption = CorruptionSpec(**spec["corruption"]) if spec.get("corruption") else None
    if kind == "train-inputs":
        return ContextDistribution.train_inputs(train_set)
    if kind == "train-corrupted":
        return ContextDistribution.train_corrupted(train_set, corruption)
    if kind == "external-dataset":
        if "dataset" not in spec:
            raise ConfigError("context.dataset: required for external-dataset")
        ext = make_dataset(spec["dataset"], _data_seed(spec["dataset"], seed, STREAM_OOD + 100), base)
        return ContextDistribution("external-dataset", source=ext, corruption=corruption)
    if kind == "uniform-box":
        if "low" in spec and "high" in spec:
            return ContextDistribution.uniform_box(spec["low"], spec["high"])
        lo, hi = bounding_box(train_set.inputs, spec.get("margin", 2.0))
        return ContextDistribution.uniform_box(lo, hi)
    raise ConfigError(f"context.kind: unknown context kind {kind!r}")


def grid_spec(cfg: dict, train_set: Dataset) -> GridSpec | None:
    g = cfg.get("eval", {}).get("grid")
    if not g:
        return None
    if "low" in g and "high" in g:
        lo, hi = np.asarray(g["low"], float), np.asarray(g["high"], float)
    else:
        lo, hi = bounding_box(train_set.inputs, g.get("margin", 2.0))
    res = g.get("resolution", [50] * len(lo))
    return GridSpec(tuple(float(v) for v in lo), tuple(float(v) for v in hi), tuple(int(r) for r in res))


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    config: dict
    config_hash: str
    version: str
    per_seed: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    created: str = ""

    def to_json(self) -> dict:
        return {
            "schema_version": RESULTS_SCHEMA_VERSION,
            "version": self.version,
            "created": self.created,
            "config_hash": self.config_hash,
            "config": {k: v for k, v in self.config.items() if not k.startswith("_")},
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_json(cls, doc: dict) -> RunResult:
        return cls(doc["config"], doc["config_hash"], doc["version"], doc["per_seed"],
                   doc["aggregate"], doc.get("artifacts", {}), doc.get("created", ""))


def aggregate(per_seed: list[dict]) -> dict:
    """Mean and standard error (sample sd / sqrt(n)) per metric; se needs >= 2 seeds."""
    out = {}
    for name in METRICS:
        vals = [r["metrics"][name] for r in per_seed if r["metrics"].get(name) is not None]
        if not vals:
            continue
        entry = {"mean": float(np.mean(vals)), "n": len(vals)}
        if len(vals) >= 2:
            entry["se"] = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
        out[name] = entry
    return out


def emit_grid_predictions(model, spec: GridSpec, out_path) -> Path:
    """CSV rows ``x0,x1,...,p_class0,...,entropy`` over a regular grid.

    ``model`` is a :class:`ModelParams` or a callable returning probabilities.
    """
    fn = model if callable(model) else (lambda x: predict_proba(x, model))
    pts = spec.points()
    probs = fn(pts)
    ent = predictive_entropy(probs)
    out_path = Path(out_path)
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(pts.shape[1])] + [f"p_class{k}" for k in range(probs.shape[1])] + ["entropy"])
        for x, p, e in zip(pts, probs, ent):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in p] + [repr(float(e))])
    return out_path


def run_seed(cfg: dict, seed: int, out_dir: Path | None) -> dict:
    base = Path(cfg.get("_base_dir", "."))
    dspec = cfg["data"]
    train_full = make_dataset(dspec, _data_seed(dspec, seed, STREAM_DATA), base)
    train_set = take_fraction(train_full, dspec.get("fraction", 1.0), _stream(seed, STREAM_FRACTION) % 2**31)
    if "test" in dspec:
        test_set = make_dataset(dspec["test"], _data_seed(dspec["test"], seed, STREAM_TEST), base, "test")
    else:
        # synthetic data: an independent draw; file data: evaluate on the training file
        test_seed = dspec["seed"] + 1 if "seed" in dspec else _stream(seed, STREAM_TEST) % 2**31
        test_set = make_dataset(dspec, test_seed, base, "test") if dspec["kind"] in ("two-moons", "blobs") else train_set
    eval_cfg = cfg.get("eval", {})
    if eval_cfg.get("corruption"):
        spec = CorruptionSpec(**eval_cfg["corruption"])
        test_set = Dataset(corrupt(test_set.inputs, spec, _stream(seed, STREAM_CORRUPT) % 2**31),
                           test_set.labels, test_set.name, "test", test_set.n_classes)
    model_cfg = MlpConfig(input_dim=train_set.input_dim, output_dim=train_set.n_classes,
                          **_mlp_kwargs(cfg["model"]))
    tcfg = build_train_config(cfg, seed)
    context = make_context(cfg, train_set, seed, base)
    phi_spec = cfg.get("phi0", {})
    phi0 = None
    if phi_spec.get("provenance") == "pretrained-checkpoint":
        phi0 = snapshot_feature_params(base / phi_spec["path"], config=model_cfg)
    params, history = train(tcfg, model_cfg, train_set, context, phi0)
    provenance = phi0.provenance if phi0 is not None else ("random-init" if tcfg.objective != "ps-map" else None)

    probs = predict_proba(test_set.inputs, params)
    ood_probs = None
    if eval_cfg.get("ood"):
        ood = make_dataset(eval_cfg["ood"], _data_seed(eval_cfg["ood"], seed, STREAM_OOD), base, "test")
        ood_probs = predict_proba(ood.inputs, params)
    report = evaluate(PredictionSet(probs, test_set.labels), ood_probs, eval_cfg.get("m_bins", 15))
    metrics = report.scalars()
    train_acc = float(np.mean(np.argmax(predict_proba(train_set.inputs, params), 1) == train_set.labels))
    metrics["train_accuracy"] = train_acc
    artifacts = {}
    spec = grid_spec(cfg, train_set)
    if spec is not None:
        far, near = far_field_entropy_gap(lambda x: predict_proba(x, params), train_set.inputs, spec,
                                          eval_cfg.get("far_radius", 1.5))
        metrics["far_entropy"], metrics["near_entropy"] = far, near
    if out_dir is not None:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, seed_dir / "model.fseb")
        artifacts["checkpoint"] = str(Path(f"seed_{seed}") / "model.fseb")
        if spec is not None:
            emit_grid_predictions(params, spec, seed_dir / "grid_predictions.csv")
            artifacts["grid_predictions"] = str(Path(f"seed_{seed}") / "grid_predictions.csv")
    return {
        "seed": seed,
        "n_train": len(train_set),
        "phi0_provenance": provenance,
        "metrics": metrics,
        "bin_table": report.bin_table,
        "history": history.summary(),
        # wall-clock numbers are the only per-seed fields that differ between identical runs
        "timing": {"mean_step_seconds": float(np.mean(history.step_seconds)) if history.step_seconds else None},
        "artifacts": artifacts,
    }


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _run_seeds(cfg: dict, out_dir: Path | None) -> list[dict]:
    seeds = cfg.get("seeds", [0])
    workers = min(_workers(), len(seeds))
    if workers == 1:
        return [run_seed(cfg, s, out_dir) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_seed, [cfg] * len(seeds), seeds, [out_dir] * len(seeds)))


def run(config, output_dir=None) -> RunResult:
    """Train and evaluate once per seed, aggregate, and write ``results.json``.

    ``config`` is a path or an already-loaded dict. Output goes to
    ``output_dir`` or the config's ``output_dir``; with neither nothing is written.
    """
    if isinstance(config, (str, Path)):
        cfg = load_config(config)
    else:
        cfg = copy.deepcopy(config)
        validate_config(cfg)
    out = output_dir or cfg.get("output_dir")
    out_dir = None
    if out is not None:
        out_dir = Path(out)
        if not out_dir.is_absolute():
            out_dir = Path(cfg.get("_base_dir", ".")) / out_dir if output_dir is None else out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
    per_seed = _run_seeds(cfg, out_dir)
    result = RunResult(
        config=cfg,
        config_hash=config_hash(cfg),
        version=version_string(),
        per_seed=per_seed,
        aggregate=aggregate(per_seed),
        created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )
    if out_dir is not None:
        result.artifacts["results"] = "results.json"
        doc = result.to_json()
        validate_results(doc)
        (out_dir / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return result


def results_schema() -> dict:
    return json.loads(resources.files("fseb").joinpath("schemas/results.schema.json").read_text())


def validate_results(doc: dict) -> None:
    jsonschema.validate(doc, results_schema())


# ---------------------------------------------------------------------------
# ablations and comparison


def apply_axis(cfg: dict, axis: str, value) -> dict:
    """Copy of ``cfg`` with one ablation axis set to ``value``."""
    cfg = copy.deepcopy(cfg)
    if axis == "context-batch-size":
        cfg["train"].setdefault("prior", {})["context_batch_size"] = int(value)
    elif axis == "data-fraction":
        cfg["data"]["fraction"] = float(value)
    elif axis == "context-distribution":
        ctx = cfg.setdefault("context", {})
        ctx["kind"] = str(value)
        if value == "train-corrupted":
            ctx.setdefault("corruption", {"kind": "gaussian-noise", "level": 3})
    elif axis == "corruption-level":
        ev = cfg.setdefault("eval", {})
        ev["corruption"] = {**ev.get("corruption", {"kind": "gaussian-noise"}), "level": int(value)}
    else:
        raise ConfigError(f"--axis: unknown axis {axis!r}, expected one of {', '.join(AXES)}")
    return cfg


def _parse_value(axis: str, raw):
    if axis == "context-distribution":
        return str(raw)
    if axis == "data-fraction":
        return float(raw)
    return int(raw)


def _format(entry: dict | None) -> str:
    if not entry:
        return ""
    if "se" in entry:
        return f"{entry['mean']:.4f} ± {entry['se']:.4f}"
    return f"{entry['mean']:.4f}"


def ablate(config, axis: str, values, output_dir=None) -> Path:
    """One run per value of ``axis``; writes ``ablation_<axis>.csv`` next to the runs."""
    if axis not in AXES:
        raise ConfigError(f"--axis: unknown axis {axis!r}, expected one of {', '.join(AXES)}")
    cfg = load_config(config) if isinstance(config, (str, Path)) else copy.deepcopy(config)
    root = Path(output_dir or cfg.get("output_dir") or ".")
    if not root.is_absolute() and output_dir is None:
        root = Path(cfg.get("_base_dir", ".")) / root
    root.mkdir(parents=True, exist_ok=True)
    results = []
    for raw in values:
        value = _parse_value(axis, raw)
        cell = apply_axis(cfg, axis, value)
        validate_config(cell)
        results.append((value, run(cell, root / f"{axis}={value}")))
    table = root / f"ablation_{axis}.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis] + [m for m in METRICS for m in (f"{m}_mean", f"{m}_se")])
        for value, res in results:
            row = [value]
            for m in METRICS:
                e = res.aggregate.get(m, {})
                row += [e.get("mean", ""), e.get("se", "")]
            w.writerow(row)
    return table


def compare(paths, out_prefix=None) -> tuple[str, list[list]]:
    """Side-by-side table of several ``results.json`` files.

    The first result is the reference; others get ``delta_<metric>`` columns.
    Returns the markdown text and the CSV rows; writes both when ``out_prefix``
    is given.
    """
    docs = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "results.json"
        docs.append((p, RunResult.from_json(json.loads(p.read_text()))))
    metrics = [m for m in METRICS if any(m in d.aggregate for _, d in docs)]
    header = ["run"] + [f"{m}_mean" for m in metrics] + [f"{m}_se" for m in metrics]
    if len(docs) > 1:
        header += [f"delta_{m}" for m in metrics]
    ref = docs[0][1].aggregate
    rows = []
    md = ["| run | " + " | ".join(metrics) + (" | " + " | ".join(f"Δ {m}" for m in metrics) if len(docs) > 1 else "") + " |"]
    md.append("|" + "---|" * (1 + len(metrics) * (2 if len(docs) > 1 else 1)))
    for path, doc in docs:
        name = doc.config.get("name", str(path.parent))
        agg = doc.aggregate
        row = [name] + [agg.get(m, {}).get("mean", "") for m in metrics] + [agg.get(m, {}).get("se", "") for m in metrics]
        deltas = []
        if len(docs) > 1:
            for m in metrics:
                if m in agg and m in ref:
                    deltas.append(agg[m]["mean"] - ref[m]["mean"])
                else:
                    deltas.append("")
            row += deltas
        rows.append(row)
        cells = [_format(agg.get(m)) for m in metrics]
        cells += [f"{d:+.4f}" if d != "" else "" for d in deltas]
        md.append("| " + " | ".join([name] + cells) + " |")
    text = "\n".join(md) + "\n"
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        out_prefix.with_suffix(".md").write_text(text)
        with out_prefix.with_suffix(".csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    return text, [header] + rows


def grid_from_checkpoint(checkpoint, config, out_path=None) -> Path:
    """Grid predictions for a saved model; architecture and grid come from ``config``."""
    cfg = load_config(config) if isinstance(config, (str, Path)) else copy.deepcopy(config)
    base = Path(cfg.get("_base_dir", "."))
    seed = cfg.get("seeds", [0])[0]
    train_set = make_dataset(cfg["data"], _data_seed(cfg["data"], seed, STREAM_DATA), base)
    spec = grid_spec(cfg, train_set)
    if spec is None:
        raise ConfigError("eval.grid: required for grid predictions")
    model_cfg = MlpConfig(input_dim=train_set.input_dim, output_dim=train_set.n_classes, **_mlp_kwargs(cfg["model"]))
    params = load_checkpoint(checkpoint, model_cfg)
    out_path = Path(out_path) if out_path else Path(checkpoint).with_name("grid_predictions.csv")
    return emit_grid_predictions(params, spec, out_path)

