"""Experiment orchestration: config loading, the six commands, and their artifacts.

A config is a JSON object validated against :data:`CONFIG_SCHEMA`.  Every
number an experiment emits is a function of the config and its seed;
sub-seeds come from :func:`mtcvr.data.derive_seed`.
"""

import copy
import csv
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import jsonschema
import numpy as np

from . import autodiff as ad
from .analysis import ENUMERATION_CAP, ESTIMATORS, bias_report, frozen_from_net
from .data import (GroundTruth, SyntheticConfig, generate_synthetic, ingest_csv, read_ground_truth,
                   split_train_test, write_csv, write_ground_truth)
from .errors import ConfigError, UndefinedMetricError
from .estimators import KINDS, EstimatorSpec, HyperParams, train, write_trace
from .metrics import METRIC_KEYS, MetricReport, evaluate
from .model import Architecture, MultiTaskNet

log = logging.getLogger(__name__)

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NULLABLE_NUM = {"type": ["number", "null"]}

_HYPERPARAMS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tau": _NULLABLE_NUM,
        "tau_pct": _NULLABLE_NUM,
        "lam": _NULLABLE_NUM,
        "eta": _NUM,
        "k": _NUM,
        "v": _NUM,
        "reweight_unclicked": {"type": "boolean"},
        "propensity_grad": {"type": "boolean"},
        "literal_imputation": {"type": "boolean"},
        "oracle_propensity": {"type": "boolean"},
        "propensity_epochs": _INT,
    },
}

_ESTIMATOR = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "name": {"type": "string"},
        "hyperparams": _HYPERPARAMS,
        "epochs": _INT,
        "batch_size": _INT,
        "learning_rate": _NUM,
        "space": {"enum": ["click", "exposure", None]},
    },
}

_SYNTHETIC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {name: _NUM for name in SyntheticConfig().to_dict()},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _INT,
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "synthetic": _SYNTHETIC,
                "dataset_csv": {"type": "string"},
                "ground_truth_csv": {"type": ["string", "null"]},
            },
        },
        "train_fraction": _NUM,
        "architecture": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "embedding_dim": _INT,
                "ctr_layers": {"type": "array", "items": _INT},
                "cvr_layers": {"type": "array", "items": _INT},
                "imp_layers": {"type": "array", "items": _INT},
                "shared_embedding": {"type": "boolean"},
                "imputation": {"enum": ["label", "error"]},
            },
        },
        "estimator": _ESTIMATOR,
        "estimators": {"type": "array", "items": _ESTIMATOR},
        "repeats": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "audit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "draws": {"type": ["integer", "null"], "minimum": 1},
                "estimators": {"type": "array", "items": {"enum": list(ESTIMATORS)}},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "param": {"enum": ["tau", "lambda", "eta", "k"]},
                "grid": {"type": "array", "items": _NUM},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "data": {"synthetic": {}},
    "train_fraction": 0.8,
    "architecture": {},
    "estimator": {"kind": "multi_dr", "hyperparams": {"lam": 1.5}},
    "repeats": 1,
    "workers": 1,
    "audit": {"draws": None},
}

# sweep parameter -> (estimator kind, hyperparameter name)
SWEEP_TARGETS = {
    "tau": ("multi_ipw", "tau"),
    "lambda": ("multi_dr", "lam"),
    "eta": ("heuristic_dr", "eta"),
    "k": ("oversampling", "k"),
}

DEFAULT_GRIDS = {
    "tau": [0.005, 0.01, 0.02, 0.03, 0.04],
    "lambda": [0, 1, 1.5, 5, 20],
    "eta": [0.0005, 0.001, 0.002, 0.005, 0.01],
    "k": [1, 2, 5, 10],
}

RUN_HEADER = ["estimator", "param", "value", "seed"] + list(METRIC_KEYS)
TABLE_HEADER = ["estimator", "repeats"] + [f"{m}_{s}" for m in METRIC_KEYS for s in ("mean", "std")]


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(cfg):
    """Raise :class:`ConfigError` naming every offending key."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            lines.append(f"{where}: {err.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def load_config(source=None, overrides=None):
    """Defaults, then the config (path or dict), then ``overrides``; validated."""
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        try:
            with open(source, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    validate_config(raw)
    cfg = _merge(DEFAULTS, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


# -- building blocks -------------------------------------------------------------------


def load_data(cfg):
    """``(dataset, truth)`` from the config's data section (truth may be None)."""
    data = cfg["data"]
    if "dataset_csv" in data:
        dataset = ingest_csv(data["dataset_csv"])
        gt_path = data.get("ground_truth_csv")
        truth = read_ground_truth(gt_path) if gt_path else None
        if truth is not None and len(truth) != len(dataset):
            raise ConfigError("ground truth and dataset differ in length")
        return dataset, truth
    synth = {"seed": cfg["seed"], **data.get("synthetic", {})}
    try:
        scfg = SyntheticConfig.from_dict(synth)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return generate_synthetic(scfg)


def split_data(cfg, dataset, truth):
    return split_train_test(dataset, truth, cfg["train_fraction"], cfg["seed"])


def estimator_spec(entry, seed):
    entry = dict(entry)
    entry.pop("name", None)
    hp = HyperParams.from_dict(entry.pop("hyperparams", {}))
    spec = EstimatorSpec(hyperparams=hp, seed=seed, **entry)
    spec.validate()
    return spec


def estimator_label(entry):
    return entry.get("name", entry["kind"])


@dataclass
class ExperimentResult:
    estimator: str
    hyperparams: dict
    seed: int
    metrics: MetricReport
    trace_path: str = None
    wall_time: float = None

    def to_dict(self):
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _format(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _slug(value):
    return str(value).replace(".", "p").replace("-", "m")


def run_experiment(cfg, entry, seed, out_dir=None, data=None):
    """Train one estimator at one seed and evaluate it on the held-out split.

    When ``out_dir`` is given the loss trace is written there under a name
    built from (estimator, seed).
    """
    start = time.perf_counter()
    dataset, truth = data if data is not None else load_data(cfg)
    (train_ds, train_gt), (test_ds, test_gt) = split_data(cfg, dataset, truth)
    spec = estimator_spec(entry, seed)
    arch = Architecture.from_dict(cfg["architecture"])
    result = train(spec, train_ds, arch, truth=train_gt)
    report = evaluate(result.net, test_ds, test_gt, seed=seed)
    trace_path = None
    if out_dir is not None:
        trace_path = os.path.join(out_dir, f"trace_{estimator_label(entry)}_seed{seed}.csv")
        write_trace(result.trace, trace_path)
    return ExperimentResult(estimator_label(entry), spec.hyperparams.to_dict(), seed, report,
                            trace_path, time.perf_counter() - start)


def _run_job(job):
    cfg, entry, seed, out_dir = job
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_experiment(cfg, entry, seed, out_dir)


def _run_jobs(cfg, jobs):
    """Run independent experiments, serially or in a process pool; order is preserved."""
    if cfg.get("workers", 1) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(job) for job in jobs]


def repeat_seeds(cfg):
    return [cfg["seed"] + r for r in range(cfg["repeats"])]


def _metric_row(estimator, param, value, res):
    m = res.metrics.to_dict()
    return [estimator, param or "", _format(value), str(res.seed)] + [_format(m[k]) for k in METRIC_KEYS]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def summarize(results):
    """``{metric: (mean, std)}`` over the defined values, population std."""
    out = {}
    for key in METRIC_KEYS:
        vals = [getattr(r.metrics, key) for r in results if getattr(r.metrics, key) is not None]
        out[key] = (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)
    return out


# -- commands -------------------------------------------------------------------------------


def cmd_generate(cfg, out_dir):
    """Write ``dataset.csv``, ``ground_truth.csv`` and the resolved config."""
    os.makedirs(out_dir, exist_ok=True)
    dataset, truth = load_data(cfg)
    paths = {"dataset": os.path.join(out_dir, "dataset.csv")}
    write_csv(dataset, paths["dataset"])
    if truth is not None:
        paths["ground_truth"] = os.path.join(out_dir, "ground_truth.csv")
        write_ground_truth(truth, paths["ground_truth"])
    _write_json(cfg, os.path.join(out_dir, "config.json"))
    return paths


def cmd_train(cfg, out_dir):
    """Train ``cfg["estimator"]`` on the train split; checkpoint plus loss trace."""
    os.makedirs(out_dir, exist_ok=True)
    dataset, truth = load_data(cfg)
    (train_ds, train_gt), _ = split_data(cfg, dataset, truth)
    spec = estimator_spec(cfg["estimator"], cfg["seed"])
    arch = Architecture.from_dict(cfg["architecture"])
    result = train(spec, train_ds, arch, truth=train_gt)
    meta = {
        "vocab_sizes": {k: int(v) for k, v in train_ds.vocab_sizes.items()},
        "architecture": result.net.arch.to_dict(),
        "estimator": cfg["estimator"],
        "seed": cfg["seed"],
    }
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    ad.save_checkpoint(ckpt, result.net.params, meta)
    trace = os.path.join(out_dir, "trace.csv")
    write_trace(result.trace, trace)
    return {"checkpoint": ckpt, "trace": trace, "result": result}


def load_net(checkpoint):
    values, meta = ad.load_checkpoint(checkpoint)
    net = MultiTaskNet(meta["vocab_sizes"], Architecture.from_dict(meta["architecture"]))
    net.params.load_values(values)
    return net, meta


def cmd_evaluate(checkpoint, dataset_csv, ground_truth_csv=None, out_dir=None, seed=None):
    """Metric report of a checkpoint on a dataset; written to ``metrics.json``.

    Without ground truth the counterfactual AUC is omitted with a warning.
    Raises :class:`UndefinedMetricError` when no metric is defined at all.
    """
    net, meta = load_net(checkpoint)
    dataset = ingest_csv(dataset_csv, vocab_sizes=meta["vocab_sizes"])
    truth = read_ground_truth(ground_truth_csv) if ground_truth_csv else None
    if truth is None:
        log.warning("no ground truth: cvr_auc_do omitted")
    report = evaluate(net, dataset, truth, seed=meta.get("seed") if seed is None else seed)
    if all(getattr(report, k) is None for k in METRIC_KEYS):
        raise UndefinedMetricError("; ".join(report.notes))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_json(report.to_dict(), os.path.join(out_dir, "metrics.json"))
    return report


def audit_hyperparams(cfg):
    """Per-estimator keyword arguments for the bias audit, from the config's estimator."""
    hp = cfg["estimator"].get("hyperparams", {})
    tau = hp.get("tau")
    return {
        "ipw": {"tau": tau},
        "dr": {"tau": tau},
        "heuristic_dr": {"eta": hp.get("eta", HyperParams().eta)},
        "oversampling": {"k": hp.get("k", HyperParams().k)},
    }


def audit_instance(inst, cfg, draws=None, seed=0):
    """Bias reports of every analysis estimator on a frozen instance.

    Affine estimators are computed exactly; the others by enumeration when
    the instance is small enough.  With ``draws`` a Monte Carlo report is
    added for each estimator.
    """
    names = cfg.get("audit", {}).get("estimators") or list(ESTIMATORS)
    hps = audit_hyperparams(cfg)
    reports = []
    for name in names:
        hp = hps.get(name, {})
        if ESTIMATORS[name][1] or len(inst) <= ENUMERATION_CAP:
            reports.append(bias_report(name, inst, "auto", **hp))
        if draws:
            reports.append(bias_report(name, inst, "monte-carlo", draws, seed, **hp))
    return reports


def cmd_bias_audit(cfg, dataset=None, truth=None, draws=None, checkpoint=None, out_dir=None):
    """Freeze predictions on ``dataset`` and report every estimator's bias.

    Predictions come from ``checkpoint`` when given, otherwise from
    training ``cfg["estimator"]`` on the dataset itself.
    """
    if dataset is None:
        dataset, truth = load_data(cfg)
    if truth is None:
        raise ConfigError("bias audit needs ground truth")
    if checkpoint is not None:
        net, _ = load_net(checkpoint)
    else:
        spec = estimator_spec(cfg["estimator"], cfg["seed"])
        net = train(spec, dataset, Architecture.from_dict(cfg["architecture"]), truth=truth).net
    draws = cfg.get("audit", {}).get("draws") if draws is None else draws
    inst = frozen_from_net(net, dataset, truth)
    reports = audit_instance(inst, cfg, draws, cfg["seed"])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_json([r.to_dict() for r in reports], os.path.join(out_dir, "bias_audit.json"))
    return reports


def cmd_sweep(cfg, param, grid=None, repeats=None, out_dir=None):
    """Metric-vs-parameter rows, one per (grid value, seed), in grid order."""
    if param not in SWEEP_TARGETS:
        raise ConfigError(f"param must be one of {sorted(SWEEP_TARGETS)}, got {param!r}")
    kind, hp_name = SWEEP_TARGETS[param]
    grid = list(DEFAULT_GRIDS[param] if grid is None else grid)
    if repeats is not None:
        cfg = {**cfg, "repeats": repeats}
    base = cfg["estimator"] if cfg["estimator"]["kind"] == kind else {"kind": kind}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    jobs, labels = [], []
    for value in grid:
        hp = {**base.get("hyperparams", {}), hp_name: value}
        if hp_name == "tau":
            hp.pop("tau_pct", None)
        entry = {**base, "kind": kind, "hyperparams": hp,
                 "name": f"{kind}_{param}{_slug(value)}"}
        for seed in repeat_seeds(cfg):
            jobs.append((cfg, entry, seed, out_dir))
            labels.append((kind, value))
    results = _run_jobs(cfg, jobs)
    rows = [_metric_row(k, param, v, r) for (k, v), r in zip(labels, results)]
    if out_dir is not None:
        _write_csv(os.path.join(out_dir, f"sweep_{param}.csv"), RUN_HEADER, rows)
    return rows


def compare_entries(cfg, estimators=None):
    if estimators:
        return [{"kind": name} if isinstance(name, str) else name for name in estimators]
    return cfg.get("estimators") or [cfg["estimator"]]


def cmd_compare(cfg, estimators=None, repeats=None, out_dir=None):
    """Per-seed runs and a mean ± std table (population std) per estimator.

    Writes ``runs.csv`` and ``compare.csv``; neither contains timings, so
    identical configs give byte-identical files.
    """
    if repeats is not None:
        cfg = {**cfg, "repeats": repeats}
    entries = compare_entries(cfg, estimators)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    jobs = [(cfg, entry, seed, out_dir) for entry in entries for seed in repeat_seeds(cfg)]
    results = _run_jobs(cfg, jobs)
    runs = [_metric_row(r.estimator, "", "", r) for r in results]
    table = []
    for entry in entries:
        label = estimator_label(entry)
        mine = [r for r in results if r.estimator == label]
        stats = summarize(mine)
        row = [label, str(len(mine))]
        for key in METRIC_KEYS:
            row += [_format(stats[key][0]), _format(stats[key][1])]
        table.append(row)
    if out_dir is not None:
        _write_csv(os.path.join(out_dir, "runs.csv"), RUN_HEADER, runs)
        _write_csv(os.path.join(out_dir, "compare.csv"), TABLE_HEADER, table)
    return table, results
