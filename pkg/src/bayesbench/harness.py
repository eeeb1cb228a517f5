"""Batch experiment harness: config grids, training cells, persistence, reports.

A run is a grid of (algorithm, seed) cells over one synthetic task. Each cell
trains a posterior, predicts every evaluation split, persists predictions and
per-sample likelihoods as CSV, and writes a JSON record whose metrics are
recomputed from the persisted files so stored numbers are reproducible
bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import pathlib
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import t as student_t

from .metrics import (
    MetricConfig,
    as_binary_classification,
    compute_report,
    ece_sece,
    nll,
    top1_agreement,
    total_variation,
)
from .models import ConfigurationError, Dataset, MLPSpec, PredictionSet, child_seed, init_params
from .posteriors import (
    SVGDPosterior,
    TrainConfig,
    VIConfig,
    per_sample_likelihoods,
    save_posterior,
    train_multix,
    train_svgd,
)
from .posteriors.ensembles import MULTIX_ALGORITHMS, _train_one
from .reference import HMCConfig, hmc_posterior
from .tasks import (
    ShiftSpec,
    SyntheticTask,
    corrupt,
    make_conjugate_task,
    make_gap_regression,
    make_grouped_classification,
    make_two_moons,
)

SINGLE_MODE_ALGORITHMS = ("map", "mcd", "bbb", "ivon", "rank1", "swag", "laplace", "svgd")
GENERATORS = ("two-moons", "gap-regression", "grouped-blobs", "conjugate")

_KNOB_KEYS = {
    "map": set(),
    "mcd": set(),
    "bbb": {"last_layer_only"},
    "ivon": {"prior_precision", "aug_factor", "last_layer_only"},
    "rank1": {"components", "last_layer_only"},
    "swag": {"snapshots", "rank_k", "collect_lr"},
    "laplace": {"prior_precision", "tau_grid"},
    "svgd": {"n_particles", "prior_std", "bandwidth_mode", "fixed_bandwidth"},
    "hmc": {"step_size", "leapfrog_steps", "num_samples", "burn_in", "thinning",
            "prior_std", "tune_step_size"},
}
_TOP_KEYS = {"task", "algorithms", "seeds", "eval_samples", "metrics", "output_dir", "model"}
_TASK_KEYS = {"generator", "params", "shift"}
_ALG_KEYS = {"name", "id", "train", "vi", "model", "knobs"}
_MODEL_KEYS = {"hidden", "activation", "dropout_rate"}


def _reject_unknown(block: dict, allowed: set, where: str):
    unknown = set(block) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys {sorted(unknown)} in {where}")


def _algorithm_names():
    return SINGLE_MODE_ALGORITHMS + tuple(f"multi-{a}" for a in MULTIX_ALGORITHMS) + ("hmc",)


def _knob_keys_for(name: str) -> set:
    if name.startswith("multi-"):
        inner = name[len("multi-"):]
        return _KNOB_KEYS[inner] | {"members", "shared_init"}
    return _KNOB_KEYS[name]


@dataclass
class ExperimentConfig:
    """Validated, normalized form of the JSON experiment document."""

    generator: str
    task_params: dict
    shift: ShiftSpec
    algorithms: list
    seeds: tuple
    eval_samples: int
    metric_config: MetricConfig
    output_dir: str
    model_default: dict

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        _reject_unknown(doc, _TOP_KEYS, "experiment config")
        task_block = doc.get("task")
        if not isinstance(task_block, dict):
            raise ConfigurationError("config needs a 'task' object")
        _reject_unknown(task_block, _TASK_KEYS, "task block")
        generator = task_block.get("generator")
        if generator not in GENERATORS:
            raise ConfigurationError(f"unknown task generator {generator!r}")
        task_params = dict(task_block.get("params", {}))
        shift = ShiftSpec(**task_block.get("shift", {}))

        alg_blocks = doc.get("algorithms")
        if not alg_blocks:
            raise ConfigurationError("config needs a nonempty 'algorithms' list")
        model_default = dict(doc.get("model", {}))
        _reject_unknown(model_default, _MODEL_KEYS, "model block")
        algorithms = []
        seen_ids = set()
        for i, block in enumerate(alg_blocks):
            _reject_unknown(block, _ALG_KEYS, f"algorithms[{i}]")
            name = block.get("name")
            if name not in _algorithm_names():
                raise ConfigurationError(f"unknown algorithm {name!r}")
            alg_id = block.get("id", name)
            if alg_id in seen_ids:
                raise ConfigurationError(f"duplicate algorithm id {alg_id!r}")
            seen_ids.add(alg_id)
            knobs = dict(block.get("knobs", {}))
            _reject_unknown(knobs, _knob_keys_for(name), f"knobs of {alg_id}")
            model_block = dict(model_default)
            model_block.update(block.get("model", {}))
            _reject_unknown(model_block, _MODEL_KEYS, f"model block of {alg_id}")
            try:
                train_cfg = TrainConfig.from_dict(block.get("train", {}))
                vi_cfg = VIConfig.from_dict(block.get("vi", {}))
            except TypeError as exc:
                raise ConfigurationError(f"bad train/vi block for {alg_id}: {exc}") from exc
            algorithms.append({
                "name": name,
                "id": alg_id,
                "train": train_cfg.to_dict(),
                "vi": vi_cfg.to_dict(),
                "model": model_block,
                "knobs": knobs,
            })

        seeds = tuple(int(s) for s in doc.get("seeds", ()))
        if not seeds:
            raise ConfigurationError("config needs a nonempty 'seeds' list")
        if len(set(seeds)) != len(seeds):
            raise ConfigurationError("seeds must be distinct")
        eval_samples = int(doc.get("eval_samples", 10))
        if eval_samples < 1:
            raise ConfigurationError("eval_samples must be positive")
        metric_config = MetricConfig(**doc.get("metrics", {}))
        output_dir = doc.get("output_dir", "bayesbench-out")
        return ExperimentConfig(
            generator=generator,
            task_params=task_params,
            shift=shift,
            algorithms=algorithms,
            seeds=seeds,
            eval_samples=eval_samples,
            metric_config=metric_config,
            output_dir=str(output_dir),
            model_default=model_default,
        )

    @staticmethod
    def from_json_file(path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(pathlib.Path(path).read_text()))

    def normalized(self) -> dict:
        return {
            "task": {
                "generator": self.generator,
                "params": self.task_params,
                "shift": {
                    "corruption_levels": list(self.shift.corruption_levels),
                    "rotation_per_level": self.shift.rotation_per_level,
                    "noise_std_per_level": self.shift.noise_std_per_level,
                },
            },
            "algorithms": self.algorithms,
            "seeds": list(self.seeds),
            "eval_samples": self.eval_samples,
            "metrics": {
                "num_bins": self.metric_config.num_bins,
                "confidence_levels": list(self.metric_config.confidence_levels),
            },
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def resolve_output_dir(self) -> pathlib.Path:
        root = os.environ.get("BAYESBENCH_OUT")
        out = pathlib.Path(self.output_dir)
        if root:
            return pathlib.Path(root) / (out.name if out.is_absolute() else out)
        return out


def build_task(generator: str, params: dict, seed: int) -> SyntheticTask:
    if generator == "two-moons":
        return make_two_moons(seed=seed, **params)
    if generator == "gap-regression":
        return make_gap_regression(seed=seed, **params)
    if generator == "grouped-blobs":
        return make_grouped_classification(seed=seed, **params)
    if generator == "conjugate":
        task, _ = make_conjugate_task(seed=seed, **params)
        return task
    raise ConfigurationError(f"unknown task generator {generator!r}")


def model_spec_for(task: SyntheticTask, model_block: dict) -> MLPSpec:
    """Network shape for a task: widths come from the data, head from the kind."""
    d = task.train.inputs.shape[1]
    if task.kind == "classification":
        hidden = model_block.get("hidden", [16])
        n_classes = int(max(task.train.targets.max(), task.val.targets.max(),
                            task.test_id.targets.max())) + 1
        widths = (d, *hidden, max(2, n_classes))
        return MLPSpec(
            tuple(int(w) for w in widths),
            activation=model_block.get("activation", "relu"),
            dropout_rate=float(model_block.get("dropout_rate", 0.0)),
        )
    hidden = model_block.get("hidden", [64, 64])
    return MLPSpec(
        (d, *(int(w) for w in hidden), 1),
        activation=model_block.get("activation", "relu"),
        head="gaussian-fixed-std",
        fixed_output_std=float(task.config.get("output_std", 0.1)),
        dropout_rate=float(model_block.get("dropout_rate", 0.0)),
    )


def evaluation_splits(task: SyntheticTask, shift: ShiftSpec) -> dict:
    """Named datasets a trained cell is scored on."""
    splits = {"val": task.val, "test-id": task.test_id}
    for key, data in task.ood.items():
        splits[f"ood-{key}"] = data
    if task.kind == "classification":
        for level in shift.corruption_levels:
            if level != 0:
                splits[f"level-{level}"] = corrupt(task, level, shift)
    return splits


def train_algorithm(name: str, spec: MLPSpec, dataset: Dataset, cfg: TrainConfig,
                    vi: VIConfig, knobs: dict, val_set: Dataset | None = None):
    """Train any registered algorithm and return its posterior object."""
    knobs = dict(knobs)
    if name in ("ivon", "multi-ivon") and "prior_precision" not in knobs:
        knobs["prior_precision"] = 1.0 / vi.prior_std**2
    if name == "svgd":
        state = train_svgd(
            spec, dataset, cfg,
            n_particles=knobs.get("n_particles", 10),
            prior_std=knobs.get("prior_std", 1.0),
            bandwidth_mode=knobs.get("bandwidth_mode", "median-heuristic"),
            fixed_bandwidth=knobs.get("fixed_bandwidth", 1.0),
        )
        return SVGDPosterior(spec, state)
    if name == "hmc":
        hmc_cfg = HMCConfig(
            step_size=knobs.get("step_size", 0.01),
            leapfrog_steps=knobs.get("leapfrog_steps", 20),
            num_samples=knobs.get("num_samples", 200),
            burn_in=knobs.get("burn_in", 200),
            thinning=knobs.get("thinning", 1),
            seed=cfg.seed,
            prior_std=knobs.get("prior_std", 1.0),
        )
        return hmc_posterior(spec, dataset, hmc_cfg,
                             tune_step_size=knobs.get("tune_step_size", True))
    if name.startswith("multi-"):
        inner = name[len("multi-"):]
        members = int(knobs.pop("members", 5))
        shared = knobs.pop("shared_init", False)
        init = init_params(spec, child_seed(cfg.seed, 13)) if shared else None
        if inner == "laplace" and "tau_grid" in knobs:
            knobs["val_set"] = val_set
        return train_multix(inner, spec, dataset, cfg, members=members,
                            shared_init=init, vi=vi, **knobs)
    if name == "laplace" and "tau_grid" in knobs:
        knobs["val_set"] = val_set
    return _train_one(name, spec, dataset, cfg, vi, None, knobs)


def write_predictions_csv(path, preds: PredictionSet):
    """`example_id,label[,group],p_*` or `example_id,target[,group],mean,std`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if preds.kind == "classification":
            header = ["example_id", "label"]
            if preds.groups is not None:
                header.append("group")
            header += [f"p_{c}" for c in range(preds.probs.shape[1])]
            writer.writerow(header)
            for i in range(preds.labels.shape[0]):
                row = [str(i), str(int(preds.labels[i]))]
                if preds.groups is not None:
                    row.append(str(int(preds.groups[i])))
                row += [f"{v:.17g}" for v in preds.probs[i]]
                writer.writerow(row)
        else:
            header = ["example_id", "target"]
            if preds.groups is not None:
                header.append("group")
            header += ["mean", "std"]
            writer.writerow(header)
            for i in range(preds.labels.shape[0]):
                row = [str(i), f"{preds.labels[i]:.17g}"]
                if preds.groups is not None:
                    row.append(str(int(preds.groups[i])))
                row += [f"{preds.means[i]:.17g}", f"{preds.stds[i]:.17g}"]
                writer.writerow(row)


def read_predictions_csv(path) -> PredictionSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if header[0] != "example_id" or header[1] not in ("label", "target"):
        raise ConfigurationError(f"unrecognized prediction header in {path}")
    has_group = "group" in header
    base = 3 if has_group else 2
    ids = [int(r[0]) for r in rows]
    if ids != list(range(len(rows))):
        raise ConfigurationError(f"non-contiguous example ids in {path}")
    groups = np.array([int(r[2]) for r in rows], dtype=np.int64) if has_group else None
    if header[1] == "label":
        labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
        probs = np.array([[float(v) for v in r[base:]] for r in rows])
        return PredictionSet("classification", labels, probs=probs, groups=groups)
    targets = np.array([float(r[1]) for r in rows])
    means = np.array([float(r[base]) for r in rows])
    stds = np.array([float(r[base + 1]) for r in rows])
    return PredictionSet("regression", targets, means=means, stds=stds, groups=groups)


def write_likelihoods_csv(path, likes: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id"] + [f"l_{s}" for s in range(likes.shape[1])])
        for i in range(likes.shape[0]):
            writer.writerow([str(i)] + [f"{v:.17g}" for v in likes[i]])


def read_likelihoods_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row[1:]] for row in reader])


@dataclass
class RunRecord:
    algorithm: str
    seed: int
    status: str
    config_hash: str
    wall_seconds: float
    cell_dir: str
    splits: dict = field(default_factory=dict)
    error: str | None = None
    fidelity: dict | None = None

    def to_dict(self) -> dict:
        doc = {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "status": self.status,
            "config_hash": self.config_hash,
            "wall_seconds": self.wall_seconds,
            "splits": self.splits,
        }
        if self.error is not None:
            doc["error"] = self.error
        if self.fidelity is not None:
            doc["fidelity"] = self.fidelity
        return doc

    @staticmethod
    def from_dict(doc: dict, cell_dir: str) -> "RunRecord":
        return RunRecord(
            algorithm=doc["algorithm"],
            seed=doc["seed"],
            status=doc["status"],
            config_hash=doc["config_hash"],
            wall_seconds=doc["wall_seconds"],
            cell_dir=cell_dir,
            splits=doc.get("splits", {}),
            error=doc.get("error"),
            fidelity=doc.get("fidelity"),
        )


def _record_path(cell_dir: pathlib.Path) -> pathlib.Path:
    return cell_dir / "record.json"


def load_record(cell_dir) -> RunRecord:
    cell_dir = pathlib.Path(cell_dir)
    doc = json.loads(_record_path(cell_dir).read_text())
    return RunRecord.from_dict(doc, str(cell_dir))


def _write_record(record: RunRecord):
    path = _record_path(pathlib.Path(record.cell_dir))
    path.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))


def _run_cell(payload) -> dict:
    """One grid cell, executed possibly in a worker process."""
    (cell_dir, config_hash, generator, task_params, shift_doc, alg, seed,
     eval_samples, metrics_doc) = payload
    cell_path = pathlib.Path(cell_dir)
    cell_path.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    record = RunRecord(alg["id"], seed, "failed", config_hash, 0.0, cell_dir)
    try:
        shift = ShiftSpec(**shift_doc)
        metric_cfg = MetricConfig(**metrics_doc)
        task = build_task(generator, task_params, seed)
        spec = model_spec_for(task, alg["model"])
        if alg["name"] in ("mcd", "multi-mcd") and spec.dropout_rate == 0.0:
            spec = MLPSpec(spec.layer_widths, activation=spec.activation, head=spec.head,
                           dropout_rate=0.1, fixed_output_std=spec.fixed_output_std)
        train_cfg = TrainConfig.from_dict({**alg["train"], "seed": seed})
        vi_cfg = VIConfig.from_dict(alg["vi"])
        posterior = train_algorithm(alg["name"], spec, task.train, train_cfg, vi_cfg,
                                    alg["knobs"], val_set=task.val)
        save_posterior(posterior, cell_path / "posterior")

        for split_name, data in evaluation_splits(task, shift).items():
            preds = posterior.predict(data, eval_samples=eval_samples, seed=seed)
            likes = per_sample_likelihoods(posterior, data, eval_samples=eval_samples, seed=seed)
            pred_file = f"predictions-{split_name}.csv"
            like_file = f"likelihoods-{split_name}.csv"
            write_predictions_csv(cell_path / pred_file, preds)
            write_likelihoods_csv(cell_path / like_file, likes)
            # score the reloaded files so stored metrics are recomputable bit-for-bit
            reloaded = read_predictions_csv(cell_path / pred_file)
            reloaded_likes = read_likelihoods_csv(cell_path / like_file)
            report = compute_report(reloaded, metric_cfg, likelihoods=reloaded_likes)
            entry = {"predictions": pred_file, "likelihoods": like_file,
                     "metrics": report.to_dict()}
            if report.bins is not None:
                bins_file = f"bins-{split_name}.csv"
                (cell_path / bins_file).write_text(report.bins.to_csv())
                entry["bins"] = bins_file
            record.splits[split_name] = entry
        record.status = "ok"
    except Exception as exc:  # per-cell failures must not abort the grid
        record.error = f"{type(exc).__name__}: {exc}"
    record.wall_seconds = time.perf_counter() - started
    _write_record(record)
    return record.to_dict()


def run_experiment(config: ExperimentConfig, jobs: int = 1, force: bool = False):
    """Run the (algorithm, seed) grid; idempotent over completed cells."""
    out_dir = config.resolve_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = config.config_hash()
    (out_dir / "config.json").write_text(
        json.dumps(config.normalized(), indent=2, sort_keys=True))

    normalized = config.normalized()
    pending = []
    records = {}
    for alg in config.algorithms:
        for seed in config.seeds:
            cell_dir = out_dir / "cells" / alg["id"] / f"seed-{seed}"
            key = (alg["id"], seed)
            if not force and _record_path(cell_dir).exists():
                existing = load_record(cell_dir)
                if existing.config_hash == config_hash and existing.status == "ok":
                    records[key] = existing
                    continue
            payload = (str(cell_dir), config_hash, config.generator, config.task_params,
                       normalized["task"]["shift"], alg, seed, config.eval_samples,
                       normalized["metrics"])
            pending.append((key, payload))

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (key, payload), doc in zip(pending, pool.map(_run_cell, [p for _, p in pending])):
                records[key] = RunRecord.from_dict(doc, payload[0])
    else:
        for key, payload in pending:
            records[key] = RunRecord.from_dict(_run_cell(payload), payload[0])

    ordered = [records[(alg["id"], seed)] for alg in config.algorithms for seed in config.seeds]
    return ordered


def _first_divergent_id(a: PredictionSet, b: PredictionSet) -> int:
    n = min(a.labels.shape[0], b.labels.shape[0])
    for i in range(n):
        if a.labels[i] != b.labels[i]:
            return i
    return n


def compare_to_reference(model_cell_dir, reference_cell_dir) -> dict:
    """Fidelity of a model cell against a reference cell, split by split.

    Regression splits are compared through their exceed-threshold binary
    analogue; the nll delta stays in the native prediction space.
    """
    model_dir = pathlib.Path(model_cell_dir)
    reference_dir = pathlib.Path(reference_cell_dir)
    model_record = load_record(model_dir)
    reference_record = load_record(reference_dir)
    shared = [s for s in model_record.splits if s in reference_record.splits]
    if not shared:
        raise ConfigurationError("no shared splits between model and reference records")
    fidelity = {"reference": str(reference_dir), "splits": {}}
    for split in shared:
        model_preds = read_predictions_csv(model_dir / model_record.splits[split]["predictions"])
        ref_preds = read_predictions_csv(reference_dir / reference_record.splits[split]["predictions"])
        if model_preds.labels.shape[0] != ref_preds.labels.shape[0] or not np.array_equal(
                model_preds.labels, ref_preds.labels):
            raise ConfigurationError(
                f"prediction rows diverge on split {split!r} at example_id "
                f"{_first_divergent_id(model_preds, ref_preds)}")
        nll_delta = nll(model_preds) - nll(ref_preds)
        if model_preds.kind == "regression":
            model_preds = as_binary_classification(model_preds)
            ref_preds = as_binary_classification(ref_preds)
        fidelity["splits"][split] = {
            "tv": total_variation(model_preds, ref_preds),
            "agreement": top1_agreement(model_preds, ref_preds),
            "nll_delta": nll_delta,
        }
    model_record.fidelity = fidelity
    _write_record(model_record)
    return fidelity


@dataclass
class ReportBundle:
    aggregates: dict
    summary_csv: str
    summary_json: str
    figures: list


def _aggregate(records) -> dict:
    cells = {}
    for record in records:
        if record.status != "ok":
            continue
        for split, entry in record.splits.items():
            for metric, value in entry["metrics"].items():
                cells.setdefault((record.algorithm, split, metric), []).append(value)
    aggregates = {}
    for (alg, split, metric), values in cells.items():
        arr = np.array(values)
        ci = None
        if arr.size >= 2:
            half = float(student_t.ppf(0.975, arr.size - 1) * arr.std(ddof=1) / np.sqrt(arr.size))
            ci = half
        aggregates.setdefault(alg, {}).setdefault(split, {})[metric] = {
            "mean": float(arr.mean()),
            "ci95": ci,
            "n": int(arr.size),
        }
    return aggregates


def _pareto_figures(records, aggregates, fig_dir: pathlib.Path) -> list:
    paths = []
    splits = sorted({s for alg in aggregates.values() for s in alg})
    for split in splits:
        points = []
        for alg in sorted(aggregates):
            metrics = aggregates[alg].get(split, {})
            x_name = "accuracy" if "accuracy" in metrics else "pearson"
            y_name = "sece" if "sece" in metrics else "sqce"
            if x_name in metrics and y_name in metrics:
                points.append((alg, metrics[x_name]["mean"], metrics[y_name]["mean"], x_name, y_name))
        if not points:
            continue
        fig, ax = plt.subplots(figsize=(5, 4))
        for alg, x, y, _, _ in points:
            ax.scatter([x], [y], label=alg)
        ax.axhline(0.0, color="gray", linewidth=0.8, linestyle="--")
        ax.set_xlabel(points[0][3])
        ax.set_ylabel(points[0][4])
        ax.set_title(f"split {split}")
        ax.legend(fontsize=7)
        path = fig_dir / f"pareto-{split}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(str(path))
    return paths


def _reliability_figures(records, fig_dir: pathlib.Path) -> list:
    pooled = {}
    for record in records:
        if record.status != "ok" or "test-id" not in record.splits:
            continue
        preds = read_predictions_csv(
            pathlib.Path(record.cell_dir) / record.splits["test-id"]["predictions"])
        if preds.kind != "classification":
            continue
        pooled.setdefault(record.algorithm, []).append(preds)
    paths = []
    for alg, parts in sorted(pooled.items()):
        labels = np.concatenate([p.labels for p in parts])
        probs = np.vstack([p.probs for p in parts])
        _, _, bins = ece_sece(PredictionSet("classification", labels, probs=probs))
        fig, ax = plt.subplots(figsize=(4, 4))
        centers = (bins.edges[:-1] + bins.edges[1:]) / 2
        nonempty = bins.counts > 0
        ax.bar(centers[nonempty], bins.accuracy[nonempty], width=0.1 * 0.9,
               edgecolor="black", alpha=0.7)
        ax.plot([0, 1], [0, 1], color="gray", linestyle="--", linewidth=0.8)
        ax.set_xlabel("confidence")
        ax.set_ylabel("accuracy")
        ax.set_title(alg)
        path = fig_dir / f"reliability-{alg}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(str(path))
    return paths


def _fidelity_figure(records, fig_dir: pathlib.Path) -> list:
    rows = []
    for record in records:
        if record.fidelity is None:
            continue
        for split, entry in record.fidelity["splits"].items():
            if split == "test-id":
                level = 0
            elif split.startswith("level-"):
                level = int(split.split("-", 1)[1])
            else:
                continue
            rows.append((record.algorithm, level, entry["tv"]))
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(5, 4))
    algorithms = sorted({alg for alg, _, _ in rows})
    for j, alg in enumerate(algorithms):
        xs = [level + 0.06 * j for a, level, _ in rows if a == alg]
        ys = [tv for a, _, tv in rows if a == alg]
        ax.scatter(xs, ys, label=alg, s=12)
    ax.set_xlabel("corruption level")
    ax.set_ylabel("tv vs reference")
    ax.legend(fontsize=7)
    path = fig_dir / "tv-levels.png"
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return [str(path)]


def emit_report(records, out_dir) -> ReportBundle:
    """Aggregate records into summary tables and static figures."""
    if not records:
        raise ConfigurationError("emit_report needs at least one record")
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    aggregates = _aggregate(records)

    summary_csv = out_dir / "summary.csv"
    with open(summary_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "split", "metric", "mean", "ci95", "n"])
        for alg in sorted(aggregates):
            for split in sorted(aggregates[alg]):
                for metric in sorted(aggregates[alg][split]):
                    cell = aggregates[alg][split][metric]
                    ci = "" if cell["ci95"] is None else f"{cell['ci95']:.17g}"
                    writer.writerow([alg, split, metric, f"{cell['mean']:.17g}", ci, cell["n"]])
    summary_json = out_dir / "summary.json"
    summary_json.write_text(json.dumps(aggregates, indent=2, sort_keys=True))

    figures = []
    figures += _pareto_figures(records, aggregates, fig_dir)
    figures += _reliability_figures(records, fig_dir)
    figures += _fidelity_figure(records, fig_dir)
    return ReportBundle(aggregates, str(summary_csv), str(summary_json), figures)


def load_records(out_dir) -> list:
    """All cell records under an output directory, in stable order."""
    out_dir = pathlib.Path(out_dir)
    paths = sorted(out_dir.glob("cells/*/seed-*/record.json"))
    return [load_record(p.parent) for p in paths]
