"""Synthetic benchmark tasks with controllable distribution shift.

Four generator families: interleaved half-circle classification with
rotation/noise corruption, interval-gap regression, group-imbalanced blob
classification, and a linear-Gaussian task whose exact posterior is known.
"""

from __future__ import annotations

import csv
import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .models import ConfigurationError, Dataset, child_seed, rng_from
from .reference import ConjugateLinearModel


@dataclass(frozen=True)
class ShiftSpec:
    """How corruption levels map to input perturbations."""

    corruption_levels: tuple = (0, 1, 3, 5)
    rotation_per_level: float = 10.0
    noise_std_per_level: float = 0.05

    def __post_init__(self):
        levels = tuple(int(v) for v in self.corruption_levels)
        if any(v < 0 for v in levels):
            raise ConfigurationError("corruption levels must be nonnegative")
        if len(set(levels)) != len(levels):
            raise ConfigurationError("corruption levels must be distinct")
        object.__setattr__(self, "corruption_levels", levels)


@dataclass
class SyntheticTask:
    name: str
    kind: str
    train: Dataset
    val: Dataset
    test_id: Dataset
    ood: dict = field(default_factory=dict)
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")


def _stratified_split(rng, strata: np.ndarray):
    """70/10/20 index split, allocated within each stratum."""
    train_idx, val_idx, test_idx = [], [], []
    for value in np.unique(strata):
        members = np.flatnonzero(strata == value)
        members = members[rng.permutation(members.size)]
        n_train = int(np.floor(0.7 * members.size))
        n_val = int(np.floor(0.1 * members.size))
        train_idx.append(members[:n_train])
        val_idx.append(members[n_train:n_train + n_val])
        test_idx.append(members[n_train + n_val:])
    return (np.sort(np.concatenate(train_idx)),
            np.sort(np.concatenate(val_idx)),
            np.sort(np.concatenate(test_idx)))


def make_two_moons(n: int, label_noise: float = 0.0, seed: int = 0) -> SyntheticTask:
    """Two interleaved half-circles in 2-D with optional label flips."""
    if n < 40:
        raise ConfigurationError("two-moons needs n >= 40")
    if not 0.0 <= label_noise < 0.5:
        raise ConfigurationError("label_noise must be in [0, 0.5)")
    n0 = n - n // 2
    angle_rng = rng_from(child_seed(seed, 1))
    noise_rng = rng_from(child_seed(seed, 2))
    flip_rng = rng_from(child_seed(seed, 3))
    split_rng = rng_from(child_seed(seed, 4))

    t0 = angle_rng.uniform(0.0, np.pi, n0)
    t1 = angle_rng.uniform(0.0, np.pi, n - n0)
    outer = np.column_stack([np.cos(t0), np.sin(t0)])
    inner = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    inputs = np.vstack([outer, inner]) + 0.1 * noise_rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)])
    if label_noise > 0:
        flips = flip_rng.random(n) < label_noise
        labels = np.where(flips, 1 - labels, labels)

    tr, va, te = _stratified_split(split_rng, labels)
    task = SyntheticTask(
        name="two-moons",
        kind="classification",
        train=Dataset(inputs[tr], labels[tr], split="train"),
        val=Dataset(inputs[va], labels[va], split="val"),
        test_id=Dataset(inputs[te], labels[te], split="test-id"),
        seed=seed,
        config={"n": n, "label_noise": label_noise},
    )
    return task


def corrupt(task: SyntheticTask, level: int, spec: ShiftSpec | None = None) -> Dataset:
    """Shifted copy of test-id: rotate the first two features and add noise.

    Rotation is about the test-id centroid so higher levels change orientation
    without translating the cloud. Level 0 is the identity.
    """
    spec = spec or ShiftSpec()
    if level not in spec.corruption_levels:
        raise ConfigurationError(f"level {level} not in {spec.corruption_levels}")
    base = task.test_id
    if level == 0:
        return base
    inputs = base.inputs.copy()
    theta = np.deg2rad(level * spec.rotation_per_level)
    center = inputs[:, :2].mean(axis=0)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    inputs[:, :2] = (inputs[:, :2] - center) @ rot.T + center
    noise_rng = rng_from(child_seed(task.seed, 100 + level))
    inputs += level * spec.noise_std_per_level * noise_rng.standard_normal(inputs.shape)
    return Dataset(inputs, base.targets.copy(), groups=base.groups, split="test-ood")


def make_gap_regression(n: int, seed: int = 0) -> SyntheticTask:
    """sin(3x) regression trained outside (-0.5, 0.5); the gap is the ood split."""
    if n < 50:
        raise ConfigurationError("gap regression needs n >= 50")
    x_rng = rng_from(child_seed(seed, 1))
    y_rng = rng_from(child_seed(seed, 2))
    split_rng = rng_from(child_seed(seed, 4))

    side = x_rng.random(n) < 0.5
    x = np.where(side, x_rng.uniform(-2.0, -0.5, n), x_rng.uniform(0.5, 2.0, n))
    n_gap = max(10, round(0.2 * n))
    x_gap = x_rng.uniform(-0.5, 0.5, n_gap)

    def targets(xs, rng):
        return np.sin(3.0 * xs) + 0.1 * rng.standard_normal(xs.shape)

    y = targets(x, y_rng)
    y_gap = targets(x_gap, y_rng)
    order = split_rng.permutation(n)
    n_train = int(np.floor(0.7 * n))
    n_val = int(np.floor(0.1 * n))
    tr = order[:n_train]
    va = order[n_train:n_train + n_val]
    te = order[n_train + n_val:]
    task = SyntheticTask(
        name="gap-regression",
        kind="regression",
        train=Dataset(x[tr, None], y[tr], split="train"),
        val=Dataset(x[va, None], y[va], split="val"),
        test_id=Dataset(x[te, None], y[te], split="test-id"),
        ood={"gap": Dataset(x_gap[:, None], y_gap, split="test-ood")},
        seed=seed,
        config={"n": n, "output_std": 0.1},
    )
    return task


def make_grouped_classification(n: int, groups: int = 4, imbalance: float = 0.1,
                                seed: int = 0) -> SyntheticTask:
    """Two blob classes whose margin shrinks across groups; group sizes skewed.

    The smallest group holds fraction ``imbalance`` of the data, so worst-group
    accuracy diverges from overall accuracy under imbalance.
    """
    if groups < 2:
        raise ConfigurationError("need at least two groups")
    if not 0.0 < imbalance <= 1.0 / groups:
        raise ConfigurationError("imbalance must be in (0, 1/groups]")
    size_small = max(4, round(imbalance * n))
    rest = n - size_small
    sizes = [size_small] + [rest // (groups - 1)] * (groups - 1)
    for i in range(rest - sum(sizes[1:])):
        sizes[1 + i % (groups - 1)] += 1
    sizes = sizes[::-1]  # group 0 largest, last group smallest

    blob_rng = rng_from(child_seed(seed, 1))
    shift_rng = rng_from(child_seed(seed, 2))
    split_rng = rng_from(child_seed(seed, 4))
    inputs, labels, tags = [], [], []
    for g, size in enumerate(sizes):
        # margin shrinks with the group index; a shared covariate shift moves the cloud
        margin = 1.5 / (1.0 + 0.4 * g)
        shift = 0.8 * shift_rng.standard_normal(2)
        half = size - size // 2
        for cls, m in ((0, half), (1, size - half)):
            center = shift + (margin if cls == 1 else -margin) * np.array([1.0, 0.0])
            inputs.append(center + blob_rng.standard_normal((m, 2)))
            labels.append(np.full(m, cls, dtype=np.int64))
            tags.append(np.full(m, g, dtype=np.int64))
    inputs = np.vstack(inputs)
    labels = np.concatenate(labels)
    tags = np.concatenate(tags)

    strata = tags * 2 + labels
    tr, va, te = _stratified_split(split_rng, strata)
    task = SyntheticTask(
        name="grouped-blobs",
        kind="classification",
        train=Dataset(inputs[tr], labels[tr], groups=tags[tr], split="train"),
        val=Dataset(inputs[va], labels[va], groups=tags[va], split="val"),
        test_id=Dataset(inputs[te], labels[te], groups=tags[te], split="test-id"),
        seed=seed,
        config={"n": n, "groups": groups, "imbalance": imbalance},
    )
    return task


def make_conjugate_task(d: int, n: int, noise_std: float = 0.1, prior_std: float = 1.0,
                        seed: int = 0, orthonormal: bool = True):
    """Linear-Gaussian data plus the conjugate model for its exact posterior.

    The returned model conditions on exactly the train split. With the
    orthonormal flag the train design satisfies X^T X = n I, which makes the
    exact posterior covariance diagonal.
    """
    if n <= d:
        raise ConfigurationError("conjugate task needs n > d")
    design_rng = rng_from(child_seed(seed, 1))
    weight_rng = rng_from(child_seed(seed, 2))
    noise_rng = rng_from(child_seed(seed, 3))

    raw = design_rng.standard_normal((n, d))
    if orthonormal:
        q, _ = np.linalg.qr(raw)
        design = q * np.sqrt(n)
    else:
        design = raw
    weights = prior_std * weight_rng.standard_normal(d)

    def draw(xs):
        return xs @ weights + noise_std * noise_rng.standard_normal(xs.shape[0])

    y = draw(design)
    m_eval = max(10, n // 5)
    x_val = design_rng.standard_normal((m_eval, d))
    x_test = design_rng.standard_normal((m_eval, d))
    task = SyntheticTask(
        name="conjugate-linear",
        kind="regression",
        train=Dataset(design, y, split="train"),
        val=Dataset(x_val, draw(x_val), split="val"),
        test_id=Dataset(x_test, draw(x_test), split="test-id"),
        seed=seed,
        config={"d": d, "n": n, "noise_std": noise_std, "prior_std": prior_std,
                "orthonormal": orthonormal, "output_std": noise_std},
    )
    model = ConjugateLinearModel(design, y, noise_std=noise_std, prior_std=prior_std)
    return task, model


def export_dataset_csv(data: Dataset, path):
    """Write one split as `x_0..x_{d-1},target[,group]` rows."""
    path = pathlib.Path(path)
    d = data.inputs.shape[1]
    header = [f"x_{j}" for j in range(d)] + ["target"]
    if data.groups is not None:
        header.append("group")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.inputs.shape[0]):
            row = [f"{v:.17g}" for v in data.inputs[i]]
            if data.is_classification:
                row.append(str(int(data.targets[i])))
            else:
                row.append(f"{data.targets[i]:.17g}")
            if data.groups is not None:
                row.append(str(int(data.groups[i])))
            writer.writerow(row)


def import_dataset_csv(path, split: str, classification: bool) -> Dataset:
    path = pathlib.Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    has_group = header[-1] == "group"
    d = len(header) - (2 if has_group else 1)
    if header[:d] != [f"x_{j}" for j in range(d)] or header[d] != "target":
        raise ConfigurationError(f"unrecognized dataset header in {path}")
    inputs = np.array([[float(v) for v in row[:d]] for row in rows])
    if classification:
        targets = np.array([int(row[d]) for row in rows], dtype=np.int64)
    else:
        targets = np.array([float(row[d]) for row in rows])
    groups = np.array([int(row[-1]) for row in rows], dtype=np.int64) if has_group else None
    return Dataset(inputs, targets, groups=groups, split=split)


def export_task(task: SyntheticTask, directory):
    """One CSV per split plus a JSON sidecar naming them."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"train.csv": ("train", task.train), "val.csv": ("val", task.val),
             "test-id.csv": ("test-id", task.test_id)}
    for key, data in task.ood.items():
        files[f"ood-{key}.csv"] = ("test-ood", data)
    for fname, (_, data) in files.items():
        export_dataset_csv(data, directory / fname)
    sidecar = {
        "name": task.name,
        "kind": task.kind,
        "seed": task.seed,
        "config": task.config,
        "splits": {fname: split for fname, (split, _) in files.items()},
        "ood_keys": {f"ood-{key}.csv": str(key) for key in task.ood},
    }
    (directory / "task.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def import_task(directory) -> SyntheticTask:
    directory = pathlib.Path(directory)
    sidecar = json.loads((directory / "task.json").read_text())
    classification = sidecar["kind"] == "classification"
    parts = {}
    ood = {}
    for fname, split in sidecar["splits"].items():
        data = import_dataset_csv(directory / fname, split, classification)
        if fname in sidecar["ood_keys"]:
            key = sidecar["ood_keys"][fname]
            ood[int(key) if key.lstrip("-").isdigit() else key] = data
        else:
            parts[split] = data
    return SyntheticTask(
        name=sidecar["name"],
        kind=sidecar["kind"],
        train=parts["train"],
        val=parts["val"],
        test_id=parts["test-id"],
        ood=ood,
        seed=sidecar["seed"],
        config=sidecar["config"],
    )
