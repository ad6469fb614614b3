"""Multi-view datasets: manifest/CSV ingestion, synthetic generation, perturbations.

On-disk layout (paths relative to the manifest's directory)::

    manifest.json   {"name", "num_classes", "num_samples", "labels", "views": [{"name", "path", "dim"}]}
    <view>.csv      one row per sample, no header, decimal floats
    labels.csv      one integer label per line
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from tmur.engine import stable_hash
from tmur.evidential import DomainError


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, row: int, col: int, cell: str):
        super().__init__(f"{path}: cannot parse {cell!r} at row {row}, column {col}")
        self.path, self.row, self.col = str(path), row, col


@dataclass(frozen=True)
class MultiViewDataset:
    views: tuple[np.ndarray, ...]
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    view_names: tuple[str, ...] = ()

    def __post_init__(self):
        views = tuple(np.asarray(v, dtype=np.float64) for v in self.views)
        labels = np.asarray(self.labels, dtype=np.int64)
        if not views:
            raise DataError("dataset has no views")
        n = labels.shape[0]
        names = self.view_names or tuple(f"view{v}" for v in range(len(views)))
        if len(names) != len(views):
            raise DataError("one name per view required")
        for name, x in zip(names, views):
            if x.ndim != 2 or x.shape[0] != n:
                raise DataError(f"view {name!r} has shape {x.shape}, expected {n} rows")
            if not np.all(np.isfinite(x)):
                raise DataError(f"view {name!r} contains non-finite values")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "view_names", tuple(names))

    @property
    def num_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def view_dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.views)

    def subset(self, index) -> "MultiViewDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, views=tuple(x[index] for x in self.views), labels=self.labels[index])

    def with_views(self, views: Sequence[np.ndarray]) -> "MultiViewDataset":
        return replace(self, views=tuple(views))


# ------------------------------------------------------------------ file formats


def _format_float(x: float) -> str:
    return repr(float(x))


def write_matrix(path, x: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        for row in x:
            fh.write(",".join(_format_float(v) for v in row))
            fh.write("\n")


def read_matrix(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            values = []
            for c, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(path, r, c, cell) from None
                if not math.isfinite(v):
                    raise ParseError(path, r, c, cell)
                values.append(v)
            if rows and len(values) != len(rows[0]):
                raise DataError(f"{path}: row {r} has {len(values)} columns, expected {len(rows[0])}")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: empty feature file")
    return np.array(rows, dtype=np.float64)


def read_labels(path) -> np.ndarray:
    labels = []
    with open(path) as fh:
        for r, line in enumerate(fh):
            cell = line.strip()
            try:
                labels.append(int(cell))
            except ValueError:
                raise ParseError(path, r, 0, cell) from None
    return np.array(labels, dtype=np.int64)


def load_manifest(path) -> MultiViewDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest ({exc})") from exc
    for key in ("num_classes", "labels", "views"):
        if key not in doc:
            raise DataError(f"{path}: manifest lacks {key!r}")
    base = path.parent
    k = int(doc["num_classes"])
    labels = read_labels(base / doc["labels"])
    n = int(doc.get("num_samples", labels.shape[0]))
    if labels.shape[0] != n:
        raise DataError(f"labels file has {labels.shape[0]} rows, manifest says {n}")
    bad = (labels < 0) | (labels >= k)
    if np.any(bad):
        r = int(np.argmax(bad))
        raise DataError(f"label {labels[r]} at row {r} outside [0, {k})")
    views, names = [], []
    for spec in doc["views"]:
        x = read_matrix(base / spec["path"])
        name = spec.get("name", spec["path"])
        if x.shape[0] != n:
            raise DataError(f"view {name!r} has {x.shape[0]} rows, expected {n}")
        if "dim" in spec and x.shape[1] != int(spec["dim"]):
            raise DataError(f"view {name!r} has {x.shape[1]} columns, manifest says {spec['dim']}")
        views.append(x)
        names.append(name)
    return MultiViewDataset(tuple(views), labels, k, doc.get("name", path.stem), tuple(names))


def save_dataset(ds: MultiViewDataset, directory) -> Path:
    """Write CSVs and ``manifest.json`` into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for name, x in zip(ds.view_names, ds.views):
        fname = f"{name}.csv"
        write_matrix(directory / fname, x)
        views.append({"name": name, "path": fname, "dim": int(x.shape[1])})
    (directory / "labels.csv").write_text("".join(f"{int(y)}\n" for y in ds.labels))
    manifest = {
        "name": ds.name,
        "num_classes": ds.num_classes,
        "num_samples": ds.num_samples,
        "labels": "labels.csv",
        "views": views,
    }
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


# ------------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional Gaussian multi-view data.

    In ``static`` mode every view carries class signal on its informative
    coordinates.  In ``sample-dependent`` mode each view also exposes one
    binary context coordinate; the parity of those bits selects the single
    view whose signal follows the true label, while every other view shows
    the signal of an independent decoy label.  No single view can tell
    whether it is the informative one.
    """

    num_samples: int
    num_classes: int
    view_dims: tuple[int, ...]
    informative: tuple[float, ...] | float = 1.0
    noise: tuple[float, ...] | float = 0.0
    mode: str = "static"
    separation: float = 3.0
    seed: int = 0
    name: str = "synthetic"

    def per_view(self, value) -> tuple[float, ...]:
        if isinstance(value, (int, float)):
            return (float(value),) * len(self.view_dims)
        if len(value) != len(self.view_dims):
            raise DataError("per-view settings need one entry per view")
        return tuple(float(v) for v in value)


def generate_synthetic(spec: SyntheticSpec) -> MultiViewDataset:
    n, k, dims = spec.num_samples, spec.num_classes, spec.view_dims
    if k > n:
        raise DataError(f"cannot draw {k} classes from {n} samples")
    if spec.mode not in ("static", "sample-dependent"):
        raise DataError(f"unknown synthetic mode {spec.mode!r}")
    fractions = spec.per_view(spec.informative)
    noises = spec.per_view(spec.noise)
    if any(not 0 <= f <= 1 for f in fractions) or any(s < 0 for s in noises):
        raise DataError("informative fractions must be in [0, 1] and noise >= 0")
    rng = np.random.default_rng([spec.seed, stable_hash("synthetic")])
    labels = np.arange(n) % k
    rng.shuffle(labels)

    signal_labels = [labels] * len(dims)
    context = None
    if spec.mode == "sample-dependent":
        bits = rng.integers(0, 2, size=(n, len(dims)))
        context = bits.sum(axis=1) % len(dims)
        signal_labels = []
        for v in range(len(dims)):
            decoy = rng.integers(0, k, size=n)
            signal_labels.append(np.where(context == v, labels, decoy))

    views = []
    for v, d in enumerate(dims):
        offset = 1 if context is not None else 0
        if d <= offset:
            raise DataError(f"view {v} too narrow for a context coordinate")
        width = d - offset
        n_info = int(round(fractions[v] * width))
        x = rng.standard_normal((n, width))
        if n_info:
            centroids = rng.standard_normal((k, n_info))
            centroids *= spec.separation / np.sqrt(n_info)
            x[:, :n_info] = centroids[signal_labels[v]] + noises[v] * rng.standard_normal((n, n_info))
        if context is not None:
            x = np.concatenate([2.0 * bits[:, v : v + 1] - 1.0, x], axis=1)
        views.append(x)
    return MultiViewDataset(tuple(views), labels, k, spec.name, tuple(f"view{v}" for v in range(len(dims))))


def synthetic_context(spec: SyntheticSpec, ds: MultiViewDataset) -> np.ndarray:
    """Index of the informative view per sample for a sample-dependent dataset."""
    if spec.mode != "sample-dependent":
        raise DataError("only sample-dependent data has a per-sample context")
    bits = np.stack([(x[:, 0] > 0).astype(np.int64) for x in ds.views], axis=1)
    return bits.sum(axis=1) % ds.num_views


# ------------------------------------------------------------------ perturbations


def perturb_view_strength(ds: MultiViewDataset, factors: Sequence[float]) -> MultiViewDataset:
    factors = [float(f) for f in factors]
    if len(factors) != ds.num_views:
        raise DomainError(f"need {ds.num_views} factors, got {len(factors)}")
    if any(not (f > 0 and math.isfinite(f)) for f in factors):
        raise DomainError("view-strength factors must be positive")
    return ds.with_views([x * f for x, f in zip(ds.views, factors)])


def random_view_factors(num_views: int, seed: int, low: float = 0.25, high: float = 4.0) -> np.ndarray:
    """Uniform factors on ``[low, high]`` (our own seeded rescaling protocol)."""
    rng = np.random.default_rng([seed, stable_hash("view-strength")])
    return rng.uniform(low, high, size=num_views)


def add_gaussian_noise(ds: MultiViewDataset, sigma: float, seed: int) -> MultiViewDataset:
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    if sigma == 0:
        return ds
    rng = np.random.default_rng([seed, stable_hash("gaussian-noise")])
    return ds.with_views([x + sigma * rng.standard_normal(x.shape) for x in ds.views])


# ------------------------------------------------------------------ splitting


def stratified_split(labels, ratio: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split.

    Each class first gets ``floor(ratio * n_c)`` training samples; the
    remaining ``round(ratio * N) - sum(floors)`` slots go to the classes with
    the largest fractional parts (ties to the lower class index), never
    leaving a class without a test sample.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise DataError(f"class {classes[np.argmax(counts < 2)]} has fewer than 2 samples")
    exact = ratio * counts
    n_train = np.floor(exact).astype(np.int64)
    remainder = int(math.floor(ratio * labels.shape[0] + 0.5)) - int(n_train.sum())
    order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - n_train[i]), i))
    for i in order:
        if remainder <= 0:
            break
        if n_train[i] < counts[i] - 1:
            n_train[i] += 1
            remainder -= 1
    n_train = np.clip(n_train, 1, counts - 1)

    rng = np.random.default_rng([seed, stable_hash("split")])
    train, test = [], []
    for c, m in zip(classes, n_train):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        train.append(idx[:m])
        test.append(idx[m:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
