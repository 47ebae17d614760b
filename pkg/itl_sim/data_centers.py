"""Virtual centers: synthetic task generation, heterogeneity, ordering and batching.

External datasets are described by a JSON manifest::

    {
      "num_classes": 10,
      "value_range": [0.0, 1.0],
      "centers": [
        {"name": "center-1", "files": {"train": "c1_train.csv", "val": "...", "test": "..."},
         "heterogeneity": {"kind": "clean"}},
        {"name": "center-2", "path": "c2.csv", "fractions": [0.64, 0.16, 0.2],
         "heterogeneity": {"kind": "gaussian", "sigma": 25}}
      ]
    }

``csv-labels`` files have a header ``label,f0,f1,...`` (optionally preceded by an
``id`` column). ``raw-tensor-dir`` centers point at a directory holding
``{split}.x.f64`` / ``{split}.y.f64`` (little-endian float64) and ``shape.json``.
Paths are relative to the manifest.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)
NOISE_REFERENCE_RANGE = 255.0
EXTERNAL_FORMATS = ("csv-labels", "raw-tensor-dir")

Batch = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class Split:
    """Instances ``x`` (batch-major), labels ``y`` and globally unique sample ``ids``."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.ids)):
            raise DataError(
                f"split arrays disagree in length: x={len(self.x)} y={len(self.y)} ids={len(self.ids)}"
            )

    def __len__(self) -> int:
        return len(self.x)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.y.astype(np.int64), minlength=num_classes)


@dataclass(frozen=True)
class Clean:
    kind: str = "clean"


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float
    clip: bool = False
    kind: str = "gaussian"


Heterogeneity = Union[Clean, GaussianNoise]


@dataclass(frozen=True)
class CenterDataset:
    """One center's local data.

    ``center`` is the position in the training sequence (1-based); ``source``
    names the center the data originally came from and survives reordering.
    """

    center: int
    train: Split
    val: Split
    test: Split
    num_classes: int
    heterogeneity: Heterogeneity = field(default_factory=Clean)
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    value_range: Tuple[float, float] = (0.0, 1.0)
    source: str = ""

    def __post_init__(self):
        if not self.source:
            object.__setattr__(self, "source", f"center-{self.center}")
        shapes = {s.x.shape[1:] for s in self.splits()}
        if len(shapes) != 1:
            raise DataError(f"{self.source}: splits disagree on instance shape {sorted(shapes)}")
        ids = np.concatenate([s.ids for s in self.splits()])
        if len(np.unique(ids)) != len(ids):
            raise DataError(f"{self.source}: an instance appears in more than one split")

    def splits(self) -> Tuple[Split, Split, Split]:
        return self.train, self.val, self.test

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train.x.shape[1:])


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------


def _split_counts(per_center_counts) -> Tuple[int, int, int]:
    if isinstance(per_center_counts, (int, np.integer)):
        total = int(per_center_counts)
        train = int(round(total * DEFAULT_FRACTIONS[0]))
        val = int(round(total * DEFAULT_FRACTIONS[1]))
        counts = (train, val, total - train - val)
    else:
        counts = tuple(int(c) for c in per_center_counts)
        if len(counts) != 3:
            raise DataError("per-center counts must be an integer or a (train, val, test) triple")
    if min(counts) < 1:
        raise DataError(f"infeasible per-class counts {counts}: every split needs at least one instance per class")
    return counts


def make_synthetic_task(
    num_classes: int = 10,
    dim: int = 32,
    per_center_counts: Union[int, Sequence[int]] = (80, 20, 10),
    num_centers: int = 5,
    seed: int = 0,
    cluster_std: float = 0.12,
    mean_spread: float = 0.05,
) -> List[CenterDataset]:
    """Class-conditional Gaussian clusters, partitioned IID across centers.

    Class means are drawn uniformly from ``[0.5 - mean_spread, 0.5 + mean_spread]``
    per dimension, so instances live on a unit value range.

    Parameters
    ----------
    num_classes : int
        Number of classes, shared by every center.
    dim : int
        Instance dimension.
    per_center_counts : int or (int, int, int)
        Instances per class per center, either as a ``(train, val, test)``
        triple or as a total split 64/16/20.
    num_centers : int
        Number of centers.
    seed : int
        Determines the cluster means and every draw.

    Returns
    -------
    list of CenterDataset
        One dataset per center, in training order.

    Examples
    --------
    >>> centers = make_synthetic_task(num_classes=3, dim=4, per_center_counts=(8, 2, 2), num_centers=2)
    >>> [len(c.train) for c in centers]
    [24, 24]
    """
    if num_centers < 1:
        raise DataError("at least one center is required")
    if num_classes < 2:
        raise DataError("a classification task needs at least two classes")
    if dim < 1:
        raise DataError("instance dimension must be positive")
    counts = _split_counts(per_center_counts)
    per_class = sum(counts)
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.5 - mean_spread, 0.5 + mean_spread, size=(num_classes, dim))
    blocks: Dict[int, Dict[str, List]] = {c: {s: [] for s in SPLITS} for c in range(num_centers)}
    for label in range(num_classes):
        n = per_class * num_centers
        x = means[label] + cluster_std * rng.standard_normal((n, dim))
        ids = label * n + np.arange(n)
        order = rng.permutation(n)
        for center in range(num_centers):
            rows = order[center * per_class : (center + 1) * per_class]
            start = 0
            for split, count in zip(SPLITS, counts):
                take = rows[start : start + count]
                blocks[center][split].append((x[take], np.full(count, label, dtype=np.float64), ids[take]))
                start += count
    centers = []
    fractions = tuple(c / per_class for c in counts)
    for center in range(num_centers):
        splits = {}
        for split in SPLITS:
            xs, ys, ids = zip(*blocks[center][split])
            splits[split] = Split(np.concatenate(xs), np.concatenate(ys), np.concatenate(ids))
        centers.append(CenterDataset(center + 1, num_classes=num_classes, fractions=fractions, **splits))
    logger.debug(
        "synthetic task: %d centers, %d classes, dim %d, counts %s per class", num_centers, num_classes, dim, counts
    )
    return centers


# ---------------------------------------------------------------------------
# Heterogeneity and ordering
# ---------------------------------------------------------------------------


def apply_noise(dataset: CenterDataset, sigma: float, seed: int = 0, clip: bool = False) -> CenterDataset:
    """Add zero-mean Gaussian noise to every split of one center.

    ``sigma`` is expressed on an 8-bit scale: the standard deviation applied is
    ``sigma / 255`` times the width of the dataset's value range. Labels are
    untouched.
    """
    if sigma < 0:
        raise DataError("noise sigma must be non-negative")
    if sigma == 0:
        return dataset
    lo, hi = dataset.value_range
    std = sigma / NOISE_REFERENCE_RANGE * (hi - lo)
    rng = np.random.default_rng([seed, dataset.center])
    noisy = {}
    for name, split in zip(SPLITS, dataset.splits()):
        x = split.x + std * rng.standard_normal(split.x.shape)
        if clip:
            x = np.clip(x, lo, hi)
        noisy[name] = replace(split, x=x)
    logger.info("added noise sigma=%g (std %.4g) to %s", sigma, std, dataset.source)
    return replace(dataset, heterogeneity=GaussianNoise(sigma, clip), **noisy)


def check_permutation(permutation: Sequence[int], n: int) -> Tuple[int, ...]:
    perm = tuple(int(p) for p in permutation)
    if sorted(perm) != list(range(1, n + 1)):
        raise ConfigurationError(f"invalid center permutation {list(permutation)} for {n} centers")
    return perm


def reorder_centers(datasets: Sequence[CenterDataset], permutation: Sequence[int]) -> List[CenterDataset]:
    """Put ``datasets[permutation[i] - 1]`` at training position ``i + 1``."""
    perm = check_permutation(permutation, len(datasets))
    return [replace(datasets[p - 1], center=i + 1) for i, p in enumerate(perm)]


def pool_centers(datasets: Sequence[CenterDataset]) -> CenterDataset:
    """Mix every center's splits into one dataset."""
    if not datasets:
        raise DataError("nothing to pool")
    pooled, offset = {}, 0
    for i, name in enumerate(SPLITS):
        parts = [d.splits()[i] for d in datasets]
        n = sum(len(p) for p in parts)
        pooled[name] = Split(
            np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), offset + np.arange(n)
        )
        offset += n
    first = datasets[0]
    return CenterDataset(
        1,
        num_classes=first.num_classes,
        value_range=first.value_range,
        fractions=first.fractions,
        source="pooled",
        **pooled,
    )


def as_mask_task(dataset: CenterDataset) -> CenterDataset:
    """Replace class labels with one-hot binary masks, for training with the Dice loss."""
    eye = np.eye(dataset.num_classes)
    masks = {
        name: replace(split, y=eye[split.y.astype(np.int64)]) for name, split in zip(SPLITS, dataset.splits())
    }
    return replace(dataset, **masks)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def class_weights(split: Split, num_classes: int) -> np.ndarray:
    """Per-instance sampling probabilities proportional to ``1 / class_count``."""
    counts = split.class_counts(num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DataError(f"classes {missing.tolist()} are absent from the split; cannot balance")
    weights = 1.0 / counts[split.y.astype(np.int64)]
    return weights / weights.sum()


def balanced_batches(
    split: Split, batch_size: int, rng: np.random.Generator, num_classes: int
) -> Iterator[Batch]:
    """One epoch of class-balanced batches, sampled with replacement.

    The epoch draws ``len(split)`` instances, so it has as many batches as an
    ordinary pass over the split.
    """
    if batch_size < 1:
        raise ConfigurationError("batch size must be positive")
    p = class_weights(split, num_classes)
    draws = rng.choice(len(split), size=len(split), replace=True, p=p)
    for start in range(0, len(draws), batch_size):
        rows = draws[start : start + batch_size]
        yield split.x[rows], split.y[rows]


def shuffled_batches(split: Split, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    if batch_size < 1:
        raise ConfigurationError("batch size must be positive")
    order = rng.permutation(len(split))
    for start in range(0, len(order), batch_size):
        rows = order[start : start + batch_size]
        yield split.x[rows], split.y[rows]


# ---------------------------------------------------------------------------
# External formats
# ---------------------------------------------------------------------------


def _parse_heterogeneity(entry) -> Heterogeneity:
    if entry is None or entry.get("kind", "clean") == "clean":
        return Clean()
    if entry.get("kind") == "gaussian":
        return GaussianNoise(float(entry["sigma"]), bool(entry.get("clip", False)))
    raise DataError(f"unknown heterogeneity {entry!r}")


def _heterogeneity_entry(h: Heterogeneity) -> Dict:
    if isinstance(h, GaussianNoise):
        return {"kind": "gaussian", "sigma": h.sigma, "clip": h.clip}
    return {"kind": "clean"}


def _read_csv(path: Path, num_classes: int, width: Optional[int]):
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_id = bool(header) and header[0] == "id"
        columns = header[1:] if has_id else header
        if not columns or columns[0] != "label":
            raise DataError(f"{path}: header must start with 'label' (optionally after 'id')")
        n_features = len(columns) - 1
        if width is not None and n_features != width:
            raise DataError(f"{path}: {n_features} feature columns, other files have {width}")
        ids, labels, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}, line {lineno}: expected {n_features} features, got {len(row) - 1 - has_id}"
                )
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path}, line {lineno}: non-numeric value") from None
            if not np.isfinite(values).all():
                raise DataError(f"{path}, line {lineno}: non-finite value")
            if has_id:
                ids.append(int(values.pop(0)))
            label = values[0]
            if label != int(label) or not 0 <= label < num_classes:
                raise DataError(f"{path}, line {lineno}: unknown label {row[int(has_id)]!r}")
            labels.append(label)
            rows.append(values[1:])
    x = np.asarray(rows, dtype=np.float64).reshape(len(rows), n_features)
    return x, np.asarray(labels, dtype=np.float64), (np.asarray(ids, dtype=np.int64) if has_id else None)


def _split_by_fractions(x, y, ids, fractions) -> Dict[str, Split]:
    n = len(x)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    bounds = [0, n_train, n_train + n_val, n]
    if ids is None:
        ids = np.arange(n)
    return {
        name: Split(x[bounds[i] : bounds[i + 1]], y[bounds[i] : bounds[i + 1]], ids[bounds[i] : bounds[i + 1]])
        for i, name in enumerate(SPLITS)
    }


def _load_csv_center(base: Path, entry, num_classes: int, width: Optional[int], fractions):
    if "files" in entry:
        splits, offset = {}, 0
        for name in SPLITS:
            x, y, ids = _read_csv(base / entry["files"][name], num_classes, width)
            width = x.shape[1]
            if ids is None:
                ids = offset + np.arange(len(x))
            offset += len(x)
            splits[name] = Split(x, y, ids)
        return splits
    if "path" in entry:
        x, y, ids = _read_csv(base / entry["path"], num_classes, width)
        return _split_by_fractions(x, y, ids, fractions)
    raise DataError(f"center {entry.get('name')!r} names neither 'files' nor 'path'")


def _load_raw_center(base: Path, entry, num_classes: int):
    directory = base / entry["path"]
    try:
        shape_info = json.loads((directory / "shape.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{directory}: unreadable shape.json ({exc})") from exc
    input_shape = tuple(shape_info["input_shape"])
    splits = {}
    for name in SPLITS:
        count = int(shape_info["counts"][name])
        x = np.fromfile(directory / f"{name}.x.f64", dtype="<f8")
        y = np.fromfile(directory / f"{name}.y.f64", dtype="<f8")
        if x.size != count * int(np.prod(input_shape)) or y.size != count:
            raise DataError(f"{directory}: {name} tensors do not match shape.json")
        bad = (y != np.round(y)) | (y < 0) | (y >= num_classes)
        if bad.any():
            raise DataError(f"{directory}: unknown label {y[bad][0]!r} in {name} split")
        ids = np.asarray(shape_info.get("ids", {}).get(name, range(count)), dtype=np.int64)
        splits[name] = Split(x.reshape((count,) + input_shape).astype(np.float64), y.astype(np.float64), ids)
    return splits


def load_external(path: Union[str, Path], format: str = "csv-labels") -> List[CenterDataset]:
    """Read the centers declared by a manifest, in manifest order."""
    if format not in EXTERNAL_FORMATS:
        raise ConfigurationError(f"unknown dataset format {format!r}; expected one of {EXTERNAL_FORMATS}")
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    num_classes = int(manifest["num_classes"])
    value_range = tuple(float(v) for v in manifest.get("value_range", (0.0, 1.0)))
    base = path.parent
    datasets, shape = [], None
    for i, entry in enumerate(manifest["centers"]):
        fractions = tuple(entry.get("fractions", DEFAULT_FRACTIONS))
        if format == "csv-labels":
            width = None if shape is None else shape[0]
            splits = _load_csv_center(base, entry, num_classes, width, fractions)
        else:
            splits = _load_raw_center(base, entry, num_classes)
        ds = CenterDataset(
            i + 1,
            num_classes=num_classes,
            heterogeneity=_parse_heterogeneity(entry.get("heterogeneity")),
            fractions=fractions,
            value_range=value_range,
            source=entry.get("name", f"center-{i + 1}"),
            **splits,
        )
        if shape is not None and ds.input_shape != shape:
            raise DataError(f"{ds.source}: instance shape {ds.input_shape} differs from {shape}")
        shape = ds.input_shape
        datasets.append(ds)
    logger.info("loaded %d centers from %s", len(datasets), path)
    return datasets


def _write_csv(path: Path, split: Split) -> None:
    x = split.x.reshape(len(split), -1)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "label"] + [f"f{j}" for j in range(x.shape[1])])
        for i in range(len(split)):
            writer.writerow([int(split.ids[i]), repr(float(split.y[i]))] + [repr(float(v)) for v in x[i]])


def export_centers(
    datasets: Sequence[CenterDataset], directory: Union[str, Path], format: str = "csv-labels"
) -> Path:
    """Write datasets in an external format; ``load_external`` on the returned manifest reads them back."""
    if format not in EXTERNAL_FORMATS:
        raise ConfigurationError(f"unknown dataset format {format!r}; expected one of {EXTERNAL_FORMATS}")
    if not datasets:
        raise DataError("nothing to export")
    if format == "csv-labels" and len(datasets[0].input_shape) != 1:
        raise DataError("csv-labels holds flat feature vectors only; use raw-tensor-dir")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in datasets:
        stem = f"center-{ds.center}"
        entry = {
            "name": ds.source,
            "fractions": list(ds.fractions),
            "heterogeneity": _heterogeneity_entry(ds.heterogeneity),
        }
        if format == "csv-labels":
            entry["files"] = {}
            for name, split in zip(SPLITS, ds.splits()):
                _write_csv(directory / f"{stem}_{name}.csv", split)
                entry["files"][name] = f"{stem}_{name}.csv"
        else:
            target = directory / stem
            target.mkdir(exist_ok=True)
            for name, split in zip(SPLITS, ds.splits()):
                split.x.astype("<f8").tofile(target / f"{name}.x.f64")
                split.y.astype("<f8").tofile(target / f"{name}.y.f64")
            shape_info = {
                "input_shape": list(ds.input_shape),
                "counts": {name: len(s) for name, s in zip(SPLITS, ds.splits())},
                "ids": {name: s.ids.astype(np.int64).tolist() for name, s in zip(SPLITS, ds.splits())},
            }
            (target / "shape.json").write_text(json.dumps(shape_info, indent=2))
            entry["path"] = stem
        entries.append(entry)
    manifest = {
        "num_classes": datasets[0].num_classes,
        "value_range": list(datasets[0].value_range),
        "centers": entries,
    }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    logger.info("exported %d centers to %s (%s)", len(datasets), directory, format)
    return manifest_path
