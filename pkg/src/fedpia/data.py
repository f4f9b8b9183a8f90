"""Synthetic task generation, non-IID partitioning, and tabular ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError, ShapeError
from .numerics import Rng

__all__ = [
    "Dataset",
    "PartitionSpec",
    "gen_synthetic",
    "dirichlet_partition",
    "load_tabular",
    "save_tabular",
    "TabularSchema",
]


@dataclass
class Dataset:
    """Feature matrix plus single-label indices or a multi-hot label matrix.

    ``class_ids`` maps local label indices back to the classes of the parent
    dataset after a masked partition (None = identity).
    """

    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int for single-label, (n, c) float multi-hot
    num_classes: int
    kind: str  # "single" | "multi"
    class_ids: list[int] | None = None

    def __post_init__(self):
        if self.kind not in ("single", "multi"):
            raise DataError(f"unknown task kind {self.kind!r}")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError("features must be a nonempty 2-D array")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        if len(self.labels) != len(self.features):
            raise DataError("labels and features disagree in length")
        if self.kind == "single":
            if self.labels.ndim != 1:
                raise DataError("single-label dataset needs a 1-D label vector")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise DataError("label index out of range")
        else:
            if self.labels.ndim != 2 or self.labels.shape[1] != self.num_classes:
                raise DataError("multilabel dataset needs an (n, num_classes) matrix")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            kind=self.kind,
            class_ids=self.class_ids,
        )


@dataclass
class PartitionSpec:
    """How to split one dataset across K clients."""

    clients: int
    concentration: float = 0.5
    seed: int = 0
    class_masks: list[list[int]] | None = None
    feature_transform_seeds: list[int] | None = None
    max_retries: int = 100

    def __post_init__(self):
        if self.clients < 1:
            raise DataError("need at least one client")
        if self.concentration <= 0:
            raise DataError("concentration must be positive")
        if self.class_masks is not None and len(self.class_masks) != self.clients:
            raise DataError("one class mask per client required")
        if (
            self.feature_transform_seeds is not None
            and len(self.feature_transform_seeds) != self.clients
        ):
            raise DataError("one feature transform seed per client required")


def gen_synthetic(
    seed: int,
    n_samples: int,
    d: int,
    num_classes: int,
    kind: str = "single",
    margin: float = 2.0,
) -> Dataset:
    """Gaussian class clusters (single-label) or hyperplane-derived multi-hot
    labels (multilabel) with a controllable separation margin."""
    if num_classes < 2:
        raise DataError("need at least two classes")
    if n_samples < 1 or d < 1:
        raise DataError("need n_samples >= 1 and d >= 1")
    rng = Rng(seed, "synthetic")
    if kind == "single":
        means = rng.child("means").normal((num_classes, d))
        means *= margin / np.linalg.norm(means, axis=1, keepdims=True)
        labels = rng.child("labels").integers(0, num_classes, n_samples)
        feats = means[labels] + rng.child("noise").normal((n_samples, d))
        return Dataset(feats, labels, num_classes, "single")
    if kind == "multi":
        feats = rng.child("features").normal((n_samples, d))
        planes = rng.child("hyperplanes").normal((d, num_classes))
        planes /= np.linalg.norm(planes, axis=0, keepdims=True)
        scores = margin * (feats @ planes) + rng.child("flip").normal(
            (n_samples, num_classes)
        )
        labels = (scores > 0).astype(np.float64)
        return Dataset(feats, labels, num_classes, "multi")
    raise DataError(f"unknown task kind {kind!r}")


def _primary_class(ds: Dataset) -> np.ndarray:
    """Partition key per sample: the label itself, or argmax for multi-hot
    rows (all-zero rows become their own pseudo-class)."""
    if ds.kind == "single":
        return ds.labels.astype(np.int64)
    primary = np.argmax(ds.labels, axis=1)
    primary[ds.labels.sum(axis=1) == 0] = ds.num_classes
    return primary


def _assign_by_dirichlet(
    keys: np.ndarray,
    spec: PartitionSpec,
    eligible: dict[int, list[int]],
    rng: Rng,
) -> list[np.ndarray] | None:
    """One attempted draw; returns None when some client ends up empty."""
    per_client: list[list[int]] = [[] for _ in range(spec.clients)]
    for c in sorted(set(keys.tolist())):
        idx = np.flatnonzero(keys == c)
        idx = idx[rng.child(f"class{c}/shuffle").permutation(len(idx))]
        clients = eligible[c]
        props = rng.child(f"class{c}/props").dirichlet(
            np.full(len(clients), spec.concentration)
        )
        cuts = np.floor(np.cumsum(props) * len(idx)).astype(int)[:-1]
        for client, part in zip(clients, np.split(idx, cuts)):
            per_client[client].extend(part.tolist())
    if any(len(p) == 0 for p in per_client):
        return None
    return [np.array(sorted(p), dtype=np.int64) for p in per_client]


def _restrict_to_mask(ds: Dataset, idx: np.ndarray, mask: list[int]) -> Dataset:
    ids = sorted(mask)
    if ds.kind == "single":
        remap = {c: i for i, c in enumerate(ids)}
        labels = np.array([remap[int(y)] for y in ds.labels[idx]], dtype=np.int64)
    else:
        labels = ds.labels[idx][:, ids]
    return Dataset(
        features=ds.features[idx],
        labels=labels,
        num_classes=len(ids),
        kind=ds.kind,
        class_ids=ids,
    )


def _feature_shift(feats: np.ndarray, seed: int) -> np.ndarray:
    """Random rotation plus scaling: a desk-scale stand-in for per-client
    input-distribution (modality) shift."""
    rng = Rng(seed, "feature_shift")
    d = feats.shape[1]
    q, r = np.linalg.qr(rng.child("rotation").normal((d, d)))
    q = q * np.sign(np.diag(r))  # fix the sign convention so Q is unique
    scale = float(rng.child("scale").uniform(0.75, 1.3, 1)[0])
    return scale * (feats @ q)


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``ds`` into per-client datasets with Dirichlet-distributed
    per-class proportions.

    Every sample lands in exactly one client. Class masks restrict which
    clients may receive a class (the masks must jointly cover every class);
    masked clients get locally re-indexed labels so their class counts C_k
    differ. Draws that leave a client empty are retried a bounded number of
    times.
    """
    if spec.clients > len(ds):
        raise DataError(f"cannot split {len(ds)} samples across {spec.clients} clients")
    keys = _primary_class(ds)
    classes = sorted(set(keys.tolist()))

    eligible: dict[int, list[int]] = {}
    if spec.class_masks is None:
        for c in classes:
            eligible[c] = list(range(spec.clients))
    else:
        covered = set()
        for mask in spec.class_masks:
            covered.update(mask)
        missing = [c for c in classes if c not in covered and c < ds.num_classes]
        if missing:
            raise DataError(f"class masks leave classes {missing} unassigned")
        for c in classes:
            owners = [k for k, mask in enumerate(spec.class_masks) if c in mask]
            # Pseudo-class for all-zero multilabel rows is eligible everywhere.
            eligible[c] = owners if owners else list(range(spec.clients))

    root = Rng(spec.seed, "dirichlet_partition")
    parts = None
    for attempt in range(spec.max_retries):
        parts = _assign_by_dirichlet(keys, spec, eligible, root.child(f"try{attempt}"))
        if parts is not None:
            break
    if parts is None:
        raise DataError("could not draw a partition without empty clients")

    out = []
    for k, idx in enumerate(parts):
        if spec.class_masks is not None:
            client_ds = _restrict_to_mask(ds, idx, spec.class_masks[k])
        else:
            client_ds = ds.subset(idx)
        if spec.feature_transform_seeds is not None:
            client_ds = Dataset(
                features=_feature_shift(client_ds.features, spec.feature_transform_seeds[k]),
                labels=client_ds.labels,
                num_classes=client_ds.num_classes,
                kind=client_ds.kind,
                class_ids=client_ds.class_ids,
            )
        out.append(client_ds)
    return out


@dataclass
class TabularSchema:
    """Column-name declaration for delimited text ingestion."""

    features: list[str]
    labels: list[str]  # one column (single-label) or one per class (multilabel)
    kind: str = "single"
    num_classes: int | None = None


def load_tabular(path, schema: TabularSchema) -> Dataset:
    """Read a comma-separated file (first line header) into a Dataset.

    Rows are kept in file order; any malformed cell fails with the offending
    line number.
    """
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in schema.features + schema.labels if c not in header]
        if missing:
            raise ParseError(f"{path}: header missing columns {missing}")
        fcols = [header.index(c) for c in schema.features]
        lcols = [header.index(c) for c in schema.labels]

        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                feats.append([float(row[c]) for c in fcols])
                labels.append([float(row[c]) for c in lcols])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None

    if not feats:
        raise DataError(f"{path}: no data rows")
    features = np.asarray(feats, dtype=np.float64)
    raw = np.asarray(labels, dtype=np.float64)

    if schema.kind == "single":
        if len(schema.labels) != 1:
            raise DataError("single-label schema needs exactly one label column")
        col = raw[:, 0]
        if not np.all(col == np.floor(col)):
            raise DataError("single-label column contains non-integer values")
        y = col.astype(np.int64)
        num_classes = schema.num_classes or int(y.max()) + 1
        if y.min() < 0 or y.max() >= num_classes:
            raise DataError(
                f"label value {int(y.max())} out of range for {num_classes} classes"
            )
        return Dataset(features, y, num_classes, "single")
    if schema.kind == "multi":
        if not np.isin(raw, (0.0, 1.0)).all():
            raise DataError("multilabel columns must be 0/1")
        return Dataset(features, raw, raw.shape[1], "multi")
    raise DataError(f"unknown schema kind {schema.kind!r}")


def save_tabular(path, ds: Dataset) -> TabularSchema:
    """Write a Dataset as comma-separated text; returns the matching schema."""
    fnames = [f"x{j}" for j in range(ds.dim)]
    if ds.kind == "single":
        lnames = ["label"]
        label_rows = ds.labels[:, None]
    else:
        lnames = [f"label{j}" for j in range(ds.num_classes)]
        label_rows = ds.labels
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fnames + lnames)
        for x, y in zip(ds.features, label_rows):
            row = [repr(float(v)) for v in x]
            if ds.kind == "single":
                row.append(str(int(y[0])))
            else:
                row.extend(str(int(v)) for v in y)
            writer.writerow(row)
    return TabularSchema(
        features=fnames, labels=lnames, kind=ds.kind, num_classes=ds.num_classes
    )
