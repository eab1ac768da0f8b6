"""Labeled feature matrices: loading, persistence, scaling, splitting, synthesis.

Datasets are immutable after construction (the backing arrays are marked
read-only), so they can be shared freely across threads.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ClassTooSmall,
    DimensionMismatch,
    DimensionOverflow,
    MissingLabelColumn,
    NonBinaryLabel,
    NonNumericCell,
    RaggedRow,
    TruncatedFile,
    ValidationError,
)

_MAGIC = b"MLMD"
_BINARY_VERSION = 1
_U32_MAX = 2**32 - 1


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix (n rows, m columns) plus one binary label per row."""

    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        # copy so the read-only flag below never leaks onto caller arrays
        feats = np.array(self.features, dtype=np.float64)
        labs = np.asarray(self.labels)
        if feats.ndim != 2:
            raise ValidationError(f"features must be 2-D, got ndim={feats.ndim}")
        if feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValidationError(f"need n >= 1 and m >= 1, got shape {feats.shape}")
        if labs.ndim != 1 or labs.shape[0] != feats.shape[0]:
            raise ValidationError(
                f"labels length {labs.shape} does not match {feats.shape[0]} rows"
            )
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain NaN or Inf")
        if not np.isin(labs, (0, 1)).all():
            raise ValidationError("labels must all be 0 or 1")
        if self.feature_names is not None and len(self.feature_names) != feats.shape[1]:
            raise ValidationError("feature_names length does not match column count")
        labs = labs.astype(np.uint8)
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def select_rows(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.features[idx], self.labels[idx], self.feature_names)

    def select_columns(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        names = None
        if self.feature_names is not None:
            names = [self.feature_names[int(j)] for j in idx]
        return LabeledDataset(self.features[:, idx], self.labels, names)


@dataclass(frozen=True)
class ScalerParams:
    """Per-column min/max fitted on one dataset."""

    per_column_min: np.ndarray
    per_column_max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.per_column_min, dtype=np.float64)
        hi = np.asarray(self.per_column_max, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError("min/max must be 1-D vectors of equal length")
        if np.any(lo > hi):
            raise ValidationError("per-column min exceeds max")
        object.__setattr__(self, "per_column_min", lo)
        object.__setattr__(self, "per_column_max", hi)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must be strictly between 0 and 1")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    m: int
    informative: int
    noise_sigma: float = 0.5
    class_balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValidationError("need n >= 1 and m >= 1")
        if not 0 <= self.informative <= self.m:
            raise ValidationError("informative must be in [0, m]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0.0 < self.class_balance < 1.0:
            raise ValidationError("class_balance must be strictly between 0 and 1")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


def _parse_cell(text: str, row: int, col: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise NonNumericCell(row, col, text) from None
    if not math.isfinite(value):
        raise NonNumericCell(row, col, text)
    return value


def load_csv(path, label_column="label") -> LabeledDataset:
    """Read a headered CSV, pulling the label column out of the feature matrix.

    label_column may be a header name or a 0-based column index.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if isinstance(label_column, int):
            if not 0 <= label_column < len(header):
                raise MissingLabelColumn(f"column index {label_column} out of range")
            label_idx = label_column
        else:
            try:
                label_idx = header.index(label_column)
            except ValueError:
                raise MissingLabelColumn(
                    f"no column named {label_column!r} in {header}"
                ) from None

        feature_names = [h for i, h in enumerate(header) if i != label_idx]
        rows: list[list[float]] = []
        labels: list[int] = []
        for row_no, cells in enumerate(reader):
            if len(cells) != len(header):
                raise RaggedRow(row_no, len(header), len(cells))
            label_text = cells[label_idx].strip()
            if label_text not in ("0", "1"):
                # accept float spellings of 0/1 but nothing else
                try:
                    label_val = float(label_text)
                except ValueError:
                    raise NonBinaryLabel(row_no, label_text) from None
                if label_val not in (0.0, 1.0):
                    raise NonBinaryLabel(row_no, label_text)
            else:
                label_val = float(label_text)
            labels.append(int(label_val))
            rows.append(
                [
                    _parse_cell(cells[j].strip(), row_no, j)
                    for j in range(len(header))
                    if j != label_idx
                ]
            )

    if not rows:
        raise ValidationError(f"{path} has a header but no data rows")
    return LabeledDataset(np.array(rows, dtype=np.float64), np.array(labels), feature_names)


def save_csv(ds: LabeledDataset, path, label_column: str = "label") -> None:
    """Write a CSV that load_csv reads back to an identical dataset.

    Floats use repr (shortest round trip), so reload is exact.
    """
    path = Path(path)
    names = ds.feature_names or [f"f{j}" for j in range(ds.m)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + [label_column])
        for i in range(ds.n):
            writer.writerow([repr(float(v)) for v in ds.features[i]] + [int(ds.labels[i])])


def save_binary(ds: LabeledDataset, path) -> None:
    """Fixed binary layout: 16-byte header, float32 LE row-major matrix, label bytes."""
    if ds.n > _U32_MAX or ds.m > _U32_MAX:
        raise DimensionOverflow(f"n={ds.n}, m={ds.m} exceed the u32 header fields")
    path = Path(path)
    header = _MAGIC + struct.pack("<III", _BINARY_VERSION, ds.n, ds.m)
    body = ds.features.astype("<f4").tobytes(order="C")
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_binary(path) -> LabeledDataset:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16:
        raise TruncatedFile(f"{path}: shorter than the 16-byte header")
    if blob[:4] != _MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:4]!r}")
    version, n, m = struct.unpack("<III", blob[4:16])
    if version != _BINARY_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    if n < 1 or m < 1:
        raise TruncatedFile(f"{path}: header claims empty dataset n={n}, m={m}")
    expected = 16 + 4 * n * m + n
    if len(blob) != expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * m, offset=16).reshape(n, m)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=16 + 4 * n * m)
    return LabeledDataset(feats.astype(np.float64), labels.copy())


def fit_scaler(ds: LabeledDataset) -> ScalerParams:
    return ScalerParams(ds.features.min(axis=0), ds.features.max(axis=0))


def apply_scaler(ds: LabeledDataset, sp: ScalerParams) -> LabeledDataset:
    """Map each column to [0,1]; constant columns go to 0.0, out-of-range clips."""
    if sp.per_column_min.shape[0] != ds.m:
        raise DimensionMismatch(
            f"scaler has {sp.per_column_min.shape[0]} columns, dataset has {ds.m}"
        )
    span = sp.per_column_max - sp.per_column_min
    safe_span = np.where(span > 0, span, 1.0)
    scaled = (ds.features - sp.per_column_min) / safe_span
    scaled = np.where(span > 0, scaled, 0.0)
    np.clip(scaled, 0.0, 1.0, out=scaled)
    return LabeledDataset(scaled, ds.labels, ds.feature_names)


def save_scaler(sp: ScalerParams, path) -> None:
    payload = {
        "min": [float(v) for v in sp.per_column_min],
        "max": [float(v) for v in sp.per_column_max],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_scaler(path) -> ScalerParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return ScalerParams(np.array(payload["min"]), np.array(payload["max"]))


def _train_count(total: int, fraction: float) -> int:
    # round half up, then keep at least one sample on each side when possible
    count = int(math.floor(total * fraction + 0.5))
    if total >= 2:
        count = min(max(count, 1), total - 1)
    return count


def stratified_split(ds: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded train/test partition; per-class proportions within one sample of
    train_fraction when stratified."""
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        train_parts = []
        test_parts = []
        for cls in (0, 1):
            cls_idx = np.flatnonzero(ds.labels == cls)
            if cls_idx.size == 0:
                continue
            if cls_idx.size < 2:
                raise ClassTooSmall(
                    f"class {cls} has {cls_idx.size} sample(s); need >= 2 to stratify"
                )
            perm = rng.permutation(cls_idx)
            k = _train_count(cls_idx.size, spec.train_fraction)
            train_parts.append(perm[:k])
            test_parts.append(perm[k:])
        train_idx = np.sort(np.concatenate(train_parts))
        test_idx = np.sort(np.concatenate(test_parts))
    else:
        perm = rng.permutation(ds.n)
        k = _train_count(ds.n, spec.train_fraction)
        train_idx = np.sort(perm[:k])
        test_idx = np.sort(perm[k:])
    return ds.select_rows(train_idx), ds.select_rows(test_idx)


def synthesize(spec: SyntheticSpec) -> tuple[LabeledDataset, np.ndarray]:
    """Generate a dataset whose labels depend only on a known informative subset.

    Labels threshold a linear logit over the informative columns plus Gaussian
    noise (sd = noise_sigma); the threshold is placed so that exactly
    round(n * class_balance) rows are positive. Returns the dataset and the
    sorted ground-truth informative column indices.
    """
    rng = np.random.default_rng(spec.seed)
    X = rng.standard_normal((spec.n, spec.m))
    informative = np.sort(rng.choice(spec.m, size=spec.informative, replace=False))

    signs = rng.choice((-1.0, 1.0), size=spec.informative)
    weights = signs * rng.uniform(1.0, 3.0, size=spec.informative)
    if spec.informative:
        # shift informative columns into two clusters aligned with the weight
        # signs, so the logit is bimodal and the class boundary sits in its
        # low-density valley instead of at the Gaussian peak
        cluster = rng.choice((-1.0, 1.0), size=spec.n)
        offsets = signs * rng.uniform(1.0, 2.0, size=spec.informative)
        shifted = X[:, informative] + cluster[:, None] * offsets[None, :]
        X[:, informative] = shifted
        logit = shifted @ weights
    else:
        logit = np.zeros(spec.n)
    logit = logit + spec.noise_sigma * rng.standard_normal(spec.n)

    n_pos = int(math.floor(spec.n * spec.class_balance + 0.5))
    n_pos = min(max(n_pos, 0), spec.n)
    labels = np.zeros(spec.n, dtype=np.uint8)
    if n_pos > 0:
        # rank by logit with a random key breaking exact ties deterministically
        order = np.lexsort((rng.random(spec.n), logit))
        labels[order[spec.n - n_pos:]] = 1
    return LabeledDataset(X, labels), informative.astype(np.int64)
