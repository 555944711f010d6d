"""Tabular ingestion, preprocessing, global partitions and Poisson batches."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

logger = logging.getLogger(__name__)

COLUMN_KINDS = ("numeric", "categorical", "label", "sensitive")

# Partition predicates use this key to match the encoded class index.
LABEL_KEY = "label"
MISSING_TOKENS = ("?", "")


class DataError(ValueError):
    """Raised for malformed input tables, schemas or partitions."""


@dataclass
class RawTable:
    """Parsed records plus the kind of each column.

    ``frame`` holds the raw values; numeric columns are floats, everything
    else is kept as strings.
    """

    frame: pd.DataFrame
    schema: dict[str, str]
    sensitive_column: str | None = None
    n_dropped: int = 0

    def __post_init__(self):
        labels = [c for c, k in self.schema.items() if k == "label"]
        if len(labels) != 1:
            raise DataError(f"schema needs exactly one label column, got {labels}")
        bad = {c: k for c, k in self.schema.items() if k not in COLUMN_KINDS}
        if bad:
            raise DataError(f"unknown column kinds: {bad}")

    @property
    def label_column(self) -> str:
        return next(c for c, k in self.schema.items() if k == "label")

    def columns_of(self, *kinds: str) -> list[str]:
        return [c for c, k in self.schema.items() if k in kinds]

    def __len__(self):
        return len(self.frame)


def load_csv(
    path,
    schema: Mapping[str, str],
    sensitive_column: str | None = None,
    delimiter: str = ",",
) -> RawTable:
    """Read a headed CSV file and check it against ``schema``.

    Rows with a missing value (empty or ``?``) are dropped and the count is
    logged. A non-numeric value in a numeric column raises ``DataError``
    naming the row (1-based, header excluded) and the column.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    schema = dict(schema)
    if sensitive_column is not None:
        if sensitive_column not in schema:
            raise DataError(f"sensitive column {sensitive_column!r} not in schema")
        # the sensitive attribute stays a categorical feature
        if schema[sensitive_column] == "numeric":
            raise DataError("sensitive column must be categorical")
        schema[sensitive_column] = "sensitive"

    frame = pd.read_csv(
        path,
        sep=delimiter,
        dtype=str,
        keep_default_na=False,
        skipinitialspace=True,
        comment=None,
    )
    frame.columns = [c.strip() for c in frame.columns]
    if list(frame.columns) != list(schema):
        raise DataError(
            f"header {list(frame.columns)} does not match schema {list(schema)}"
        )
    frame = frame.apply(lambda col: col.str.strip())

    missing = frame.isin(MISSING_TOKENS).any(axis=1)
    n_dropped = int(missing.sum())
    if n_dropped:
        logger.info("dropped %d records with missing values from %s", n_dropped, path)
    frame = frame.loc[~missing].reset_index(drop=True)

    for col, kind in schema.items():
        if kind != "numeric":
            continue
        values = pd.to_numeric(frame[col], errors="coerce")
        bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                f"unparseable value {frame[col].iloc[row]!r} at row {row + 1}, column {col!r}"
            )
        frame[col] = values.astype(float)

    return RawTable(frame, schema, sensitive_column, n_dropped)


class TabularPreprocessor(TransformerMixin, BaseEstimator):
    """Z-score numeric columns, one-hot encode categoricals, encode labels.

    Statistics are learned in :meth:`fit` (the training split) and reused
    by :meth:`transform`. Constant numeric columns are dropped with a
    warning. A trailing constant-one column carries the bias.
    """

    def __init__(self, exclude_sensitive=False, add_bias=True):
        self.exclude_sensitive = exclude_sensitive
        self.add_bias = add_bias

    def fit(self, table: RawTable, y=None):
        frame = table.frame
        if len(frame) < 2:
            raise DataError("cannot compute variance from fewer than two records")
        self.numeric_columns_ = []
        self.means_ = {}
        self.stds_ = {}
        for col in table.columns_of("numeric"):
            values = frame[col].to_numpy(dtype=float)
            std = values.std()
            if std == 0.0:
                warnings.warn(f"dropping constant numeric column {col!r}", stacklevel=2)
                continue
            self.numeric_columns_.append(col)
            self.means_[col] = values.mean()
            self.stds_[col] = std

        kinds = ("categorical",) if self.exclude_sensitive else ("categorical", "sensitive")
        self.categories_ = {
            col: sorted(frame[col].unique()) for col in table.columns_of(*kinds)
        }
        self.classes_ = np.array(sorted(frame[table.label_column].unique()))
        if len(self.classes_) < 2:
            raise DataError("label column needs at least two classes")
        self.feature_names_ = list(self.numeric_columns_)
        for col, levels in self.categories_.items():
            self.feature_names_ += [f"{col}={v}" for v in levels]
        if self.add_bias:
            self.feature_names_.append("bias")
        return self

    def transform(self, table: RawTable) -> np.ndarray:
        check_is_fitted(self, "classes_")
        frame = table.frame
        blocks = [
            ((frame[c].to_numpy(dtype=float) - self.means_[c]) / self.stds_[c])[:, None]
            for c in self.numeric_columns_
        ]
        for col, levels in self.categories_.items():
            # unseen levels encode as all zeros
            values = frame[col].to_numpy()
            blocks.append((values[:, None] == np.asarray(levels)[None, :]).astype(float))
        if self.add_bias:
            blocks.append(np.ones((len(frame), 1)))
        features = np.hstack(blocks) if blocks else np.empty((len(frame), 0))
        if not np.all(np.isfinite(features)):
            raise DataError("non-finite feature after preprocessing")
        return features

    def encode_labels(self, table: RawTable) -> np.ndarray:
        check_is_fitted(self, "classes_")
        raw = table.frame[table.label_column].to_numpy()
        idx = np.searchsorted(self.classes_, raw)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == raw):
            unknown = sorted(set(raw) - set(self.classes_))
            raise DataError(f"labels not seen during fit: {unknown}")
        return idx.astype(np.int64)


@dataclass
class PreparedData:
    """Features and labels before partition assignment.

    ``attributes`` keeps the raw categorical/sensitive columns so partition
    predicates can refer to original values such as ``sex == "Female"``.
    """

    features: np.ndarray
    labels: np.ndarray
    attributes: pd.DataFrame
    classes: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def preprocess(
    table: RawTable,
    fit_rows: Sequence[int] | None = None,
    exclude_sensitive: bool = False,
) -> PreparedData:
    """Encode ``table``; statistics come from ``fit_rows`` (default: all)."""
    fit_table = table
    if fit_rows is not None:
        fit_table = RawTable(
            table.frame.iloc[np.asarray(fit_rows)].reset_index(drop=True),
            table.schema,
            table.sensitive_column,
        )
    prep = TabularPreprocessor(exclude_sensitive=exclude_sensitive).fit(fit_table)
    attributes = table.frame[table.columns_of("categorical", "sensitive")].reset_index(drop=True)
    return PreparedData(
        features=prep.transform(table),
        labels=prep.encode_labels(table),
        attributes=attributes,
        classes=prep.classes_,
        feature_names=prep.feature_names_,
    )


@dataclass
class PartitionedDataset:
    """Records with their global-partition cell.

    Every record lives in exactly one cell ``q`` in ``range(n_cells)`` and
    every cell is nonempty.
    """

    features: np.ndarray
    labels: np.ndarray
    partition_index: np.ndarray
    n_cells: int
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.partition_index = np.asarray(self.partition_index, dtype=np.int64)
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataError("features must be an (n_records, d) matrix")
        if self.partition_index.shape != (n,):
            raise DataError("partition_index must have one entry per record")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or inf")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError("labels out of range")
        if n and (self.partition_index.min() < 0 or self.partition_index.max() >= self.n_cells):
            raise DataError("partition index out of range")
        empty = np.flatnonzero(self.cell_sizes == 0)
        if empty.size:
            raise DataError(f"empty partition cells: {empty.tolist()}")

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.bincount(self.partition_index, minlength=self.n_cells)

    @property
    def min_cell_size(self) -> int:
        """Smallest cell size, the ``n`` of the convergence bounds."""
        return int(self.cell_sizes.min())

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "PartitionedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return PartitionedDataset(
            self.features[indices],
            self.labels[indices],
            self.partition_index[indices],
            self.n_cells,
            self.n_classes,
        )


def build_partition(data: PreparedData, partition_spec) -> PartitionedDataset:
    """Assign every record to the single predicate it satisfies.

    ``partition_spec`` is a list of predicates, each a mapping
    ``column -> value`` (all must hold). The key ``"label"`` matches the
    encoded class index. The string ``"trivial"`` puts each record in its
    own cell.
    """
    n = len(data)
    if isinstance(partition_spec, str):
        if partition_spec != "trivial":
            raise DataError(f"unknown partition spec {partition_spec!r}")
        return PartitionedDataset(data.features, data.labels, np.arange(n), n, len(data.classes))

    matches = np.zeros((n, len(partition_spec)), dtype=bool)
    for q, predicate in enumerate(partition_spec):
        hit = np.ones(n, dtype=bool)
        for key, value in predicate.items():
            if key == LABEL_KEY:
                hit &= data.labels == int(value)
            else:
                if key not in data.attributes:
                    raise DataError(f"predicate column {key!r} not available")
                hit &= data.attributes[key].to_numpy() == str(value)
        matches[:, q] = hit

    counts = matches.sum(axis=1)
    if np.any(counts != 1):
        i = int(np.flatnonzero(counts != 1)[0])
        raise DataError(f"record {i} matches {int(counts[i])} partition predicates")
    return PartitionedDataset(
        data.features, data.labels, matches.argmax(axis=1), len(partition_spec), len(data.classes)
    )


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Nearest-integer split sizes; any remainder goes to the first split."""
    sizes = [int(np.floor(n * f + 0.5)) for f in fractions]
    sizes[0] += n - sum(sizes)
    return sizes


def _check_fractions(fractions):
    if len(fractions) != 3:
        raise DataError("need (train, val, test) fractions")
    if any(f <= 0 for f in fractions):
        raise DataError(f"all split fractions must be > 0, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")


def split_indices(n: int, fractions: Sequence[float], seed: int) -> tuple[np.ndarray, ...]:
    """Disjoint covering index sets for (train, val, test)."""
    _check_fractions(fractions)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(split_sizes(n, fractions))[:-1]
    return tuple(np.sort(part) for part in np.split(perm, bounds))


def split(data: PartitionedDataset, fractions=(0.6375, 0.1125, 0.25), seed: int = 0):
    """Split into (train, val, test) datasets sharing the parent partition.

    Raises ``DataError`` if any split ends up with an empty cell.
    """
    parts = split_indices(len(data), fractions, seed)
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        sizes = np.bincount(data.partition_index[idx], minlength=data.n_cells)
        if np.any(sizes == 0):
            raise DataError(
                f"{name} split has empty partition cells {np.flatnonzero(sizes == 0).tolist()}"
            )
        out.append(data.subset(idx))
    return tuple(out)


@dataclass(frozen=True)
class MiniBatch:
    indices: np.ndarray
    sampling_rate: float

    def __len__(self):
        return len(self.indices)


def poisson_sample(n_records: int, rate: float, rng: np.random.Generator) -> MiniBatch:
    """Include each of ``n_records`` independently with probability ``rate``."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"sampling rate must be in (0, 1], got {rate}")
    if hasattr(n_records, "__len__"):
        n_records = len(n_records)
    keep = rng.random(n_records) < rate
    return MiniBatch(np.flatnonzero(keep), rate)
