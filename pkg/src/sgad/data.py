"""
Datasets: synthetic generators with a radial field partition, and the tabular
CSV pipeline (dedup, missing-row removal, one-hot, train-fitted
standardisation, swap noise, random 6/2/2 split).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
import yaml

from .errors import RejectedInputError

logger = logging.getLogger(__name__)

FAMILIES = ("gauss1d", "polar2d_ring", "polar2d_curve")
CURVE_THETA = (1.5 * math.pi, 3.5 * math.pi)


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    field_id: Optional[np.ndarray] = None
    radius: Optional[np.ndarray] = None
    feature_names: Optional[list] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.features.shape[0]
        if self.labels.size != n:
            raise RejectedInputError(f"{self.labels.size} labels for {n} rows")
        for name in ("field_id", "radius"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise RejectedInputError(f"{name} has {len(value)} entries for {n} rows")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_anomalies(self):
        return int(self.labels.sum())

    @property
    def anomaly_rate(self):
        return self.n_anomalies / len(self)

    def take(self, index):
        index = np.asarray(index)
        pick = lambda v: None if v is None else np.asarray(v)[index]
        return LabeledDataset(
            self.features[index],
            self.labels[index],
            pick(self.field_id),
            pick(self.radius),
            self.feature_names,
        )


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    family: str = "gauss1d"
    mu_normal: float = 1.0
    mu_abnormal: float = 2.0
    sigma: float = 0.25
    n_samples: int = 10000
    anomaly_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise RejectedInputError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not self.sigma > 0:
            raise RejectedInputError("sigma must be positive")
        if not self.mu_abnormal > self.mu_normal:
            raise RejectedInputError("mu_abnormal must exceed mu_normal")
        if not 0 < self.anomaly_ratio < 1:
            raise RejectedInputError("anomaly_ratio must lie in (0, 1)")
        if self.n_samples < 1:
            raise RejectedInputError("n_samples must be positive")

    @property
    def input_dim(self):
        return 1 if self.family == "gauss1d" else 2


def generate_synthetic(spec):
    """Draw a labelled synthetic dataset; every row records its radius."""
    rng = np.random.default_rng(spec.seed)
    n_abn = int(round(spec.anomaly_ratio * spec.n_samples))
    n_norm = spec.n_samples - n_abn
    labels = np.r_[np.zeros(n_norm, dtype=np.int64), np.ones(n_abn, dtype=np.int64)]
    centers = np.where(labels == 1, spec.mu_abnormal, spec.mu_normal)
    r = centers + spec.sigma * rng.standard_normal(spec.n_samples)

    if spec.family == "gauss1d":
        x = r[:, None]
    elif spec.family == "polar2d_ring":
        theta = rng.uniform(0.0, 2 * math.pi, spec.n_samples)
        x = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    else:
        # spiral: radius grows linearly with the angle over one full turn
        lo, hi = CURVE_THETA
        theta = rng.uniform(lo, hi, spec.n_samples)
        scale = r * theta / hi
        x = np.column_stack([scale * np.cos(theta), scale * np.sin(theta)])

    perm = rng.permutation(spec.n_samples)
    return LabeledDataset(x[perm], labels[perm], radius=r[perm])


def partition_fields(dataset, mu, sigma):
    """Assign R0..R3 by radius with half-open bands at mu + sigma, 2 sigma, 3 sigma."""
    if dataset.radius is None:
        raise RejectedInputError("dataset carries no radius metadata")
    bounds = mu + sigma * np.array([1.0, 2.0, 3.0])
    field_id = np.searchsorted(bounds, dataset.radius, side="right")
    return replace(dataset, field_id=field_id.astype(np.int64))


# --------------------------------------------------------------------------
# tabular pipeline


@dataclass
class PreprocessSpec:
    numeric_columns: list = field(default_factory=list)
    categorical_columns: list = field(default_factory=list)
    label_column: str = "label"
    anomaly_values: list = field(default_factory=lambda: [1])
    drop_duplicates: bool = True
    drop_missing: bool = True
    noise_sample_rate: float = 0.01
    noise_feature_rate: float = 0.05
    split: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_sample_rate", "noise_feature_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise RejectedInputError(f"{name} must lie in [0, 1]")
        self.split = tuple(float(f) for f in self.split)
        check_split(self.split)

    @property
    def columns(self):
        return [*self.numeric_columns, *self.categorical_columns, self.label_column]

    @classmethod
    def from_manifest(cls, path):
        """Read a YAML manifest; keys mirror the dataclass fields plus ``csv``."""
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        doc.pop("csv", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise RejectedInputError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**doc)


def check_split(fractions):
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise RejectedInputError(f"split needs three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise RejectedInputError(f"split fractions must sum to 1, got {sum(fractions)}")


def load_csv(path, spec):
    """Read a CSV as strings, dedupe if requested, and type the numeric columns.

    Unparseable numeric cells become NaN and the row is flagged in the
    boolean ``_missing`` column.
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"CSV file not found: {path}") from None
    absent = [c for c in spec.columns if c not in raw.columns]
    if absent:
        raise RejectedInputError(f"{path}: missing declared column(s) {absent}")
    table = raw[spec.columns]
    if spec.drop_duplicates:
        table = table.drop_duplicates()
    table = table.reset_index(drop=True).copy()
    missing = np.zeros(len(table), dtype=bool)
    for col in spec.numeric_columns:
        values = pd.to_numeric(table[col].str.strip(), errors="coerce")
        missing |= values.isna().to_numpy()
        table[col] = values.astype(np.float64)
    for col in spec.categorical_columns:
        missing |= (table[col].str.strip() == "").to_numpy()
    missing |= (table[spec.label_column].str.strip() == "").to_numpy()
    table["_missing"] = missing
    return table


def encode_table(table, spec):
    """One-hot categoricals and binarise labels; returns an unscaled dataset.

    Category vocabularies come from the whole (filtered) table. Column order:
    numeric columns as declared, then each categorical's sorted levels.
    """
    if spec.drop_duplicates:
        table = table.drop_duplicates(subset=spec.columns)
    if spec.drop_missing and "_missing" in table:
        table = table[~table["_missing"]]
    table = table.reset_index(drop=True)
    blocks, names = [], []
    if spec.numeric_columns:
        blocks.append(table[spec.numeric_columns].to_numpy(dtype=np.float64))
        names.extend(spec.numeric_columns)
    for col in spec.categorical_columns:
        levels = sorted(table[col].astype(str).unique())
        codes = pd.Categorical(table[col].astype(str), categories=levels).codes
        blocks.append(np.eye(len(levels))[codes])
        names.extend(f"{col}={level}" for level in levels)
    features = np.hstack(blocks) if blocks else np.empty((len(table), 0))
    anomaly = {str(v) for v in spec.anomaly_values}
    labels = table[spec.label_column].astype(str).str.strip().isin(anomaly).to_numpy().astype(np.int64)
    return LabeledDataset(features, labels, feature_names=names)


@dataclass
class Standardizer:
    columns: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features, columns):
        columns = np.asarray(columns, dtype=np.int64)
        block = features[:, columns]
        mean = block.mean(axis=0)
        std = block.std(axis=0)
        if np.any(std == 0):
            logger.warning("zero-variance numeric column(s) %s; scaled to 0", columns[std == 0].tolist())
        return cls(columns, mean, std)

    def transform(self, features):
        out = features.copy()
        block = out[:, self.columns] - self.mean
        with np.errstate(invalid="ignore", divide="ignore"):
            block = np.where(self.scale > 0, block / np.where(self.scale > 0, self.scale, 1.0), 0.0)
        out[:, self.columns] = block
        return out

    def apply(self, dataset):
        return replace(dataset, features=self.transform(dataset.features))


@dataclass
class SplitData:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


def split_dataset(dataset, fractions=(0.6, 0.2, 0.2), seed=0):
    """Shuffle and cut into train/val/test; rounding remainder goes to train."""
    check_split(tuple(fractions))
    n = len(dataset)
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    idx = np.random.default_rng(seed).permutation(n)
    return SplitData(
        dataset.take(idx[:n_train]),
        dataset.take(idx[n_train:n_train + n_val]),
        dataset.take(idx[n_train + n_val:]),
    )


def preprocess(table, spec, seed=None, numeric_columns=None):
    """Encode, split and standardise.

    Standardisation statistics come from the training split only and are
    applied to all three splits. ``numeric_columns`` overrides which feature
    indices are scaled (default: the declared numeric columns).
    """
    if isinstance(table, LabeledDataset):
        dataset = table
        if numeric_columns is None:
            numeric_columns = range(dataset.features.shape[1])
    else:
        dataset = encode_table(table, spec)
        if numeric_columns is None:
            numeric_columns = range(len(spec.numeric_columns))
    split = split_dataset(dataset, spec.split, spec.seed if seed is None else seed)
    numeric_columns = list(numeric_columns)
    if numeric_columns:
        scaler = Standardizer.fit(split.train.features, numeric_columns)
        split = SplitData(scaler.apply(split.train), scaler.apply(split.val), scaler.apply(split.test))
    return split


def inject_noise(train_split, spec, seed=0):
    """Swap noise on a random subset of normal training rows.

    Each chosen cell takes the same feature's value from another uniformly
    drawn training row. Labels are unchanged.
    """
    rng = np.random.default_rng(seed)
    n, d = train_split.features.shape
    normal_rows = np.flatnonzero(train_split.labels == 0)
    n_rows = int(round(spec.noise_sample_rate * normal_rows.size))
    n_cells = int(round(spec.noise_feature_rate * d))
    if n_rows == 0 or n_cells == 0 or n < 2:
        return train_split
    features = train_split.features.copy()
    chosen = rng.choice(normal_rows, size=n_rows, replace=False)
    for row in chosen:
        cols = rng.choice(d, size=n_cells, replace=False)
        donors = rng.integers(0, n - 1, size=n_cells)
        donors = donors + (donors >= row)  # any row but this one
        features[row, cols] = train_split.features[donors, cols]
    return replace(train_split, features=features)


def anomalies_to_keep(n_normal, target_rate):
    """Anomaly count k whose rate k / (n_normal + k) is closest to ``target_rate``."""
    if target_rate <= 0:
        return 0
    k = target_rate * n_normal / (1.0 - target_rate)
    lo = math.floor(k)
    rate = lambda c: c / (n_normal + c) if n_normal + c else 0.0
    return min((lo, lo + 1), key=lambda c: (abs(rate(c) - target_rate), c))


def subsample_anomaly_rate(train_split, target_rate, seed=0):
    """Randomly drop anomalies until the anomaly rate is about ``target_rate``."""
    current = train_split.anomaly_rate
    if target_rate > current + 1e-12:
        raise RejectedInputError(f"target rate {target_rate} exceeds current rate {current:.6f}")
    anomalies = np.flatnonzero(train_split.labels == 1)
    normals = np.flatnonzero(train_split.labels == 0)
    keep_k = min(anomalies_to_keep(normals.size, target_rate), anomalies.size)
    if keep_k == anomalies.size:
        return train_split
    rng = np.random.default_rng(seed)
    kept = rng.choice(anomalies, size=keep_k, replace=False)
    return train_split.take(np.sort(np.r_[normals, kept]))
