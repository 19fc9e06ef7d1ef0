"""Dataset loading, splitting, standardization and synthetic GP draws."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ContractViolation, ParseError
from .kernels import HyperParams, KernelSpec
from .linalg import jitter_cholesky

SYNTH_CAP = 5000


@dataclass(frozen=True)
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    target_std: float
    seed: int
    source: str
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_train(self) -> int:
        return self.y_train.size

    @property
    def d(self) -> int:
        return self.X_train.shape[1]

    def destandardize_y(self, y):
        return self.target_mean + self.target_std * np.asarray(y)

    def standardize_y(self, y):
        return (np.asarray(y) - self.target_mean) / self.target_std


def _split_and_standardize(X, y, seed, train_fraction, source, standardize=True, shuffle=True, meta=None):
    n = y.size
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1], got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    n_train = int(round(train_fraction * n))
    if n_train < 1:
        raise ConfigError("empty training split")
    tr, te = perm[:n_train], perm[n_train:]
    Xtr, ytr, Xte, yte = X[tr], y[tr], X[te], y[te]
    d = X.shape[1]
    if standardize:
        fm = Xtr.mean(axis=0)
        fs = Xtr.std(axis=0)
        fs = np.where(fs > 0, fs, 1.0)
        tm = float(ytr.mean())
        ts = float(ytr.std())
        ts = ts if ts > 0 else 1.0
    else:
        fm, fs, tm, ts = np.zeros(d), np.ones(d), 0.0, 1.0
    meta = dict(meta or {})
    meta.update(train_index=tr.tolist(), test_index=te.tolist(), train_fraction=train_fraction)
    return Dataset((Xtr - fm) / fs, (ytr - tm) / ts, (Xte - fm) / fs, (yte - tm) / ts,
                   fm, fs, tm, ts, seed, source, meta)


def load_csv(path, target_column: str, seed: int = 0, train_fraction: float = 0.9) -> Dataset:
    """Read a headered, comma-separated numeric CSV and split it."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file") from None
        if target_column not in header:
            raise ParseError(f"target column {target_column!r} not in header", column=target_column)
        rows = []
        for rno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=rno)
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", row=rno, column=col) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {cell!r}", row=rno, column=col)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ConfigError("no data rows")
    data = np.array(rows)
    t = header.index(target_column)
    X = np.delete(data, t, axis=1)
    return _split_and_standardize(X, data[:, t], seed, train_fraction, str(path))


def synth_gp(spec: KernelSpec, params_true: HyperParams, n: int, d: int, seed: int,
             train_fraction: float = 0.9, standardize: bool = False) -> Dataset:
    """Inputs uniform on [0, 1]^d, targets drawn from GP(0, k) plus noise."""
    if n > SYNTH_CAP:
        raise ContractViolation(f"n={n} exceeds the synthetic-data cap {SYNTH_CAP}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    L, _ = jitter_cholesky(kernels.gram(spec, params_true, X))
    f = L @ rng.standard_normal(n)
    y = f + params_true.noise * rng.standard_normal(n)
    meta = {"params_true": params_true.to_dict(), "kernel": spec.family.value}
    return _split_and_standardize(X, y, seed, train_fraction, f"synth:n={n},d={d}", standardize, meta=meta)


def save_dataset(ds: Dataset, fh) -> None:
    """Cache a dataset (with its standardization constants) as ``.npz``."""
    header = {"format": "cagpy-dataset", "version": 1, "seed": ds.seed, "source": ds.source,
              "target_mean": ds.target_mean, "target_std": ds.target_std, "meta": ds.meta}
    np.savez(fh, header=np.array(json.dumps(header)), X_train=ds.X_train, y_train=ds.y_train,
             X_test=ds.X_test, y_test=ds.y_test, feature_means=ds.feature_means, feature_stds=ds.feature_stds)


def load_dataset(fh) -> Dataset:
    with np.load(fh, allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        if h.get("format") != "cagpy-dataset":
            raise ParseError("not a cagpy dataset container")
        return Dataset(z["X_train"], z["y_train"], z["X_test"], z["y_test"], z["feature_means"],
                       z["feature_stds"], h["target_mean"], h["target_std"], h["seed"], h["source"], h["meta"])
