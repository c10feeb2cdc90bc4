"""Shallow regressor on precomputed image features, trained by Levenberg-Marquardt.

Feature files are CSV with a ``sample_id`` column followed by feature columns.
The network is input -> tanh hidden layer -> linear output (5 units).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

HIDDEN = 10
OUTPUTS = 5


class FeatureError(ValueError):
    pass


class LmError(RuntimeError):
    pass


@dataclass
class FeatureMatrix:
    ids: list
    values: np.ndarray
    columns: list
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    dropped: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise FeatureError("feature matrix must be 2-D")
        if len(self.ids) != self.values.shape[0]:
            raise FeatureError(f"{len(self.ids)} ids for {self.values.shape[0]} rows")
        if len(self.columns) != self.values.shape[1]:
            raise FeatureError(f"{len(self.columns)} column names for {self.values.shape[1]} columns")
        if not np.all(np.isfinite(self.values)):
            raise FeatureError("feature matrix contains NaN or infinite values")

    @property
    def shape(self):
        return self.values.shape

    def rows(self, ids) -> "FeatureMatrix":
        pos = {s: i for i, s in enumerate(self.ids)}
        missing = [s for s in ids if s not in pos]
        if missing:
            raise FeatureError(f"{len(missing)} sample ids have no features, e.g. {missing[:3]}")
        take = [pos[s] for s in ids]
        return FeatureMatrix(list(ids), self.values[take], list(self.columns), self.mean, self.std,
                             list(self.dropped))

    def fit_standardization(self, train_ids=None) -> "FeatureMatrix":
        """Drop columns constant over the training rows and store their z-score statistics."""
        train = self.values if train_ids is None else self.rows(train_ids).values
        if train.shape[0] == 0:
            raise FeatureError("no training rows to standardize on")
        std = train.std(axis=0)
        keep = std > 0
        dropped = [c for c, k in zip(self.columns, keep) if not k]
        return FeatureMatrix(list(self.ids), self.values[:, keep], [c for c, k in zip(self.columns, keep) if k],
                             train.mean(axis=0)[keep], std[keep], list(self.dropped) + dropped)

    def standardized(self) -> np.ndarray:
        if self.mean is None:
            raise FeatureError("standardization statistics not fitted")
        return (self.values - self.mean) / self.std


def concat_features(top: FeatureMatrix, under: FeatureMatrix) -> FeatureMatrix:
    """Column-wise T | U concatenation of two aligned matrices."""
    if top.values.shape[0] != under.values.shape[0]:
        raise FeatureError(f"row counts differ: {top.values.shape[0]} vs {under.values.shape[0]}")
    if list(top.ids) != list(under.ids):
        raise FeatureError("sample ids of the two matrices are not aligned")
    columns = [f"T_{c}" for c in top.columns] + [f"U_{c}" for c in under.columns]
    return FeatureMatrix(list(top.ids), np.hstack([top.values, under.values]), columns)


def import_features(path, order=None, train_ids=None) -> FeatureMatrix:
    """Read a feature CSV, align it to ``order`` and fit standardization on ``train_ids``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureError(f"{path} is empty") from None
        if not header or header[0] != "sample_id":
            raise FeatureError(f"{path}: first column must be sample_id")
        ids, rows = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FeatureError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FeatureError(f"{path}:{line}: {exc}") from None
            ids.append(row[0])
    if len(set(ids)) != len(ids):
        raise FeatureError(f"{path}: duplicate sample ids")
    fm = FeatureMatrix(ids, np.array(rows, dtype=float).reshape(len(ids), len(header) - 1), header[1:])
    if order is not None:
        fm = fm.rows(list(order))
    return fm.fit_standardization(train_ids)


# ---------------------------------------------------------------------------
# network

@dataclass
class FeatureAnn:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    columns: list | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @classmethod
    def init(cls, n_inputs: int, hidden: int = HIDDEN, outputs: int = OUTPUTS, seed: int = 0) -> "FeatureAnn":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA1]))
        u = lambda *shape: rng.uniform(-0.5, 0.5, size=shape)
        return cls(u(n_inputs, hidden), u(hidden), u(hidden, outputs), u(outputs))

    @property
    def n_inputs(self) -> int:
        return self.w1.shape[0]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_flat(self, w) -> "FeatureAnn":
        n, h = self.w1.shape
        o = self.w2.shape[1]
        i = 0
        parts = []
        for size, shape in ((n * h, (n, h)), (h, (h,)), (h * o, (h, o)), (o, (o,))):
            parts.append(np.array(w[i:i + size]).reshape(shape))
            i += size
        return FeatureAnn(*parts, columns=self.columns, mean=self.mean, std=self.std)

    def forward(self, x):
        """(outputs, hidden activations) for standardized inputs."""
        a = np.tanh(x @ self.w1 + self.b1)
        return a @ self.w2 + self.b2, a

    def to_json(self) -> str:
        def arr(v):
            return None if v is None else np.asarray(v, dtype=float).tolist()
        return json.dumps({
            "format": "psdlab-feature-ann/1",
            "inputs": self.n_inputs, "hidden": int(self.w1.shape[1]), "outputs": int(self.w2.shape[1]),
            "activation": "tanh", "columns": self.columns, "mean": arr(self.mean), "std": arr(self.std),
            "w1": arr(self.w1), "b1": arr(self.b1), "w2": arr(self.w2), "b2": arr(self.b2),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FeatureAnn":
        d = json.loads(text)
        opt = lambda k: None if d.get(k) is None else np.array(d[k], dtype=float)
        return cls(np.array(d["w1"], dtype=float).reshape(d["inputs"], d["hidden"]),
                   np.array(d["b1"], dtype=float), np.array(d["w2"], dtype=float).reshape(d["hidden"], d["outputs"]),
                   np.array(d["b2"], dtype=float), d.get("columns"), opt("mean"), opt("std"))


def _inputs(ann: FeatureAnn, features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        if ann.columns is not None:
            pos = {c: i for i, c in enumerate(features.columns)}
            missing = [c for c in ann.columns if c not in pos]
            if missing:
                raise FeatureError(f"features lack {len(missing)} model columns, e.g. {missing[:3]}")
            x = features.values[:, [pos[c] for c in ann.columns]]
        else:
            x = features.values
    else:
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x[None]
    if x.shape[1] != ann.n_inputs:
        raise FeatureError(f"model expects {ann.n_inputs} features, got {x.shape[1]}")
    if ann.mean is not None:
        x = (x - ann.mean) / ann.std
    return x


def ann_predict(ann: FeatureAnn, features) -> np.ndarray:
    """Raw N x 5 predictions; inputs are standardized with the stored statistics."""
    return ann.forward(_inputs(ann, features))[0]


def residual_jacobian(ann: FeatureAnn, x, targets=None):
    """Residuals r = pred - target stacked sample-major (N*outputs) and dr/dw."""
    y, a = ann.forward(x)
    n, o = y.shape
    h = a.shape[1]
    k = x.shape[1]
    da = 1.0 - a * a                                       # N x H
    jac = np.zeros((n, o, ann.n_params))
    # d y[n, q] / d w1[i, j] = w2[j, q] da[n, j] x[n, i]
    g = da[:, None, :] * ann.w2.T[None, :, :]              # N x O x H
    jac[:, :, :k * h] = (x[:, None, :, None] * g[:, :, None, :]).reshape(n, o, k * h)
    jac[:, :, k * h:k * h + h] = g
    base = k * h + h
    for q in range(o):
        jac[:, q, base + q:base + h * o:o] = a
    jac[:, :, base + h * o:] = np.eye(o)[None]
    r = None if targets is None else (y - targets).ravel()
    return r, jac.reshape(n * o, ann.n_params)


@dataclass
class LmState:
    mu: float = 1e-3
    increase: float = 10.0
    decrease: float = 0.1
    mu_max: float = 1e10
    max_iter: int = 1000
    min_grad: float = 1e-7
    patience: int = 6
    iteration: int = 0
    val_failures: int = 0

    def __post_init__(self):
        if not (self.mu > 0 and self.increase > 1 and 0 < self.decrease < 1):
            raise ValueError("need mu > 0, increase > 1 and 0 < decrease < 1")


@dataclass
class LmHistory:
    sse: list = field(default_factory=list)        # training SSE after each accepted step, [0] = start
    val_rmse: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    best_iteration: int = 0
    stop_reason: str = ""


def lm_step(jac, r, mu):
    """Damped Gauss-Newton step -(J'J + mu I)^-1 J' r, solved in the smaller dual space when possible."""
    m, p = jac.shape
    if m < p:
        # J'(J J' + mu I)^-1 r equals (J'J + mu I)^-1 J' r
        return -jac.T @ np.linalg.solve(jac @ jac.T + mu * np.eye(m), r)
    return -np.linalg.solve(jac.T @ jac + mu * np.eye(p), jac.T @ r)


def _rmse(ann, x, t):
    return float(np.sqrt(np.mean((ann.forward(x)[0] - t) ** 2)))


def lm_train(ann: FeatureAnn, x_train, t_train, x_val=None, t_val=None, state: LmState | None = None):
    """Levenberg-Marquardt on standardized inputs; returns (best-validation ann, history)."""
    state = state or LmState()
    x_train = np.asarray(x_train, dtype=float)
    t_train = np.asarray(t_train, dtype=float)
    has_val = x_val is not None and len(x_val) > 0
    history = LmHistory()
    w = ann.flat()
    r, jac = residual_jacobian(ann, x_train, t_train)
    if not np.all(np.isfinite(r)):
        raise LmError("non-finite residuals at the initial weights")
    sse = float(r @ r)
    history.sse.append(sse)
    best = ann
    best_val = math.inf
    if has_val:
        best_val = _rmse(ann, x_val, t_val)
        history.val_rmse.append(best_val)
    prev_val = best_val
    history.mu.append(state.mu)
    while True:
        if sse == 0.0:
            history.stop_reason = "zero residual"
            break
        if state.iteration >= state.max_iter:
            history.stop_reason = "max iterations"
            break
        if np.linalg.norm(jac.T @ r) < state.min_grad:
            history.stop_reason = "gradient below threshold"
            break
        accepted = False
        while not accepted:
            try:
                step = lm_step(jac, r, state.mu)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                trial = ann.with_flat(w + step)
                r_new = (trial.forward(x_train)[0] - t_train).ravel()
                if not np.all(np.isfinite(r_new)):
                    raise LmError(f"non-finite residuals in iteration {state.iteration + 1}")
                sse_new = float(r_new @ r_new)
                if sse_new < sse:
                    accepted = True
                    break
            state.mu *= state.increase
            if state.mu > state.mu_max:
                if step is None:
                    raise LmError("damped normal equations stayed singular up to the damping limit")
                break
        if not accepted:
            history.stop_reason = "damping limit"
            break
        state.iteration += 1
        state.mu *= state.decrease
        ann, w = trial, w + step
        r, jac = residual_jacobian(ann, x_train, t_train)
        sse = sse_new
        history.sse.append(sse)
        history.mu.append(state.mu)
        if has_val:
            val = _rmse(ann, x_val, t_val)
            history.val_rmse.append(val)
            state.val_failures = state.val_failures + 1 if val > prev_val else 0
            prev_val = val
            if val < best_val:
                best_val, best = val, ann
                history.best_iteration = state.iteration
            if state.val_failures >= state.patience:
                history.stop_reason = "validation patience"
                break
        else:
            best = ann
            history.best_iteration = state.iteration
    return best, history


def train_on_features(features: FeatureMatrix, targets: dict, splits: dict, hidden: int = HIDDEN,
                      seed: int = 0, state: LmState | None = None):
    """Fit on the rows whose split is train, validate on val; ``targets`` maps id -> 5 values."""
    train_ids = [s for s in features.ids if splits.get(s) == "train"]
    val_ids = [s for s in features.ids if splits.get(s) == "val"]
    if not train_ids:
        raise FeatureError("no training samples")
    fm = features
    if fm.mean is None:
        fm = fm.fit_standardization(train_ids)
    ann = FeatureAnn.init(len(fm.columns), hidden, OUTPUTS, seed)
    ann.columns, ann.mean, ann.std = list(fm.columns), fm.mean, fm.std

    def block(ids):
        sub = fm.rows(ids)
        return sub.standardized(), np.array([targets[s] for s in ids], dtype=float)

    x_tr, t_tr = block(train_ids)
    x_va, t_va = block(val_ids) if val_ids else (None, None)
    return lm_train(ann, x_tr, t_tr, x_va, t_va, state)
