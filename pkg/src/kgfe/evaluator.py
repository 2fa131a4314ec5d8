"""Learners, task metrics and k-fold cross-validated performance.

All learners are implemented here on numpy and are deterministic. Features are
always addressed by name (sorted) so column order never changes a result.
Imputation, encoding and scaling statistics come from the training rows of
each fold only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tabular import FLOAT_DTYPES, Dataset, FoldPlan

LEARNERS = ("decision_tree", "linear_regression_ridge", "logistic_regression")
FEATURE_CAP = 200
MI_BINS = 10


class EvaluationError(Exception):
    pass


class DegenerateTargetError(EvaluationError):
    pass


# --------------------------------------------------------------------------
# metrics


def one_minus_rae(y, yhat) -> float:
    """1 - sum|yhat - y| / sum|mean(y) - y|; 1 is exact, 0 matches the mean predictor."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError("y and yhat must be nonempty and of equal length")
    denom = np.abs(y.mean() - y).sum()
    if denom == 0:
        raise DegenerateTargetError("constant target: relative absolute error undefined")
    return float(1.0 - np.abs(yhat - y).sum() / denom)


def f1(y, yhat, averaging: str = "binary", pos_label=None, labels=None) -> float:
    """F1 score with binary or macro averaging.

    A class with no true and no predicted members scores 0.
    """
    y, yhat = list(y), list(yhat)
    if not y or len(y) != len(yhat):
        raise ValueError("y and yhat must be nonempty and of equal length")
    if labels is None:
        labels = sorted(set(y) | set(yhat), key=str)
    if averaging == "binary":
        if len(labels) > 2 or (len(labels) != 2 and pos_label is None):
            raise ValueError(f"binary averaging needs exactly 2 classes, got {len(labels)}")
        return _class_f1(y, yhat, labels[-1] if pos_label is None else pos_label)
    if averaging == "macro":
        return float(np.mean([_class_f1(y, yhat, c) for c in labels]))
    raise ValueError(f"unknown averaging {averaging!r}")


def _class_f1(y, yhat, c) -> float:
    tp = sum(1 for a, b in zip(y, yhat) if a == c and b == c)
    fp = sum(1 for a, b in zip(y, yhat) if a != c and b == c)
    fn = sum(1 for a, b in zip(y, yhat) if a == c and b != c)
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class Preprocessor:
    """Per-fold imputation and one-hot encoding fitted on training rows."""

    names: list[str] = field(default_factory=list)
    kinds: dict = field(default_factory=dict)  # name -> "num" | "cat"
    fill: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, d: Dataset, rows: np.ndarray, features: Sequence[str] | None = None) -> "Preprocessor":
        pre = cls(sorted(d.feature_names if features is None else features))
        for n in pre.names:
            col = d[n]
            v = col.values[rows]
            if col.dtype in FLOAT_DTYPES:
                pre.kinds[n] = "num"
                ok = v[~np.isnan(v)]
                pre.fill[n] = float(np.median(ok)) if len(ok) else 0.0
            else:
                pre.kinds[n] = "cat"
                present = [x for x in v if x is not None]
                counts: dict[str, int] = {}
                for x in present:
                    counts[x] = counts.get(x, 0) + 1
                pre.fill[n] = min(counts, key=lambda k: (-counts[k], k)) if counts else None
                pre.levels[n] = sorted(counts)
        return pre

    def column_block(self, name: str, values: np.ndarray) -> np.ndarray:
        if self.kinds[name] == "num":
            v = np.array(values, dtype=np.float64)
            v[np.isnan(v)] = self.fill[name]
            return v[:, None]
        lv = self.levels[name]
        idx = {x: i for i, x in enumerate(lv)}
        out = np.zeros((len(values), len(lv)))
        for r, x in enumerate(values):
            x = self.fill[name] if x is None else x
            j = idx.get(x)
            if j is not None:
                out[r, j] = 1.0
        return out

    def transform(self, d: Dataset, rows: np.ndarray, override: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Encoded matrix for ``rows``; ``override`` substitutes a column's row values."""
        blocks = []
        for n in self.names:
            vals = override[n] if override and n in override else d[n].values[rows]
            blocks.append(self.column_block(n, vals))
        if not blocks:
            return np.zeros((len(rows), 0))
        return np.hstack(blocks)


# --------------------------------------------------------------------------
# learners


def _standardize_fit(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


class DecisionTree:
    """CART tree: variance reduction (regression) or Gini (classification)."""

    def __init__(self, task: str, max_depth: int = 6, min_leaf: int = 5):
        if min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        self.task, self.max_depth, self.min_leaf = task, max_depth, min_leaf

    def fit(self, X: np.ndarray, y: np.ndarray, n_classes: int = 0) -> "DecisionTree":
        self.n_classes = n_classes
        if self.task == "classification":
            Y = np.zeros((len(y), n_classes))
            Y[np.arange(len(y)), y.astype(int)] = 1.0
        else:
            Y = y.astype(np.float64)[:, None]
        self.nodes: list = []
        self._grow(X, Y, np.arange(len(y)), 0)
        return self

    def _leaf_value(self, Y):
        if self.task == "classification":
            return int(np.argmax(Y.sum(axis=0)))
        return float(Y[:, 0].mean())

    def _impurity(self, S, S2, n):
        # S: cumulative sums of targets (n_splits x outputs); S2 likewise for squares
        if self.task == "classification":
            return n - (S ** 2).sum(axis=1) / n  # n * gini
        return S2[:, 0] - S[:, 0] ** 2 / n  # sum of squared errors

    def _best_split(self, X, Y, idx):
        n = len(idx)
        best = (0.0, -1, 0.0)
        Yi = Y[idx]
        tot_S, tot_S2 = Yi.sum(axis=0), (Yi ** 2).sum(axis=0)
        parent = self._impurity(tot_S[None], tot_S2[None], np.array([n]))[0]
        if parent <= 1e-12:
            return best
        lo, hi = self.min_leaf, n - self.min_leaf
        if lo > hi:
            return best
        nl = np.arange(lo, hi + 1, dtype=np.float64)
        for j in range(X.shape[1]):
            x = X[idx, j]
            order = np.argsort(x, kind="stable")
            xs, Ys = x[order], Yi[order]
            cs = np.cumsum(Ys, axis=0)
            cs2 = np.cumsum(Ys ** 2, axis=0)
            Sl, S2l = cs[lo - 1:hi], cs2[lo - 1:hi]
            Sr, S2r = tot_S - Sl, tot_S2 - S2l
            imp = self._impurity(Sl, S2l, nl) + self._impurity(Sr, S2r, n - nl)
            valid = xs[lo - 1:hi] < xs[lo:hi + 1]
            gain = np.where(valid, parent - imp, -np.inf)
            k = int(np.argmax(gain))
            if gain[k] > best[0] + 1e-12:
                pos = lo + k  # left side holds sorted positions [0, pos)
                best = (float(gain[k]), j, 0.5 * (xs[pos - 1] + xs[pos]))
        return best

    def _grow(self, X, Y, idx, depth) -> int:
        node_id = len(self.nodes)
        self.nodes.append(None)
        gain, j, thr = (0.0, -1, 0.0)
        if depth < self.max_depth and len(idx) >= 2 * self.min_leaf:
            gain, j, thr = self._best_split(X, Y, idx)
        if j < 0:
            self.nodes[node_id] = ("leaf", self._leaf_value(Y[idx]))
            return node_id
        mask = X[idx, j] <= thr
        left = self._grow(X, Y, idx[mask], depth + 1)
        right = self._grow(X, Y, idx[~mask], depth + 1)
        self.nodes[node_id] = ("split", j, thr, left, right)
        return node_id

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X), dtype=np.int64 if self.task == "classification" else np.float64)
        for r in range(len(X)):
            node = self.nodes[0]
            while node[0] == "split":
                node = self.nodes[node[3] if X[r, node[1]] <= node[2] else node[4]]
            out[r] = node[1]
        return out


class RidgeRegression:
    """Closed-form ridge on standardized features with an unpenalized intercept."""

    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha

    def fit(self, X, y, n_classes: int = 0) -> "RidgeRegression":
        self.mu, self.sd = _standardize_fit(X)
        Z = (X - self.mu) / self.sd
        self.intercept = float(y.mean())
        A = Z.T @ Z + self.alpha * np.eye(Z.shape[1])
        self.coef = np.linalg.solve(A, Z.T @ (y - self.intercept)) if Z.shape[1] else np.zeros(0)
        return self

    def predict(self, X) -> np.ndarray:
        return ((X - self.mu) / self.sd) @ self.coef + self.intercept


def logistic_loss_grad(W: np.ndarray, b: np.ndarray, Z: np.ndarray, Y: np.ndarray, l2: float):
    """Mean softmax cross-entropy plus (l2 / 2n)·||W||², and its gradients."""
    n = Z.shape[0]
    logits = Z @ W + b
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    P = expl / expl.sum(axis=1, keepdims=True)
    logp = logits - np.log(expl.sum(axis=1, keepdims=True))
    loss = -(Y * logp).sum() / n + 0.5 * l2 / n * (W ** 2).sum()
    G = (P - Y) / n
    return loss, Z.T @ G + l2 / n * W, G.sum(axis=0)


def _logistic_grad(W, b, Z, Y, l2):
    n = Z.shape[0]
    logits = Z @ W + b
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    G = (P - Y) / n
    return Z.T @ G + l2 / n * W, G.sum(axis=0)


class LogisticRegression:
    """Multinomial logistic regression fitted by Nesterov-accelerated gradient descent."""

    def __init__(self, l2: float = 1.0, steps: int = 100):
        self.l2, self.steps = l2, steps

    def fit(self, X, y, n_classes: int = 2) -> "LogisticRegression":
        self.mu, self.sd = _standardize_fit(X)
        Z = (X - self.mu) / self.sd
        n, q = Z.shape
        Y = np.zeros((n, n_classes))
        Y[np.arange(n), y.astype(int)] = 1.0
        W, b = np.zeros((q, n_classes)), np.zeros(n_classes)
        VW, vb = W.copy(), b.copy()
        # 1/L step size, L bounding the Hessian of the objective
        top_sv = np.linalg.norm(Z, 2) ** 2 if q else 0.0
        lr = 1.0 / (0.5 * (top_sv + n) / n + self.l2 / n)
        for i in range(self.steps):
            gW, gb = _logistic_grad(VW, vb, Z, Y, self.l2)
            W_next, b_next = VW - lr * gW, vb - lr * gb
            mom = i / (i + 3)
            VW = W_next + mom * (W_next - W)
            vb = b_next + mom * (b_next - b)
            W, b = W_next, b_next
        self.W, self.b = W, b
        return self

    def predict(self, X) -> np.ndarray:
        return np.argmax(((X - self.mu) / self.sd) @ self.W + self.b, axis=1)


@dataclass(frozen=True)
class Learner:
    kind: str
    max_depth: int = 6
    min_leaf: int = 5
    alpha: float = 1.0
    l2: float = 1.0
    steps: int = 100

    def __post_init__(self):
        if self.kind not in LEARNERS:
            raise ValueError(f"unknown learner {self.kind!r}")

    def build(self, task: str):
        if self.kind == "decision_tree":
            return DecisionTree(task, self.max_depth, self.min_leaf)
        if self.kind == "linear_regression_ridge":
            if task != "regression":
                raise EvaluationError("ridge regression needs a regression task")
            return RidgeRegression(self.alpha)
        if task != "classification":
            raise EvaluationError("logistic regression needs a classification task")
        return LogisticRegression(self.l2, self.steps)

    def to_dict(self) -> dict:
        if self.kind == "decision_tree":
            return {"kind": self.kind, "max_depth": self.max_depth, "min_leaf": self.min_leaf}
        if self.kind == "linear_regression_ridge":
            return {"kind": self.kind, "alpha": self.alpha}
        return {"kind": self.kind, "l2": self.l2, "steps": self.steps}


def default_learner(task: str) -> Learner:
    return Learner("linear_regression_ridge" if task == "regression" else "logistic_regression")


# --------------------------------------------------------------------------
# relevance scores (feature cap, candidate ranking)


def target_vector(d: Dataset) -> tuple[np.ndarray, list]:
    """Numeric targets (regression) or class indices (classification), NaN/-1 when absent."""
    col = d.target_column
    if d.task == "regression":
        if col.dtype not in FLOAT_DTYPES:
            raise EvaluationError(f"regression target {d.target!r} is not numeric")
        return np.asarray(col.values, dtype=np.float64), []
    raw = [None if (v is None or (isinstance(v, float) and math.isnan(v))) else v for v in col.values]
    classes = sorted({v for v in raw if v is not None}, key=lambda v: (str(type(v)), v))
    idx = {c: i for i, c in enumerate(classes)}
    return np.array([-1 if v is None else idx[v] for v in raw], dtype=np.int64), classes


def _numeric_view(values: np.ndarray, y: np.ndarray, task: str) -> np.ndarray:
    """Numeric encoding of a column; categorical cells use their target mean."""
    if values.dtype != object:
        return np.asarray(values, dtype=np.float64)
    groups: dict[str, list[float]] = {}
    for v, t in zip(values, y):
        if v is not None:
            groups.setdefault(v, []).append(float(t))
    means = {k: float(np.mean(v)) for k, v in groups.items()}
    return np.array([np.nan if v is None else means[v] for v in values])


def _discretize(x: np.ndarray, bins: int = MI_BINS) -> np.ndarray:
    ok = ~np.isnan(x)
    out = np.full(len(x), -1, dtype=np.int64)
    if ok.sum() == 0:
        return out
    edges = np.unique(np.quantile(x[ok], np.linspace(0, 1, bins + 1)[1:-1]))
    out[ok] = np.searchsorted(edges, x[ok], side="right")
    return out


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two integer label arrays."""
    n = len(a)
    if n == 0:
        return 0.0
    ia = np.unique(a, return_inverse=True)[1].ravel()
    ib = np.unique(b, return_inverse=True)[1].ravel()
    nb = ib.max() + 1
    joint = np.bincount(ia * nb + ib).astype(np.float64)
    pa = np.bincount(ia).astype(np.float64)
    pb = np.bincount(ib).astype(np.float64)
    cells = np.flatnonzero(joint)
    c = joint[cells]
    mi = float(np.sum(c / n * np.log(c * n / (pa[cells // nb] * pb[cells % nb]))))
    return max(mi, 0.0)


def mutual_information_columns(X: np.ndarray, y: np.ndarray, bins: int = MI_BINS) -> np.ndarray:
    """``mutual_information(_discretize(X[:, j]), y)`` for every column at once."""
    n, c = X.shape
    if c == 0 or n == 0:
        return np.zeros(c)
    # linear-interpolated quantiles of the present cells, as np.quantile computes them
    S = np.sort(X, axis=0)
    m = (~np.isnan(X)).sum(axis=0)
    pos = np.linspace(0, 1, bins + 1)[1:-1][:, None] * np.maximum(m - 1, 0)[None, :]
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, np.maximum(m - 1, 0)[None, :])
    cols = np.arange(c)[None, :]
    frac = pos - lo
    edges = S[lo, cols] + (S[hi, cols] - S[lo, cols]) * frac
    edges[:, m == 0] = np.inf
    codes = (X[:, None, :] >= edges[None, :, :]).sum(axis=1)
    codes[np.isnan(X)] = bins
    yi = np.unique(y, return_inverse=True)[1].ravel()
    K = yi.max() + 1
    cells = (bins + 1) * K
    flat = (codes * K + yi[:, None]) + np.arange(c)[None, :] * cells
    joint = np.bincount(flat.ravel(), minlength=c * cells).reshape(c, bins + 1, K).astype(np.float64)
    pa = joint.sum(axis=2, keepdims=True)
    pb = joint.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint / n * np.log(joint * n / (pa * pb)), 0.0)
    return np.maximum(terms.sum(axis=(1, 2)), 0.0)


def relevance(values: np.ndarray, y: np.ndarray, task: str) -> float:
    """|Pearson correlation| for regression, mutual information for classification."""
    if values.dtype == object:
        if task == "classification":
            codes = {v: i for i, v in enumerate(sorted({v for v in values if v is not None}))}
            a = np.array([-1 if v is None else codes[v] for v in values], dtype=np.int64)
            return mutual_information(a, y.astype(np.int64))
        x = _numeric_view(values, y, task)
    else:
        x = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(x)
    if task == "classification":
        return mutual_information(_discretize(x), y.astype(np.int64))
    if ok.sum() < 3:
        return 0.0
    xs, ys = x[ok], y[ok]
    if xs.std() == 0 or ys.std() == 0:
        return 0.0
    r = float(np.corrcoef(xs, ys)[0, 1])
    return abs(r) if math.isfinite(r) else 0.0


def cap_features(d: Dataset, rows: np.ndarray, y: np.ndarray, cap: int = FEATURE_CAP) -> list[str]:
    names = sorted(d.feature_names)
    if len(names) <= cap:
        return names
    scores = {n: relevance(d[n].values[rows], y[rows], d.task) for n in names}
    return sorted(sorted(names, key=lambda n: (-scores[n], n))[:cap])


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class EvalResult:
    metric_name: str
    per_fold: list[float]
    mean: float
    n_features: int
    skipped_folds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metric": self.metric_name, "per_fold": list(self.per_fold), "mean": self.mean,
                "n_features": self.n_features, "skipped_folds": list(self.skipped_folds)}


@dataclass
class FoldModel:
    pre: Preprocessor
    est: object
    task: str
    n_classes: int
    classes: list

    def predict(self, d: Dataset, rows: np.ndarray, override=None) -> np.ndarray:
        return self.est.predict(self.pre.transform(d, rows, override))


def fit_fold(d: Dataset, train: np.ndarray, learner: Learner, y=None, classes=None) -> FoldModel | None:
    """Fit on ``train`` rows; ``None`` when the fold is degenerate."""
    if y is None:
        y, classes = target_vector(d)
    train = train[(y[train] >= 0) if d.task == "classification" else ~np.isnan(y[train])]
    if len(train) == 0:
        return None
    if d.task == "classification" and len(np.unique(y[train])) < 2:
        return None
    feats = cap_features(d, train, y)
    pre = Preprocessor.fit(d, train, feats)
    X = pre.transform(d, train)
    n_classes = len(classes) if classes else 0
    est = learner.build(d.task).fit(X, y[train], n_classes)
    return FoldModel(pre, est, d.task, n_classes, classes or [])


def score_fold(model: FoldModel, d: Dataset, test: np.ndarray, y: np.ndarray, override=None) -> float:
    keep = (y[test] >= 0) if d.task == "classification" else ~np.isnan(y[test])
    test = test[keep]
    if override:
        override = {k: v[keep] for k, v in override.items()}
    pred = model.predict(d, test, override)
    if d.task == "regression":
        return one_minus_rae(y[test], pred)
    labels = list(range(model.n_classes))
    if model.n_classes == 2:
        return f1(y[test].tolist(), pred.tolist(), "binary", pos_label=1, labels=labels)
    return f1(y[test].tolist(), pred.tolist(), "macro",
              labels=sorted(set(y[test].tolist()) | set(pred.tolist())))


def metric_name(task: str) -> str:
    return "1-rae" if task == "regression" else "f1"


def cross_val(d: Dataset, folds: FoldPlan, learner: Learner) -> EvalResult:
    """Per fold: impute and fit on training rows, score the held-out rows."""
    if len(folds.assignments) != d.n_rows:
        raise EvaluationError("fold plan does not match dataset")
    y, classes = target_vector(d)
    scores, skipped = [], []
    for k in range(folds.k):
        train, test = folds.split(k)
        model = fit_fold(d, train, learner, y, classes)
        if model is None:
            skipped.append(k)
            continue
        try:
            scores.append(score_fold(model, d, test, y))
        except DegenerateTargetError:
            skipped.append(k)
    if not scores:
        raise EvaluationError("every fold is degenerate")
    return EvalResult(metric_name(d.task), scores, float(np.mean(scores)), len(d.feature_names), skipped)
