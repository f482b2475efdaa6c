"""In-tree nuisance learners: ridge, penalized logistic, boosted stumps.

All fits are deterministic functions of (data, spec). Probability outputs are
clipped away from 0 and 1; the asymmetric-loss regression and the nu map for
the partial-identification bounds are built on the same boosting machinery
with a pluggable loss. Models serialize to a line-oriented text format.

Whether boosted stumps converge fast enough for the strong-consistency rate
assumptions behind the confidence sequences cannot be verified from data;
the engine logs holdout RMSE trajectories as a diagnostic instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Union

import numpy as np
from scipy.special import expit

from .errors import FitError, ParameterError
from .scores import GammaParam, _gamma_weight, gamma_loss_terms

__all__ = [
    "LearnerSpec",
    "RidgeModel",
    "LogisticModel",
    "GbtModel",
    "NuModel",
    "FittedNuisance",
    "SquaredLoss",
    "GammaRegressionLoss",
    "fit_ridge",
    "fit_logistic",
    "fit_gbt",
    "fit_g1_gamma",
    "fit_nu",
    "minimize_gamma_constant",
    "dump_model",
    "load_model",
]

FORMAT_HEADER = "seqdml-model v1"


@dataclass(frozen=True)
class LearnerSpec:
    """Hyperparameters that, with the data, fully determine a fit."""

    kind: str = "ridge"  # ridge | logistic | gbt
    ridge_lambda: float = 1e-3
    logistic_lambda: float = 1e-4
    n_rounds: int = 200
    max_depth: int = 2
    learning_rate: float = 0.1
    min_leaf: int = 20
    max_bins: int = 64
    clip: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ridge", "logistic", "gbt"):
            raise ParameterError(f"unknown learner kind {self.kind!r}")
        if self.ridge_lambda < 0 or self.logistic_lambda < 0:
            raise ParameterError("penalties must be nonnegative")
        if self.n_rounds < 0 or self.max_depth < 1 or self.min_leaf < 1 or self.max_bins < 2:
            raise ParameterError("tree hyperparameters out of range")
        if not (0.0 <= self.learning_rate <= 1.0):
            raise ParameterError(f"learning_rate must be in [0, 1], got {self.learning_rate}")
        if not (0.0 < self.clip < 0.5):
            raise ParameterError(f"clip must be in (0, 0.5), got {self.clip}")


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ParameterError(f"covariates must be a 1-d or 2-d array, got ndim={X.ndim}")
    return X


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------

@dataclass
class RidgeModel:
    intercept: float
    coef: np.ndarray
    train_ids: frozenset = frozenset()

    def predict(self, X) -> np.ndarray:
        return self.intercept + _as_2d(X) @ self.coef


@dataclass
class LogisticModel:
    intercept: float
    coef: np.ndarray
    clip: tuple[float, float]
    train_ids: frozenset = frozenset()

    def predict(self, X) -> np.ndarray:
        p = expit(self.intercept + _as_2d(X) @ self.coef)
        return np.clip(p, self.clip[0], self.clip[1])


@dataclass
class _Tree:
    """Flat-array binary tree; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            rows = np.nonzero(internal)[0]
            cur = node[rows]
            go_left = X[rows, feat[rows]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
        return self.value[node]


@dataclass
class GbtModel:
    init_value: float
    learning_rate: float
    trees: list
    train_ids: frozenset = frozenset()

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X)
        out = np.full(X.shape[0], self.init_value)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out


@dataclass
class NuModel:
    """nu(x) = p(x) + gamma (1 - p(x)), p the clipped probability of y >= g1(x)."""

    prob_model: LogisticModel
    gamma: float
    train_ids: frozenset = frozenset()

    def predict(self, X) -> np.ndarray:
        p = self.prob_model.predict(X)
        nu = p + self.gamma * (1.0 - p)
        return np.clip(nu, min(1.0, self.gamma), max(1.0, self.gamma))


FittedNuisance = Union[RidgeModel, LogisticModel, GbtModel, NuModel]


# ---------------------------------------------------------------------------
# Losses for boosting
# ---------------------------------------------------------------------------

class BoostLoss(Protocol):
    def init_value(self, y: np.ndarray) -> float: ...
    def mean_loss(self, y: np.ndarray, f: np.ndarray) -> float: ...
    def gradient(self, y: np.ndarray, f: np.ndarray) -> np.ndarray: ...
    def leaf_value(self, y: np.ndarray, f: np.ndarray) -> float: ...


class SquaredLoss:
    def init_value(self, y):
        return float(np.mean(y))

    def mean_loss(self, y, f):
        return float(np.mean((y - f) ** 2))

    def gradient(self, y, f):
        return 2.0 * (f - y)

    def leaf_value(self, y, f):
        return float(np.mean(y - f))


class GammaRegressionLoss:
    """Asymmetric squared loss (y-f)_+^2 + gamma (y-f)_-^2 for any positive weight."""

    def __init__(self, gamma: "GammaParam | float"):
        self.gamma = _gamma_weight(gamma)

    def init_value(self, y):
        return minimize_gamma_constant(y, self.gamma)

    def mean_loss(self, y, f):
        value, _ = gamma_loss_terms(y, f, self.gamma)
        return float(np.mean(value))

    def gradient(self, y, f):
        _, d_df = gamma_loss_terms(y, f, self.gamma)
        return d_df

    def leaf_value(self, y, f):
        return _gamma_constant_closed_form(np.asarray(y) - np.asarray(f), self.gamma)


def minimize_gamma_constant(values, gamma_weight: float, tol: float = 1e-9) -> float:
    """1-d minimizer of the empirical asymmetric loss, by derivative bisection."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise FitError("cannot minimize the asymmetric loss over an empty sample")
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= tol:
        return 0.5 * (lo + hi)

    def deriv(c: float) -> float:
        _, d = gamma_loss_terms(values, c, gamma_weight)
        return float(np.sum(d))

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if deriv(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _gamma_constant_closed_form(residuals: np.ndarray, gamma_weight: float) -> float:
    """Exact minimizer of sum (r-c)_+^2 + gamma (r-c)_-^2 via sorted prefix sums."""
    r = np.sort(np.asarray(residuals, dtype=float))
    n = r.size
    if n == 0:
        return 0.0
    prefix = np.concatenate(([0.0], np.cumsum(r)))
    total = prefix[-1]
    j = np.arange(n + 1, dtype=float)
    candidates = ((total - prefix) + gamma_weight * prefix) / ((n - j) + gamma_weight * j)
    lows = np.concatenate(([-np.inf], r))
    highs = np.concatenate((r, [np.inf]))
    valid = np.nonzero((candidates >= lows - 1e-12) & (candidates <= highs + 1e-12))[0]
    if valid.size == 0:  # numerical corner; fall back to bisection
        return minimize_gamma_constant(r, gamma_weight)
    return float(candidates[valid[0]])


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def fit_ridge(X, y, spec: LearnerSpec, train_ids: Iterable[int] = ()) -> RidgeModel:
    """Ridge regression minimizing mean squared error + lambda ||coef||^2.

    Fit on centered data so the intercept is unpenalized; with lambda > 0 the
    normal equations are always solvable.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise FitError("fit_ridge: empty training data")
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    n = X.shape[0]
    gram = Xc.T @ Xc / n + spec.ridge_lambda * np.eye(X.shape[1])
    rhs = Xc.T @ yc / n
    if spec.ridge_lambda > 0:
        coef = np.linalg.solve(gram, rhs)
    else:
        coef = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return RidgeModel(
        intercept=y_mean - float(x_mean @ coef),
        coef=coef,
        train_ids=frozenset(train_ids),
    )


def _logistic_objective(design, y, beta, lam):
    eta = design @ beta
    nll = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
    return nll + lam * float(beta[1:] @ beta[1:])


def fit_logistic(X, y, spec: LearnerSpec, train_ids: Iterable[int] = ()) -> LogisticModel:
    """Penalized logistic regression by damped Newton iterations.

    Maximizes the ridge-penalized log-likelihood (intercept unpenalized) to
    gradient norm <= 1e-8 or 100 iterations. Predictions are clipped to
    [clip, 1 - clip]. With lambda = 0, complete separation is reported as a
    fit error advising a positive penalty.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise FitError("fit_logistic: empty training data")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ParameterError("fit_logistic labels must be 0 or 1")
    n, d = X.shape
    design = np.column_stack([np.ones(n), X])
    lam = spec.logistic_lambda
    beta = np.zeros(d + 1)
    for _ in range(100):
        eta = design @ beta
        p = expit(eta)
        grad = design.T @ (p - y) / n
        grad[1:] += 2.0 * lam * beta[1:]
        if float(np.linalg.norm(grad)) <= 1e-8:
            break
        w = p * (1.0 - p)
        hess = (design * w[:, None]).T @ design / n
        hess[1:, 1:] += 2.0 * lam * np.eye(d)
        hess += 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(hess, grad)
        obj = _logistic_objective(design, y, beta, lam)
        t = 1.0
        cand = beta - step
        for _ in range(60):
            cand = beta - t * step
            if _logistic_objective(design, y, cand, lam) <= obj:
                break
            t *= 0.5
        beta = cand
        if lam == 0.0 and float(np.linalg.norm(beta)) > 1e8:
            raise FitError(
                "fit_logistic: diverging coefficients (complete separation?); "
                "set logistic_lambda > 0"
            )
    if lam == 0.0 and _logistic_objective(design, y, beta, 0.0) < 1e-6:
        # Zero training loss means the classes are completely separated and
        # the unpenalized maximizer does not exist.
        raise FitError(
            "fit_logistic: complete separation (training loss is zero); "
            "set logistic_lambda > 0"
        )
    return LogisticModel(
        intercept=float(beta[0]),
        coef=beta[1:],
        clip=(spec.clip, 1.0 - spec.clip),
        train_ids=frozenset(train_ids),
    )


def _bin_edges(col: np.ndarray, max_bins: int) -> np.ndarray:
    uniq = np.unique(col)
    if uniq.size <= 1:
        return np.empty(0)
    if uniq.size <= max_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.quantile(col, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
    return np.unique(qs)


def _best_split(codes_offset, starts, n_bins, total_bins, target, rows, min_leaf):
    """Best (feature, bin) squared-error split of `target` over `rows`, or None.

    ``codes_offset`` holds per-feature bin codes shifted by per-feature
    offsets so one flat bincount covers every feature at once.
    """
    best = None
    best_gain = 0.0
    total_n = rows.size
    d = codes_offset.shape[1]
    flat = codes_offset[rows].T.ravel()
    counts = np.bincount(flat, minlength=total_bins)
    sums = np.bincount(flat, weights=np.tile(target[rows], d), minlength=total_bins)
    for j in range(d):
        bins = n_bins[j]
        if bins < 2:
            continue
        lo = starts[j]
        cnt = counts[lo : lo + bins]
        sm = sums[lo : lo + bins]
        n_left = np.cumsum(cnt)[:-1]
        s_left = np.cumsum(sm)[:-1]
        n_right = total_n - n_left
        s_total = float(sm.sum())
        s_right = s_total - s_left
        ok = (n_left >= min_leaf) & (n_right >= min_leaf)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            score = np.where(ok, s_left**2 / n_left + s_right**2 / n_right, -np.inf)
        base = s_total**2 / total_n
        b = int(np.argmax(score))
        gain = float(score[b] - base)
        if gain > best_gain + 1e-12:
            best_gain = gain
            best = (j, b)
    return best


def _build_tree(binning, target, y, f, loss, spec, lr):
    """Grow one depth-limited tree on the negative-gradient target.

    Leaf values re-solve the actual loss over the leaf's rows, and the
    training predictions f are updated in place by lr * value, so the
    training loss cannot increase.
    """
    codes, codes_offset, edges, starts, n_bins, total_bins = binning
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(rows: np.ndarray, depth: int) -> int:
        nid = new_node()
        split = None
        if depth < spec.max_depth and rows.size >= 2 * spec.min_leaf:
            split = _best_split(
                codes_offset, starts, n_bins, total_bins, target, rows, spec.min_leaf
            )
        if split is None:
            leaf = loss.leaf_value(y[rows], f[rows])
            value[nid] = leaf
            f[rows] += lr * leaf
            return nid
        j, b = split
        mask = codes[rows, j] <= b
        feature[nid] = j
        threshold[nid] = float(edges[j][b])
        left[nid] = build(rows[mask], depth + 1)
        right[nid] = build(rows[~mask], depth + 1)
        return nid

    build(np.arange(codes.shape[0]), 0)
    return _Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value),
    )


def fit_gbt(X, y, loss: BoostLoss, spec: LearnerSpec, train_ids: Iterable[int] = ()) -> GbtModel:
    """Gradient boosting with depth-limited regression trees and a pluggable loss.

    Each round fits a tree to the negative gradient (squared-error splits on
    binned features) and solves each leaf's constant against the actual loss.
    A zero learning rate leaves the model at the loss-minimizing constant.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise FitError("fit_gbt: empty training data")
    init = float(loss.init_value(y))
    if not math.isfinite(init):
        raise FitError("fit_gbt: non-finite initialization constant")
    f = np.full(X.shape[0], init)
    trees: list[_Tree] = []
    lr = spec.learning_rate
    if lr > 0.0 and spec.n_rounds > 0:
        edges = [_bin_edges(X[:, j], spec.max_bins) for j in range(X.shape[1])]
        n_bins = [e.size + 1 for e in edges]
        starts = np.concatenate(([0], np.cumsum(n_bins)[:-1]))
        total_bins = int(sum(n_bins))
        codes = np.column_stack(
            [
                np.searchsorted(edges[j], X[:, j], side="left")
                if edges[j].size
                else np.zeros(X.shape[0], dtype=np.int64)
                for j in range(X.shape[1])
            ]
        )
        binning = (codes, codes + starts[None, :], edges, starts, n_bins, total_bins)
        for _ in range(spec.n_rounds):
            grad = np.asarray(loss.gradient(y, f), dtype=float)
            if not np.isfinite(grad).all():
                raise FitError("fit_gbt: non-finite gradient during boosting")
            trees.append(_build_tree(binning, -grad, y, f, loss, spec, lr))
            if not np.isfinite(f).all():
                raise FitError("fit_gbt: non-finite predictions during boosting")
    return GbtModel(
        init_value=init,
        learning_rate=lr,
        trees=trees,
        train_ids=frozenset(train_ids),
    )


def fit_g1_gamma(
    X, y, gamma: "GammaParam | float", spec: LearnerSpec, train_ids: Iterable[int] = ()
) -> GbtModel:
    """Asymmetric-loss regression for one arm's bound, on that arm's rows only.

    The effective weight is Gamma for a lower bound and 1/Gamma for an upper
    bound; the caller passes whichever applies.
    """
    return fit_gbt(X, y, GammaRegressionLoss(gamma), spec, train_ids=train_ids)


def fit_nu(
    X,
    y,
    g1_model: FittedNuisance,
    gamma: "GammaParam | float",
    spec: LearnerSpec,
    train_ids: Iterable[int] = (),
) -> NuModel:
    """Estimate nu(x) = P(y >= g1(x) | x) + gamma P(y < g1(x) | x) on one arm's rows."""
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    labels = (y >= g1_model.predict(X)).astype(float)
    prob_model = fit_logistic(X, labels, spec, train_ids=train_ids)
    return NuModel(
        prob_model=prob_model,
        gamma=_gamma_weight(gamma),
        train_ids=frozenset(train_ids),
    )


# ---------------------------------------------------------------------------
# Text serialization (versioned, binary-free)
# ---------------------------------------------------------------------------

def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def dump_model(model: FittedNuisance) -> str:
    """Serialize a fitted model to the line-oriented `key = value` text format.

    Trees are written as one `node` row per node: feature threshold left
    right value, with feature -1 marking leaves. Training-row bookkeeping is
    runtime-only and not serialized.
    """
    lines = [FORMAT_HEADER]
    if isinstance(model, RidgeModel):
        lines += [
            "kind = ridge",
            f"intercept = {model.intercept!r}",
            f"coef = {_fmt_floats(model.coef)}",
        ]
    elif isinstance(model, LogisticModel):
        lines += [
            "kind = logistic",
            f"intercept = {model.intercept!r}",
            f"coef = {_fmt_floats(model.coef)}",
            f"clip = {model.clip[0]!r} {model.clip[1]!r}",
        ]
    elif isinstance(model, GbtModel):
        lines += [
            "kind = gbt",
            f"init = {model.init_value!r}",
            f"learning_rate = {model.learning_rate!r}",
            f"n_trees = {len(model.trees)}",
        ]
        for i, tree in enumerate(model.trees):
            lines.append(f"tree {i} nodes {tree.feature.size}")
            for k in range(tree.feature.size):
                lines.append(
                    f"node {int(tree.feature[k])} {float(tree.threshold[k])!r} "
                    f"{int(tree.left[k])} {int(tree.right[k])} {float(tree.value[k])!r}"
                )
    elif isinstance(model, NuModel):
        lines += [
            "kind = nu",
            f"gamma = {model.gamma!r}",
            f"intercept = {model.prob_model.intercept!r}",
            f"coef = {_fmt_floats(model.prob_model.coef)}",
            f"clip = {model.prob_model.clip[0]!r} {model.prob_model.clip[1]!r}",
        ]
    else:
        raise ParameterError(f"cannot serialize model of type {type(model).__name__}")
    return "\n".join(lines) + "\n"


def _parse_kv(lines: list[str], key: str) -> str:
    for line in lines:
        if line.startswith(key + " = "):
            return line[len(key) + 3 :]
    raise ParameterError(f"model text is missing key {key!r}")


def load_model(text: str) -> FittedNuisance:
    """Parse a model serialized by :func:`dump_model`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ParameterError(f"model text must start with {FORMAT_HEADER!r}")
    kind = _parse_kv(lines, "kind")
    if kind == "ridge":
        return RidgeModel(
            intercept=float(_parse_kv(lines, "intercept")),
            coef=np.array([float(v) for v in _parse_kv(lines, "coef").split()]),
        )
    if kind == "logistic":
        clip = tuple(float(v) for v in _parse_kv(lines, "clip").split())
        return LogisticModel(
            intercept=float(_parse_kv(lines, "intercept")),
            coef=np.array([float(v) for v in _parse_kv(lines, "coef").split()]),
            clip=(clip[0], clip[1]),
        )
    if kind == "nu":
        clip = tuple(float(v) for v in _parse_kv(lines, "clip").split())
        inner = LogisticModel(
            intercept=float(_parse_kv(lines, "intercept")),
            coef=np.array([float(v) for v in _parse_kv(lines, "coef").split()]),
            clip=(clip[0], clip[1]),
        )
        return NuModel(prob_model=inner, gamma=float(_parse_kv(lines, "gamma")))
    if kind == "gbt":
        n_trees = int(_parse_kv(lines, "n_trees"))
        trees = []
        idx = next(i for i, ln in enumerate(lines) if ln.startswith("n_trees = ")) + 1
        for _ in range(n_trees):
            head = lines[idx].split()
            if head[0] != "tree":
                raise ParameterError(f"expected a tree header, got {lines[idx]!r}")
            n_nodes = int(head[3])
            feature, threshold, left, right, value = [], [], [], [], []
            for k in range(n_nodes):
                parts = lines[idx + 1 + k].split()
                feature.append(int(parts[1]))
                threshold.append(float(parts[2]))
                left.append(int(parts[3]))
                right.append(int(parts[4]))
                value.append(float(parts[5]))
            trees.append(
                _Tree(
                    feature=np.array(feature, dtype=np.int64),
                    threshold=np.array(threshold),
                    left=np.array(left, dtype=np.int64),
                    right=np.array(right, dtype=np.int64),
                    value=np.array(value),
                )
            )
            idx += 1 + n_nodes
        return GbtModel(
            init_value=float(_parse_kv(lines, "init")),
            learning_rate=float(_parse_kv(lines, "learning_rate")),
            trees=trees,
        )
    raise ParameterError(f"unknown model kind {kind!r}")
