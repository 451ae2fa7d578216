"""Second-order gradient boosting with best-first (leaf-wise) tree growth.

Two objectives are supported: pointwise squared error and LambdaRank with
|delta nDCG| pair weights (LambdaMART). Splits are exact: every boundary
between consecutive distinct feature values is a candidate, and ties in
gain resolve to the lowest feature index and then the lowest threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import metrics
from .errors import ValidationError


@dataclass(frozen=True)
class Objective:
    kind: str = "lambdarank"  # or "pointwise"
    truncation: int = 10
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("pointwise", "lambdarank"):
            raise ValidationError(f"unknown objective {self.kind!r}")
        if self.truncation < 1 or self.sigma <= 0:
            raise ValidationError("truncation must be >= 1 and sigma > 0")


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 500
    max_leaves: int = 10
    learning_rate: float = 0.01
    reg_lambda: float = 1.0
    early_stop_rounds: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_leaves < 1 or self.learning_rate <= 0 or self.reg_lambda < 0:
            raise ValidationError(f"invalid boosting parameters {self}")
        if self.early_stop_rounds < 0:
            raise ValidationError("early_stop_rounds must be >= 0 (0 disables)")


@dataclass(frozen=True, eq=False)
class RankSet:
    """Row-aligned features and labels with contiguous query groups."""

    features: np.ndarray
    labels: np.ndarray
    group_sizes: np.ndarray
    query_ids: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        sizes = np.asarray(self.group_sizes, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],) or sizes.sum() != x.shape[0] or np.any(sizes < 1):
            raise ValidationError("features, labels and group sizes are inconsistent")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "query_ids", tuple(self.query_ids))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.group_sizes)])

    def __len__(self):
        return self.features.shape[0]

    def subset(self, query_indices) -> "RankSet":
        off = self.offsets
        rows = np.concatenate([np.arange(off[q], off[q + 1]) for q in query_indices]) if len(query_indices) else \
            np.zeros(0, dtype=np.int64)
        qids = tuple(self.query_ids[q] for q in query_indices) if self.query_ids else ()
        return RankSet(self.features[rows].reshape(-1, self.features.shape[1]), self.labels[rows],
                       self.group_sizes[list(query_indices)], qids)


# --- trees ------------------------------------------------------------------


@dataclass(eq=False)
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    Rows with ``x[feature] <= threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_leaves: int

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X) -> np.ndarray:
        """Leaf node index reached by every row."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            n = node[active]
            f = self.feature[n]
            go_left = X[active, f] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "max_leaves": self.max_leaves,
        }

    @classmethod
    def from_dict(cls, d) -> "RegressionTree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=np.float64), int(d["max_leaves"]))


def _best_split(XT, sel, grad, hess, lam):
    """Best exact split of the rows in ``sel`` (one presorted row per feature).

    Returns ``(gain, feature, threshold, left_count)`` or ``None``.
    """
    n = sel.shape[1]
    if n < 2:
        return None
    xs = np.take_along_axis(XT, sel, axis=1)
    gl = np.cumsum(grad[sel], axis=1)[:, :-1]
    hl = np.cumsum(hess[sel], axis=1)[:, :-1]
    G, H = grad[sel[0]].sum(), hess[sel[0]].sum()
    gr, hr = G - gl, H - hl
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - G * G / (H + lam)
    gain[~(xs[:, :-1] < xs[:, 1:])] = -np.inf
    gain[~np.isfinite(gain)] = -np.inf
    flat = int(np.argmax(gain))
    f, i = divmod(flat, n - 1)
    best = gain[f, i]
    if not best > 1e-12:
        return None
    lo, hi = xs[f, i], xs[f, i + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(best), int(f), float(thr), i + 1


def fit_tree(X, gradients, hessians, max_leaves: int, reg_lambda: float = 1.0, presorted=None) -> RegressionTree:
    """Grow one tree leaf-wise, always splitting the leaf with the largest gain.

    Leaf values are ``-G / (H + reg_lambda)``. ``presorted`` may hold the
    stable per-feature argsort of ``X`` (shape ``(D, n)``) to skip sorting.
    """
    X = np.asarray(X, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    if g.shape != (X.shape[0],) or h.shape != g.shape:
        raise ValidationError("gradients and hessians must align with examples")
    if np.any(h < 0):
        raise ValidationError("hessians must be non-negative")
    if max_leaves < 1:
        raise ValidationError("max_leaves must be >= 1")
    XT = np.ascontiguousarray(X.T)
    sel0 = presorted if presorted is not None else np.argsort(XT, axis=1, kind="stable")

    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    open_leaves = {0: sel0}
    candidates = {}
    if max_leaves > 1:
        candidates[0] = _best_split(XT, sel0, g, h, reg_lambda)
    n_leaves = 1
    while n_leaves < max_leaves:
        best_node, best = None, None
        for node in sorted(candidates):
            c = candidates[node]
            if c is not None and (best is None or c[0] > best[0]):
                best_node, best = node, c
        if best is None:
            break
        _, f, thr, _ = best
        sel = open_leaves.pop(best_node)
        del candidates[best_node]
        goes_left = np.zeros(X.shape[0], dtype=bool)
        rows = sel[0]
        goes_left[rows] = X[rows, f] <= thr
        mask = goes_left[sel]
        d = sel.shape[0]
        sel_l = sel[mask].reshape(d, -1)
        sel_r = sel[~mask].reshape(d, -1)
        li, ri = len(feature), len(feature) + 1
        feature[best_node], threshold[best_node] = f, thr
        left[best_node], right[best_node] = li, ri
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
        open_leaves[li], open_leaves[ri] = sel_l, sel_r
        n_leaves += 1
        if n_leaves < max_leaves:
            candidates[li] = _best_split(XT, sel_l, g, h, reg_lambda)
            candidates[ri] = _best_split(XT, sel_r, g, h, reg_lambda)
    for node, sel in open_leaves.items():
        rows = sel[0]
        value[node] = -g[rows].sum() / (h[rows].sum() + reg_lambda) if rows.size else 0.0
    value = [0.0 if v == 0 else v for v in value]  # normalise -0.0
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                          np.array(right, dtype=np.int64), np.array(value, dtype=np.float64), max_leaves)


# --- objectives -------------------------------------------------------------


def lambda_gradients(scores, grades, group_sizes, objective: Objective = Objective()):
    """LambdaRank first and second derivatives for every example.

    Each ordered pair ``(i, j)`` with ``grade_i > grade_j`` contributes
    ``lam = -sigma * |dNDCG| / (1 + exp(sigma * (s_i - s_j)))`` to ``i`` and
    ``-lam`` to ``j``. ``|dNDCG|`` swaps the two documents in the current
    ranking (score descending, ties to the earlier document) and is
    normalised by the ideal DCG at the truncation depth.
    """
    s_all = np.asarray(scores, dtype=np.float64)
    y_all = np.asarray(grades, dtype=np.float64)
    sizes = np.asarray(group_sizes, dtype=np.int64)
    grad = np.zeros_like(s_all)
    hess = np.zeros_like(s_all)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    sig, k = objective.sigma, objective.truncation
    for n in np.unique(sizes):
        if n < 2:
            continue
        qs = np.flatnonzero(sizes == n)
        for chunk in np.array_split(qs, max(1, len(qs) * n * n // 2_000_000 + 1)):
            idx = offsets[chunk][:, None] + np.arange(n)
            s, y = s_all[idx], y_all[idx]
            order = np.argsort(-s, axis=1, kind="stable")
            rank = np.empty_like(order)
            np.put_along_axis(rank, order, np.arange(n)[None, :].repeat(len(chunk), 0), axis=1)
            disc = np.where(rank < k, 1.0 / np.log2(rank + 2.0), 0.0)
            gain = 2.0 ** y - 1.0
            idcg = metrics.batch_dcg(-np.sort(-gain, axis=1), k, gains=True)
            inv = np.divide(1.0, idcg, out=np.zeros_like(idcg), where=idcg > 0)
            pair = y[:, :, None] > y[:, None, :]
            delta = np.abs(gain[:, :, None] - gain[:, None, :]) * np.abs(disc[:, :, None] - disc[:, None, :])
            delta *= inv[:, None, None]
            rho = expit(-sig * (s[:, :, None] - s[:, None, :]))
            lam = np.where(pair, -sig * delta * rho, 0.0)
            hh = np.where(pair, sig * sig * delta * rho * (1.0 - rho), 0.0)
            grad[idx] = lam.sum(axis=2) - lam.sum(axis=1)
            hess[idx] = hh.sum(axis=2) + hh.sum(axis=1)
    return grad, hess


# --- ensembles --------------------------------------------------------------


@dataclass(eq=False)
class GbdtModel:
    trees: list
    learning_rate: float
    base_score: float
    n_features: int
    objective: Objective = field(default_factory=Objective)
    history: list = field(default_factory=list)  # (round, split, loss)

    def to_dict(self) -> dict:
        return {
            "trees": [t.to_dict() for t in self.trees],
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "objective": asdict(self.objective),
            "history": [list(r) for r in self.history],
        }

    @classmethod
    def from_dict(cls, d) -> "GbdtModel":
        return cls([RegressionTree.from_dict(t) for t in d["trees"]], float(d["learning_rate"]),
                   float(d["base_score"]), int(d["n_features"]), Objective(**d["objective"]),
                   [tuple(r) for r in d.get("history", [])])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GbdtModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def predict(model: GbdtModel, X) -> np.ndarray:
    """``base_score + learning_rate * sum(tree(x))``, trees summed in order."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise ValidationError(f"input has dimension {X.shape[1]}, model expects {model.n_features}")
    total = np.zeros(X.shape[0])
    for tree in model.trees:
        total += tree.predict(X)
    out = model.base_score + model.learning_rate * total
    return out[0] if single else out


def _round_loss(objective, pred, data: RankSet) -> float:
    if objective.kind == "pointwise":
        return float(np.mean((pred - data.labels) ** 2))
    return 1.0 - float(np.mean(metrics.grouped_ndcg(pred, data.labels, data.group_sizes, objective.truncation)))


def _gradients(objective, pred, data: RankSet):
    if objective.kind == "pointwise":
        return pred - data.labels, np.ones_like(pred)
    return lambda_gradients(pred, data.labels, data.group_sizes, objective)


def fit_gbdt(train: RankSet, validation: RankSet | None = None, objective: Objective = Objective(),
             params: GbdtParams = GbdtParams(), record_history: bool = True) -> GbdtModel:
    """Boost ``params.n_trees`` trees, recomputing gradients every round.

    With a non-empty validation set, training stops once the validation
    loss (MSE, or ``1 - nDCG@truncation``) has not improved for
    ``early_stop_rounds`` rounds, and the ensemble is cut back to its best
    round.
    """
    if len(train) == 0:
        raise ValidationError("empty training set")
    X = train.features
    base = float(np.mean(train.labels)) if objective.kind == "pointwise" else 0.0
    model = GbdtModel([], params.learning_rate, base, X.shape[1], objective)
    presorted = np.argsort(np.ascontiguousarray(X.T), axis=1, kind="stable")
    pred = np.full(len(train), base)
    use_val = validation is not None and len(validation) > 0
    early_stop = use_val and params.early_stop_rounds > 0
    val_pred = np.full(len(validation), base) if use_val else None
    best_loss, best_round = np.inf, 0
    for r in range(params.n_trees):
        g, h = _gradients(objective, pred, train)
        tree = fit_tree(X, g, h, params.max_leaves, params.reg_lambda, presorted)
        model.trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
        if record_history:
            model.history.append((r + 1, "train", _round_loss(objective, pred, train)))
        if use_val:
            val_pred = val_pred + params.learning_rate * tree.predict(validation.features)
            vloss = _round_loss(objective, val_pred, validation)
            if record_history:
                model.history.append((r + 1, "validation", vloss))
            if vloss < best_loss - 1e-12:
                best_loss, best_round = vloss, r + 1
            elif early_stop and r + 1 - best_round >= params.early_stop_rounds:
                break
    if early_stop and best_round:
        del model.trees[best_round:]
    return model


def kfold_fit_predict(data: RankSet, k: int = 5, objective: Objective = Objective(),
                      params: GbdtParams = GbdtParams(), seed: int = 0):
    """Out-of-fold predictions with folds drawn over queries.

    Returns ``(predictions, fold_of_query, models)``; every row is scored by
    the one model whose training folds exclude its query.
    """
    n_q = len(data.group_sizes)
    if k < 2:
        raise ValidationError("k must be >= 2")
    if n_q < k:
        raise ValidationError(f"{n_q} queries cannot fill {k} folds")
    fold = np.empty(n_q, dtype=np.int64)
    fold[np.random.default_rng(seed).permutation(n_q)] = np.arange(n_q) % k
    off = data.offsets
    out = np.full(len(data), np.nan)
    models = []
    for f in range(k):
        train_q = np.flatnonzero(fold != f)
        test_q = np.flatnonzero(fold == f)
        model = fit_gbdt(data.subset(train_q), None, objective, params)
        models.append(model)
        rows = np.concatenate([np.arange(off[q], off[q + 1]) for q in test_q])
        out[rows] = predict(model, data.features[rows])
    return out, fold, models
