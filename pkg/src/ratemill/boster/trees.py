"""Histogram gradient boosting for binary logistic loss.

Trees grow leaf-wise: the leaf whose best split has the largest gain is
split next until ``num_leaves`` is reached. Every node stores its cover
(sum of hessians) so path-dependent TreeSHAP can run on the fitted model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from numba import njit

from ..matrix import FeatureMatrix

LEAF = -1
_P_MIN = np.nextafter(0.0, 1.0)
_P_MAX = np.nextafter(1.0, 0.0)


@dataclass
class BoostParams:
    n_rounds: int = 100
    learning_rate: float = 0.1
    num_leaves: int = 31
    max_depth: int = -1
    min_child_weight: float = 1e-3
    min_child_samples: int = 20
    reg_lambda: float = 1.0
    class_weight: float = 1.0
    max_bins: int = 64
    bagging_fraction: float = 1.0
    feature_fraction: float = 1.0
    min_split_gain: float = 0.0

    def validate(self):
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.num_leaves < 2:
            raise ValueError("num_leaves must be >= 2")
        if not 2 <= self.max_bins <= 255:
            raise ValueError("max_bins must lie in [2, 255]")
        if self.class_weight <= 0:
            raise ValueError("class_weight must be > 0")
        if self.reg_lambda < 0 or self.min_child_weight < 0:
            raise ValueError("regularisation terms must be >= 0")
        if not (0 < self.bagging_fraction <= 1 and 0 < self.feature_fraction <= 1):
            raise ValueError("sampling fractions must lie in (0, 1]")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "BoostParams":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.missing_left = np.asarray(self.missing_left, dtype=np.bool_)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.cover = np.asarray(self.cover, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == LEAF

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for n in range(self.n_nodes):
            if self.feature[n] != LEAF:
                depth[self.left[n]] = depth[n] + 1
                depth[self.right[n]] = depth[n] + 1
        return int(depth.max())

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "missing_left": self.missing_left.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(**{k: d[k] for k in ("feature", "threshold", "missing_left", "left", "right", "value", "cover")})


@dataclass
class TreeEnsembleModel:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    feature_names: list[str]
    class_weight: float = 1.0
    training_meta: dict = field(default_factory=dict)

    @cached_property
    def packed(self):
        return pack_trees(self.trees)

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "class_weight": self.class_weight,
            "feature_names": list(self.feature_names),
            "training_meta": self.training_meta,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsembleModel":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            base_score=float(d["base_score"]),
            learning_rate=float(d["learning_rate"]),
            feature_names=list(d["feature_names"]),
            class_weight=float(d.get("class_weight", 1.0)),
            training_meta=dict(d.get("training_meta", {})),
        )


def pack_trees(trees):
    """Concatenate node arrays so numba kernels can walk the whole ensemble."""
    offsets = np.zeros(len(trees) + 1, dtype=np.int64)
    for k, t in enumerate(trees):
        offsets[k + 1] = offsets[k] + t.n_nodes
    if not trees:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0, dtype=np.float64)
        return (empty_i, empty_f, np.zeros(0, dtype=np.bool_), empty_i, empty_i, empty_f, empty_f, offsets)
    cat = np.concatenate
    return (
        cat([t.feature for t in trees]),
        cat([t.threshold for t in trees]),
        cat([t.missing_left for t in trees]),
        cat([t.left for t in trees]),
        cat([t.right for t in trees]),
        cat([t.value for t in trees]),
        cat([t.cover for t in trees]),
        offsets,
    )


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


# --- binning ---------------------------------------------------------------

@dataclass
class BinMapper:
    """Per-feature upper bin edges; code = number of edges strictly below x.

    Features with at most ``max_bins`` distinct values get one bin per value
    with edges at the midpoints, so histogram splits coincide with an
    exhaustive scan. Code ``max_bins`` is reserved for missing values.
    """

    edges: list[np.ndarray]
    max_bins: int

    @classmethod
    def fit(cls, X: np.ndarray, max_bins: int = 64) -> "BinMapper":
        edges = []
        for j in range(X.shape[1]):
            col = X[:, j]
            col = col[~np.isnan(col)]
            distinct = np.unique(col)
            if len(distinct) <= 1:
                edges.append(np.zeros(0))
            elif len(distinct) <= max_bins:
                edges.append((distinct[:-1] + distinct[1:]) / 2.0)
            else:
                qs = np.quantile(col, np.linspace(0, 1, max_bins + 1)[1:-1], method="lower")
                qs = np.unique(qs)
                # an edge at the column maximum would leave the last bin empty
                qs = qs[qs < distinct[-1]]
                edges.append(qs[: max_bins - 1])
        return cls(edges, max_bins)

    def transform(self, X: np.ndarray) -> np.ndarray:
        codes = np.empty(X.shape, dtype=np.uint8)
        for j, e in enumerate(self.edges):
            col = X[:, j]
            c = np.searchsorted(e, col, side="left")
            c[np.isnan(col)] = self.max_bins
            codes[:, j] = c
        return codes

    @property
    def n_edges(self) -> np.ndarray:
        return np.array([len(e) for e in self.edges], dtype=np.int64)


# --- numba kernels ---------------------------------------------------------

@njit(cache=True, nogil=True)
def _build_hist(codes, rows, grad, hess, n_slots):
    P = codes.shape[1]
    hist = np.zeros((P, n_slots, 3))
    for k in range(rows.shape[0]):
        i = rows[k]
        g = grad[i]
        h = hess[i]
        for f in range(P):
            b = codes[i, f]
            hist[f, b, 0] += g
            hist[f, b, 1] += h
            hist[f, b, 2] += 1.0
    return hist


@njit(cache=True, nogil=True)
def _best_split(hist, n_edges, allowed, lam, min_child_weight, min_child_samples):
    """Return (gain, feature, bin, missing_left); feature -1 when no valid split.

    Ties keep the first candidate in (feature, bin, missing-left-first) order.
    """
    P = hist.shape[0]
    miss = hist.shape[1] - 1
    best_gain = -np.inf
    best_f = -1
    best_b = -1
    best_ml = True
    for f in range(P):
        if not allowed[f] or n_edges[f] == 0:
            continue
        G = 0.0
        H = 0.0
        C = 0.0
        for b in range(hist.shape[1]):
            G += hist[f, b, 0]
            H += hist[f, b, 1]
            C += hist[f, b, 2]
        parent = G * G / (H + lam)
        gm = hist[f, miss, 0]
        hm = hist[f, miss, 1]
        cm = hist[f, miss, 2]
        gl = 0.0
        hl = 0.0
        cl = 0.0
        for b in range(n_edges[f]):
            gl += hist[f, b, 0]
            hl += hist[f, b, 1]
            cl += hist[f, b, 2]
            for side in range(2):
                if side == 0:
                    GL = gl + gm
                    HL = hl + hm
                    CL = cl + cm
                else:
                    if cm == 0.0:
                        continue
                    GL = gl
                    HL = hl
                    CL = cl
                GR = G - GL
                HR = H - HL
                CR = C - CL
                if HL < min_child_weight or HR < min_child_weight:
                    continue
                if CL < min_child_samples or CR < min_child_samples:
                    continue
                if CL <= 0.0 or CR <= 0.0:
                    continue
                gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
                    best_ml = side == 0
    return best_gain, best_f, best_b, best_ml


@njit(cache=True, nogil=True)
def _route_codes(codes, feature, bins, missing_left, left, right, missing_code):
    n = codes.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] != -1:
            c = codes[i, feature[node]]
            if c == missing_code:
                go_left = missing_left[node]
            else:
                go_left = c <= bins[node]
            node = left[node] if go_left else right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def _predict_margin(X, feature, threshold, missing_left, left, right, value, offsets):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] != -1:
                x = X[i, feature[base + node]]
                if np.isnan(x):
                    go_left = missing_left[base + node]
                else:
                    go_left = x <= threshold[base + node]
                node = left[base + node] if go_left else right[base + node]
            s += value[base + node]
        out[i] = s
    return out


@njit(cache=True, nogil=True)
def _leaf_index(X, feature, threshold, missing_left, left, right, offsets):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.empty((n, n_trees), dtype=np.int64)
    for i in range(n):
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] != -1:
                x = X[i, feature[base + node]]
                if np.isnan(x):
                    go_left = missing_left[base + node]
                else:
                    go_left = x <= threshold[base + node]
                node = left[base + node] if go_left else right[base + node]
            out[i, t] = node
    return out


# --- tree growth -----------------------------------------------------------

class _Builder:
    """Mutable node arrays for one tree under construction."""

    def __init__(self):
        self.feature, self.bin, self.threshold, self.missing_left = [], [], [], []
        self.left, self.right, self.value, self.cover = [], [], [], []

    def add(self, cover):
        self.feature.append(LEAF)
        self.bin.append(-1)
        self.threshold.append(0.0)
        self.missing_left.append(True)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(0.0)
        self.cover.append(cover)
        return len(self.feature) - 1

    def tree(self) -> Tree:
        return Tree(self.feature, self.threshold, self.missing_left, self.left, self.right, self.value, self.cover)


def grow_tree(codes, grad, hess, rows, mapper: BinMapper, params: BoostParams, allowed):
    """Fit one regression tree to gradient statistics; returns (Tree, node bins)."""
    n_slots = mapper.max_bins + 1
    n_edges = mapper.n_edges
    lam = params.reg_lambda
    b = _Builder()

    def evaluate(hist, depth):
        if params.max_depth >= 0 and depth >= params.max_depth:
            return (-np.inf, -1, -1, True)
        return _best_split(hist, n_edges, allowed, lam, params.min_child_weight, float(params.min_child_samples))

    root_hist = _build_hist(codes, rows, grad, hess, n_slots)
    root = b.add(float(hess[rows].sum()))
    leaves = {root: (rows, root_hist, 0, evaluate(root_hist, 0))}
    n_leaves = 1
    while n_leaves < params.num_leaves:
        best_node, best = None, None
        for node in sorted(leaves):
            split = leaves[node][3]
            if split[1] < 0 or split[0] <= params.min_split_gain:
                continue
            if best is None or split[0] > best[0]:
                best_node, best = node, split
        if best_node is None:
            break
        node_rows, hist, depth, (gain, f, bin_, ml) = leaves.pop(best_node)
        col = codes[node_rows, f]
        go_left = np.where(col == mapper.max_bins, ml, col <= bin_)
        lrows, rrows = node_rows[go_left], node_rows[~go_left]
        if len(lrows) <= len(rrows):
            lhist = _build_hist(codes, lrows, grad, hess, n_slots)
            rhist = hist - lhist
        else:
            rhist = _build_hist(codes, rrows, grad, hess, n_slots)
            lhist = hist - rhist
        li = b.add(float(hess[lrows].sum()))
        ri = b.add(float(hess[rrows].sum()))
        b.feature[best_node] = int(f)
        b.bin[best_node] = int(bin_)
        b.threshold[best_node] = float(mapper.edges[f][bin_])
        b.missing_left[best_node] = bool(ml)
        b.left[best_node] = li
        b.right[best_node] = ri
        leaves[li] = (lrows, lhist, depth + 1, evaluate(lhist, depth + 1))
        leaves[ri] = (rrows, rhist, depth + 1, evaluate(rhist, depth + 1))
        n_leaves += 1
    for node, (node_rows, *_rest) in leaves.items():
        G = float(grad[node_rows].sum())
        H = float(hess[node_rows].sum())
        b.value[node] = -G / (H + lam) * params.learning_rate
    return b.tree(), np.asarray(b.bin, dtype=np.int64)


def _as_matrix(data, feature_names=None):
    if isinstance(data, FeatureMatrix):
        if feature_names is not None and list(data.column_names) != list(feature_names):
            if set(feature_names) - set(data.column_names):
                raise ValueError("feature mismatch")
            data = data.select(feature_names)
        return np.ascontiguousarray(data.values, dtype=np.float64)
    X = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError("rows must be a 2-d array")
    if feature_names is not None and X.shape[1] != len(feature_names):
        raise ValueError("feature mismatch")
    return X


def fit(train: FeatureMatrix, params: BoostParams | dict | None = None, seed: int = 0) -> TreeEnsembleModel:
    """Boost ``params.n_rounds`` trees on the logistic loss."""
    if params is None:
        params = BoostParams()
    elif isinstance(params, dict):
        params = BoostParams.from_dict(params)
    params.validate()
    X = _as_matrix(train)
    y = np.asarray(train.target, dtype=np.float64)
    if y.size == 0 or not np.all((y == 0) | (y == 1)):
        raise ValueError("target must be binary")
    if y.min() == y.max():
        raise ValueError("single-class target")
    if np.isinf(X).any():
        raise ValueError("non-finite feature values")
    w = np.where(y == 1, params.class_weight, 1.0)
    base_rate = float((w * y).sum() / w.sum())
    base_score = logit(base_rate)
    mapper = BinMapper.fit(X, params.max_bins)
    codes = np.ascontiguousarray(mapper.transform(X))
    rng = np.random.default_rng(seed)
    n, P = X.shape
    margin = np.full(n, base_score)
    trees = []
    all_rows = np.arange(n, dtype=np.int64)
    for _ in range(params.n_rounds):
        p = sigmoid(margin)
        grad = (p - y) * w
        hess = np.maximum(p * (1.0 - p), 1e-16) * w
        if params.bagging_fraction < 1.0:
            k = max(1, int(round(params.bagging_fraction * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
        else:
            rows = all_rows
        allowed = np.ones(P, dtype=np.bool_)
        if params.feature_fraction < 1.0:
            k = max(1, int(round(params.feature_fraction * P)))
            allowed[:] = False
            allowed[rng.choice(P, size=k, replace=False)] = True
        tree, bins = grow_tree(codes, grad, hess, rows, mapper, params, allowed)
        leaf = _route_codes(codes, tree.feature, bins, tree.missing_left, tree.left, tree.right, mapper.max_bins)
        margin += tree.value[leaf]
        trees.append(tree)
    meta = {"seed": int(seed), "rounds": int(params.n_rounds), "params": asdict(params), "n_train": int(n)}
    return TreeEnsembleModel(trees, base_score, params.learning_rate, list(train.column_names),
                             params.class_weight, meta)


def predict_margin(model: TreeEnsembleModel, rows) -> np.ndarray:
    X = _as_matrix(rows, model.feature_names)
    feature, threshold, missing_left, left, right, value, _cover, offsets = model.packed
    return model.base_score + _predict_margin(X, feature, threshold, missing_left, left, right, value, offsets)


def predict_proba(model: TreeEnsembleModel, rows) -> np.ndarray:
    """Probability of default per row, kept strictly inside (0, 1)."""
    return np.clip(sigmoid(predict_margin(model, rows)), _P_MIN, _P_MAX)


def leaf_indices(model: TreeEnsembleModel, rows) -> np.ndarray:
    X = _as_matrix(rows, model.feature_names)
    feature, threshold, missing_left, left, right, _value, _cover, offsets = model.packed
    return _leaf_index(X, feature, threshold, missing_left, left, right, offsets)
