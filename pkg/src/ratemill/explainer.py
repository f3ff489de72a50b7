"""Path-dependent TreeSHAP on the margin (log-odds) scale.

Absent features are integrated out by descending both children weighted by
the node covers recorded at training time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from numba import njit

from .boster.trees import TreeEnsembleModel, _as_matrix, predict_margin


@dataclass
class ShapExplanation:
    base_value: float
    contributions: np.ndarray
    margin: float
    feature_names: list[str]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.feature_names, map(float, self.contributions)))

    def grouped(self, groups: dict[str, str]) -> dict[str, float]:
        """Sum contributions of columns sharing a group id."""
        out: dict[str, float] = {}
        for name, value in zip(self.feature_names, self.contributions):
            key = groups.get(name, name)
            out[key] = out.get(key, 0.0) + float(value)
        return out


@njit(cache=True, nogil=True)
def _extend(fi, zf, of, pw, base, depth, pz, po, pi):
    fi[base + depth] = pi
    zf[base + depth] = pz
    of[base + depth] = po
    pw[base + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[base + i + 1] += po * pw[base + i] * (i + 1) / (depth + 1)
        pw[base + i] = pz * pw[base + i] * (depth - i) / (depth + 1)


@njit(cache=True, nogil=True)
def _unwind(fi, zf, of, pw, base, depth, idx):
    one = of[base + idx]
    zero = zf[base + idx]
    nxt = pw[base + depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[base + i]
            pw[base + i] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - pw[base + i] * zero * (depth - i) / (depth + 1)
        else:
            pw[base + i] = pw[base + i] * (depth + 1) / (zero * (depth - i))
    for i in range(idx, depth):
        fi[base + i] = fi[base + i + 1]
        zf[base + i] = zf[base + i + 1]
        of[base + i] = of[base + i + 1]


@njit(cache=True, nogil=True)
def _unwound_sum(fi, zf, of, pw, base, depth, idx):
    one = of[base + idx]
    zero = zf[base + idx]
    nxt = pw[base + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[base + i] - tmp * zero * ((depth - i) / (depth + 1))
        elif zero != 0.0:
            total += (pw[base + i] / zero) / ((depth - i) / (depth + 1))
    return total


# Self-recursive kernels are compiled per process: reloading them from the
# on-disk cache crashes the interpreter.
@njit(nogil=True)
def _recurse(x, phi, feature, threshold, missing_left, left, right, value, cover, off,
             node, depth, fi, zf, of, pw, parent_base, pz, po, pi, stride):
    base = parent_base + stride
    for k in range(depth + 1):
        fi[base + k] = fi[parent_base + k]
        zf[base + k] = zf[parent_base + k]
        of[base + k] = of[parent_base + k]
        pw[base + k] = pw[parent_base + k]
    _extend(fi, zf, of, pw, base, depth, pz, po, pi)
    j = off + node
    f = feature[j]
    if f == -1:
        for i in range(1, depth + 1):
            w = _unwound_sum(fi, zf, of, pw, base, depth, i)
            phi[fi[base + i]] += w * (of[base + i] - zf[base + i]) * value[j]
        return
    xv = x[f]
    if np.isnan(xv):
        go_left = missing_left[j]
    else:
        go_left = xv <= threshold[j]
    if go_left:
        hot = left[j]
        cold = right[j]
    else:
        hot = right[j]
        cold = left[j]
    hot_zero = cover[off + hot] / cover[j]
    cold_zero = cover[off + cold] / cover[j]
    iz = 1.0
    io = 1.0
    idx = -1
    for k in range(depth + 1):
        if fi[base + k] == f:
            idx = k
            break
    if idx >= 0:
        iz = zf[base + idx]
        io = of[base + idx]
        _unwind(fi, zf, of, pw, base, depth, idx)
        depth -= 1
    _recurse(x, phi, feature, threshold, missing_left, left, right, value, cover, off,
             hot, depth + 1, fi, zf, of, pw, base, hot_zero * iz, io, f, stride)
    _recurse(x, phi, feature, threshold, missing_left, left, right, value, cover, off,
             cold, depth + 1, fi, zf, of, pw, base, cold_zero * iz, 0.0, f, stride)


@njit(nogil=True)
def _shap_matrix(X, feature, threshold, missing_left, left, right, value, cover, offsets, max_depth):
    n, P = X.shape
    out = np.zeros((n, P + 1))
    stride = max_depth + 2
    size = stride * (max_depth + 3)
    fi = np.zeros(size, dtype=np.int64)
    zf = np.zeros(size)
    of = np.zeros(size)
    pw = np.zeros(size)
    # slot P collects the dummy root element, which never receives credit
    for r in range(n):
        phi = np.zeros(P + 1)
        for t in range(offsets.shape[0] - 1):
            off = offsets[t]
            _recurse(X[r], phi, feature, threshold, missing_left, left, right, value, cover, off,
                     0, 0, fi, zf, of, pw, -stride, 1.0, 1.0, P, stride)
        for k in range(P):
            out[r, k] = phi[k]
    return out


def tree_expectation(tree) -> float:
    """Cover-weighted mean leaf value."""
    leaves = tree.feature == -1
    return float(np.sum(tree.cover[leaves] * tree.value[leaves]) / tree.cover[0])


def expected_margin(model: TreeEnsembleModel) -> float:
    return model.base_score + sum(tree_expectation(t) for t in model.trees)


def shap_values(model: TreeEnsembleModel, rows) -> tuple[np.ndarray, float]:
    """N x P contribution matrix and the shared base value."""
    X = _as_matrix(rows, model.feature_names)
    base = expected_margin(model)
    if not model.trees:
        return np.zeros(X.shape), base
    feature, threshold, missing_left, left, right, value, cover, offsets = model.packed
    max_depth = max(t.max_depth() for t in model.trees)
    out = _shap_matrix(X, feature, threshold, missing_left, left, right, value, cover, offsets, max_depth)
    return out[:, : X.shape[1]], base


def tree_shap(model: TreeEnsembleModel, row) -> ShapExplanation:
    X = _as_matrix(np.atleast_2d(np.asarray(row, dtype=np.float64)), model.feature_names)
    phi, base = shap_values(model, X)
    return ShapExplanation(base, phi[0], float(predict_margin(model, X)[0]), list(model.feature_names))


def summary_stats(model: TreeEnsembleModel, rows) -> tuple[np.ndarray, pd.DataFrame]:
    """Per-row SHAP matrix plus features ranked by mean |SHAP|."""
    phi, _ = shap_values(model, rows)
    if phi.shape[0] == 0:
        raise ValueError("rows must be non-empty")
    importance = np.abs(phi).mean(axis=0)
    ranking = pd.DataFrame({"feature": model.feature_names, "mean_abs_shap": importance})
    ranking = ranking.sort_values(["mean_abs_shap", "feature"], ascending=[False, True], kind="mergesort")
    return phi, ranking.reset_index(drop=True)


def dependence_data(model: TreeEnsembleModel, rows, feature: str, interaction_feature: str) -> pd.DataFrame:
    names = list(model.feature_names)
    for f in (feature, interaction_feature):
        if f not in names:
            raise ValueError(f"unknown feature {f!r}")
    X = _as_matrix(rows, names)
    phi, _ = shap_values(model, X)
    i, k = names.index(feature), names.index(interaction_feature)
    return pd.DataFrame({"x": X[:, i], "shap": phi[:, i], "color": X[:, k]})


def waterfall_data(model: TreeEnsembleModel, row, top_n: int = 10, groups: dict | None = None) -> dict:
    """Largest contributions first; the tail is folded into one ``other`` entry."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    exp = tree_shap(model, row)
    contrib = exp.grouped(groups) if groups else exp.as_dict()
    items = sorted(contrib.items(), key=lambda kv: (-abs(kv[1]), kv[0]))
    head, tail = items[:top_n], items[top_n:]
    entries = [{"feature": k, "value": float(v)} for k, v in head]
    if tail:
        entries.append({"feature": "other", "value": float(sum(v for _, v in tail))})
    return {"base_value": exp.base_value, "margin": exp.margin, "entries": entries}
