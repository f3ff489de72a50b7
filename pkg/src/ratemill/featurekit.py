"""Feature pipeline: sparse-column removal, KPI generation, James-Stein target
encoding, VIF pruning and shadow-feature selection with grouped columns."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import boster
from .datamodel import SECTOR_COLUMNS, CompanySnapshot
from .explainer import shap_values
from .matrix import FeatureMatrix

log = logging.getLogger(__name__)

NRT_PAST_DUE_EDGES = (0, 5, 30, 60, 90, 120, 180)
RATIO_CAP = 1e6
TAU2_FLOOR = 1e-12
SECTOR_GROUP = "sector"

RATIO_COLUMNS = ("nrt_rt_ratio", "nrt_used_rt_ratio", "draw_ratio_nrt")
CATEGORICAL_COLUMNS = ("legal_type", "special_status")
RAW_NUMERIC = (
    "rt_mortgages_balance",
    "rt_non_mortgages_balance",
    "nrt_balance",
    "nrt_used",
    "nrt_past_due_balance",
    "worst_payment_delay_6m",
    "max_past_due_days_6m",
    "def_no",
    "past_due_0_contracts",
    "past_due_0_contracts_12m",
    "nrt_contracts",
    "nrt_contracts_12m",
    "contracts_3m",
    "contracts_4_12m",
    "protest_present",
)
KPI_COLUMNS = (
    "rt_balance",
    "nrt_rt_ratio",
    "nrt_used_rt_ratio",
    "draw_ratio_nrt",
    "npl_present",
    "closed_past_due_0",
    "closed_nrt",
    "past_due_0",
    "nrt_present",
    "recent_contracts_3m",
    "recent_contracts_4_12m",
    "nrt_past_due",
)
# interpretable columns VIF pruning may never drop
DEFAULT_KEEP = (
    "rt_balance", "nrt_balance", "nrt_rt_ratio", "nrt_used_rt_ratio", "draw_ratio_nrt",
    "npl_present", "closed_past_due_0", "closed_nrt", "past_due_0", "nrt_present",
    "recent_contracts_3m", "recent_contracts_4_12m", "nrt_past_due", "worst_payment_delay_6m",
    "protest_present", "legal_type", "special_status",
) + SECTOR_COLUMNS


def safe_ratio(num, den, cap: float = RATIO_CAP) -> np.ndarray:
    """num/den clipped at ``cap``; 0/0 -> 0 and x/0 -> cap for x > 0."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.minimum(num / den, cap)
    zero = den == 0
    out = np.where(zero & (num == 0), 0.0, out)
    out = np.where(zero & (num > 0), cap, out)
    return out


def bucket(days, edges=NRT_PAST_DUE_EDGES) -> np.ndarray:
    """Index of the largest edge not exceeding ``days``."""
    days = np.asarray(days, dtype=np.float64)
    out = np.searchsorted(np.asarray(edges, dtype=np.float64), days, side="right") - 1.0
    return np.where(np.isnan(days), np.nan, np.maximum(out, 0.0))


def kpi_frame(snapshots: pd.DataFrame, edges=NRT_PAST_DUE_EDGES, cap: float = RATIO_CAP) -> pd.DataFrame:
    s = snapshots
    out = pd.DataFrame(index=s.index)
    rt = s["rt_mortgages_balance"].to_numpy(float) + s["rt_non_mortgages_balance"].to_numpy(float)
    out["rt_balance"] = rt
    out["nrt_rt_ratio"] = safe_ratio(s["nrt_balance"], rt, cap)
    out["nrt_used_rt_ratio"] = safe_ratio(s["nrt_used"], rt, cap)
    out["draw_ratio_nrt"] = safe_ratio(s["nrt_used"], s["nrt_balance"], cap)

    def flag(col):
        v = s[col].to_numpy(float)
        return np.where(np.isnan(v), np.nan, (v >= 1).astype(float))

    out["npl_present"] = flag("def_no")
    out["closed_past_due_0"] = flag("past_due_0_contracts_12m")
    out["closed_nrt"] = flag("nrt_contracts_12m")
    out["past_due_0"] = flag("past_due_0_contracts")
    out["nrt_present"] = flag("nrt_contracts")
    out["recent_contracts_3m"] = flag("contracts_3m")
    out["recent_contracts_4_12m"] = flag("contracts_4_12m")
    out["nrt_past_due"] = bucket(s["max_past_due_days_6m"], edges)
    return out


def make_kpis(snapshot: CompanySnapshot, edges=NRT_PAST_DUE_EDGES, cap: float = RATIO_CAP) -> dict[str, float]:
    row = pd.DataFrame([snapshot.to_row()])
    return {k: float(v) for k, v in kpi_frame(row, edges, cap).iloc[0].items()}


def drop_sparse(matrix: FeatureMatrix, threshold: float = 0.20) -> tuple[FeatureMatrix, list[str]]:
    """Drop columns whose missing fraction is strictly above ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    frac = np.isnan(matrix.values).mean(axis=0) if len(matrix) else np.zeros(matrix.n_features)
    keep = [c for c, f in zip(matrix.column_names, frac) if f <= threshold]
    dropped = [c for c, f in zip(matrix.column_names, frac) if f > threshold]
    if not keep:
        raise ValueError("empty feature matrix")
    return matrix.select(keep), dropped


# --- James-Stein target encoding -------------------------------------------

def js_shrinkage(n_j, s2: float, tau2: float) -> np.ndarray:
    """Weight B_j pulled towards the global mean."""
    n_j = np.asarray(n_j, dtype=np.float64)
    tau2 = max(tau2, TAU2_FLOOR)
    noise = s2 / n_j
    return noise / (noise + tau2)


@dataclass
class EncoderState:
    column: str
    encoded: dict[str, float]
    global_mean: float
    shrinkage: dict[str, float]

    def transform(self, values) -> np.ndarray:
        return np.array([self.encoded.get(str(v), self.global_mean) for v in values], dtype=np.float64)


def james_stein_encode(column, target, name: str = "") -> EncoderState:
    cats = pd.Series(np.asarray(column)).astype(str).to_numpy()
    y = np.asarray(target, dtype=np.float64)
    labels, inverse, counts = np.unique(cats, return_inverse=True, return_counts=True)
    if len(labels) < 2:
        raise ValueError("need at least 2 categories")
    sums = np.bincount(inverse, weights=y)
    means = sums / counts
    global_mean = float(y.mean())
    dof = len(y) - len(labels)
    resid = y - means[inverse]
    s2 = float(resid @ resid / dof) if dof > 0 else 0.0
    tau2 = float(np.var(means))
    B = js_shrinkage(counts, s2, tau2)
    enc = (1 - B) * means + B * global_mean
    return EncoderState(name, {str(k): float(v) for k, v in zip(labels, enc)}, global_mean,
                        {str(k): float(b) for k, b in zip(labels, B)})


# --- VIF pruning -----------------------------------------------------------

def vif_scores(X: np.ndarray) -> np.ndarray:
    """VIF_i = 1 / (1 - R^2_i) from the least-squares fit of column i on the rest
    (with intercept), solved on the centred Gram matrix."""
    Xc = X - X.mean(axis=0)
    G = Xc.T @ Xc
    P = G.shape[0]
    out = np.empty(P)
    for i in range(P):
        if G[i, i] <= 0:
            out[i] = np.inf
            continue
        rest = [j for j in range(P) if j != i]
        if not rest:
            out[i] = 1.0
            continue
        beta = np.linalg.lstsq(G[np.ix_(rest, rest)], G[rest, i], rcond=None)[0]
        r2 = float(G[i, rest] @ beta) / G[i, i]
        out[i] = np.inf if r2 >= 1 - 1e-12 else 1.0 / (1.0 - r2)
    return out


def vif_prune(matrix: FeatureMatrix, max_vif: float = 10.0, keep_list=()) -> tuple[FeatureMatrix, list[str]]:
    """Drop the highest-VIF column outside ``keep_list`` until every VIF <= max_vif.

    Ties go to the later column so the first of two duplicates survives.
    """
    keep_list = set(keep_list)
    names = list(matrix.column_names)
    X = np.nan_to_num(matrix.values.copy())
    dropped = []
    while len(names) > 1:
        vif = vif_scores(X)
        over = [i for i in range(len(names)) if vif[i] > max_vif]
        if not over:
            break
        droppable = [i for i in over if names[i] not in keep_list]
        if not droppable:
            if any(np.isinf(vif[i]) for i in over):
                raise ValueError("keep-list conflict")
            log.warning("VIF above %.1f retained for keep-list columns %s", max_vif, [names[i] for i in over])
            break
        worst = max(droppable, key=lambda i: (vif[i], i))
        dropped.append(names.pop(worst))
        X = np.delete(X, worst, axis=1)
    return matrix.select(names), dropped


# --- shadow selection ------------------------------------------------------

@dataclass
class SelectionConfig:
    rounds: int = 5
    valid_fraction: float = 0.25
    max_rows: int = 20000
    shap_rows: int = 2000
    n_rounds: int = 60
    num_leaves: int = 15
    learning_rate: float = 0.1


def shadow_select(matrix: FeatureMatrix, rounds: int = 5, seed: int = 0,
                  config: SelectionConfig | None = None) -> tuple[list[str], dict]:
    """Keep column groups whose SHAP importance beats the best shadow column in
    a strict majority of rounds.

    Each round appends a row-permuted copy of every column, fits a booster on
    the training part and measures mean |SHAP| on a held-out validation part.
    A group's importance is the sum over its member columns.
    """
    cfg = config or SelectionConfig(rounds=rounds)
    rounds = rounds or cfg.rounds
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    y = np.asarray(matrix.target)
    if y.min() == y.max():
        raise ValueError("single-class target")
    rng = np.random.default_rng(seed)
    n = len(matrix)
    rows = np.arange(n)
    if n > cfg.max_rows:
        rows = np.sort(rng.choice(n, cfg.max_rows, replace=False))
    sub = matrix.take(rows)
    ys = np.asarray(sub.target)
    valid = np.zeros(len(sub), dtype=bool)
    for value in (0, 1):
        idx = np.flatnonzero(ys == value)
        valid[rng.permutation(idx)[: int(math.floor(cfg.valid_fraction * len(idx) + 0.5))]] = True
    members = sub.group_members()
    group_ids = list(members)
    votes = {g: 0 for g in group_ids}
    history = []
    params = boster.BoostParams(n_rounds=cfg.n_rounds, num_leaves=cfg.num_leaves,
                                learning_rate=cfg.learning_rate,
                                class_weight=float((1 - ys.mean()) / ys.mean()))
    for r in range(rounds):
        shadow = np.column_stack([sub.values[rng.permutation(len(sub)), j] for j in range(sub.n_features)])
        names = list(sub.column_names) + [f"shadow__{c}" for c in sub.column_names]
        groups = dict(sub.groups)
        groups.update({f"shadow__{c}": f"shadow__{sub.groups[c]}" for c in sub.column_names})
        full = FeatureMatrix(names, np.hstack([sub.values, shadow]), ys, groups)
        train = full.take(np.flatnonzero(~valid))
        model = boster.fit(train, params, seed=seed + r)
        vidx = np.flatnonzero(valid)
        if len(vidx) > cfg.shap_rows:
            vidx = np.sort(rng.choice(vidx, cfg.shap_rows, replace=False))
        phi, _ = shap_values(model, full.values[vidx])
        imp = np.abs(phi).mean(axis=0)
        col_imp = dict(zip(names, imp))
        real = {g: sum(col_imp[c] for c in members[g]) for g in group_ids}
        cutoff = max(col_imp[f"shadow__{c}"] for c in sub.column_names)
        for g in group_ids:
            if real[g] > cutoff:
                votes[g] += 1
        history.append({"round": r, "cutoff": float(cutoff), "importance": {g: float(v) for g, v in real.items()}})
    kept_groups = [g for g in group_ids if votes[g] * 2 > rounds]
    selected = [c for c in matrix.column_names if matrix.groups[c] in kept_groups]
    return selected, {"votes": votes, "rounds": history}


# --- fitted pipeline -------------------------------------------------------

@dataclass
class FeatureConfig:
    sparse_threshold: float = 0.20
    max_vif: float = 10.0
    keep_list: list[str] = field(default_factory=lambda: list(DEFAULT_KEEP))
    nrt_past_due_edges: list[int] = field(default_factory=lambda: list(NRT_PAST_DUE_EDGES))
    ratio_cap: float = RATIO_CAP
    winsor_quantile: float = 0.999
    shadow_rounds: int = 5
    selection: dict = field(default_factory=dict)
    candidates: list[str] | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


def candidate_frame(snapshots: pd.DataFrame, cfg: FeatureConfig) -> pd.DataFrame:
    raw = snapshots[list(RAW_NUMERIC)].astype(float)
    kpis = kpi_frame(snapshots, cfg.nrt_past_due_edges, cfg.ratio_cap)
    sector = snapshots[list(SECTOR_COLUMNS)].astype(float)
    return pd.concat([raw, kpis, sector], axis=1)


@dataclass
class FeaturePipeline:
    """Fitted transform from snapshot rows to the model's feature columns."""

    config: FeatureConfig
    encoders: dict[str, EncoderState] = field(default_factory=dict)
    winsor_caps: dict[str, float] = field(default_factory=dict)
    dropped_sparse: list[str] = field(default_factory=list)
    dropped_vif: list[str] = field(default_factory=list)
    selected: list[str] = field(default_factory=list)
    groups: dict[str, str] = field(default_factory=dict)
    selection_report: dict = field(default_factory=dict)

    def _full(self, snapshots: pd.DataFrame) -> pd.DataFrame:
        frame = candidate_frame(snapshots, self.config)
        for col, enc in self.encoders.items():
            frame[col] = enc.transform(snapshots[col].to_numpy())
        for col, cap in self.winsor_caps.items():
            if col in frame:
                frame[col] = np.minimum(frame[col].to_numpy(), cap)
        return frame

    def transform(self, snapshots: pd.DataFrame, columns=None) -> FeatureMatrix:
        frame = self._full(snapshots)
        cols = list(columns or self.selected)
        values = frame[cols].to_numpy(dtype=np.float64)
        values = np.nan_to_num(values, nan=0.0)
        target = snapshots["target"].to_numpy() if "target" in snapshots else None
        meta_cols = [c for c in ("company_id", "reference_date") if c in snapshots]
        meta = snapshots[meta_cols].reset_index(drop=True) if meta_cols else None
        return FeatureMatrix(cols, values, target, {c: self.groups.get(c, c) for c in cols}, meta)

    def fit(self, train: pd.DataFrame, select: bool = True) -> "FeaturePipeline":
        cfg = self.config
        y = train["target"].to_numpy()
        frame = candidate_frame(train, cfg)
        for col in CATEGORICAL_COLUMNS:
            values = train[col].astype(str).to_numpy()
            if len(np.unique(values)) < 2:
                # a single level carries no information; it encodes to the global mean
                mean = float(np.mean(y))
                self.encoders[col] = EncoderState(col, {}, mean, {})
            else:
                self.encoders[col] = james_stein_encode(values, y, col)
            frame[col] = self.encoders[col].transform(values)
        if cfg.candidates:
            frame = frame[[c for c in frame.columns if c in set(cfg.candidates)]]
        groups = {c: (SECTOR_GROUP if c in SECTOR_COLUMNS else c) for c in frame.columns}
        matrix = FeatureMatrix(list(frame.columns), frame.to_numpy(dtype=np.float64), y, groups)
        matrix, self.dropped_sparse = drop_sparse(matrix, cfg.sparse_threshold)
        values = np.nan_to_num(matrix.values, nan=0.0)
        for col in RATIO_COLUMNS:
            if col in matrix.column_names:
                j = matrix.column_names.index(col)
                cap = float(np.quantile(values[:, j], cfg.winsor_quantile))
                self.winsor_caps[col] = cap
                values[:, j] = np.minimum(values[:, j], cap)
        matrix = FeatureMatrix(matrix.column_names, values, y, matrix.groups)
        # drop constant columns before VIF; they carry no information
        constant = [c for j, c in enumerate(matrix.column_names) if np.ptp(values[:, j]) == 0]
        if constant:
            matrix = matrix.select([c for c in matrix.column_names if c not in constant])
        matrix, dropped = vif_prune(matrix, cfg.max_vif, cfg.keep_list)
        self.dropped_vif = constant + dropped
        if select:
            sel_cfg = SelectionConfig(rounds=cfg.shadow_rounds, **cfg.selection)
            self.selected, self.selection_report = shadow_select(matrix, cfg.shadow_rounds, cfg.seed, sel_cfg)
        else:
            self.selected = list(matrix.column_names)
        if not self.selected:
            raise ValueError("shadow selection kept no features")
        self.groups = {c: matrix.groups[c] for c in self.selected}
        return self

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "encoders": {k: asdict(v) for k, v in self.encoders.items()},
            "winsor_caps": self.winsor_caps,
            "dropped_sparse": self.dropped_sparse,
            "dropped_vif": self.dropped_vif,
            "selected": self.selected,
            "groups": self.groups,
            "selection_report": self.selection_report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturePipeline":
        return cls(
            config=FeatureConfig.from_dict(d["config"]),
            encoders={k: EncoderState(**v) for k, v in d["encoders"].items()},
            winsor_caps={k: float(v) for k, v in d["winsor_caps"].items()},
            dropped_sparse=list(d["dropped_sparse"]),
            dropped_vif=list(d["dropped_vif"]),
            selected=list(d["selected"]),
            groups=dict(d["groups"]),
            selection_report=dict(d.get("selection_report", {})),
        )
