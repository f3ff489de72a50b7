from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd


@dataclass
class FeatureMatrix:
    """Named feature columns, their selection groups and the binary target.

    Missing values are NaN. ``groups`` maps every column to a group id;
    columns that share an id are selected or dropped together.
    ``meta`` carries row identifiers (company, date, vintage) untouched.
    """

    column_names: list[str]
    values: np.ndarray
    target: np.ndarray | None = None
    groups: dict[str, str] = field(default_factory=dict)
    meta: pd.DataFrame | None = None

    def __post_init__(self):
        self.column_names = list(self.column_names)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.column_names):
            raise ValueError("values must be N x P with one column per name")
        if len(set(self.column_names)) != len(self.column_names):
            raise ValueError("column names must be unique")
        for name in self.column_names:
            self.groups.setdefault(name, name)
        self.groups = {c: self.groups[c] for c in self.column_names}
        if self.target is not None:
            self.target = np.asarray(self.target)
            if len(self.target) != len(self.values):
                raise ValueError("row count does not match target length")

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return len(self.column_names)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def select(self, names) -> "FeatureMatrix":
        names = list(names)
        idx = [self.column_names.index(n) for n in names]
        return FeatureMatrix(names, self.values[:, idx], self.target,
                             {n: self.groups[n] for n in names}, self.meta)

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        meta = None if self.meta is None else self.meta.iloc[rows].reset_index(drop=True)
        target = None if self.target is None else self.target[rows]
        return FeatureMatrix(self.column_names, self.values[rows], target, dict(self.groups), meta)

    def group_members(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.column_names:
            out.setdefault(self.groups[name], []).append(name)
        return out

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=self.column_names)
        if self.meta is not None:
            frame = pd.concat([self.meta.reset_index(drop=True), frame], axis=1)
        if self.target is not None:
            frame["target"] = self.target
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, columns, groups=None, meta_columns=()) -> "FeatureMatrix":
        columns = list(columns)
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise ValueError(f"feature mismatch: missing columns {missing}")
        target = frame["target"].to_numpy() if "target" in frame.columns else None
        meta_cols = [c for c in meta_columns if c in frame.columns]
        meta = frame[meta_cols].reset_index(drop=True) if meta_cols else None
        return cls(columns, frame[columns].to_numpy(dtype=np.float64), target, dict(groups or {}), meta)
