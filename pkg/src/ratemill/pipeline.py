"""A fitted scoring bundle: feature transform, booster and optional calibration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .boster import DEFAULT_BETA, TreeEnsembleModel, predict_proba
from .calibrator import CalibrationMap
from .datamodel import normalize_snapshots
from .featurekit import FeaturePipeline
from .matrix import FeatureMatrix

RAW_MARKERS = ("legal_type", "nrt_balance", "rt_mortgages_balance")


def dumps(obj) -> str:
    """Canonical JSON used for every artifact so reruns are byte-identical."""
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


@dataclass
class ScoringPipeline:
    features: FeaturePipeline
    model: TreeEnsembleModel
    calibration: CalibrationMap | None = None
    threshold: float = 0.5
    beta: float = DEFAULT_BETA
    training: dict = field(default_factory=dict)

    def matrix(self, frame: pd.DataFrame) -> FeatureMatrix:
        """Accepts raw snapshot rows or a table that already holds the model's columns."""
        names = self.model.feature_names
        if all(c in frame.columns for c in names) and not all(c in frame.columns for c in RAW_MARKERS):
            return FeatureMatrix.from_frame(frame, names, meta_columns=("company_id", "reference_date"))
        return self.features.transform(normalize_snapshots(frame), names)

    def raw_scores(self, frame_or_matrix) -> np.ndarray:
        X = frame_or_matrix if isinstance(frame_or_matrix, FeatureMatrix) else self.matrix(frame_or_matrix)
        return predict_proba(self.model, X)

    def pds(self, raw_scores) -> np.ndarray:
        raw = np.asarray(raw_scores, dtype=np.float64)
        return self.calibration(raw) if self.calibration is not None else raw

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "features": self.features.to_dict(),
            "calibration": None if self.calibration is None else self.calibration.to_dict(),
            "threshold": self.threshold,
            "beta": self.beta,
            "training": self.training,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringPipeline":
        return cls(
            features=FeaturePipeline.from_dict(d["features"]),
            model=TreeEnsembleModel.from_dict(d["model"]),
            calibration=None if d.get("calibration") is None else CalibrationMap.from_dict(d["calibration"]),
            threshold=float(d.get("threshold", 0.5)),
            beta=float(d.get("beta", DEFAULT_BETA)),
            training=dict(d.get("training", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ScoringPipeline":
        return cls.from_dict(json.loads(Path(path).read_text()))
