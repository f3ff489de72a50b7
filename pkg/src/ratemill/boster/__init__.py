from .metrics import DEFAULT_BETA, MetricReport, auc, average_precision, confusion, evaluate, f_beta, report
from .trees import (
    BinMapper,
    BoostParams,
    Tree,
    TreeEnsembleModel,
    fit,
    leaf_indices,
    predict_margin,
    predict_proba,
    sigmoid,
)
from .tune import expanding_folds, tune

__all__ = [
    "DEFAULT_BETA", "MetricReport", "auc", "average_precision", "confusion", "evaluate", "f_beta", "report",
    "BinMapper", "BoostParams", "Tree", "TreeEnsembleModel", "fit", "leaf_indices", "predict_margin",
    "predict_proba", "sigmoid", "expanding_folds", "tune",
]
