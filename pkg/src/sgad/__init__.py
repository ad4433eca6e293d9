"""Score-guided unsupervised anomaly detection with an autoencoder and a scoring network."""

from .errors import RejectedInputError, TrainingDivergedError, UndefinedMetricError
from .metrics import EvalReport, auc_pr, auc_roc, ks_statistic, score_difference
from .model import (
    SgaeModel,
    SgLossConfig,
    Schedule,
    build_model,
    load_checkpoint,
    predict_scores,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
