"""Evaluation quantities for one attacked model.

Values are fractions internally; ``as_percent`` renders them the way result
tables print them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import DegenerateError, MissingIdentityError, ShapeError
from .nn import FeatureSet, TrainedModel, extract_features, predict_logits
from .synthdata import ImageBatch

Z_95 = 1.959963984540054


def attack_accuracy(eval_model: TrainedModel, reconstructions: ImageBatch) -> tuple[float, float]:
    """Top-1 agreement of the evaluation model with the attacked labels, with a 95% CI half-width."""
    if reconstructions.data.shape[1:] != eval_model.arch.in_shape:
        raise ShapeError(f"reconstructions {reconstructions.data.shape[1:]} vs model input {eval_model.arch.in_shape}")
    n = len(reconstructions)
    if n == 0:
        raise ShapeError("no reconstructions")
    pred = predict_logits(eval_model, reconstructions.data).argmax(1)
    p = float((pred == reconstructions.labels).mean())
    return p, Z_95 * math.sqrt(p * (1.0 - p) / n)


def nearest_same_identity(recon: FeatureSet, private: FeatureSet) -> np.ndarray:
    """Per-reconstruction L2 distance to the closest private feature of the same label."""
    out = np.empty(len(recon.labels), dtype=np.float64)
    for i, (f, lab) in enumerate(zip(recon.features.astype(np.float64), recon.labels)):
        pool = private.features[private.labels == lab].astype(np.float64)
        if len(pool) == 0:
            raise MissingIdentityError(f"no private samples of identity {lab}")
        out[i] = np.sqrt(((pool - f) ** 2).sum(1)).min()
    return out


def knn_distance(eval_model: TrainedModel, reconstructions: ImageBatch, private: ImageBatch) -> float:
    return float(nearest_same_identity(extract_features(eval_model, reconstructions),
                                       extract_features(eval_model, private)).mean())


def tradeoff_delta(acc_nodef: float, attacc_nodef: float, acc_def: float, attacc_def: float,
                   strict: bool = False) -> Optional[float]:
    """Attack-accuracy drop per point of natural-accuracy drop (inputs in percent).

    Returns None ("OP") when the defended model is at least as accurate as
    the undefended one. With ``strict``, equal accuracies but different
    attack accuracies raise ``DegenerateError`` instead.
    """
    for v in (acc_nodef, attacc_nodef, acc_def, attacc_def):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"percentages must lie in [0, 100], got {v}")
    if acc_def == acc_nodef and attacc_def != attacc_nodef and strict:
        raise DegenerateError("equal natural accuracy: trade-off ratio undefined")
    if acc_def >= acc_nodef:
        return None
    return (attacc_nodef - attacc_def) / (acc_nodef - acc_def)


def delta_flag(acc_nodef: float, attacc_nodef: float, acc_def: float, attacc_def: float) -> str:
    if acc_def == acc_nodef and attacc_def != attacc_nodef:
        return "degenerate"
    if acc_def >= acc_nodef:
        return "OP"
    return "ok"


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The trace of the cross term is taken from the symmetric product
    sqrt(cov_a) cov_b sqrt(cov_a), which shares its eigenvalues.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    diff = mu_a - mu_b
    sa = _sqrt_psd(cov_a)
    cross = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((cross + cross.T) / 2)
    tr_cross = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    return max(float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross), 0.0)


def _stats(x: np.ndarray, shrinkage: bool):
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    mu = x.mean(0)
    cov = np.cov(x, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    if shrinkage:
        eps = 1e-6 * float(np.trace(cov)) / d
        cov = cov + eps * np.eye(d)
    elif n < d + 1 or np.linalg.matrix_rank(cov) < d:
        raise DegenerateError(f"rank-deficient covariance from {n} rows in {d} dimensions")
    return mu, cov


def frechet_feature_distance(feats_a, feats_b, shrinkage: bool = True) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a = feats_a.features if isinstance(feats_a, FeatureSet) else np.asarray(feats_a)
    b = feats_b.features if isinstance(feats_b, FeatureSet) else np.asarray(feats_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature shapes {a.shape} and {b.shape} are incompatible")
    return frechet_from_stats(*_stats(a, shrinkage), *_stats(b, shrinkage))


@dataclass
class MetricsReport:
    acc: float
    att_acc: float
    att_acc_ci: float
    knn_dist: float
    ffd: float
    delta: Optional[float] = None
    delta_flag: str = "n/a"
    hull_iou_recon_priv: Optional[float] = None
    hull_iou_recon_re: Optional[float] = None
    hull_iou_re_priv: Optional[float] = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.acc <= 1.0 and 0.0 <= self.att_acc <= 1.0):
            raise ValueError("acc and att_acc must be fractions")
        if self.knn_dist < 0 or self.ffd < 0:
            raise ValueError("distances must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def as_percent(self) -> dict[str, str]:
        return {"Acc": f"{100 * self.acc:.2f}", "AttAcc": f"{100 * self.att_acc:.2f}",
                "KNN Dist": f"{self.knn_dist:.2f}",
                "Delta": "OP" if self.delta is None else f"{self.delta:.2f}"}
