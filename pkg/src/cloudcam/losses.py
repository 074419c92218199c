"""Training objectives and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError, UndefinedCorrelationError
from .tensor import Tensor

DEFAULT_LAMBDA_COT = 1.0
DEFAULT_LAMBDA_CER = 15.0


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = DEFAULT_LAMBDA_COT
    lambda2: float = DEFAULT_LAMBDA_CER

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ConfigError(f"loss weights must be >= 0 and not both zero, got {self.lambda1}, {self.lambda2}")
        return self


L2_WEIGHTS = LossConfig(1.0, 1.0)


def _check_pair(t, y, what):
    ts = t.shape
    ys = y.shape
    if ts != ys:
        raise ShapeError(f"{what}: target shape {ts} != prediction shape {ys}")
    if int(np.prod(ts)) == 0:
        raise ShapeError(f"{what}: empty field")


def l2_loss(t, y):
    """Mean squared difference over all pixels, differentiable in ``y``."""
    t, y = T.as_tensor(t), T.as_tensor(y)
    _check_pair(t, y, "l2_loss")
    return T.mean(T.square(T.sub(t, y)))


def mto_loss(cot_t, cot_y, cer_t, cer_y, cfg=LossConfig()):
    """Weighted sum ``lambda1 * l2(COT) + lambda2 * l2(CER)``."""
    cfg.validate()
    l_cot = l2_loss(cot_t, cot_y)
    l_cer = l2_loss(cer_t, cer_y)
    return T.add(T.scalar_mul(l_cot, cfg.lambda1), T.scalar_mul(l_cer, cfg.lambda2))


# -- metrics (plain numpy, no graph) ------------------------------------

def _arrays(t, y, mask=None):
    t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if t.shape != y.shape:
        raise ShapeError(f"metric: shapes {t.shape} and {y.shape} differ")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != t.shape:
            raise ShapeError(f"metric: mask shape {mask.shape} != field shape {t.shape}")
        t, y = t[mask], y[mask]
    if t.size == 0:
        raise ShapeError("metric: no pixels to score")
    return t.ravel(), y.ravel()


def mae(t, y, mask=None):
    t, y = _arrays(t, y, mask)
    return float(np.mean(np.abs(t - y)))


def mse(t, y, mask=None):
    t, y = _arrays(t, y, mask)
    d = t - y
    return float(np.mean(d * d))


def pearson(t, y, mask=None):
    t, y = _arrays(t, y, mask)
    dt, dy = t - t.mean(), y - y.mean()
    st, sy = float(np.dot(dt, dt)), float(np.dot(dy, dy))
    if st == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("pearson correlation undefined for a constant field")
    r = float(np.dot(dt, dy) / np.sqrt(st * sy))
    return min(1.0, max(-1.0, r))


def improvement_pct(baseline_mae, model_mae):
    """Percent MAE reduction relative to the baseline (unrounded)."""
    if not baseline_mae > 0:
        raise DomainError(f"baseline MAE must be positive, got {baseline_mae}")
    return 100.0 * (baseline_mae - model_mae) / baseline_mae


def improvement_pct_rounded(baseline_mae, model_mae):
    return int(round(improvement_pct(baseline_mae, model_mae)))


@dataclass
class PropertyMetrics:
    mae: float
    mse: float
    pearson: float
    impv_over_baseline_pct: float | None = None


@dataclass
class MetricsReport:
    cot: PropertyMetrics
    cer: PropertyMetrics
    per_profile: list = field(default_factory=list, repr=False)

    def with_baseline(self, baseline):
        """Fill the improvement columns from another report's MAEs."""
        self.cot.impv_over_baseline_pct = improvement_pct(baseline.cot.mae, self.cot.mae)
        self.cer.impv_over_baseline_pct = improvement_pct(baseline.cer.mae, self.cer.mae)
        return self


def score_property(t, y, mask=None):
    return PropertyMetrics(mae(t, y, mask), mse(t, y, mask), pearson(t, y, mask))


def evaluate_fields(pairs, mask_cloudy=False):
    """Average per-profile metrics over a list of scenes.

    ``pairs`` holds (true_log_cot, pred_log_cot, true_cer_um, pred_cer_um)
    tuples: COT is scored in log(COT + 1) space, CER in micrometres.
    With ``mask_cloudy`` only pixels with true COT > 0 are scored.
    """
    rows = []
    for tc, pc, tr, pr in pairs:
        mask = (np.asarray(tc) > 0) if mask_cloudy else None
        rows.append((score_property(tc, pc, mask), score_property(tr, pr, mask)))
    if not rows:
        raise ShapeError("evaluate_fields: no profiles")

    def avg(idx):
        ms = [r[idx] for r in rows]
        return PropertyMetrics(float(np.mean([m.mae for m in ms])), float(np.mean([m.mse for m in ms])),
                               float(np.mean([m.pearson for m in ms])))

    return MetricsReport(avg(0), avg(1), per_profile=rows)
