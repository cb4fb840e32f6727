"""Scale-invariant log loss and depth evaluation metrics."""

from dataclasses import astuple, dataclass, fields

import numpy as np

from dwinformer import tensor as T
from dwinformer.errors import ConfigError, DomainError

SI_LAMBDA = 0.85
SI_ALPHA = 10.0
DELTA_THRESHOLD = 1.25
EVAL_MIN_DEPTH = 1e-3


def _arr(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def valid_mask(gt, mask=None):
    """Boolean mask of valid pixels; defaults to ``gt > 0``."""
    g = _arr(gt)
    m = g > 0 if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != g.shape:
        raise DomainError(f"mask shape {m.shape} != depth shape {g.shape}")
    if not m.any():
        raise DomainError("mask selects no valid pixels")
    return m


def _check_positive(pred, gt, m):
    if np.any(_arr(gt)[m] <= 0):
        raise DomainError("ground-truth depth must be positive on valid pixels")
    if np.any(_arr(pred)[m] <= 0):
        raise DomainError("predicted depth must be positive on valid pixels")


def si_loss(pred, gt, mask=None, lam=SI_LAMBDA, alpha=SI_ALPHA):
    """alpha * sqrt(mean(g^2) - lam * mean(g)^2) with g = ln(pred) - ln(gt) over valid pixels.

    Differentiable with respect to ``pred`` (a Tensor).
    """
    m = valid_mask(gt, mask)
    _check_positive(pred, gt, m)
    if not isinstance(pred, T.Tensor):
        pred = T.Tensor(np.asarray(pred, dtype=np.float64), dtype=np.float64)
    dtype = pred.dtype
    count = float(m.sum())
    mf = T.Tensor(m.astype(dtype), dtype=dtype)
    # log(1) = 0 at masked-out pixels keeps the log finite there
    safe_gt = np.where(m, _arr(gt), 1.0).astype(dtype)
    pred_safe = pred * mf + T.Tensor((~m).astype(dtype), dtype=dtype)
    g = (T.log(pred_safe) - T.Tensor(np.log(safe_gt), dtype=dtype)) * mf
    mean = T.scale(T.reduce_sum(g), 1.0 / count)
    # mean(g^2) - lam mean(g)^2 rewritten as mean((g - mean)^2) + (1 - lam) mean^2: the
    # direct form cancels catastrophically when g is nearly constant
    centered = (g - mean) * mf
    var = T.scale(T.reduce_sum(T.square(centered)), 1.0 / count) + T.scale(T.square(mean), 1.0 - lam)
    if var.data <= 0:
        # sqrt has no derivative at 0; take the zero subgradient
        return T.scale(var, 0.0)
    return T.scale(T.sqrt(var), alpha)


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rms: float
    log10: float
    delta1: float
    delta2: float
    delta3: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_row(self):
        return list(astuple(self))


def compute_metrics(pred, gt, mask=None):
    """Error metrics over valid pixels; relative errors divide by ground truth."""
    m = valid_mask(gt, mask)
    _check_positive(pred, gt, m)
    p = _arr(pred)[m].astype(np.float64)
    g = _arr(gt)[m].astype(np.float64)
    diff = g - p
    ratio = np.maximum(g / p, p / g)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rms=float(np.sqrt(np.mean(diff ** 2))),
        log10=float(np.mean(np.abs(np.log10(g) - np.log10(p)))),
        delta1=float(np.mean(ratio < DELTA_THRESHOLD)),
        delta2=float(np.mean(ratio < DELTA_THRESHOLD ** 2)),
        delta3=float(np.mean(ratio < DELTA_THRESHOLD ** 3)),
    )


def mean_report(reports):
    rows = np.array([r.as_row() for r in reports], dtype=np.float64)
    return MetricReport(*(float(v) for v in rows.mean(axis=0)))


def clamp_for_eval(pred, min_depth=EVAL_MIN_DEPTH, max_depth=80.0):
    if not 0 < min_depth < max_depth:
        raise ConfigError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    return np.clip(_arr(pred), min_depth, max_depth)
