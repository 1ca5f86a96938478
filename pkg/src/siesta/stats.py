"""Paired significance tests for comparing classifiers on the same test set."""
import numpy as np
from scipy.stats import chi2

from .errors import ConfigError


def _correct(preds, truth):
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape[-1] != truth.shape[0]:
        raise ConfigError(f"prediction length {preds.shape[-1]} != truth length {truth.shape[0]}")
    return preds == truth


def mcnemar_test(preds_a, preds_b, truth):
    """Continuity-corrected McNemar chi-square on the discordant pairs.

    Returns (statistic, p_value); p = 1 when no pair is discordant.
    """
    ca = _correct(preds_a, truth)
    cb = _correct(preds_b, truth)
    if ca.shape != cb.shape:
        raise ConfigError("prediction vectors differ in length")
    b = int(np.sum(ca & ~cb))
    c = int(np.sum(~ca & cb))
    return mcnemar_from_counts(b, c)


def mcnemar_from_counts(b, c):
    if b + c == 0:
        return 0.0, 1.0
    stat = (abs(b - c) - 1) ** 2 / (b + c)
    return float(stat), float(chi2.sf(stat, 1))


def cochran_q_statistic(indicators):
    """Cochran's Q for a (k classifiers, n samples) 0/1 correctness matrix."""
    X = np.asarray(indicators, dtype=np.float64)
    k = X.shape[0]
    col = X.sum(axis=1)          # per-classifier totals
    row = X.sum(axis=0)          # per-sample totals
    N = X.sum()
    denom = k * N - np.sum(row ** 2)
    if denom == 0:
        return 0.0
    return float((k - 1) * (k * np.sum(col ** 2) - N ** 2) / denom)


def cochran_q_test(pred_matrix, truth):
    """Returns (Q, p_value) with p from chi-square on k - 1 degrees of freedom."""
    correct = _correct(pred_matrix, truth)
    if correct.ndim != 2 or correct.shape[0] < 3:
        raise ConfigError("Cochran's Q needs >= 3 classifiers; use mcnemar_test for two")
    q = cochran_q_statistic(correct)
    if q == 0.0:
        return 0.0, 1.0
    return q, float(chi2.sf(q, correct.shape[0] - 1))
