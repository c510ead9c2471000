"""Independent reference implementations used to check the real code.

Everything here is deliberately naive (finite differences, pairwise
enumeration, direct formulas) and must stay decoupled from the package
internals it verifies.
"""

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise relative error, guarded for near-zero pairs."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


def auc_pairwise(scores, labels) -> float:
    """AUC by enumerating every positive/negative pair; ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def pearson_direct(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm = x - x.mean()
    ym = y - y.mean()
    return float((xm * ym).sum() / np.sqrt((xm * xm).sum() * (ym * ym).sum()))


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by their average, O(n^2) on purpose."""
    values = np.asarray(values, dtype=np.float64)
    ranks = np.empty(len(values))
    for i, v in enumerate(values):
        less = np.sum(values < v)
        equal = np.sum(values == v)
        ranks[i] = less + (equal + 1) / 2.0
    return ranks


def spearman_direct(x, y) -> float:
    return pearson_direct(average_ranks(x), average_ranks(y))


def f1_from_counts(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def f1_direct(preds, labels) -> tuple[float, float]:
    """(micro, macro) F1 for binary single-label predictions."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    micro_tp = micro_fp = micro_fn = 0
    per_class = []
    for cls in (0, 1):
        tp = int(np.sum((preds == cls) & (labels == cls)))
        fp = int(np.sum((preds == cls) & (labels != cls)))
        fn = int(np.sum((preds != cls) & (labels == cls)))
        micro_tp += tp
        micro_fp += fp
        micro_fn += fn
        per_class.append(f1_from_counts(tp, fp, fn))
    return f1_from_counts(micro_tp, micro_fp, micro_fn), float(np.mean(per_class))
