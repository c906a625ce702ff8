"""Patient-level classification metrics

ALL is the positive class. Ratios are computed with exact rational arithmetic
and rounded once; a ratio whose denominator is zero is reported as absent
(None) rather than zero.
"""

from __future__ import annotations

from typing import Any, Dict, Optional, Sequence, Tuple

from datetime import datetime, timezone
from fractions import Fraction

from sklearn.metrics import confusion_matrix

from .core import Diagnosis, MetricsReport
from .errors import Fatal


__all__ = (
    'compute_metrics',
    'confusion_from_labels',
    'metrics_from_labels',
    'utc_now',
)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def _ratio(num: int, den: int) -> Optional[Fraction]:
    return None if den == 0 else Fraction(num, den)


def _float(value: Optional[Fraction]) -> Optional[float]:
    return None if value is None else float(value)


def compute_metrics(
    tp: int,
    fp: int,
    tn: int,
    fn: int,
    name: str = '',
    seed: Optional[int] = None,
    config_digest: Optional[str] = None,
    started_at: Optional[str] = None,
    finished_at: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> MetricsReport:
    counts = (tp, fp, tn, fn)
    if any(c < 0 for c in counts):
        raise Fatal(f'negative confusion count in {counts}')
    if sum(counts) == 0:
        raise Fatal('cannot compute metrics from an all-zero confusion matrix')

    f1_all = _ratio(2 * tp, 2 * tp + fp + fn)
    f1_healthy = _ratio(2 * tn, 2 * tn + fn + fp)
    macro = None if f1_all is None or f1_healthy is None else (f1_all + f1_healthy) / 2

    return MetricsReport(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=_float(_ratio(tp + tn, sum(counts))),
        macro_f1=_float(macro),
        sensitivity=_float(_ratio(tp, tp + fn)),
        specificity=_float(_ratio(tn, tn + fp)),
        f1_all=_float(f1_all),
        f1_healthy=_float(f1_healthy),
        name=name,
        seed=seed,
        config_digest=config_digest,
        started_at=started_at,
        finished_at=finished_at,
        extra=dict(extra or {}),
    )


def confusion_from_labels(
    y_true: Sequence[Diagnosis], y_pred: Sequence[Diagnosis]
) -> Tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with ALL as the positive class"""
    if len(y_true) != len(y_pred):
        raise ValueError(f'{len(y_true)} labels but {len(y_pred)} predictions')
    matrix = confusion_matrix(
        [d.index for d in y_true], [d.index for d in y_pred], labels=[0, 1]
    )
    (tn, fp), (fn, tp) = matrix.tolist()
    return int(tp), int(fp), int(tn), int(fn)


def metrics_from_labels(
    y_true: Sequence[Diagnosis], y_pred: Sequence[Diagnosis], **metadata: Any
) -> MetricsReport:
    return compute_metrics(*confusion_from_labels(y_true, y_pred), **metadata)
