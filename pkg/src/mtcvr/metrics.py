"""AUC, exposure-weighted group AUC, and the evaluation report."""

import json
import logging
from dataclasses import dataclass, asdict, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError

log = logging.getLogger(__name__)


def auc(scores, labels):
    """Tie-aware AUC: ``(wins + 0.5 * ties) / (n_pos * n_neg)``.

    Computed from average ranks in O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} differ in shape")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    # doubled ranks are integers, so the numerator is exact
    twice_ranks = (2.0 * rankdata(s)).astype(np.int64)
    twice_u = int(twice_ranks[pos].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2.0 * n_pos * n_neg)


def gauc(scores, labels, groups, weights=None):
    """Weighted mean of per-group AUC; single-class groups are skipped.

    ``weights`` maps group key to weight; by default a group's weight is
    its number of records (exposures).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    g = np.asarray(groups)
    if not (s.shape == y.shape == g.shape):
        raise ContractError("scores, labels and groups must have equal length")
    keys, inverse = np.unique(g, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.flatnonzero(np.diff(inverse[order])) + 1
    num = den = 0.0
    for key, idx in zip(keys, np.split(order, bounds)):
        yy = y[idx]
        if yy.min() == yy.max():
            continue
        w = float(len(idx)) if weights is None else float(weights[key])
        if w <= 0:
            raise ContractError(f"group {key!r} has non-positive weight {w}")
        num += w * auc(s[idx], yy)
        den += w
    if den == 0:
        raise UndefinedMetricError("no group contains both classes")
    return num / den


METRIC_KEYS = ("cvr_auc_do", "cvr_auc_clicked", "ctcvr_auc", "ctcvr_gauc")


@dataclass
class MetricReport:
    cvr_auc_do: float = None
    cvr_auc_clicked: float = None
    ctcvr_auc: float = None
    ctcvr_gauc: float = None
    seed: int = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d.pop("notes")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _try(report, key, fn):
    try:
        setattr(report, key, float(fn()))
    except UndefinedMetricError as exc:
        report.notes.append(f"{key}: {exc}")
        log.warning("%s undefined: %s", key, exc)


def evaluate(net, dataset, truth=None, seed=None):
    """CVR and CTCVR ranking metrics for a trained network.

    ``cvr_auc_do`` scores every exposure against its counterfactual
    conversion label and needs ``truth``; ``cvr_auc_clicked`` uses clicked
    records and observed labels; the CTCVR metrics score ``p_hat * r_hat``
    against ``click * conversion`` over all exposures, grouped by
    ``group_key`` for GAUC.  Undefined metrics are left as None.
    """
    feats = dataset.batch_features(np.arange(len(dataset)))
    r_hat = net.predict_cvr(feats)
    p_hat = net.predict_ctr(feats)
    report = MetricReport(seed=seed)
    if truth is not None:
        _try(report, "cvr_auc_do", lambda: auc(r_hat, truth.true_conversion))
    else:
        report.notes.append("cvr_auc_do: no ground truth")
    clicked = dataset.click == 1
    _try(report, "cvr_auc_clicked", lambda: auc(r_hat[clicked], dataset.conversion[clicked]))
    ctcvr_label = dataset.click * dataset.conversion
    _try(report, "ctcvr_auc", lambda: auc(p_hat * r_hat, ctcvr_label))
    _try(report, "ctcvr_gauc", lambda: gauc(p_hat * r_hat, ctcvr_label, dataset.group_key))
    return report
