"""Training objectives for every CVR estimator and the loops that fit them.

Each ``loss_*`` function takes a network and a :class:`Batch` and returns
:class:`LossTerms` whose ``total`` is a scalar tensor ready for
``backward()``.  The ``*_value`` helpers in :mod:`mtcvr.analysis` hold the
same formulas over frozen numpy predictions.
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from . import autodiff as ad
from .data import batches, derive_seed
from .errors import ConfigError, ContractError, DivergenceError
from .model import Architecture, LogisticPropensity, MultiTaskNet

log = logging.getLogger(__name__)

KINDS = (
    "base",
    "oversampling",
    "esmm",
    "esmm_ns",
    "naive_imputation",
    "naive_ipw",
    "heuristic_dr",
    "joint_learning_dr",
    "multi_ipw",
    "multi_dr",
)

# batch space each loop samples from
DEFAULT_SPACE = {
    "base": "click",
    "oversampling": "click",
    "esmm": "exposure",
    "esmm_ns": "exposure",
    "naive_imputation": "exposure",
    "naive_ipw": "exposure",
    "heuristic_dr": "exposure",
    "joint_learning_dr": "exposure",
    "multi_ipw": "exposure",
    "multi_dr": "exposure",
}

HEURISTIC_ETA_GRID = (0.0005, 0.001, 0.002, 0.005, 0.01)


@dataclass
class HyperParams:
    """Estimator knobs; only the ones a kind uses are read.

    ``tau`` is a floor on the estimated propensity (``None`` disables it);
    ``tau_pct`` sets the floor per batch at that fraction of the way from
    the batch's smallest to its mean estimated propensity.  ``lam`` is the number of unclicked records per clicked record fed to the
    imputation term (``None`` keeps the whole batch), ``eta`` the soft label
    for unclicked records, ``k`` the oversampling weight of positives and
    ``v`` the L2 coefficient on the imputation tower.
    """

    tau: float = None
    tau_pct: float = None
    lam: float = None
    eta: float = 0.001
    k: float = 5.0
    v: float = 1e-4
    reweight_unclicked: bool = False
    propensity_grad: bool = False
    literal_imputation: bool = False
    oracle_propensity: bool = False
    propensity_epochs: int = 1

    def validate(self, kind):
        if self.tau is not None and not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.tau is not None and self.tau_pct is not None:
            raise ConfigError("give tau or tau_pct, not both")
        if self.tau_pct is not None and not 0.0 <= self.tau_pct <= 1.0:
            raise ConfigError(f"tau_pct must be in [0, 1], got {self.tau_pct}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if kind == "heuristic_dr" and not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if kind == "oversampling" and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.v < 0:
            raise ConfigError(f"v must be >= 0, got {self.v}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class EstimatorSpec:
    kind: str
    hyperparams: HyperParams = field(default_factory=HyperParams)
    epochs: int = 1
    batch_size: int = 1024
    learning_rate: float = 1e-3
    seed: int = 0
    space: str = None

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.space not in (None, "click", "exposure"):
            raise ConfigError(f"space must be 'click' or 'exposure', got {self.space!r}")
        self.hyperparams.validate(self.kind)

    @property
    def batch_space(self):
        return self.space or DEFAULT_SPACE[self.kind]


def tau_percent(tau, propensities):
    """Position of ``tau`` between the minimum and mean propensity."""
    p = np.asarray(propensities, dtype=np.float64)
    lo, mid = p.min(), p.mean()
    return float((tau - lo) / (mid - lo))


def tau_from_percent(pct, propensities):
    p = np.asarray(propensities, dtype=np.float64)
    return float(p.min() + pct * (p.mean() - p.min()))


def resolve_tau(tau, tau_pct, p_hat):
    """Fixed floor ``tau``, or the per-batch floor at ``tau_pct``."""
    if tau_pct is None:
        return tau
    return tau_from_percent(tau_pct, ad.stop(p_hat))


def inverse_weights(p_hat, tau=None):
    """``1 / max(p_hat, tau)``, the per-record IPW weights."""
    p = np.asarray(p_hat, dtype=np.float64)
    return 1.0 / (p if tau is None else np.maximum(p, tau))


# -- batches and loss containers ----------------------------------------------


@dataclass
class Batch:
    """Features and labels of a set of records.

    ``exposure_size`` is the exposure-space size the batch stands for: the
    batch length for exposure-space batches, ``len * |D| / |O|`` for
    click-space batches.
    """

    feats: dict
    click: np.ndarray
    conversion: np.ndarray
    index: np.ndarray = None
    exposure_size: float = None

    def __post_init__(self):
        self.click = np.asarray(self.click, dtype=np.float64)
        self.conversion = np.asarray(self.conversion, dtype=np.float64)
        if self.exposure_size is None:
            self.exposure_size = float(len(self.click))

    def __len__(self):
        return len(self.click)


def make_batch(dataset, idx, space="exposure"):
    idx = np.asarray(idx)
    size = float(len(idx))
    if space == "click":
        size *= dataset.n_exposures / max(dataset.n_clicks, 1)
    return Batch(dataset.batch_features(idx), dataset.click[idx], dataset.conversion[idx],
                 index=idx, exposure_size=size)


@dataclass
class LossTerms:
    total: ad.Tensor
    ctr: float = 0.0
    cvr: float = 0.0
    imp: float = 0.0


def _propensity_for_weights(p_hat, tau, propagate):
    w = p_hat if propagate else ad.detach(p_hat)
    if tau is not None:
        w = ad.maximum(w, tau)
    return w


def _require_clicked(batch, name):
    if np.any(batch.click != 1):
        raise ContractError(f"{name} needs a click-space batch; got unclicked records")


# -- loss terms on tensors ------------------------------------------------------


def ipw_term(click, conversion, r_hat, p_hat, tau=None, exposure_size=None, propagate=False):
    """``sum(o * e(r, r_hat) / max(p_hat, tau)) / exposure_size``."""
    o = np.asarray(click, dtype=np.float64)
    n = float(len(o)) if exposure_size is None else exposure_size
    e = ad.binary_cross_entropy(conversion, r_hat)
    denom = _propensity_for_weights(ad.as_tensor(p_hat), tau, propagate)
    return ad.tsum(o * e / denom) * (1.0 / n)


def dr_term(click, conversion, r_hat, e_hat, p_hat, include, tau=None, normalizer=None,
            propagate=False):
    """``sum(include * e_hat + o * (e - e_hat) / max(p_hat, tau)) / normalizer``.

    ``include`` weights the imputed-error term per record (0 drops it).
    """
    o = np.asarray(click, dtype=np.float64)
    e = ad.binary_cross_entropy(conversion, r_hat)
    delta = e - e_hat
    denom = _propensity_for_weights(ad.as_tensor(p_hat), tau, propagate)
    n = float(len(o)) if normalizer is None else normalizer
    return (ad.tsum(np.asarray(include, dtype=np.float64) * e_hat) + ad.tsum(o * delta / denom)) \
        * (1.0 / n)


def sample_unclicked(click, lam, rng, reweight=False):
    """Per-record weights for the imputed-error term.

    Keeps every clicked record plus ``round(lam * n_clicked)`` unclicked
    records drawn without replacement; ``lam=None`` keeps everything.  With
    ``reweight`` the kept unclicked records are scaled by
    ``n_unclicked / n_sampled`` so the term is unbiased for the full batch.
    """
    click = np.asarray(click)
    n = len(click)
    if lam is None:
        return np.ones(n)
    clicked = np.flatnonzero(click == 1)
    unclicked = np.flatnonzero(click != 1)
    want = int(round(lam * clicked.size))
    if want > unclicked.size:
        warnings.warn("lam asks for more unclicked records than the batch holds; using all",
                      RuntimeWarning, stacklevel=2)
        log.debug("lam=%s wants %d unclicked records, %d available", lam, want, unclicked.size)
        want = unclicked.size
    chosen = np.sort(rng.choice(unclicked, size=want, replace=False)) if want else clicked[:0]
    include = np.zeros(n)
    include[clicked] = 1.0
    include[chosen] = unclicked.size / want if reweight and want else 1.0
    return include


# -- losses on a network ------------------------------------------------------------


def loss_naive(net, batch):
    """Mean cross-entropy over a click-space batch."""
    _require_clicked(batch, "loss_naive")
    r_hat = net.head_output(batch.feats, "cvr")
    cvr = ad.mean(ad.binary_cross_entropy(batch.conversion, r_hat))
    return LossTerms(cvr, cvr=cvr.item())


def loss_oversampling(net, batch, k):
    """Naive loss with positives weighted ``k`` times (duplication in expectation)."""
    _require_clicked(batch, "loss_oversampling")
    w = np.where(batch.conversion == 1, float(k), 1.0)
    r_hat = net.head_output(batch.feats, "cvr")
    cvr = ad.tsum(w * ad.binary_cross_entropy(batch.conversion, r_hat)) * (1.0 / w.sum())
    return LossTerms(cvr, cvr=cvr.item())


def loss_esmm(net, batch):
    """CTR cross-entropy plus CTCVR cross-entropy on ``p_hat * r_hat``."""
    out = net.forward(batch.feats, heads=("ctr", "cvr"))
    ctr = ad.mean(ad.binary_cross_entropy(batch.click, out["ctr"]))
    ctcvr = ad.mean(ad.binary_cross_entropy(batch.click * batch.conversion,
                                            out["ctr"] * out["cvr"]))
    return LossTerms(ctr + ctcvr, ctr=ctr.item(), cvr=ctcvr.item())


def loss_naive_imputation(net, batch):
    """Every unclicked record counts as a non-conversion."""
    label = batch.click * batch.conversion
    r_hat = net.head_output(batch.feats, "cvr")
    cvr = ad.mean(ad.binary_cross_entropy(label, r_hat))
    return LossTerms(cvr, cvr=cvr.item())


def loss_heuristic_dr(net, batch, eta):
    """Unclicked records get the soft label ``eta``."""
    label = np.where(batch.click == 1, batch.conversion, float(eta))
    r_hat = net.head_output(batch.feats, "cvr")
    cvr = ad.mean(ad.binary_cross_entropy(label, r_hat))
    return LossTerms(cvr, cvr=cvr.item())


def loss_naive_ipw(net, batch, propensity, tau=None):
    """IPW with externally supplied propensities (no shared parameters)."""
    r_hat = net.head_output(batch.feats, "cvr")
    cvr = ipw_term(batch.click, batch.conversion, r_hat, ad.Tensor(propensity), tau,
                   batch.exposure_size)
    return LossTerms(cvr, cvr=cvr.item())


def loss_multi_ipw(net, batch, tau=None, propagate=False, tau_pct=None):
    """Click cross-entropy plus the inverse-propensity-weighted CVR term.

    Both towers read the same embeddings.  The propensity in the
    denominator is a constant for backprop unless ``propagate``.
    """
    if tau is not None and tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    out = net.forward(batch.feats, heads=("ctr", "cvr"))
    tau = resolve_tau(tau, tau_pct, out["ctr"])
    ctr = ad.mean(ad.binary_cross_entropy(batch.click, out["ctr"]))
    cvr = ipw_term(batch.click, batch.conversion, out["cvr"], out["ctr"], tau,
                   batch.exposure_size, propagate)
    return LossTerms(ctr + cvr, ctr=ctr.item(), cvr=cvr.item())


def imputation_term(click, conversion, r_hat, e_hat, p_hat, tau=None, normalizer=None):
    """``sum(o * (e_hat - e)**2 / max(p_hat, tau)) / normalizer`` with ``e`` and ``p_hat`` fixed."""
    o = np.asarray(click, dtype=np.float64)
    e = ad.bce(conversion, ad.stop(r_hat))
    w = o * inverse_weights(ad.stop(p_hat), tau)
    n = float(len(o)) if normalizer is None else normalizer
    return ad.tsum(w * ad.square(e_hat - e)) * (1.0 / n)


def imputed_label_term(click, conversion, r_tilde, p_hat, tau=None, normalizer=None):
    """``sum(o * e(r, r_tilde) / max(p_hat, tau)) / normalizer`` with ``p_hat`` fixed.

    Fits the imputed conversion probability on clicked records, weighted
    so the fit targets the whole exposure space.
    """
    o = np.asarray(click, dtype=np.float64)
    w = o * inverse_weights(ad.stop(p_hat), tau)
    n = float(len(o)) if normalizer is None else normalizer
    return ad.tsum(w * ad.binary_cross_entropy(conversion, r_tilde)) * (1.0 / n)


def imputation_fit(net, click, conversion, r_hat, imp_out, p_hat, tau=None, normalizer=None):
    """Fitting term for the imputation tower in the network's imputation mode."""
    if net.arch.imputation == "label":
        return imputed_label_term(click, conversion, imp_out, p_hat, tau, normalizer)
    return imputation_term(click, conversion, r_hat, imp_out, p_hat, tau, normalizer)


def loss_multi_dr(net, batch, tau=None, lam=None, v=0.0, rng=None, reweight=False,
                  propagate=False, literal=False, tau_pct=None):
    """Click cross-entropy plus the doubly robust term plus ``v * ||imp tower||^2``.

    The imputed-error term covers clicked records and ``lam * n_clicked``
    sampled unclicked ones (see :func:`sample_unclicked`); everything is
    averaged over the batch.

    In label mode the imputed error is ``e(r_tilde, r_hat)``: unclicked
    records train ``r_hat`` toward the imputed label and clicked ones get
    the propensity-weighted correction.  The tower producing ``r_tilde``
    learns only from :func:`imputed_label_term`.

    In error mode the tower regresses the error itself.  The doubly robust
    term is linear in ``e_hat`` with a negative coefficient on clicked
    records, so descending it drives ``e_hat`` to infinity; ``e_hat`` is a
    constant there and the tower fits clicked errors by squared loss.
    ``literal=True`` backpropagates through ``e_hat`` and drops that fit.
    """
    if tau is not None and tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    rng = rng if rng is not None else np.random.default_rng(0)
    include = sample_unclicked(batch.click, lam, rng, reweight)
    norm = float(len(batch))
    out = net.forward(batch.feats)
    tau = resolve_tau(tau, tau_pct, out["ctr"])
    ctr = ad.mean(ad.binary_cross_entropy(batch.click, out["ctr"]))
    label_mode = net.arch.imputation == "label"
    if label_mode:
        e_hat = net.imputed_error(out["imp"], out["cvr"])
    else:
        e_hat = out["imp"] if literal else ad.detach(out["imp"])
    dr = dr_term(batch.click, batch.conversion, out["cvr"], e_hat, out["ctr"], include,
                 tau, norm, propagate)
    total = ctr + dr
    imp = 0.0
    if label_mode or not literal:
        fit = imputation_fit(net, batch.click, batch.conversion, out["cvr"], out["imp"],
                             out["ctr"], tau, norm)
        total = total + fit
        imp = fit.item()
    if v > 0:
        pen = net.params.l2("imp.") * v
        total = total + pen
        imp += pen.item()
    return LossTerms(total, ctr=ctr.item(), cvr=dr.item(), imp=imp)


def loss_jl_prediction(pred_net, batch, propensity, imp_out, tau=None):
    """Doubly robust loss for the prediction model with the imputation model fixed.

    ``imp_out`` is the imputation network's output on the batch (imputed
    label or imputed error, per its mode).
    """
    r_hat = pred_net.head_output(batch.feats, "cvr")
    if pred_net.arch.imputation == "label":
        e_hat = ad.binary_cross_entropy(np.asarray(imp_out), r_hat)
    else:
        e_hat = ad.Tensor(imp_out)
    dr = dr_term(batch.click, batch.conversion, r_hat, e_hat, ad.Tensor(propensity),
                 np.ones(len(batch)), tau)
    return LossTerms(dr, cvr=dr.item())


def loss_jl_imputation(imp_net, batch, propensity, r_hat, tau=None):
    """Propensity-weighted fit of the imputation model on clicked records."""
    imp_out = imp_net.head_output(batch.feats, "imp")
    imp = imputation_fit(imp_net, batch.click, batch.conversion, r_hat, imp_out, propensity, tau)
    return LossTerms(imp, imp=imp.item())


# -- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    net: MultiTaskNet
    trace: list
    propensity_model: object = None
    imputation_net: object = None
    propensity: np.ndarray = None


def _check_finite(value, epoch, trace):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at epoch {epoch}", trace=trace)


def _fit_propensity(dataset, spec, arch_seed):
    model = LogisticPropensity(dataset.vocab_sizes, seed=arch_seed)
    opt = ad.Adam(model.params, lr=spec.learning_rate * 10)
    pseed = derive_seed(spec.seed, "propensity")
    for epoch in range(spec.hyperparams.propensity_epochs):
        for idx in batches(dataset, spec.batch_size, pseed, "exposure", epoch):
            p = model.forward(dataset.batch_features(idx))
            loss = ad.mean(ad.binary_cross_entropy(dataset.click[idx].astype(float), p))
            loss.backward()
            opt.step()
    return model


def _external_propensity(dataset, spec, truth):
    hp = spec.hyperparams
    if hp.oracle_propensity:
        if truth is None:
            raise ConfigError("oracle_propensity needs ground truth")
        return None, np.asarray(truth.propensity, dtype=np.float64)
    model = _fit_propensity(dataset, spec, derive_seed(spec.seed, "propensity-init"))
    return model, model.predict(dataset.batch_features(np.arange(len(dataset))))


def _epoch_row(epoch, sums, count):
    n = max(count, 1)
    return {
        "epoch": epoch,
        "loss_total": float(sums[0] / n),
        "loss_ctr": float(sums[1] / n),
        "loss_cvr": float(sums[2] / n),
        "loss_imp": float(sums[3] / n),
    }


def train(spec, dataset, arch=None, truth=None, net=None, on_epoch=None):
    """Fit the estimator described by ``spec`` on ``dataset``.

    Stopping is a fixed number of epochs.  ``on_epoch(epoch, net)`` is
    called after each epoch.  Returns a :class:`TrainResult` with the CVR
    network and a per-epoch loss trace.
    """
    spec.validate()
    arch = arch or Architecture()
    hp = spec.hyperparams
    if spec.kind == "esmm_ns":
        arch = Architecture(**{**arch.to_dict(), "shared_embedding": False})
    if net is None:
        net = MultiTaskNet(dataset.vocab_sizes, arch, seed=derive_seed(spec.seed, "init"))
    if spec.kind == "joint_learning_dr":
        return _train_joint_dr(spec, dataset, arch, truth, net, on_epoch)

    propensity_model, propensity = None, None
    if spec.kind == "naive_ipw":
        propensity_model, propensity = _external_propensity(dataset, spec, truth)

    opt = ad.Adam(net.params, lr=spec.learning_rate)
    space = spec.batch_space
    sample_rng = np.random.default_rng(derive_seed(spec.seed, "unclicked-sampling"))
    trace = []
    for epoch in range(spec.epochs):
        sums, count = np.zeros(4), 0
        for idx in batches(dataset, spec.batch_size, spec.seed, space, epoch):
            batch = make_batch(dataset, idx, space)
            kind = spec.kind
            if kind == "base":
                terms = loss_naive(net, batch)
            elif kind == "oversampling":
                terms = loss_oversampling(net, batch, hp.k)
            elif kind in ("esmm", "esmm_ns"):
                terms = loss_esmm(net, batch)
            elif kind == "naive_imputation":
                terms = loss_naive_imputation(net, batch)
            elif kind == "heuristic_dr":
                terms = loss_heuristic_dr(net, batch, hp.eta)
            elif kind == "naive_ipw":
                terms = loss_naive_ipw(net, batch, propensity[idx],
                                       resolve_tau(hp.tau, hp.tau_pct, propensity[idx]))
            elif kind == "multi_ipw":
                terms = loss_multi_ipw(net, batch, hp.tau, hp.propensity_grad, hp.tau_pct)
            else:
                terms = loss_multi_dr(net, batch, hp.tau, hp.lam, hp.v, sample_rng,
                                      hp.reweight_unclicked, hp.propensity_grad,
                                      hp.literal_imputation, hp.tau_pct)
            value = terms.total.item()
            _check_finite(value, epoch, trace)
            terms.total.backward()
            opt.step()
            sums += (value, terms.ctr, terms.cvr, terms.imp)
            count += 1
        trace.append(_epoch_row(epoch, sums, count))
        log.debug("%s epoch %d: %s", spec.kind, epoch, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch, net)
    return TrainResult(net, trace, propensity_model=propensity_model, propensity=propensity)


def _train_joint_dr(spec, dataset, arch, truth, net, on_epoch=None):
    """Alternate epochs: prediction model, then imputation model, repeating."""
    hp = spec.hyperparams
    propensity_model, propensity = _external_propensity(dataset, spec, truth)
    imp_net = MultiTaskNet(dataset.vocab_sizes, arch, seed=derive_seed(spec.seed, "imp-init"))
    pred_opt = ad.Adam(net.params, lr=spec.learning_rate)
    imp_opt = ad.Adam(imp_net.params, lr=spec.learning_rate)
    trace = []
    for epoch in range(spec.epochs):
        sums, count = np.zeros(4), 0
        predict_phase = epoch % 2 == 0
        for idx in batches(dataset, spec.batch_size, spec.seed, "exposure", epoch):
            batch = make_batch(dataset, idx)
            tau = resolve_tau(hp.tau, hp.tau_pct, propensity[idx])
            if predict_phase:
                imp_out = imp_net.head_output(batch.feats, "imp").value
                terms = loss_jl_prediction(net, batch, propensity[idx], imp_out, tau)
                opt = pred_opt
            else:
                r_hat = net.head_output(batch.feats, "cvr").value
                terms = loss_jl_imputation(imp_net, batch, propensity[idx], r_hat, tau)
                if hp.v > 0:
                    pen = imp_net.params.l2("imp.") * hp.v
                    terms = LossTerms(terms.total + pen, imp=terms.imp + pen.item())
                opt = imp_opt
            value = terms.total.item()
            _check_finite(value, epoch, trace)
            terms.total.backward()
            opt.step()
            # the idle model accumulated nothing, but keep its grads clean
            (imp_opt if predict_phase else pred_opt).params.zero_grad()
            sums += (value, terms.ctr, terms.cvr, terms.imp)
            count += 1
        trace.append(_epoch_row(epoch, sums, count))
        if on_epoch is not None:
            on_epoch(epoch, net)
    return TrainResult(net, trace, propensity_model=propensity_model, imputation_net=imp_net,
                       propensity=propensity)


def write_trace(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss_total", "loss_ctr", "loss_cvr",
                                           "loss_imp"], lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
