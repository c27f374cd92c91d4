"""Bias of CVR estimators over the draw of the click indicator.

Predictions are frozen; only the observation vector ``o ~ Bernoulli(p)``
varies.  An estimator's expectation is computed three ways:

* closed form for estimators affine in ``o`` (evaluate at ``o = p``),
* full enumeration of the ``2**n`` observation vectors (small ``n``),
* Monte Carlo redraws.

The first two are independent oracles for each other.
"""

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import bce
from .errors import ContractError

ENUMERATION_CAP = 20


@dataclass
class FrozenInstance:
    """True propensities/labels and frozen model outputs over ``D``."""

    propensity: np.ndarray
    true_conversion: np.ndarray
    r_hat: np.ndarray
    p_hat: np.ndarray = None
    e_hat: np.ndarray = None

    def __post_init__(self):
        self.propensity = np.asarray(self.propensity, dtype=np.float64)
        self.true_conversion = np.asarray(self.true_conversion, dtype=np.float64)
        self.r_hat = np.asarray(self.r_hat, dtype=np.float64)
        n = len(self.propensity)
        if self.p_hat is None:
            self.p_hat = self.propensity.copy()
        self.p_hat = np.asarray(self.p_hat, dtype=np.float64)
        if self.e_hat is not None:
            self.e_hat = np.asarray(self.e_hat, dtype=np.float64)
        for name in ("true_conversion", "r_hat", "p_hat", "e_hat"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ContractError(f"{name} has length {len(v)}, expected {n}")

    def __len__(self):
        return len(self.propensity)

    @property
    def errors(self):
        return bce(self.true_conversion, self.r_hat)


def prediction_inaccuracy(true_conversion, r_hat):
    """Mean cross-entropy over every exposure, against counterfactual labels."""
    r = np.asarray(true_conversion, dtype=np.float64)
    rh = np.asarray(r_hat, dtype=np.float64)
    if r.shape != rh.shape:
        raise ContractError(f"length mismatch: {r.shape} vs {rh.shape}")
    return float(np.mean(bce(r, rh)))


# -- estimator values as functions of o ----------------------------------------
#
# ``o`` is (n,) or (m, n); each function returns a scalar or (m,) values.


def _floor(p_hat, tau):
    return p_hat if tau is None else np.maximum(p_hat, tau)


def naive_value(inst, o):
    """Mean error over observed records; 0 when nothing is observed."""
    e = inst.errors
    num = o @ e
    cnt = o.sum(axis=-1)
    return np.where(cnt > 0, num / np.where(cnt > 0, cnt, 1.0), 0.0)


def ipw_value(inst, o, tau=None):
    return (o @ (inst.errors / _floor(inst.p_hat, tau))) / len(inst)


def dr_value(inst, o, tau=None):
    if inst.e_hat is None:
        raise ContractError("doubly robust value needs imputed errors e_hat")
    delta = inst.errors - inst.e_hat
    return (inst.e_hat.sum() + o @ (delta / _floor(inst.p_hat, tau))) / len(inst)


def esmm_value(inst, o):
    """Mean CTR cross-entropy plus CTCVR cross-entropy."""
    r = inst.true_conversion
    p, q = inst.p_hat, inst.p_hat * inst.r_hat
    # both cross-entropies are affine in o: e(o, s) = -o log s - (1-o) log(1-s)
    ctr1, ctr0 = bce(1.0, p), bce(0.0, p)
    cv1, cv0 = bce(r, q), bce(0.0, q)
    per_o = (ctr1 - ctr0) + (cv1 - cv0)
    return (ctr0.sum() + cv0.sum() + o @ per_o) / len(inst)


def naive_imputation_value(inst, o):
    e1, e0 = inst.errors, bce(0.0, inst.r_hat)
    return (e0.sum() + o @ (e1 - e0)) / len(inst)


def heuristic_dr_value(inst, o, eta=0.001):
    e1, e0 = inst.errors, bce(eta, inst.r_hat)
    return (e0.sum() + o @ (e1 - e0)) / len(inst)


def oversampling_value(inst, o, k=5.0):
    w = np.where(inst.true_conversion == 1, k, 1.0)
    num = o @ (w * inst.errors)
    den = o @ w
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


# name -> (function, affine in o)
ESTIMATORS = {
    "naive": (naive_value, False),
    "oversampling": (oversampling_value, False),
    "esmm": (esmm_value, True),
    "naive_imputation": (naive_imputation_value, True),
    "heuristic_dr": (heuristic_dr_value, True),
    "ipw": (ipw_value, True),
    "dr": (dr_value, True),
}


def estimator_value(name, inst, o, **hp):
    fn, _ = ESTIMATORS[name]
    return fn(inst, np.asarray(o, dtype=np.float64), **hp)


def _enumerate(fn, inst, chunk=1 << 14):
    n = len(inst)
    p = inst.propensity
    bits = np.arange(n)
    total = []
    for start in range(0, 1 << n, chunk):
        codes = np.arange(start, min(start + chunk, 1 << n))
        o = ((codes[:, None] >> bits) & 1).astype(np.float64)
        prob = np.prod(np.where(o == 1, p, 1.0 - p), axis=1)
        total.append(prob @ fn(o))
    return float(math.fsum(total))


def exact_expected_value(name, inst, method="auto", **hp):
    """``E_O[estimator]`` with ``o_i ~ Bernoulli(p_i)`` independent.

    ``method="linear"`` plugs ``o = p`` into an affine estimator,
    ``"enumerate"`` sums over all ``2**n`` observation vectors (n <= 20),
    ``"auto"`` takes the linear path whenever it applies.
    """
    fn, affine = ESTIMATORS[name]
    if method == "auto":
        method = "linear" if affine else "enumerate"
    if method == "linear":
        if not affine:
            raise ContractError(f"{name} is not affine in o; no linear shortcut")
        return float(fn(inst, inst.propensity, **hp))
    if method != "enumerate":
        raise ValueError(f"unknown method {method!r}")
    if len(inst) > ENUMERATION_CAP:
        raise ContractError(f"|D|={len(inst)} exceeds the enumeration cap of {ENUMERATION_CAP}; "
                            "use monte_carlo_expected_value instead")
    return _enumerate(lambda o: fn(inst, o, **hp), inst)


def monte_carlo_expected_value(name, inst, num_draws, seed=0, max_cells=4_000_000, **hp):
    """Mean and standard error of the estimator over ``num_draws`` redraws of ``o``."""
    if num_draws < 1:
        raise ContractError("num_draws must be >= 1")
    fn, _ = ESTIMATORS[name]
    rng = np.random.default_rng(seed)
    n = len(inst)
    rows = max(1, max_cells // max(n, 1))
    values = []
    for start in range(0, num_draws, rows):
        m = min(rows, num_draws - start)
        o = (rng.random((m, n)) < inst.propensity).astype(np.float64)
        values.append(np.atleast_1d(fn(inst, o, **hp)))
    values = np.concatenate(values)
    se = float(values.std(ddof=1) / np.sqrt(num_draws)) if num_draws > 1 else 0.0
    return float(values.mean()), se


@dataclass
class BiasReport:
    estimator: str
    P: float
    expected_value: float
    bias: float
    method: str
    mc_samples: int = None
    standard_error: float = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def bias_report(name, inst, method="auto", num_draws=None, seed=0, **hp):
    """Exact (``method`` in auto/linear/enumerate) or Monte Carlo bias of one estimator."""
    P = prediction_inaccuracy(inst.true_conversion, inst.r_hat)
    if method == "monte-carlo":
        mean, se = monte_carlo_expected_value(name, inst, num_draws, seed, **hp)
        return BiasReport(name, P, mean, abs(mean - P), "monte-carlo", num_draws, se)
    ev = exact_expected_value(name, inst, method, **hp)
    return BiasReport(name, P, ev, abs(ev - P), "exact-enumeration" if method == "enumerate"
                      or (method == "auto" and not ESTIMATORS[name][1]) else "exact-linear")


def frozen_from_net(net, dataset, truth):
    """Freeze a network's predictions on ``dataset`` against its ground truth."""
    if truth is None:
        raise ContractError("ground truth is required for bias analysis")
    feats = dataset.batch_features(np.arange(len(dataset)))
    return FrozenInstance(
        propensity=truth.propensity,
        true_conversion=truth.true_conversion,
        r_hat=net.predict_cvr(feats),
        p_hat=net.predict_ctr(feats),
        e_hat=net.predict_imputed_error(feats),
    )


def monte_carlo_bias(net, dataset, truth, num_draws, seed=0, estimator="dr", **hp):
    """Redraw clicks from the true propensities and report the estimator's bias."""
    inst = frozen_from_net(net, dataset, truth)
    return bias_report(estimator, inst, "monte-carlo", num_draws, seed, **hp)


# -- closed-form bias expressions ---------------------------------------------------


def esmm_bias(e_ctr, e_ctcvr, e_cvr):
    """``|sum(e_ctr + e_ctcvr - e_cvr)| / |D|``."""
    a, b, c = (np.asarray(x, dtype=np.float64) for x in (e_ctr, e_ctcvr, e_cvr))
    if not (a.shape == b.shape == c.shape):
        raise ContractError(f"length mismatch: {a.shape}, {b.shape}, {c.shape}")
    # correctly rounded sum, so hand-sized cases come out exact
    return abs(math.fsum(np.concatenate([a, b, -c]))) / a.size


def esmm_counterexample(n=1, seed=0):
    """Loss vectors with ``e_ctr > 0`` and ``e_ctcvr >= e_cvr`` (so bias > 0)."""
    rng = np.random.default_rng(seed)
    e_cvr = rng.uniform(0.0, 1.0, n)
    e_ctcvr = e_cvr + rng.uniform(0.0, 1.0, n)
    e_ctr = rng.uniform(1e-3, 1.0, n)
    return e_ctr, e_ctcvr, e_cvr


def dr_bias_product(inst, tau=None):
    """``|sum(Delta * delta)| / |D|`` with ``Delta = (p - p_hat) / p_hat``."""
    p_hat = _floor(inst.p_hat, tau)
    Delta = (inst.propensity - p_hat) / p_hat
    delta = inst.errors - inst.e_hat
    return float(abs(np.sum(Delta * delta)) / len(inst))


# -- theorem suite ------------------------------------------------------------------


@dataclass
class TheoremCheck:
    theorem: str
    instances: int
    max_bias: float
    passed: bool


def random_instance(n, rng, conversion_rate=0.3):
    """Random frozen instance with propensities bounded away from 0."""
    p = rng.uniform(0.05, 0.95, n)
    r = (rng.random(n) < conversion_rate).astype(np.float64)
    r_hat = rng.uniform(0.02, 0.98, n)
    e_hat = rng.uniform(0.0, 3.0, n)
    return FrozenInstance(p, r, r_hat, p_hat=p.copy(), e_hat=e_hat)


def random_confounded_instance(n, rng, conversion_rate=0.3):
    """Instance whose propensities run opposite to the prediction errors."""
    inst = random_instance(n, rng, conversion_rate)
    order = np.argsort(-inst.errors)
    p = np.empty(n)
    p[order] = np.sort(rng.uniform(0.05, 0.95, n))
    return FrozenInstance(p, inst.true_conversion, inst.r_hat, p_hat=p.copy(), e_hat=inst.e_hat)


def perturb_propensity(p, rng, scale=0.3):
    return np.clip(p * np.exp(rng.normal(0.0, scale, len(p))), 0.02, 1.0)


def verify_theorems(sizes=(8,), instances=100, tol=1e-10, seed=0):
    """Check both unbiasedness theorems by full enumeration on random instances.

    Rows: Multi-IPW with accurate propensities; Multi-DR with exact imputed
    errors and wrong propensities; Multi-DR with accurate propensities and
    wrong imputed errors; Multi-DR bias equal to the ``Delta * delta``
    product form; and a negative control where both are wrong.
    """
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in ("theorem1_ipw", "theorem2_exact_errors", "theorem2_exact_propensity",
                              "theorem2_product_form", "theorem2_exact_errors_shifted")}
    control_min = math.inf
    total = 0
    for n in sizes:
        for _ in range(instances):
            total += 1
            inst = random_instance(n, rng)
            P = prediction_inaccuracy(inst.true_conversion, inst.r_hat)

            worst["theorem1_ipw"] = max(
                worst["theorem1_ipw"], abs(exact_expected_value("ipw", inst, "enumerate") - P))

            arm_a = FrozenInstance(inst.propensity, inst.true_conversion, inst.r_hat,
                                   p_hat=perturb_propensity(inst.propensity, rng),
                                   e_hat=inst.errors)
            worst["theorem2_exact_errors"] = max(
                worst["theorem2_exact_errors"], abs(exact_expected_value("dr", arm_a, "enumerate") - P))

            shifted = FrozenInstance(inst.propensity, inst.true_conversion, inst.r_hat,
                                     p_hat=np.minimum(inst.propensity + 0.1, 1.0), e_hat=inst.errors)
            worst["theorem2_exact_errors_shifted"] = max(
                worst["theorem2_exact_errors_shifted"],
                abs(exact_expected_value("dr", shifted, "enumerate") - P))

            worst["theorem2_exact_propensity"] = max(
                worst["theorem2_exact_propensity"], abs(exact_expected_value("dr", inst, "enumerate") - P))

            both = FrozenInstance(inst.propensity, inst.true_conversion, inst.r_hat,
                                  p_hat=perturb_propensity(inst.propensity, rng), e_hat=inst.e_hat)
            bias = abs(exact_expected_value("dr", both, "enumerate") - P)
            worst["theorem2_product_form"] = max(
                worst["theorem2_product_form"], abs(bias - dr_bias_product(both)))
            control_min = min(control_min, bias)

    rows = [TheoremCheck(name, total, value, value < tol) for name, value in worst.items()]
    rows.append(TheoremCheck("control_both_wrong", total, control_min, control_min > tol))
    return rows


def write_theorem_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theorem", "instances", "max_bias", "pass"])
        for r in rows:
            w.writerow([r.theorem, r.instances, repr(r.max_bias), str(r.passed).lower()])
