"""Exposure-space datasets: synthetic confounded generator and CSV I/O.

Every record carries categorical ids in three fields (user, item,
combination), a click bit and an observed conversion bit.  The synthetic
generator additionally returns a :class:`GroundTruth` holding the true
click propensity, the counterfactual conversion label and the confounder
draw for every exposure.
"""

import csv
import hashlib
import logging
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from .errors import CalibrationError, ContractError, InputError

log = logging.getLogger(__name__)

FIELDS = ("user", "item", "comb")
CSV_HEADER = ["group_key", "click", "conversion", "user_feats", "item_feats", "comb_feats"]
TRUTH_HEADER = ["propensity", "true_conversion", "z"]


def derive_seed(seed, purpose):
    """Stable 63-bit sub-seed for ``(seed, purpose)``."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _pad(rows, dtype=np.int64):
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), -1, dtype=dtype)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


@dataclass(frozen=True, eq=False)
class ExposureDataset:
    """Records of the exposure space.

    ``features[f]`` is an ``(n, max_len)`` int array padded with ``-1``.
    """

    features: dict
    group_key: np.ndarray
    click: np.ndarray
    conversion: np.ndarray
    vocab_sizes: dict
    dropped_violations: int = 0

    def __post_init__(self):
        n = len(self.click)
        for f in FIELDS:
            if self.features[f].shape[0] != n:
                raise ContractError(f"field {f!r} has {self.features[f].shape[0]} rows, expected {n}")
        if len(self.conversion) != n or len(self.group_key) != n:
            raise ContractError("click, conversion and group_key lengths differ")
        if np.any(self.conversion > self.click):
            raise ContractError("conversion=1 with click=0 in an observed dataset")
        for f in FIELDS:
            ids = self.features[f]
            if ids.size and ids.max() >= self.vocab_sizes[f]:
                raise ContractError(f"field {f!r} id {int(ids.max())} outside vocabulary "
                                    f"of size {self.vocab_sizes[f]}")

    def __len__(self):
        return len(self.click)

    @property
    def n_exposures(self):
        return len(self.click)

    @property
    def n_clicks(self):
        return int(self.click.sum())

    @property
    def n_conversions(self):
        return int(self.conversion.sum())

    def batch_features(self, idx):
        return {f: self.features[f][idx] for f in FIELDS}

    def subset(self, idx):
        idx = np.asarray(idx)
        return ExposureDataset(
            features={f: self.features[f][idx] for f in FIELDS},
            group_key=self.group_key[idx],
            click=self.click[idx],
            conversion=self.conversion[idx],
            vocab_sizes=dict(self.vocab_sizes),
        )

    def equals(self, other):
        if len(self) != len(other) or self.vocab_sizes != other.vocab_sizes:
            return False
        if not (np.array_equal(self.click, other.click)
                and np.array_equal(self.conversion, other.conversion)
                and np.array_equal(self.group_key, other.group_key)):
            return False
        return all(np.array_equal(self.features[f], other.features[f]) for f in FIELDS)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Counterfactual oracle for a synthetic dataset, aligned by row."""

    propensity: np.ndarray
    true_conversion: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        if not (len(self.propensity) == len(self.true_conversion) == len(self.z)):
            raise ContractError("ground-truth columns have different lengths")
        if np.any(self.propensity <= 0.0) or np.any(self.propensity > 1.0):
            raise ContractError("true propensities must lie in (0, 1]")

    def __len__(self):
        return len(self.propensity)

    def subset(self, idx):
        return GroundTruth(self.propensity[idx], self.true_conversion[idx], self.z[idx])

    def equals(self, other):
        return (np.array_equal(self.propensity, other.propensity)
                and np.array_equal(self.true_conversion, other.true_conversion)
                and np.array_equal(self.z, other.z))


# -- synthetic generator -----------------------------------------------------


@dataclass
class SyntheticConfig:
    """Knobs of the confounded click/conversion simulator.

    Clicks and conversions follow logistic equations in a fixed random
    feature map of the ids plus a shared standard-normal confounder ``z``
    scaled by ``alpha`` (click side) and ``beta`` (conversion side).
    """

    num_records: int = 100_000
    num_users: int = 2_000
    num_items: int = 1_000
    num_user_segments: int = 20
    num_categories: int = 25
    latent_dim: int = 8
    click_signal: float = 1.0
    conversion_signal: float = 1.0
    weight_correlation: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    target_ctr: float = 0.04
    target_cvr: float = 0.0053
    click_weight_seed: int = 1
    conversion_weight_seed: int = 2
    seed: int = 0
    shard_size: int = 50_000
    max_calibration_iter: int = 200

    def vocab_sizes(self):
        return {
            "user": self.num_users + self.num_user_segments,
            "item": self.num_items + self.num_categories,
            "comb": self.num_user_segments * self.num_categories,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _id_effects(config):
    """Per-id scalar contributions to the click and conversion scores."""
    k = config.latent_dim
    vocab = config.vocab_sizes()
    table_rng = np.random.default_rng(derive_seed(config.seed, "feature-map"))
    phi = {f: table_rng.normal(0.0, 1.0 / np.sqrt(k), size=(vocab[f], k)) for f in FIELDS}

    w_click = np.random.default_rng(config.click_weight_seed).normal(size=(len(FIELDS), k))
    w_indep = np.random.default_rng(config.conversion_weight_seed).normal(size=(len(FIELDS), k))
    rho = config.weight_correlation
    w_conv = rho * w_click + np.sqrt(max(0.0, 1.0 - rho * rho)) * w_indep
    click_fx = {f: phi[f] @ w_click[j] for j, f in enumerate(FIELDS)}
    conv_fx = {f: phi[f] @ w_conv[j] for j, f in enumerate(FIELDS)}
    return click_fx, conv_fx


def _draw_shard(config, shard, n):
    """Features, confounder and uniform variates for one shard."""
    rng = np.random.default_rng([int(config.seed), int(shard)])
    seg_rng = np.random.default_rng(derive_seed(config.seed, "segments"))
    user_segment = seg_rng.integers(0, config.num_user_segments, size=config.num_users)
    item_category = seg_rng.integers(0, config.num_categories, size=config.num_items)

    users = rng.integers(0, config.num_users, size=n)
    items = rng.integers(0, config.num_items, size=n)
    seg = user_segment[users]
    cat = item_category[items]
    feats = {
        "user": np.stack([users, config.num_users + seg], axis=1),
        "item": np.stack([items, config.num_items + cat], axis=1),
        "comb": (seg * config.num_categories + cat)[:, None],
    }
    z = rng.standard_normal(n)
    u_click = rng.random(n)
    u_conv = rng.random(n)
    return feats, users, z, u_click, u_conv


def _bisect(fn, target, max_iter, lo=-40.0, hi=40.0):
    """Solve increasing ``fn(b) = target`` for ``b``."""
    f_lo, f_hi = fn(lo), fn(hi)
    if not (f_lo <= target <= f_hi):
        return None, (f_lo if target < f_lo else f_hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if fn(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    b = 0.5 * (lo + hi)
    return b, fn(b)


def generate_synthetic(config):
    """Draw ``(ExposureDataset, GroundTruth)`` from ``config``.

    Shards use independent RNG streams keyed by ``(seed, shard)`` and are
    concatenated in shard order, so the output does not depend on how the
    shards are scheduled.  Intercepts are bisected so that the expected
    click rate and the expected conversion rate among clicks hit
    ``target_ctr`` and ``target_cvr`` on the realized features.
    """
    n = int(config.num_records)
    if n < 1:
        raise InputError("num_records must be positive")
    click_fx, conv_fx = _id_effects(config)

    parts = []
    for shard, start in enumerate(range(0, n, config.shard_size)):
        parts.append(_draw_shard(config, shard, min(config.shard_size, n - start)))
    feats = {f: np.concatenate([p[0][f] for p in parts]) for f in FIELDS}
    users = np.concatenate([p[1] for p in parts])
    z = np.concatenate([p[2] for p in parts])
    u_click = np.concatenate([p[3] for p in parts])
    u_conv = np.concatenate([p[4] for p in parts])

    raw_click = sum(click_fx[f][feats[f]].sum(axis=1) for f in FIELDS)
    raw_conv = sum(conv_fx[f][feats[f]].sum(axis=1) for f in FIELDS)
    s_click = config.click_signal * raw_click / max(raw_click.std(), 1e-12)
    s_conv = config.conversion_signal * raw_conv / max(raw_conv.std(), 1e-12)
    lin_click = s_click + config.alpha * z
    lin_conv = s_conv + config.beta * z

    b_click, ctr = _bisect(lambda b: _sigmoid(lin_click + b).mean(),
                           config.target_ctr, config.max_calibration_iter)
    if b_click is None:
        raise CalibrationError(f"cannot reach CTR {config.target_ctr}; closest {ctr:.6g}",
                               achieved_ctr=ctr)
    propensity = _sigmoid(lin_click + b_click)

    def cvr_given_click(b):
        return float(np.dot(propensity, _sigmoid(lin_conv + b)) / propensity.sum())

    b_conv, cvr = _bisect(cvr_given_click, config.target_cvr, config.max_calibration_iter)
    if b_conv is None:
        raise CalibrationError(f"cannot reach CVR {config.target_cvr}; closest {cvr:.6g}",
                               achieved_ctr=ctr, achieved_cvr=cvr)
    conv_prob = _sigmoid(lin_conv + b_conv)

    # propensity must stay strictly positive for the oracle
    propensity = np.maximum(propensity, np.finfo(np.float64).tiny)
    click = (u_click < propensity).astype(np.int8)
    true_conversion = (u_conv < conv_prob).astype(np.int8)
    conversion = (click * true_conversion).astype(np.int8)

    dataset = ExposureDataset(
        features=feats,
        group_key=users.astype(np.int64),
        click=click,
        conversion=conversion,
        vocab_sizes=config.vocab_sizes(),
    )
    truth = GroundTruth(propensity=propensity, true_conversion=true_conversion, z=z)
    log.debug("generated %d exposures, %d clicks, %d conversions",
              len(dataset), dataset.n_clicks, dataset.n_conversions)
    return dataset, truth


# -- CSV I/O -------------------------------------------------------------------


def _fmt_ids(row):
    return ";".join(str(int(i)) for i in row if i >= 0)


def write_csv(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(len(dataset)):
            w.writerow([dataset.group_key[i], int(dataset.click[i]), int(dataset.conversion[i]),
                        *(_fmt_ids(dataset.features[f][i]) for f in FIELDS)])


def _parse_ids(text, lineno, column):
    if text == "":
        return []
    try:
        ids = [int(t) for t in text.split(";")]
    except ValueError:
        raise InputError(f"line {lineno}: bad id list {text!r} in column {column}") from None
    if any(i < 0 for i in ids):
        raise InputError(f"line {lineno}: negative id in column {column}")
    return ids


def _parse_bit(text, lineno, column):
    if text not in ("0", "1"):
        raise InputError(f"line {lineno}: {column} must be 0 or 1, got {text!r}")
    return int(text)


def ingest_csv(path, vocab_sizes=None, on_violation="drop"):
    """Read a flat click/conversion log into an :class:`ExposureDataset`.

    Rows with ``conversion=1`` but ``click=0`` are dropped and counted
    (``on_violation="drop"``) or raise (``"reject"``).  Vocabulary sizes are
    ``max id + 1`` per field unless given.
    """
    if on_violation not in ("drop", "reject"):
        raise ValueError(f"on_violation must be 'drop' or 'reject', got {on_violation!r}")
    keys, clicks, convs = [], [], []
    rows = {f: [] for f in FIELDS}
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise InputError(f"{path}: header {header} does not match {CSV_HEADER}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_HEADER):
                raise InputError(f"line {lineno}: expected {len(CSV_HEADER)} columns, got {len(rec)}")
            c = _parse_bit(rec[1], lineno, "click")
            v = _parse_bit(rec[2], lineno, "conversion")
            if v > c:
                if on_violation == "reject":
                    raise InputError(f"line {lineno}: conversion=1 with click=0")
                dropped += 1
                continue
            keys.append(rec[0])
            clicks.append(c)
            convs.append(v)
            for j, f in enumerate(FIELDS):
                rows[f].append(_parse_ids(rec[3 + j], lineno, CSV_HEADER[3 + j]))
    if dropped:
        log.warning("%s: dropped %d rows with conversion but no click", path, dropped)

    try:
        group_key = np.array([int(k) for k in keys], dtype=np.int64)
    except ValueError:
        group_key = np.array(keys, dtype=object)
    feats = {f: _pad(rows[f]) for f in FIELDS}
    if vocab_sizes is None:
        vocab_sizes = {f: int(feats[f].max()) + 1 if feats[f].size else 0 for f in FIELDS}
    return ExposureDataset(
        features=feats,
        group_key=group_key,
        click=np.array(clicks, dtype=np.int8),
        conversion=np.array(convs, dtype=np.int8),
        vocab_sizes=dict(vocab_sizes),
        dropped_violations=dropped,
    )


def write_ground_truth(truth, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for p, r, z in zip(truth.propensity, truth.true_conversion, truth.z):
            w.writerow([repr(float(p)), int(r), repr(float(z))])


def read_ground_truth(path):
    props, conv, zs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRUTH_HEADER:
            raise InputError(f"{path}: header {header} does not match {TRUTH_HEADER}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                props.append(float(rec[0]))
                conv.append(_parse_bit(rec[1], lineno, "true_conversion"))
                zs.append(float(rec[2]))
            except (ValueError, IndexError):
                raise InputError(f"line {lineno}: malformed ground-truth row") from None
    return GroundTruth(np.array(props), np.array(conv, dtype=np.int8), np.array(zs))


# -- splitting and batching ------------------------------------------------------


def split_train_test(dataset, truth=None, fraction=0.8, seed=0):
    """Seeded random split; ``fraction`` of the records go to train.

    Returns ``((train, train_truth), (test, test_truth))``; truths are None
    when ``truth`` is None.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise ContractError("split would leave one side empty")
    perm = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    pick = (lambda idx: truth.subset(idx)) if truth is not None else (lambda idx: None)
    return (dataset.subset(tr), pick(tr)), (dataset.subset(te), pick(te))


def batches(dataset, batch_size, seed, space="exposure", epoch=0):
    """Yield index arrays covering one shuffled epoch of the chosen space.

    ``space="click"`` restricts to clicked records.  The shuffle depends
    only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if space == "click":
        pool = np.flatnonzero(dataset.click == 1)
    elif space == "exposure":
        pool = np.arange(len(dataset))
    else:
        raise ValueError(f"space must be 'click' or 'exposure', got {space!r}")
    if pool.size == 0:
        raise ContractError(f"the {space} space is empty")
    rng = np.random.default_rng(derive_seed(seed, f"batches:{epoch}"))
    order = pool[rng.permutation(pool.size)]
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]
