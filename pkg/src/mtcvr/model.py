"""Shared-embedding multi-task network: CTR, CVR and imputation towers."""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .data import FIELDS
from .errors import ContractError

HEADS = ("ctr", "cvr", "imp")


@dataclass
class Architecture:
    """Embedding width and hidden widths of each tower.

    The full-size public-data setup is ``embedding_dim=18`` with hidden
    widths ``[512, 256, 128, 32]``; the defaults here are desk-scale.
    """

    embedding_dim: int = 8
    ctr_layers: list = field(default_factory=lambda: [32, 16])
    cvr_layers: list = field(default_factory=lambda: [32, 16])
    imp_layers: list = field(default_factory=lambda: [32, 16])
    shared_embedding: bool = True
    # "label": imputation tower outputs an imputed conversion probability and
    # the imputed error is the cross-entropy of r_hat against it;
    # "error": tower regresses the error directly through a softplus
    imputation: str = "label"

    def layers(self, head):
        return list(getattr(self, f"{head}_layers"))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MultiTaskNet:
    """Three towers over one embedding table per feature field.

    With ``shared_embedding=False`` each tower gets its own tables
    (``emb_ctr.*``, ``emb_cvr.*``, ``emb_imp.*``); otherwise all towers read
    ``emb.*``, so a gradient from any task moves the same rows.
    """

    def __init__(self, vocab_sizes, arch=None, seed=0):
        self.arch = arch or Architecture()
        if self.arch.imputation not in ("label", "error"):
            raise ValueError(f"imputation must be 'label' or 'error', got {self.arch.imputation!r}")
        self.head_activation = {"ctr": "sigmoid", "cvr": "sigmoid",
                                "imp": "sigmoid" if self.arch.imputation == "label" else "softplus"}
        self.vocab_sizes = dict(vocab_sizes)
        self.params = ad.ParameterStore()
        rng = np.random.default_rng(seed)
        d = self.arch.embedding_dim
        prefixes = ["emb"] if self.arch.shared_embedding else [f"emb_{h}" for h in HEADS]
        for prefix in prefixes:
            for f in FIELDS:
                self.params.add(f"{prefix}.{f}",
                                rng.uniform(-0.01, 0.01, size=(max(self.vocab_sizes[f], 1), d)))
        for head in HEADS:
            widths = [d * len(FIELDS)] + self.arch.layers(head) + [1]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                self.params.add(f"{head}.W{i}", _glorot(rng, a, b))
                self.params.add(f"{head}.b{i}", np.zeros(b))

    def _emb_prefix(self, head):
        return "emb" if self.arch.shared_embedding else f"emb_{head}"

    def embedding_names(self, head=None):
        if self.arch.shared_embedding or head is None:
            return [n for n in self.params if n.startswith("emb")]
        return self.params.names(f"emb_{head}.")

    def head_names(self, head):
        return self.params.names(f"{head}.")

    def zero_heads(self, heads=HEADS):
        for head in heads:
            for name in self.head_names(head):
                self.params[name].value[...] = 0.0

    def embed(self, feats, head="cvr"):
        """Sum-pool each field's ids, concatenate fields: ``(batch, 3*d)``."""
        prefix = self._emb_prefix(head)
        pooled = []
        for f in FIELDS:
            ids = np.asarray(feats[f])
            if ids.size and ids.max() >= self.vocab_sizes[f]:
                bad = int(ids.max())
                raise ContractError(f"field {f!r}: id {bad} outside vocabulary "
                                    f"of size {self.vocab_sizes[f]}")
            if ids.ndim == 2 and ids.shape[1] == 0:
                pooled.append(ad.Tensor(np.zeros((ids.shape[0], self.arch.embedding_dim))))
            else:
                pooled.append(ad.embedding_bag(self.params[f"{prefix}.{f}"], ids))
        return ad.concat(pooled, axis=1)

    def head_output(self, feats, head, pooled=None):
        """Tower output as a 1-D tensor over the batch."""
        if pooled is None:
            pooled = self.embed(feats, head)
        out = ad.mlp_forward(pooled, self.params, head, output=self.head_activation[head])
        return _flatten(out)

    def forward(self, feats, heads=HEADS):
        """Dict of raw tower outputs ``{"ctr": p_hat, "cvr": r_hat, "imp": ...}``.

        The imputation entry is the imputed label or the imputed error
        depending on ``arch.imputation``; :meth:`imputed_error` turns it
        into an error.
        """
        if self.arch.shared_embedding:
            pooled = self.embed(feats, "ctr")
            return {h: self.head_output(feats, h, pooled) for h in heads}
        return {h: self.head_output(feats, h) for h in heads}

    # -- numpy inference -----------------------------------------------------

    def _predict(self, feats, head, chunk=65536):
        n = len(feats[FIELDS[0]])
        out = np.empty(n)
        for s in range(0, n, chunk):
            part = {f: feats[f][s:s + chunk] for f in FIELDS}
            out[s:s + chunk] = self.head_output(part, head).value
        return out

    def predict_ctr(self, feats):
        return self._predict(feats, "ctr")

    def predict_cvr(self, feats):
        return self._predict(feats, "cvr")

    def imputed_error(self, imp_out, r_hat):
        """Imputed error tensor from the imputation tower output.

        In label mode this is ``e(r_tilde, r_hat)`` with ``r_tilde`` held
        constant, so the tower itself learns only from its fitting term.
        """
        if self.arch.imputation == "error":
            return imp_out
        return ad.binary_cross_entropy(ad.detach(imp_out), r_hat)

    def predict_imputed_error(self, feats):
        imp = self._predict(feats, "imp")
        if self.arch.imputation == "error":
            return imp
        return ad.bce(imp, self.predict_cvr(feats))

    def ctcvr_score(self, feats):
        return self.predict_ctr(feats) * self.predict_cvr(feats)


class LogisticPropensity:
    """Independent logistic regression on the one-hot ids (no sharing)."""

    def __init__(self, vocab_sizes, seed=0):
        self.vocab_sizes = dict(vocab_sizes)
        self.params = ad.ParameterStore()
        rng = np.random.default_rng(seed)
        for f in FIELDS:
            self.params.add(f"lr.{f}", rng.uniform(-0.01, 0.01, size=(max(vocab_sizes[f], 1), 1)))
        self.params.add("lr.bias", np.zeros(1))

    def forward(self, feats):
        logit = self.params["lr.bias"]
        for f in FIELDS:
            logit = logit + ad.embedding_bag(self.params[f"lr.{f}"], feats[f])
        return _flatten(ad.sigmoid(logit))

    def predict(self, feats):
        return self.forward(feats).value.copy()


def _flatten(t):
    return ad.reshape(t, (-1,))
