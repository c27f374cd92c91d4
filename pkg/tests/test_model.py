import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtcvr import autodiff as ad
from mtcvr.errors import ContractError
from mtcvr.model import Architecture, LogisticPropensity, MultiTaskNet

from conftest import TINY_VOCAB, tiny_arch


def _ids(*rows):
    return np.array(rows, dtype=np.int64)


class TestEmbed:
    def test_single_ids_concatenate_rows(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=0)
        feats = {"user": _ids([2]), "item": _ids([4]), "comb": _ids([1])}
        expected = np.concatenate([net.params["emb.user"].value[2], net.params["emb.item"].value[4],
                                   net.params["emb.comb"].value[1]])
        np.testing.assert_array_equal(net.embed(feats).value[0], expected)

    def test_zero_table_gives_zero(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=0)
        for name in net.embedding_names():
            net.params[name].value[...] = 0.0
        feats = {"user": _ids([1, 3]), "item": _ids([0, 2]), "comb": _ids([3, 3])}
        np.testing.assert_array_equal(net.embed(feats).value, 0.0)

    def test_two_ids_sum(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=1)
        feats = {"user": _ids([1, 5]), "item": _ids([0, -1]), "comb": _ids([2, -1])}
        t = net.params["emb.user"].value
        np.testing.assert_allclose(net.embed(feats).value[0, :3], t[1] + t[5], rtol=0, atol=1e-15)

    def test_out_of_vocabulary(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=0)
        feats = {"user": _ids([6]), "item": _ids([0]), "comb": _ids([0])}
        with pytest.raises(ContractError, match="user.*6"):
            net.embed(feats)


class TestHeads:
    def _feats(self, n=20, seed=0):
        rng = np.random.default_rng(seed)
        return {f: rng.integers(0, v, (n, 2)) for f, v in TINY_VOCAB.items()}

    def test_zero_heads_give_half(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=3)
        net.zero_heads()
        feats = self._feats()
        np.testing.assert_array_equal(net.predict_ctr(feats), 0.5)
        np.testing.assert_array_equal(net.predict_cvr(feats), 0.5)
        # label mode: e(0.5, 0.5) = ln 2
        np.testing.assert_allclose(net.predict_imputed_error(feats), np.log(2.0), rtol=1e-12)

    def test_zero_error_head_gives_softplus_zero(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(imputation="error"), seed=3)
        net.zero_heads(("imp",))
        np.testing.assert_allclose(net.predict_imputed_error(self._feats()), 0.6931, atol=5e-5)

    def test_batch_order_invariance(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=2)
        feats = self._feats(30, seed=4)
        perm = np.random.default_rng(5).permutation(30)
        shuffled = {f: v[perm] for f, v in feats.items()}
        for fn in (net.predict_ctr, net.predict_cvr, net.predict_imputed_error):
            np.testing.assert_array_equal(fn(shuffled), fn(feats)[perm])

    def test_ctcvr(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=2)
        feats = self._feats()
        got = net.ctcvr_score(feats)
        np.testing.assert_allclose(got, net.predict_ctr(feats) * net.predict_cvr(feats), rtol=0, atol=1e-15)
        net.zero_heads(("ctr", "cvr"))
        np.testing.assert_array_equal(net.ctcvr_score(feats), 0.25)
        # a CTR head saturated at 1 returns r_hat
        net.params["ctr.b1"].value[...] = 800.0
        np.testing.assert_array_equal(net.ctcvr_score(feats), net.predict_cvr(feats))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 30.0), st.sampled_from(["label", "error"]))
    def test_output_ranges(self, seed, scale, mode):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(imputation=mode), seed=seed)
        for name in net.params:
            net.params[name].value *= scale
        feats = self._feats(15, seed)
        for fn in (net.predict_ctr, net.predict_cvr):
            v = fn(feats)
            assert np.all((v >= 0) & (v <= 1)) and np.all(np.isfinite(v))
        assert np.all(net.predict_imputed_error(feats) >= 0)

    def test_shared_embedding_is_one_table(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=0)
        assert sorted(net.embedding_names()) == ["emb.comb", "emb.item", "emb.user"]
        ns = MultiTaskNet(TINY_VOCAB, tiny_arch(shared_embedding=False), seed=0)
        assert len(ns.embedding_names()) == 9

    def test_ctr_step_moves_cvr_predictions(self):
        net = MultiTaskNet(TINY_VOCAB, tiny_arch(), seed=6)
        train = self._feats(40, seed=1)
        unseen = self._feats(10, seed=2)
        before = net.predict_cvr(unseen)
        click = (np.random.default_rng(0).random(40) < 0.5).astype(float)
        ad.mean(ad.binary_cross_entropy(click, net.head_output(train, "ctr"))).backward()
        assert not any(np.any(net.params[n].grad) for n in net.head_names("cvr"))
        ad.Adam(net.params, lr=0.05).step()
        assert np.any(net.predict_cvr(unseen) != before)

    def test_unknown_imputation_mode(self):
        with pytest.raises(ValueError):
            MultiTaskNet(TINY_VOCAB, Architecture(imputation="other"))


class TestLogisticPropensity:
    def test_probabilities(self):
        m = LogisticPropensity(TINY_VOCAB, seed=0)
        feats = {f: np.random.default_rng(1).integers(0, v, (9, 1)) for f, v in TINY_VOCAB.items()}
        p = m.predict(feats)
        assert p.shape == (9,) and np.all((p > 0) & (p < 1))
