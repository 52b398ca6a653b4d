import math

import numpy as np
import pytest

from pwcmoe import moe, predictor
from pwcmoe import tensor as T
from pwcmoe.corpus import TokenSequence
from pwcmoe.rng import RngStream
from pwcmoe.tensor import Tensor


def make_seq(ids, mask):
    return TokenSequence(ids=list(ids), mask=list(mask),
                         tokens=[f"t{i}" for i in ids])


def tiny_config(**kw):
    base = dict(d=8, proj_dim=8, layers=1, heads=2, epochs=3, batch_size=4)
    base.update(kw)
    return predictor.PredictorConfig(**base)


class TestConfig:
    def test_proj_dim_bounded_by_d(self):
        with pytest.raises(ValueError):
            predictor.PredictorConfig(d=4, proj_dim=8)

    def test_heads_must_divide_proj_dim(self):
        with pytest.raises(ValueError):
            predictor.PredictorConfig(d=8, proj_dim=6, heads=4)

    def test_at_least_one_layer(self):
        with pytest.raises(ValueError):
            predictor.PredictorConfig(d=8, proj_dim=8, layers=0)


class TestRecord:
    def test_target_must_be_distribution(self):
        with pytest.raises(ValueError, match="distribution"):
            predictor.ImportanceRecord(np.zeros((2, 4)), [0.9, 0.9])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            predictor.ImportanceRecord(np.zeros((2, 4)), [1.0])


class TestKlLoss:
    def test_zero_when_equal(self):
        alpha = np.array([0.25, 0.75])
        assert predictor.kl_loss(alpha, Tensor(alpha.reshape(2, 1))).item() == \
            pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        # KL([.5,.5] || [.25,.75]) = .5 ln 2 + .5 ln(2/3)
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        got = predictor.kl_loss(np.array([0.5, 0.5]),
                                Tensor(np.array([[0.25], [0.75]]))).item()
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(0.1438, abs=1e-4)

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.dirichlet(np.ones(5))
            b = rng.dirichlet(np.ones(5))
            assert predictor.kl_loss(a, Tensor(b.reshape(-1, 1))).item() >= -1e-12

    def test_zero_alpha_component_ignored(self):
        got = predictor.kl_loss(np.array([1.0, 0.0]),
                                Tensor(np.array([[0.5], [0.5]]))).item()
        assert got == pytest.approx(math.log(2.0), rel=1e-12)

    def test_zero_alpha_hat_on_support_rejected(self):
        with pytest.raises(ValueError, match="zero mass"):
            predictor.kl_loss(np.array([0.5, 0.5]),
                              Tensor(np.array([[1.0], [0.0]])))

    def test_gradient(self, fd_check):
        rng = np.random.default_rng(1)
        alpha = rng.dirichlet(np.ones(4))
        x = Tensor(rng.uniform(-1, 1, (4, 1)), requires_grad=True)
        fd_check(lambda: predictor.kl_loss(alpha, T.softmax(x, axis=0)), {"x": x})


class TestPredict:
    def test_output_is_distribution(self):
        p = predictor.ImportancePredictor(tiny_config(), RngStream(0, "p"))
        out = p.predict(np.random.default_rng(0).normal(size=(5, 8)))
        assert out.shape == (5, 1)
        assert out.data.min() > 0.0
        assert out.data.sum() == pytest.approx(1.0)

    def test_permutation_equivariant(self):
        p = predictor.ImportancePredictor(tiny_config(), RngStream(1, "p"))
        emb = np.random.default_rng(1).normal(size=(6, 8))
        perm = np.array([3, 0, 5, 1, 4, 2])
        a = p.scores_np(emb)
        b = p.scores_np(emb[perm])
        assert np.allclose(a[perm], b, atol=1e-10)

    def test_single_token_sequence(self):
        p = predictor.ImportancePredictor(tiny_config(), RngStream(2, "p"))
        assert p.scores_np(np.zeros((1, 8))) == pytest.approx([1.0])

    def test_end_to_end_gradient(self, fd_check):
        cfg = tiny_config()
        p = predictor.ImportancePredictor(cfg, RngStream(3, "p"))
        rng = np.random.default_rng(2)
        emb = rng.normal(size=(3, 8))
        alpha = rng.dirichlet(np.ones(3))
        fd_check(lambda: predictor.kl_loss(alpha, p.predict(emb)),
                 p.parameters(), tol=2e-4)


class TestCollect:
    def test_targets_come_from_aggregation_weights(self):
        cfg = moe.MoEConfig(vocab_size=12, num_classes=3, d=4, num_experts=3,
                            num_privacy_experts=1, expert_hidden=5)
        model = moe.MoEModel(cfg, RngStream(4, "m"))
        data = [(make_seq([2, 3, 4], [1, 0, 0]), 0),
                (make_seq([5, 6], [0, 0]), 1)]
        records = predictor.collect_dataset(model, data)
        assert len(records) == 2
        for rec, (seq, _) in zip(records, data):
            res = model.forward(seq, mode="eval")
            assert np.allclose(rec.target, res.alpha.data.reshape(-1))
            assert np.allclose(rec.embeddings, res.h.data)


class TestTraining:
    def _records(self, n, L=4, d=8, seed=0):
        rng = np.random.default_rng(seed)
        # importance is a fixed linear function of the embedding: learnable
        w = rng.normal(size=d)
        records = []
        for _ in range(n):
            emb = rng.normal(size=(L, d))
            s = emb @ w
            a = np.exp(s - s.max())
            records.append(predictor.ImportanceRecord(emb, a / a.sum()))
        return records

    def test_kl_decreases(self):
        records = self._records(40)
        p, trace = predictor.train_predictor(records, tiny_config(epochs=5), seed=0)
        assert trace.mean_kl[-1] < trace.mean_kl[0]
        assert predictor.mean_kl(p, records) < trace.mean_kl[0]

    def test_deterministic_replay(self):
        records = self._records(12)
        runs = []
        for _ in range(2):
            p, _ = predictor.train_predictor(records, tiny_config(epochs=2), seed=3)
            runs.append({k: v.data.copy() for k, v in p.parameters().items()})
        for k in runs[0]:
            assert np.array_equal(runs[0][k], runs[1][k])

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError, match="no training records"):
            predictor.train_predictor([], tiny_config(), seed=0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = predictor.ImportancePredictor(tiny_config(), RngStream(5, "p"))
        path = str(tmp_path / "predictor.pwcp")
        predictor.save_predictor(p, path)
        loaded = predictor.load_predictor(path)
        assert loaded.config == p.config
        emb = np.random.default_rng(3).normal(size=(4, 8))
        assert np.allclose(p.scores_np(emb), loaded.scores_np(emb), atol=1e-5)

    def test_model_magic_rejected(self, tmp_path):
        from pwcmoe.checkpoint import CheckpointError
        cfg = moe.MoEConfig(vocab_size=12, num_classes=3, d=4, num_experts=3,
                            num_privacy_experts=1, expert_hidden=5)
        model = moe.MoEModel(cfg, RngStream(6, "m"))
        path = str(tmp_path / "model.pwcm")
        moe.save_model(model, path)
        with pytest.raises(CheckpointError, match="magic"):
            predictor.load_predictor(path)
