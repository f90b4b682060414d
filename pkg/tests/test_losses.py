import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from reldistill.losses import (LossWeights, cfd_loss, ii_p2p_loss, is_p2p_loss, kl_divergence,
                               m_p2p_loss, pd_loss, rdd_loss, softmax_temp, spatial_relation)

T = lambda a: torch.tensor(np.asarray(a), dtype=torch.float64)  # noqa: E731


class TestSoftmax:
    def test_constant_is_uniform(self):
        for tau in (0.1, 1.0, 7.0):
            p = softmax_temp(torch.full((5,), 3.2, dtype=torch.float64), tau)
            assert torch.allclose(p, torch.full((5,), 0.2, dtype=torch.float64))

    def test_closed_form(self):
        p = softmax_temp(T([0.0, math.log(3)]), 1.0)
        assert torch.allclose(p, T([0.25, 0.75]), atol=1e-12)

    def test_large_temperature(self):
        rng = np.random.default_rng(0)
        v = T(rng.uniform(-1, 1, 20))
        assert (softmax_temp(v, 100.0) - 1 / 20).abs().max() < 1e-3

    def test_sums_to_one_and_stable(self):
        p = softmax_temp(T([1000.0, 999.0, -1000.0]), 0.5)
        assert abs(float(p.sum()) - 1) < 1e-7 and torch.isfinite(p).all()

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            softmax_temp(T([1.0, 2.0]), 0.0)
        with pytest.raises(ValueError):
            softmax_temp(T([1.0, float("nan")]), 1.0)


class TestKL:
    def test_equal_is_zero(self):
        q = softmax_temp(T(np.random.default_rng(1).normal(size=7)))
        assert float(kl_divergence(q, q)) == pytest.approx(0.0, abs=1e-15)

    def test_closed_form(self):
        assert float(kl_divergence(T([1.0, 0.0]), T([0.5, 0.5]))) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = rng.dirichlet(np.ones(10))
            p = rng.dirichlet(np.ones(10))
            assert float(kl_divergence(T(q), T(p))) == pytest.approx(oracles.kl(q, p), abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence(T([0.5, 0.5]), T([1.0]))


class TestPDLoss:
    def test_zero_at_equality(self):
        x = torch.randn(3, 1, 4, 4, dtype=torch.float64)
        assert float(pd_loss(x, x, 0.5)) == 0.0

    def test_truncated_weight(self):
        x = torch.zeros(1, 4, dtype=torch.float64)
        y = torch.ones(1, 4, dtype=torch.float64)
        t_snr4 = 2 / math.pi * math.atan(0.5)   # alpha / sigma = 2
        t_snr025 = 2 / math.pi * math.atan(2.0)  # alpha / sigma = 0.5
        assert float(pd_loss(x, y, t_snr4)) == pytest.approx(4.0, rel=1e-9)
        assert float(pd_loss(x, y, t_snr025)) == pytest.approx(1.0, rel=1e-9)

    def test_plain_mse_at_half(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
        expected = sum((a[i, j] - b[i, j]) ** 2 for i in range(2) for j in range(6)) / 12
        assert float(pd_loss(T(a), T(b), 0.5)) == pytest.approx(expected, abs=1e-12)

    def test_rejects_t_zero(self):
        with pytest.raises(ValueError):
            pd_loss(torch.zeros(1, 2), torch.zeros(1, 2), 0.0)


class TestCFD:
    def test_equal_inputs(self):
        v = torch.randn(2, 8, dtype=torch.float64)
        assert float(cfd_loss(v, v, 1.0)) == pytest.approx(0.0, abs=1e-12)
        assert float(cfd_loss(v, v, 0.5)) > 0

    def test_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a, b = rng.normal(size=8), rng.normal(size=8)
            assert float(cfd_loss(T(a), T(b), 0.9)) == pytest.approx(oracles.cfd(a, b, 0.9), abs=1e-9)


class TestRelations:
    def test_unit_basis(self):
        f = T([[1.0, 0.0], [0.0, 1.0]])
        assert torch.equal(spatial_relation(f, f), torch.eye(2, dtype=torch.float64))

    def test_self_relation_symmetric_unit_diagonal(self):
        f = T(oracles.unit_rows(np.random.default_rng(5), 6, 4))
        m = spatial_relation(f, f)
        assert torch.allclose(m, m.T) and torch.allclose(torch.diagonal(m), torch.ones(6, dtype=torch.float64))
        assert m.abs().max() <= 1 + 1e-6

    def test_pairwise_oracle(self):
        rng = np.random.default_rng(6)
        f, g = oracles.unit_rows(rng, 3, 4), oracles.unit_rows(rng, 5, 4)
        np.testing.assert_allclose(spatial_relation(T(f), T(g)).numpy(), oracles.relation(f, g), atol=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            spatial_relation(torch.zeros(2, 3), torch.zeros(2, 4))


class TestRelationalLosses:
    def test_ii_equal_and_limit(self):
        m = T(np.random.default_rng(7).uniform(-1, 1, (4, 4)))
        assert float(ii_p2p_loss(m, m, 1.0)) == pytest.approx(0.0, abs=1e-12)
        m2 = T(np.random.default_rng(8).uniform(-1, 1, (4, 4)))
        assert float(ii_p2p_loss(m, m2, 100.0)) < 1e-4

    def test_ii_oracle(self):
        rng = np.random.default_rng(9)
        a, b = rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (4, 4))
        assert float(ii_p2p_loss(T(a), T(b), 1.0)) == pytest.approx(oracles.ii_p2p(a, b, 1.0), abs=1e-8)

    def test_is_batch_one_reduces_to_ii(self):
        rng = np.random.default_rng(10)
        ft, fs = T(oracles.unit_rows(rng, 1, 5, 3)), T(oracles.unit_rows(rng, 1, 5, 3))
        direct = ii_p2p_loss(spatial_relation(ft[0], ft[0]), spatial_relation(fs[0], fs[0]), 0.7)
        assert float(is_p2p_loss(ft, fs, 0.7)) == float(direct)

    def test_is_oracle(self):
        rng = np.random.default_rng(11)
        ft, fs = oracles.unit_rows(rng, 3, 4, 2), oracles.unit_rows(rng, 3, 4, 2)
        assert float(is_p2p_loss(T(ft), T(fs), 1.0)) == pytest.approx(oracles.is_p2p(ft, fs, 1.0), abs=1e-7)
        assert float(is_p2p_loss(T(ft), T(ft), 1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_is_batch_mismatch(self):
        with pytest.raises(ValueError):
            is_p2p_loss(torch.zeros(2, 3, 4), torch.zeros(3, 3, 4), 1.0)

    def test_m_p2p_cases(self):
        rng = np.random.default_rng(12)
        ft, fs, e = (oracles.unit_rows(rng, 4, 3), oracles.unit_rows(rng, 4, 3), oracles.unit_rows(rng, 6, 3))
        assert float(m_p2p_loss(T(ft), T(ft), T(e), 0.1)) == pytest.approx(0.0, abs=1e-12)
        assert float(m_p2p_loss(T(ft), T(fs), T(e[:1]), 0.1)) == pytest.approx(0.0, abs=1e-12)
        assert float(m_p2p_loss(T(ft), T(fs), T(e), 0.4)) == pytest.approx(oracles.m_p2p(ft, fs, e, 0.4), abs=1e-8)

    def test_m_p2p_shape_errors(self):
        with pytest.raises(ValueError):
            m_p2p_loss(torch.zeros(4, 3), torch.zeros(4, 3), torch.zeros(6, 2), 0.1)
        with pytest.raises(ValueError):
            m_p2p_loss(torch.zeros(4, 3), torch.zeros(5, 3), torch.zeros(6, 3), 0.1)


class TestRDD:
    def test_cifar_weights(self):
        w = LossWeights(alpha=1.0, beta=0.1)
        assert rdd_loss({"cfd": 1.0, "is_p2p": 0.5, "m_p2p": 0.2}, w) == pytest.approx(1.52)

    def test_imagenet_weights(self):
        w = LossWeights(alpha=100.0, beta=0.1)
        assert rdd_loss({"cfd": 1.0, "is_p2p": 0.01, "m_p2p": 0.2}, w) == pytest.approx(2.02)

    def test_reduces_to_cfd(self):
        w = LossWeights(alpha=0.0, beta=0.0)
        assert rdd_loss({"cfd": 0.7, "is_p2p": 3.0, "m_p2p": 9.0}, w) == 0.7

    def test_missing_memory_term_is_zero(self):
        assert rdd_loss({"cfd": 0.7, "is_p2p": 0.1}, LossWeights()) == pytest.approx(0.8)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            rdd_loss({"cfd": -1.0, "is_p2p": 0.0, "m_p2p": 0.0}, LossWeights())

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(tau_mp2p=0.0)
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 4), a=st.integers(1, 16), c=st.integers(1, 8), v=st.integers(1, 16),
       tau=st.floats(0.1, 3.0), seed=st.integers(0, 2**31 - 1))
def test_losses_nonnegative(n, a, c, v, tau, seed):
    rng = np.random.default_rng(seed)
    ft, fs = T(oracles.unit_rows(rng, n, a, c)), T(oracles.unit_rows(rng, n, a, c))
    e = T(oracles.unit_rows(rng, v, c))
    assert float(is_p2p_loss(ft, fs, tau)) >= -1e-9
    assert float(m_p2p_loss(ft, fs, e, tau)) >= -1e-9
    assert float(ii_p2p_loss(spatial_relation(ft, ft), spatial_relation(fs, fs), tau)) >= -1e-9
    assert float(cfd_loss(ft.mean(1), fs.mean(1), tau)) >= -1e-9
    # zero at equality
    assert abs(float(is_p2p_loss(ft, ft, tau))) < 1e-8
    assert abs(float(m_p2p_loss(ft, ft, e, tau))) < 1e-8
    assert abs(float(cfd_loss(ft.mean(1), ft.mean(1), 1.0))) < 1e-8
