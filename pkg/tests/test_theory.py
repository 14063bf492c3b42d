"""Closed-form predictions: trivial substitutions and structural identities."""
import json

import numpy as np
import pytest

from fimspectra import (
    IDENTITY,
    RELU,
    TANH,
    GramKind,
    NetworkConfig,
    critical_learning_rate,
    gauss_hermite_rule,
    order_params,
    predict,
    predict_fim_block,
    predict_fim_cross,
    predict_fim_mse,
    predict_metric_a,
    predict_metric_a_block,
    predict_ntk,
    softmax_coeffs,
)
from fimspectra.errors import DomainError

RULE = gauss_hermite_rule()


def identity_cfg(M=100, C=2, depth=2):
    return NetworkConfig(depth=depth, width=M, outputs=C, sigma_w2=1.0, sigma_b2=0.0,
                         activations=(IDENTITY,))


@pytest.fixture(scope="module")
def id_op():
    return order_params(identity_cfg(), RULE)


class TestGramKind:
    def test_parse_roundtrip(self):
        for text in ("fim_mse", "ntk", "fim_mse_block:2", "metric_a_block:0"):
            assert str(GramKind.parse(text)) == text

    def test_block_required(self):
        with pytest.raises(DomainError):
            GramKind("fim_mse_block")
        with pytest.raises(DomainError):
            GramKind("fim_mse", 2)

    def test_unknown(self):
        with pytest.raises(DomainError):
            GramKind.parse("hessian")


class TestFimMse:
    def test_identity_mean(self, id_op):
        pred = predict_fim_mse(id_op, identity_cfg(), N=10)
        assert pred.mean == pytest.approx(2 * 2 / 100)

    def test_identity_lambda_max(self, id_op):
        pred = predict_fim_mse(id_op, identity_cfg(), N=10)
        # kappa2 = 0, so only the kappa1 / N term contributes
        assert pred.lambda_max_point == pytest.approx(1 * 100 * (0 + 2 / 10))
        assert pred.outlier_count == 2

    def test_json_record(self, id_op):
        pred = predict_fim_mse(id_op, identity_cfg(), N=10)
        rec = json.loads(pred.to_json())
        assert rec["kind"] == "fim_mse"
        assert rec["mean"] == pred.mean
        assert rec["bounds"] is None
        assert rec["outlier_count"] == 2

    def test_depth_monotonicity_relu(self):
        # each layer adds a positive term to alpha * kappa, so the layer-sum
        # constants and lambda_max grow with depth (the per-parameter mean
        # does not: the 1/alpha normalization grows just as fast)
        sums1, sums2, lmaxes = [], [], []
        for L in (2, 3, 4, 5):
            cfg = NetworkConfig(depth=L, width=100, outputs=2, sigma_w2=2.0,
                                sigma_b2=0.1, activations=(RELU,))
            op = order_params(cfg, RULE)
            sums1.append(op.alpha * op.kappa1)
            sums2.append(op.alpha * op.kappa2)
            lmaxes.append(predict_fim_mse(op, cfg, N=10).lambda_max_point)
        assert np.all(np.diff(sums1) > 0)
        assert np.all(np.diff(sums2) > 0)
        assert np.all(np.diff(lmaxes) > 0)


class TestFimBlock:
    def test_identity_first_block(self, id_op):
        pred = predict_fim_block(id_op, identity_cfg(), N=10, l=1)
        assert pred.mean == pytest.approx(1 * 1 / 1 * 2 / 100)

    def test_out_of_range(self, id_op):
        with pytest.raises(DomainError):
            predict_fim_block(id_op, identity_cfg(), N=10, l=3)
        with pytest.raises(DomainError):
            predict_fim_block(id_op, identity_cfg(), N=10, l=0)

    @pytest.mark.parametrize("act,sw2,sb2,L,C", [
        (TANH, 3.0, 0.64, 3, 10),
        (RELU, 2.0, 0.1, 4, 3),
        (IDENTITY, 1.0, 0.1, 2, 2),
    ])
    def test_block_trace_additivity(self, act, sw2, sb2, L, C):
        M, N = 200, 25
        cfg = NetworkConfig(depth=L, width=M, outputs=C, sigma_w2=sw2, sigma_b2=sb2,
                            activations=(act,))
        op = order_params(cfg, RULE)
        total = predict_fim_mse(op, cfg, N).mean * cfg.alpha * M**2
        ratios = cfg.width_ratios
        acc = 0.0
        for l in range(1, L + 1):
            alpha_l = ratios[l] if l < L else C / M
            P_l = alpha_l * ratios[l - 1] * M**2
            acc += predict_fim_block(op, cfg, N, l).mean * P_l
        assert acc == pytest.approx(total, abs=1e-10 * max(1.0, total))


class TestSoftmaxCoeffs:
    def test_uniform_two_class(self):
        g = np.full((2, 5), 0.5)
        c = softmax_coeffs(g)
        assert c.beta1 == pytest.approx(0.5)
        assert c.beta4 == pytest.approx(0.25)

    def test_one_hot_all_zero(self):
        g = np.zeros((3, 4))
        g[0, :2] = 1.0
        g[2, 2:] = 1.0
        c = softmax_coeffs(g)
        assert (c.beta1, c.beta2, c.beta3, c.beta4) == (0.0, 0.0, 0.0, 0.0)

    def test_brute_force_example(self):
        # frozen hand/brute-force evaluation of the four sums
        g = np.array([[0.8, 0.6], [0.2, 0.4]])
        c = softmax_coeffs(g)
        assert c.beta1 == pytest.approx(0.4)
        assert c.beta2 == pytest.approx(0.0768)
        assert c.beta3 == pytest.approx(0.1664)
        assert c.beta4 == pytest.approx(0.2)

    def test_brute_force_matches_direct_sums(self):
        rng = np.random.default_rng(7)
        z = rng.standard_normal((4, 6))
        g = np.exp(z) / np.exp(z).sum(axis=0)
        c = softmax_coeffs(g)
        C, N = g.shape
        b2 = 0.0
        for n in range(N):
            for m in range(N):
                if m == n:
                    continue
                s1 = sum(g[k, m] * g[k, n] for k in range(C))
                s2 = sum(g[k, m] ** 2 * g[k, n] for k in range(C))
                b2 += (s1 - 2 * s2 + s1**2) / N**2
        assert c.beta2 == pytest.approx(b2, rel=1e-12)

    def test_invalid_simplex(self):
        with pytest.raises(DomainError):
            softmax_coeffs(np.array([[0.7, 0.2], [0.2, 0.2]]))
        with pytest.raises(DomainError):
            softmax_coeffs(np.array([[1.2, 0.5], [-0.2, 0.5]]))

    def test_coefficient_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            C = rng.integers(2, 6)
            z = rng.standard_normal((C, 8))
            g = np.exp(z) / np.exp(z).sum(axis=0)
            c = softmax_coeffs(g)
            assert 0 <= c.beta1 <= 1 - 1 / C + 1e-12
            assert 0 <= c.beta4 <= 0.25 + 1e-12


class TestFimCross:
    def test_one_hot_degenerate(self, id_op):
        g = np.zeros((2, 4))
        g[0] = 1.0
        pred = predict_fim_cross(id_op, identity_cfg(), 4, softmax_coeffs(g))
        assert pred.mean == 0.0
        assert pred.lambda_max_lower == 0.0
        assert pred.lambda_max_upper == 0.0

    def test_dominated_by_regression_mean(self):
        cfg = NetworkConfig(depth=3, width=300, outputs=5, sigma_w2=3.0, sigma_b2=0.64,
                            activations=(TANH,))
        op = order_params(cfg, RULE)
        rng = np.random.default_rng(3)
        for _ in range(10):
            z = rng.standard_normal((5, 20))
            g = np.exp(z) / np.exp(z).sum(axis=0)
            cross = predict_fim_cross(op, cfg, 20, softmax_coeffs(g))
            mse = predict_fim_mse(op, cfg, 20)
            assert cross.mean <= mse.mean
            assert cross.lambda_max_lower <= mse.lambda_max_point + 1e-12

    def test_bounds_ordered(self, id_op):
        g = np.full((2, 6), 0.5)
        pred = predict_fim_cross(id_op, identity_cfg(), 6, softmax_coeffs(g))
        assert pred.lambda_max_lower <= pred.lambda_max_upper
        assert pred.outlier_count == 2


class TestNtk:
    def test_identity_mean_any_width(self):
        for M in (10, 100, 1000):
            cfg = identity_cfg(M=M)
            op = order_params(cfg, RULE)
            pred = predict_ntk(op, cfg, N=5)
            assert pred.mean == pytest.approx(4.0)

    def test_single_sample_lambda(self, id_op):
        pred = predict_ntk(id_op, identity_cfg(), N=1)
        assert pred.lambda_max_point == pytest.approx(2.0)

    def test_width_independence_exact(self):
        cfg_ref = NetworkConfig(depth=3, width=10, outputs=3, sigma_w2=3.0, sigma_b2=0.64,
                                activations=(TANH,))
        op = order_params(cfg_ref, RULE)
        ref = predict_ntk(op, cfg_ref, N=50)
        for M in (100, 1000):
            cfg = NetworkConfig(depth=3, width=M, outputs=3, sigma_w2=3.0, sigma_b2=0.64,
                                activations=(TANH,))
            pred = predict_ntk(order_params(cfg, RULE), cfg, N=50)
            assert pred.mean == ref.mean
            assert pred.second_moment == ref.second_moment
            assert pred.lambda_max_point == ref.lambda_max_point


class TestMetricA:
    def test_identity_per_output(self, id_op):
        pred = predict_metric_a(id_op, identity_cfg(), N=10, per_output=True)
        assert pred.mean == pytest.approx(1.0 / 100)
        assert pred.outlier_count == 1

    def test_single_sample_lambda(self, id_op):
        pred = predict_metric_a(id_op, identity_cfg(), N=1, per_output=True)
        assert pred.lambda_max_point == pytest.approx(2.0 * 1.0)  # alphat * kappat1

    def test_summed_scales_mean_not_max(self, id_op):
        per = predict_metric_a(id_op, identity_cfg(), N=10, per_output=True)
        summed = predict_metric_a(id_op, identity_cfg(), N=10, per_output=False)
        assert summed.mean == pytest.approx(2 * per.mean)
        assert summed.second_moment == pytest.approx(2 * per.second_moment)
        assert summed.lambda_max_point == per.lambda_max_point
        assert summed.outlier_count == 2

    def test_block_identity(self, id_op):
        pred = predict_metric_a_block(id_op, identity_cfg(), N=10, l=0)
        assert pred.mean == pytest.approx(1.0 / 100)
        single = predict_metric_a_block(id_op, identity_cfg(), N=1, l=1)
        assert single.lambda_max_point == pytest.approx(1.0)  # sigma_w2 * qtil1

    def test_block_range(self, id_op):
        with pytest.raises(DomainError):
            predict_metric_a_block(id_op, identity_cfg(), N=10, l=2)


class TestMeanSubKinds:
    def test_flagged_qualitative(self, id_op):
        for tag in ("fim_mse_mean_sub", "ntk_mean_sub"):
            pred = predict(GramKind(tag), id_op, identity_cfg(), 10)
            assert pred.outlier_count == 0
            assert np.isnan(pred.mean)
            assert pred.lambda_max is None
            assert "no closed form" in pred.note


class TestCriticalLearningRate:
    def test_values(self, id_op):
        pred = predict_fim_mse(id_op, identity_cfg(), N=10)  # lambda = 20
        assert critical_learning_rate(pred) == pytest.approx(0.1)

    def test_uses_upper_bound_for_intervals(self, id_op):
        g = np.full((2, 6), 0.5)
        pred = predict_fim_cross(id_op, identity_cfg(), 6, softmax_coeffs(g))
        assert critical_learning_rate(pred) == pytest.approx(2 / pred.lambda_max_upper)

    def test_zero_lambda_rejected(self, id_op):
        g = np.zeros((2, 4))
        g[0] = 1.0
        pred = predict_fim_cross(id_op, identity_cfg(), 4, softmax_coeffs(g))
        with pytest.raises(DomainError):
            critical_learning_rate(pred)
