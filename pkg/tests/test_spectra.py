"""Dual Gram construction against explicit-Jacobian and finite-difference oracles."""
import dataclasses
import io

import numpy as np
import pytest

from fimspectra import (
    IDENTITY,
    RELU,
    TANH,
    DualGram,
    GramKind,
    NetworkConfig,
    apply_softmax_q,
    backward,
    build_dual_block,
    build_dual_fim,
    build_dual_metric_a,
    build_dual_ntk,
    eigen_stats,
    forward,
    initialize_network,
    mean_subtract,
    run_ensemble,
    sample_inputs,
    top_eigvec_alignment,
)
from fimspectra.errors import DomainError, ParameterizationError, ShapeError
from fimspectra.spectra import write_histogram_csv, write_spectrum_csv


def tiny(seed=0, depth=3, width=6, outputs=3, n=4, act=TANH, sw2=1.5, sb2=0.2,
         parameterization="standard"):
    cfg = NetworkConfig(depth=depth, width=width, outputs=outputs,
                        sigma_w2=sw2, sigma_b2=sb2, activations=(act,))
    net = initialize_network(cfg, seed, parameterization)
    x = sample_inputs(n, cfg.input_dim, seed)
    pack = backward(net, forward(net, x))
    return net, x, pack


def explicit_jacobian(net, pack, ntk_scaling=False):
    """P x CN gradient matrix assembled coordinate by coordinate."""
    cfg = net.cfg
    C, N = cfg.outputs, pack.n_samples
    widths = cfg.layer_widths
    cols = []
    for k in range(C):
        for n in range(N):
            col = []
            for l in range(cfg.depth):
                d = pack.deltas[l][k, :, n]
                h = pack.acts[l][:, n]
                gw = np.outer(d, h)
                gb = d.copy()
                if ntk_scaling:
                    gw *= np.sqrt(cfg.sigma_w2 / widths[l])
                    gb *= np.sqrt(cfg.sigma_b2)
                col.append(gw.ravel())
                col.append(gb)
            cols.append(np.concatenate(col))
    return np.stack(cols, axis=1)


def forward_from_layer(net, h, layer):
    """Run the network from the given activations of `layer` upward."""
    for l in range(layer, net.depth):
        u = net.weights[l] @ h + net.biases[l][:, None]
        h = net.cfg.activations[l](u) if l < net.depth - 1 else u
    return h


class TestDualFimOracle:
    @pytest.mark.parametrize("seed,act,depth,width,outputs,n", [
        (0, TANH, 3, 6, 3, 4),
        (1, RELU, 2, 8, 2, 3),
        (2, IDENTITY, 3, 5, 1, 4),
        (3, TANH, 3, 4, 3, 2),
    ])
    def test_matches_explicit_jacobian(self, seed, act, depth, width, outputs, n):
        net, x, pack = tiny(seed, depth, width, outputs, n, act)
        J = explicit_jacobian(net, pack)
        oracle = J.T @ J / n
        dual = build_dual_fim(pack, net)
        assert np.max(np.abs(dual.matrix - oracle)) < 1e-10
        assert dual.primal_dim == net.cfg.n_params == J.shape[0]

    def test_duplicate_samples_are_rank_deficient(self):
        net, x, _ = tiny(5, n=3)
        x[:, 1] = x[:, 0]
        pack = backward(net, forward(net, x))
        dual = build_dual_fim(pack, net)
        N = 3
        for k in range(net.cfg.outputs):
            assert np.allclose(dual.matrix[k * N + 0], dual.matrix[k * N + 1], atol=1e-12)
        eigs = np.linalg.eigvalsh(dual.matrix)
        assert eigs[0] < 1e-10 * eigs[-1]

    def test_trace_consistency(self):
        net, _, pack = tiny(6)
        dual = build_dual_fim(pack, net)
        assert np.trace(dual.matrix) == pytest.approx(dual.trace_ref, rel=1e-8)

    def test_symmetry_and_psd(self):
        net, _, pack = tiny(7)
        dual = build_dual_fim(pack, net)
        assert np.max(np.abs(dual.matrix - dual.matrix.T)) < 1e-10
        eigs = np.linalg.eigvalsh(dual.matrix)
        assert eigs[0] >= -1e-8 * eigs[-1]

    def test_requires_backward(self):
        net, x, _ = tiny(0)
        with pytest.raises(ShapeError):
            build_dual_fim(forward(net, x), net)


class TestDualBlocks:
    def test_blocks_sum_to_full(self):
        net, _, pack = tiny(8)
        full = build_dual_fim(pack, net).matrix
        acc = np.zeros_like(full)
        for l in range(1, net.depth + 1):
            acc += build_dual_block(pack, net, l).matrix
        assert np.max(np.abs(acc - full)) < 1e-10

    def test_block_against_jacobian(self):
        net, _, pack = tiny(9, depth=2, width=5, outputs=2, n=3)
        J = explicit_jacobian(net, pack)
        P1 = net.cfg.layer_widths[1] * net.cfg.layer_widths[0] + net.cfg.layer_widths[1]
        oracle = J[:P1].T @ J[:P1] / 3
        dual = build_dual_block(pack, net, 1)
        assert np.max(np.abs(dual.matrix - oracle)) < 1e-10
        assert dual.primal_dim == P1

    def test_range_checked(self):
        net, _, pack = tiny(0)
        with pytest.raises(DomainError):
            build_dual_block(pack, net, 0)
        with pytest.raises(DomainError):
            build_dual_block(pack, net, 4)


class TestSoftmaxQ:
    def test_one_hot_yields_zero(self):
        net, _, pack = tiny(10, outputs=3, n=4)
        g = np.zeros((3, 4))
        g[1] = 1.0
        dual = apply_softmax_q(build_dual_fim(pack, net), g)
        assert np.max(np.abs(dual.matrix)) < 1e-12

    def test_uniform_two_class_blocks(self):
        from fimspectra.spectra import _qsqrt_blocks

        g = np.full((2, 3), 0.5)
        S = _qsqrt_blocks(g)
        Q = S[0] @ S[0]
        assert np.allclose(Q, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-12)
        assert np.linalg.eigvalsh(Q)[-1] == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetrized_eigenvalues_match_nonsymmetric(self, seed):
        net, _, pack = tiny(seed, outputs=2, n=4)
        fdual = build_dual_fim(pack, net)
        g = pack.softmax
        sym = apply_softmax_q(fdual, g)
        C, N = 2, 4
        Q = np.zeros((C * N, C * N))
        for n in range(N):
            gn = g[:, n]
            Qn = np.diag(gn) - np.outer(gn, gn)
            idx = [k * N + n for k in range(C)]
            Q[np.ix_(idx, idx)] = Qn
        # nonsymmetric eigensolver oracle on Q F*
        ref = np.sort(np.real(np.linalg.eigvals(Q @ fdual.matrix)))
        got = np.sort(np.linalg.eigvalsh(sym.matrix))
        assert np.max(np.abs(ref - got)) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_interlacing_domination(self, seed):
        net, _, pack = tiny(seed, outputs=3, n=4)
        fdual = build_dual_fim(pack, net)
        cross = apply_softmax_q(fdual, pack.softmax)
        lf = np.sort(np.linalg.eigvalsh(fdual.matrix))[::-1]
        lx = np.sort(np.linalg.eigvalsh(cross.matrix))[::-1]
        assert np.all(lx <= lf + 1e-10)

    def test_invalid_simplex_rejected(self):
        net, _, pack = tiny(0)
        bad = np.full((3, 4), 0.5)
        with pytest.raises(DomainError):
            apply_softmax_q(build_dual_fim(pack, net), bad)


class TestNtk:
    @pytest.mark.parametrize("seed", [0, 4])
    def test_matches_explicit_jacobian(self, seed):
        net, _, pack = tiny(seed, parameterization="ntk", sw2=2.0, sb2=0.3)
        J = explicit_jacobian(net, pack, ntk_scaling=True)
        oracle = J.T @ J
        dual = build_dual_ntk(pack, net)
        assert np.max(np.abs(dual.matrix - oracle)) < 1e-10
        assert dual.primal_dim == pack.n_samples

    def test_standard_requires_rescale(self):
        net, _, pack = tiny(0)
        with pytest.raises(ParameterizationError):
            build_dual_ntk(pack, net)
        dual = build_dual_ntk(pack, net, rescale=True)
        assert dual.kind == GramKind("ntk")

    def test_identity_diag_width_independent(self):
        for M in (50, 500):
            cfg = NetworkConfig(depth=2, width=M, outputs=2, sigma_w2=1.0, sigma_b2=0.0,
                                activations=(IDENTITY,))
            net = initialize_network(cfg, 11, "ntk")
            pack = backward(net, forward(net, sample_inputs(10, M, 11)))
            diag = np.diag(build_dual_ntk(pack, net).matrix)
            # alpha * kappa1' = 2 for the unit-variance linear network
            assert np.mean(diag) == pytest.approx(2.0, rel=0.15)


class TestMetricA:
    def test_per_output_matches_assembled_gradients(self):
        net, _, pack = tiny(12, outputs=2, n=3)
        for k in range(2):
            dual = build_dual_metric_a(pack, net, output=k)
            G = np.vstack([net.weights[l].T @ pack.deltas[l][k] for l in range(net.depth)])
            oracle = G.T @ G / 3
            assert np.max(np.abs(dual.matrix - oracle)) < 1e-10

    def test_per_output_matches_finite_differences(self):
        net, x, pack = tiny(13, depth=2, width=4, outputs=2, n=3, act=TANH)
        k, eps = 0, 1e-6
        grads = []  # activation-space gradients per sample, stacked layers
        for n in range(3):
            parts = []
            for l in range(net.depth):
                h = pack.acts[l]
                gl = np.zeros(h.shape[0])
                for i in range(h.shape[0]):
                    hp = h.copy()
                    hp[i, n] += eps
                    fp = forward_from_layer(net, hp, l)[k, n]
                    hm = h.copy()
                    hm[i, n] -= eps
                    fm = forward_from_layer(net, hm, l)[k, n]
                    gl[i] = (fp - fm) / (2 * eps)
                parts.append(gl)
            grads.append(np.concatenate(parts))
        G = np.stack(grads, axis=1)
        dual = build_dual_metric_a(pack, net, output=k)
        assert np.max(np.abs(dual.matrix - G.T @ G / 3)) < 1e-6

    def test_identity_two_layer_by_hand(self):
        cfg = NetworkConfig(depth=2, width=2, outputs=1, sigma_w2=1.0, sigma_b2=0.1,
                            activations=(IDENTITY,))
        net = initialize_network(cfg, 14)
        x = sample_inputs(3, 2, 14)
        pack = backward(net, forward(net, x))
        W1, W2 = net.weights
        g0 = W1.T @ W2.T[:, [0]]  # input-layer gradient, constant in the sample
        g1 = W2.T[:, [0]]
        expected = float((g0.T @ g0 + g1.T @ g1).item()) / 3 * np.ones((3, 3))
        dual = build_dual_metric_a(pack, net, output=0)
        assert np.allclose(dual.matrix, expected, atol=1e-12)

    def test_summed_representations_share_spectrum(self):
        # unit space smaller than sample space and vice versa
        for width, n in [(4, 6), (12, 2)]:
            net, _, pack = tiny(15, width=width, outputs=2, n=n)
            dual = build_dual_metric_a(pack, net)
            Mh = sum(net.cfg.layer_widths[: net.depth])
            assert dual.compact_primal == (Mh < 2 * n)
            # explicit stacked-column dual as the oracle
            Z = np.hstack([
                np.vstack([net.weights[l].T @ pack.deltas[l][k] for l in range(net.depth)])
                for k in range(2)
            ])
            ref = np.sort(np.linalg.eigvalsh(Z.T @ Z / n))[::-1]
            got = np.sort(np.linalg.eigvalsh(dual.matrix))[::-1]
            r = min(len(ref), len(got))
            assert np.allclose(ref[:r], got[:r], atol=1e-10)

    def test_output_range(self):
        net, _, pack = tiny(0)
        with pytest.raises(DomainError):
            build_dual_metric_a(pack, net, output=5)


class TestMeanSubtract:
    def test_identical_columns_vanish(self):
        net, x, _ = tiny(16, n=4)
        x[:] = x[:, [0]]  # all samples identical
        pack = backward(net, forward(net, x))
        dual = mean_subtract(build_dual_fim(pack, net))
        assert np.max(np.abs(dual.matrix)) < 1e-10

    def test_idempotent(self):
        net, _, pack = tiny(17)
        once = mean_subtract(build_dual_fim(pack, net))
        C, N = once.n_outputs, once.n_samples
        G = once.matrix.reshape(C, N, C, N).copy()
        G -= G.mean(axis=1, keepdims=True)
        G -= G.mean(axis=3, keepdims=True)
        assert np.max(np.abs(G.reshape(C * N, C * N) - once.matrix)) < 1e-12

    def test_kind_mapping_and_domain(self):
        net, _, pack = tiny(18)
        fdual = build_dual_fim(pack, net)
        assert mean_subtract(fdual).kind == GramKind("fim_mse_mean_sub")
        ntk = build_dual_ntk(pack, net, rescale=True)
        assert mean_subtract(ntk).kind == GramKind("ntk_mean_sub")
        with pytest.raises(DomainError):
            mean_subtract(mean_subtract(fdual))


class TestEigenStats:
    def _diag_dual(self):
        return DualGram(
            kind=GramKind("fim_mse"), matrix=np.diag([3.0, 1.0, 0.0]),
            n_samples=3, n_outputs=1, primal_dim=10, trace_ref=4.0, n_outliers=1,
        )

    def test_diagonal_example(self):
        rep = eigen_stats(self._diag_dual())
        assert rep.mean == pytest.approx(0.4)
        assert rep.second_moment == pytest.approx(1.0)
        assert rep.lambda_max == 3.0

    def test_primal_dim_override(self):
        rep = eigen_stats(self._diag_dual(), primal_dim=4)
        assert rep.mean == pytest.approx(1.0)

    def test_outlier_gap(self):
        rep = eigen_stats(self._diag_dual())
        assert rep.outlier_gap == pytest.approx(3.0)
        assert list(rep.lambda_topk) == [3.0, 1.0]

    def test_histogram_partition(self):
        net, _, pack = tiny(19)
        rep = eigen_stats(build_dual_fim(pack, net))
        assert rep.hist_counts.sum() + rep.zero_count == rep.eigenvalues.size
        assert rep.hist_edges[-1] >= rep.lambda_max * (1 - 1e-12)

    def test_duplicate_sample_zero_eigenvalue(self):
        net, x, _ = tiny(20, n=3)
        x[:, 2] = x[:, 1]
        pack = backward(net, forward(net, x))
        rep = eigen_stats(build_dual_fim(pack, net))
        assert rep.eigenvalues[-1] < 1e-10 * rep.lambda_max


class TestAlignment:
    def test_constructed_outlier_structure(self):
        C, N = 3, 20
        rng = np.random.default_rng(0)
        V = np.zeros((C * N, C))
        for k in range(C):
            V[k * N : (k + 1) * N, k] = 1 / np.sqrt(N)
        noise = rng.standard_normal((C * N, C * N)) * 0.01
        mat = 100 * V @ V.T + noise @ noise.T
        dual = DualGram(kind=GramKind("fim_mse"), matrix=mat, n_samples=N, n_outputs=C,
                        primal_dim=100, trace_ref=float(np.trace(mat)), n_outliers=C)
        assert top_eigvec_alignment(dual) > 0.99

    def test_structureless_matches_random_subspace_oracle(self):
        C, N = 3, 40
        rng = np.random.default_rng(1)
        # sampled oracle: expected overlap of a random C-dim subspace in CN dims
        dim = C * N
        samples = []
        for _ in range(300):
            Q, _ = np.linalg.qr(rng.standard_normal((dim, C)))
            V = np.zeros((dim, C))
            for k in range(C):
                V[k * N : (k + 1) * N, k] = 1 / np.sqrt(N)
            samples.append(np.sum((Q.T @ V) ** 2) / C)
        oracle = float(np.mean(samples))
        # structureless Wishart duals
        scores = []
        for s in range(40):
            X = np.random.default_rng(100 + s).standard_normal((dim, 2 * dim))
            mat = X @ X.T / (2 * dim)
            dual = DualGram(kind=GramKind("fim_mse"), matrix=mat, n_samples=N, n_outputs=C,
                            primal_dim=dim, trace_ref=float(np.trace(mat)), n_outliers=C)
            scores.append(top_eigvec_alignment(dual))
        assert np.mean(scores) == pytest.approx(oracle, rel=0.5)
        assert np.mean(scores) < 10 * oracle


class TestEnsemble:
    def test_threaded_matches_serial(self):
        cfg = NetworkConfig(depth=2, width=30, outputs=2, sigma_w2=1.5, sigma_b2=0.2,
                            activations=(TANH,))
        kinds = [GramKind("fim_mse"), GramKind("ntk")]
        serial = run_ensemble(cfg, 8, kinds, trials=4, seed=3, threads=1)
        threaded = run_ensemble(cfg, 8, kinds, trials=4, seed=3, threads=3)
        for key in serial:
            assert serial[key].mean == threaded[key].mean
            assert serial[key].lambda_max == threaded[key].lambda_max
            for a, b in zip(serial[key].per_trial, threaded[key].per_trial):
                assert np.array_equal(a.eigenvalues, b.eigenvalues)

    def test_csv_writers(self):
        cfg = NetworkConfig(depth=2, width=20, outputs=2, sigma_w2=1.5, sigma_b2=0.2,
                            activations=(TANH,))
        ens = run_ensemble(cfg, 5, [GramKind("fim_mse")], trials=2, seed=0)["fim_mse"]
        buf = io.StringIO()
        write_spectrum_csv(ens.per_trial, buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "trial,index,eigenvalue"
        assert len(lines) == 1 + 2 * 10  # 2 trials x CN = 10 eigenvalues
        buf = io.StringIO()
        write_histogram_csv(ens, buf)
        rows = buf.getvalue().strip().splitlines()
        assert rows[0] == "bin_lo,bin_hi,count"
        total = sum(int(r.split(",")[2]) for r in rows[1:])
        assert total == 20
