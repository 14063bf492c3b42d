"""Dual Gram matrices of network metrics and their empirical spectra.

The parameter-space metrics are Grams of gradient columns.  Rather than
materializing P-dimensional gradients, every matrix here is assembled in
the dual (sample-indexed) space by layerwise contraction of the forward
activations against the backpropagated signals
— the dual shares all non-zero eigenvalues with the primal metric, at a
tiny fraction of the memory.

Entry conventions: dual rows/columns are indexed ``(output k, sample n)``
flattened k-major, i.e. row ``k*N + n``, matching the block structure of
the outlier eigenvectors (one constant block per output).
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError, ParameterizationError, ShapeError
from .meanfield import NetworkConfig
from .network import NetworkInstance, SignalPack, backward, forward, initialize_network, sample_inputs, trial_seed
from .theory import EigStatsPrediction, GramKind, softmax_coeffs

__all__ = [
    "DualGram",
    "SpectrumReport",
    "EnsembleReport",
    "build_dual_fim",
    "build_dual_block",
    "apply_softmax_q",
    "build_dual_ntk",
    "build_dual_metric_a",
    "mean_subtract",
    "eigen_stats",
    "top_eigvec_alignment",
    "run_trial",
    "run_ensemble",
    "write_spectrum_csv",
    "write_summary_csv",
    "write_histogram_csv",
    "summary_row",
    "SUMMARY_COLUMNS",
]

HIST_BINS = 100
HIST_FLOOR_REL = 1e-12


@dataclass
class DualGram:
    """A sample-space Gram matrix sharing non-zero eigenvalues with its metric.

    ``primal_dim`` is the dimension of the underlying metric (parameter
    count for parameter-space kinds, total unit count for feature-space
    kinds, the sample count for the per-sample-normalized kernel) used to
    normalize eigenvalue sums.  ``trace_ref`` is the trace accumulated from
    per-column gradient norms during construction, kept for consistency
    checks.  ``n_outliers`` is the predicted count of separated large
    eigenvalues.
    """

    kind: GramKind
    matrix: np.ndarray
    n_samples: int
    n_outputs: int
    primal_dim: int
    trace_ref: float
    n_outliers: int
    output: int | None = None  # set for the per-output feature metric
    compact_primal: bool = False  # summed feature metric stored in unit space

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _check_pack(pack: SignalPack, net: NetworkInstance) -> None:
    if pack.deltas is None:
        raise ShapeError("signal pack has no backward signals; run backward() first")
    if len(pack.acts) != net.depth or len(pack.deltas) != net.depth:
        raise ShapeError("signal pack does not match the network depth")
    widths = net.cfg.layer_widths
    for l in range(net.depth):
        if pack.acts[l].shape[0] != widths[l]:
            raise ShapeError(f"activation width mismatch at layer {l}")


def _delta_gram(pack: SignalPack, l: int) -> np.ndarray:
    """Gram of backward signals at storage layer l, as a (CN, CN) matrix."""
    d = pack.deltas[l]
    C, M, N = d.shape
    D = d.transpose(1, 0, 2).reshape(M, C * N)
    return D.T @ D


def build_dual_fim(pack: SignalPack, net: NetworkInstance) -> DualGram:
    """Dual of the regression metric from layerwise contraction.

    Entry ((k,n),(k',m)) sums over layers the backward-signal overlap times
    the activation overlap (weight part) plus the backward-signal overlap
    alone (bias part), divided by the sample count.
    """
    _check_pack(pack, net)
    C, N = net.cfg.outputs, pack.n_samples
    F = np.zeros((C * N, C * N))
    trace = 0.0
    for l in range(net.depth):
        Gh = pack.acts[l].T @ pack.acts[l]
        F += _delta_gram(pack, l) * (np.tile(Gh, (C, C)) + 1.0)
        # independent trace path from per-column norms
        dn = np.sum(pack.deltas[l] ** 2, axis=1)  # (C, N)
        hn = np.sum(pack.acts[l] ** 2, axis=0)  # (N,)
        trace += float(np.sum(dn * (hn[None, :] + 1.0)))
    F /= N
    return DualGram(
        kind=GramKind("fim_mse"),
        matrix=F,
        n_samples=N,
        n_outputs=C,
        primal_dim=net.cfg.n_params,
        trace_ref=trace / N,
        n_outliers=C,
    )


def build_dual_block(pack: SignalPack, net: NetworkInstance, l: int) -> DualGram:
    """Dual of the layer-l diagonal block (weight-layer numbering 1..L)."""
    _check_pack(pack, net)
    if not 1 <= l <= net.depth:
        raise DomainError(f"block index must be in 1..{net.depth}, got {l}")
    C, N = net.cfg.outputs, pack.n_samples
    i = l - 1
    Gh = pack.acts[i].T @ pack.acts[i]
    F = _delta_gram(pack, i) * (np.tile(Gh, (C, C)) + 1.0) / N
    dn = np.sum(pack.deltas[i] ** 2, axis=1)
    hn = np.sum(pack.acts[i] ** 2, axis=0)
    trace = float(np.sum(dn * (hn[None, :] + 1.0))) / N
    return DualGram(
        kind=GramKind("fim_mse_block", l),
        matrix=F,
        n_samples=N,
        n_outputs=C,
        primal_dim=net.cfg.n_params_layer(l),
        trace_ref=trace,
        n_outliers=C,
    )


def _qsqrt_blocks(g: np.ndarray) -> np.ndarray:
    """Symmetric square roots of the per-sample softmax curvature blocks.

    Each block ``diag(g_n) - g_n g_n^T`` is PSD up to rounding; negative
    eigenvalues (>= -1e-12 analytically) are clamped at 0.
    """
    C, N = g.shape
    S = np.empty((N, C, C))
    for n in range(N):
        gn = g[:, n]
        Qn = np.diag(gn) - np.outer(gn, gn)
        lam, V = np.linalg.eigh(Qn)
        lam = np.clip(lam, 0.0, None)
        S[n] = (V * np.sqrt(lam)) @ V.T
    return S


def apply_softmax_q(dual: DualGram, g: np.ndarray) -> DualGram:
    """Symmetrized softmax-curvature weighting of a regression dual.

    Returns ``Q^{1/2} F* Q^{1/2}``, which shares eigenvalues with ``Q F*``
    but keeps the problem symmetric.  Accepts the full dual or a layer
    block.
    """
    if dual.kind.tag not in ("fim_mse", "fim_mse_block"):
        raise DomainError(f"softmax weighting applies to regression duals, got {dual.kind}")
    g = np.asarray(g, dtype=float)
    softmax_coeffs(g)  # validates the simplex columns
    C, N = dual.n_outputs, dual.n_samples
    if g.shape != (C, N):
        raise DomainError(f"softmax array must be ({C}, {N}), got {g.shape}")
    S = _qsqrt_blocks(g)
    F4 = dual.matrix.reshape(C, N, C, N)
    # (Q^{1/2} F Q^{1/2})[(k,n),(k',m)] = S_n[k,a] F[(a,n),(b,m)] S_m[b,k']
    T = np.einsum("nka,anbm->knbm", S, F4, optimize=True)
    out = np.einsum("knbm,mbl->knlm", T, S, optimize=True).reshape(C * N, C * N)
    # independent trace path: trace(Q F*) over the diagonal sample index
    trace = float(np.einsum("nab,anbn->", S @ S, F4, optimize=True))
    new_tag = "fim_cross" if dual.kind.tag == "fim_mse" else "fim_cross_block"
    return DualGram(
        kind=GramKind(new_tag, dual.kind.block),
        matrix=out,
        n_samples=N,
        n_outputs=C,
        primal_dim=dual.primal_dim,
        trace_ref=trace,
        n_outliers=C,
    )


def build_dual_ntk(pack: SignalPack, net: NetworkInstance, rescale: bool = False) -> DualGram:
    """Kernel Gram of the network under unit-variance parameter scaling.

    A standard-parameterization instance is accepted only with
    ``rescale=True``, which applies the kernel scaling (weight-layer terms
    multiplied by ``sigma_w2 / fan_in``, bias terms by ``sigma_b2``) to the
    gradients; the sampled weights themselves are identical either way.
    Entries are not divided by the sample count.
    """
    _check_pack(pack, net)
    if net.parameterization != "ntk" and not rescale:
        raise ParameterizationError(
            "network uses the standard parameterization; pass rescale=True "
            "to build the kernel Gram with rescaled gradients"
        )
    cfg = net.cfg
    C, N = cfg.outputs, pack.n_samples
    widths = cfg.layer_widths
    T = np.zeros((C * N, C * N))
    trace = 0.0
    for l in range(net.depth):
        Gh = pack.acts[l].T @ pack.acts[l]
        wscale = cfg.sigma_w2 / widths[l]
        T += _delta_gram(pack, l) * (np.tile(Gh, (C, C)) * wscale + cfg.sigma_b2)
        dn = np.sum(pack.deltas[l] ** 2, axis=1)
        hn = np.sum(pack.acts[l] ** 2, axis=0)
        trace += float(np.sum(dn * (wscale * hn[None, :] + cfg.sigma_b2)))
    return DualGram(
        kind=GramKind("ntk"),
        matrix=T,
        n_samples=N,
        n_outputs=C,
        primal_dim=N,
        trace_ref=trace,
        n_outliers=C,
    )


def build_dual_metric_a(
    pack: SignalPack, net: NetworkInstance, output: int | None = None
) -> DualGram:
    """Gram of gradients with respect to the input and hidden activations.

    With ``output=k`` returns the N x N dual of the single-output metric.
    Without it returns the summed metric over outputs, stored in whichever
    space is smaller: the CN x CN dual of the stacked gradient columns, or
    the unit-space Gram itself when the total unit count is smaller (both
    carry the same non-zero eigenvalues).
    """
    _check_pack(pack, net)
    cfg = net.cfg
    C, N = cfg.outputs, pack.n_samples
    Mh = sum(cfg.layer_widths[: cfg.depth])
    if output is not None:
        if not 0 <= output < C:
            raise DomainError(f"output index must be in 0..{C - 1}, got {output}")
        A = np.zeros((N, N))
        trace = 0.0
        for l in range(net.depth):
            z = net.weights[l].T @ pack.deltas[l][output]  # (M_l, N)
            A += z.T @ z
            trace += float(np.sum(z**2))
        return DualGram(
            kind=GramKind("metric_a"),
            matrix=A / N,
            n_samples=N,
            n_outputs=C,
            primal_dim=Mh,
            trace_ref=trace / N,
            n_outliers=1,
            output=output,
        )
    # summed metric: stack per-output gradient blocks
    Z = np.empty((Mh, C * N))
    row = 0
    for l in range(net.depth):
        Ml = cfg.layer_widths[l]
        zl = np.einsum("ji,kjn->ikn", net.weights[l], pack.deltas[l], optimize=True)
        Z[row : row + Ml] = zl.reshape(Ml, C * N)
        row += Ml
    trace = float(np.sum(Z**2)) / N
    compact = Mh < C * N
    mat = (Z @ Z.T if compact else Z.T @ Z) / N
    return DualGram(
        kind=GramKind("metric_a"),
        matrix=mat,
        n_samples=N,
        n_outputs=C,
        primal_dim=Mh,
        trace_ref=trace,
        n_outliers=C,
        compact_primal=compact,
    )


def mean_subtract(dual: DualGram) -> DualGram:
    """Center gradient columns within each output block.

    Equivalent to projecting out the per-output mean gradients, which
    removes the separated large eigenvalues.  Applies to the regression
    dual and the kernel Gram.
    """
    mapping = {"fim_mse": "fim_mse_mean_sub", "ntk": "ntk_mean_sub"}
    if dual.kind.tag not in mapping:
        raise DomainError(f"mean subtraction applies to fim_mse or ntk duals, got {dual.kind}")
    C, N = dual.n_outputs, dual.n_samples
    G = dual.matrix.reshape(C, N, C, N).copy()
    G -= G.mean(axis=1, keepdims=True)
    G -= G.mean(axis=3, keepdims=True)
    M = G.reshape(C * N, C * N)
    return DualGram(
        kind=GramKind(mapping[dual.kind.tag]),
        matrix=M,
        n_samples=N,
        n_outputs=C,
        primal_dim=dual.primal_dim,
        trace_ref=float(np.trace(M)),
        n_outliers=0,
    )


@dataclass
class SpectrumReport:
    """Empirical eigenvalue statistics of one dual Gram matrix."""

    kind: GramKind
    eigenvalues: np.ndarray  # descending
    mean: float
    second_moment: float
    lambda_max: float
    lambda_topk: np.ndarray  # top n_outliers + 1
    outlier_gap: float | None
    alignment: float | None
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    zero_count: int
    trials: int = 1


def _outlier_vectors(dual: DualGram) -> np.ndarray | None:
    """Predicted outlier eigenvector basis in the dual space, if defined."""
    C, N = dual.n_outputs, dual.n_samples
    blockwise = dual.kind.tag in (
        "fim_mse", "fim_mse_block", "fim_cross", "fim_cross_block", "ntk"
    ) or (dual.kind.tag == "metric_a" and dual.output is None and not dual.compact_primal)
    if blockwise:
        V = np.zeros((C * N, C))
        for k in range(C):
            V[k * N : (k + 1) * N, k] = 1.0 / np.sqrt(N)
        return V
    if dual.kind.tag == "metric_a" and dual.output is not None:
        return np.full((N, 1), 1.0 / np.sqrt(N))
    return None


def _histogram(eigs: np.ndarray, lam_max: float) -> tuple[np.ndarray, np.ndarray, int]:
    if lam_max <= 0:
        edges = np.array([0.0, 1.0])
        return edges, np.zeros(1, dtype=int), int(eigs.size)
    floor = HIST_FLOOR_REL * lam_max
    edges = np.geomspace(floor, lam_max, HIST_BINS + 1)
    edges[-1] = lam_max  # guard rounding so the max lands in the last bin
    inside = eigs[eigs > floor]
    counts, _ = np.histogram(inside, bins=edges)
    zero = int(eigs.size - inside.size)
    return edges, counts, zero


def top_eigvec_alignment(dual: DualGram) -> float:
    """Mean squared cosine of principal angles to the block-constant basis.

    Compares the top eigenspace (one vector per predicted outlier) of the
    dual against the per-output constant vectors; 1 means the subspaces
    coincide, and a random subspace scores about 1/dim.
    """
    V = _outlier_vectors(dual)
    if V is None:
        raise DomainError(f"no outlier basis defined for gram kind {dual.kind}")
    r = V.shape[1]
    sym = 0.5 * (dual.matrix + dual.matrix.T)
    _, vecs = np.linalg.eigh(sym)
    U = vecs[:, -r:]
    return float(np.sum((U.T @ V) ** 2) / r)


def eigen_stats(dual: DualGram, primal_dim: int | None = None) -> SpectrumReport:
    """Full symmetric eigendecomposition and summary statistics.

    Eigenvalue sums are normalized by the primal dimension; the implicit
    zero eigenvalues beyond the dual's size contribute nothing.  The
    spectrum histogram uses logarithmic bins spanning twelve decades below
    the maximum, with an explicit zero bucket for everything at or below
    the floor.
    """
    if primal_dim is None:
        primal_dim = dual.primal_dim
    if primal_dim <= 0:
        raise DomainError("primal dimension must be positive")
    sym = 0.5 * (dual.matrix + dual.matrix.T)
    try:
        eigs, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed for {dual.kind}") from exc
    eigs = eigs[::-1].copy()
    vecs = vecs[:, ::-1]
    lam_max = float(eigs[0])
    mean = float(np.sum(eigs) / primal_dim)
    second = float(np.sum(eigs**2) / primal_dim)
    k = dual.n_outliers
    topk = eigs[: k + 1].copy() if k > 0 else eigs[:1].copy()
    gap = None
    if k > 0 and len(eigs) > k and eigs[k] > 0:
        gap = float(eigs[k - 1] / eigs[k])
    V = _outlier_vectors(dual)
    alignment = None
    if V is not None and k > 0:
        U = vecs[:, :k]
        alignment = float(np.sum((U.T @ V[:, :k]) ** 2) / k)
    edges, counts, zero = _histogram(eigs, lam_max)
    return SpectrumReport(
        kind=dual.kind,
        eigenvalues=eigs,
        mean=mean,
        second_moment=second,
        lambda_max=lam_max,
        lambda_topk=topk,
        outlier_gap=gap,
        alignment=alignment,
        hist_edges=edges,
        hist_counts=counts,
        zero_count=zero,
        trials=1,
    )


@dataclass
class EnsembleReport:
    """Trial-averaged statistics for one Gram kind."""

    kind: GramKind
    trials: int
    mean: float
    mean_std: float
    second_moment: float
    second_moment_std: float
    lambda_max: float
    lambda_max_std: float
    alignment: float | None
    outlier_gap: float | None
    lambda_topk: np.ndarray
    per_trial: list[SpectrumReport] = field(repr=False, default_factory=list)

    @property
    def pooled_eigenvalues(self) -> np.ndarray:
        return np.concatenate([r.eigenvalues for r in self.per_trial])


def _aggregate(kind: GramKind, reports: list[SpectrumReport]) -> EnsembleReport:
    means = np.array([r.mean for r in reports])
    seconds = np.array([r.second_moment for r in reports])
    lmaxes = np.array([r.lambda_max for r in reports])
    aligns = [r.alignment for r in reports if r.alignment is not None]
    gaps = [r.outlier_gap for r in reports if r.outlier_gap is not None]
    k = len(reports[0].lambda_topk)
    topk = np.mean([r.lambda_topk[:k] for r in reports], axis=0)
    return EnsembleReport(
        kind=kind,
        trials=len(reports),
        mean=float(means.mean()),
        mean_std=float(means.std()),
        second_moment=float(seconds.mean()),
        second_moment_std=float(seconds.std()),
        lambda_max=float(lmaxes.mean()),
        lambda_max_std=float(lmaxes.std()),
        alignment=float(np.mean(aligns)) if aligns else None,
        outlier_gap=float(np.mean(gaps)) if gaps else None,
        lambda_topk=topk,
        per_trial=reports,
    )


def _build_for_kind(kind: GramKind, pack: SignalPack, net: NetworkInstance) -> DualGram:
    tag = kind.tag
    if tag == "fim_mse":
        return build_dual_fim(pack, net)
    if tag == "fim_mse_block":
        return build_dual_block(pack, net, kind.block)
    if tag == "fim_cross":
        return apply_softmax_q(build_dual_fim(pack, net), pack.softmax)
    if tag == "fim_cross_block":
        return apply_softmax_q(build_dual_block(pack, net, kind.block), pack.softmax)
    if tag == "ntk":
        return build_dual_ntk(pack, net, rescale=True)
    if tag == "ntk_mean_sub":
        return mean_subtract(build_dual_ntk(pack, net, rescale=True))
    if tag == "fim_mse_mean_sub":
        return mean_subtract(build_dual_fim(pack, net))
    if tag == "metric_a":
        return build_dual_metric_a(pack, net)
    raise DomainError(f"cannot build gram kind {kind}")


def run_trial(
    cfg: NetworkConfig, n_samples: int, kinds: list[GramKind], seed: int
) -> dict[str, SpectrumReport]:
    """Instantiate one network, one input batch, and report all kinds."""
    net = initialize_network(cfg, seed)
    x = sample_inputs(n_samples, cfg.input_dim, seed)
    pack = backward(net, forward(net, x))
    out = {}
    for kind in kinds:
        dual = _build_for_kind(kind, pack, net)
        out[str(kind)] = eigen_stats(dual)
    return out


def run_ensemble(
    cfg: NetworkConfig,
    n_samples: int,
    kinds: list[GramKind],
    trials: int,
    seed: int,
    threads: int = 1,
) -> dict[str, EnsembleReport]:
    """Average spectra over independently seeded trials.

    Trials run concurrently when ``threads > 1``; results are merged in
    trial order, so the output is independent of scheduling.
    """
    seeds = [trial_seed(seed, t) for t in range(trials)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: run_trial(cfg, n_samples, kinds, s), seeds))
    else:
        results = [run_trial(cfg, n_samples, kinds, s) for s in seeds]
    out = {}
    for kind in kinds:
        out[str(kind)] = _aggregate(kind, [r[str(kind)] for r in results])
    return out


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = [
    "kind", "M", "N", "C", "L",
    "mean_emp", "mean_theory", "s_emp", "s_theory",
    "lmax_emp", "lmax_theory_lo", "lmax_theory_hi",
    "alignment", "outlier_gap",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x) if np.isfinite(x) else "nan"
    return str(x)


def write_spectrum_csv(reports: list[SpectrumReport], fileobj: io.TextIOBase) -> None:
    """Per-trial eigenvalues: columns trial, index, eigenvalue."""
    w = csv.writer(fileobj, lineterminator="\n")
    w.writerow(["trial", "index", "eigenvalue"])
    for t, rep in enumerate(reports):
        for i, lam in enumerate(rep.eigenvalues):
            w.writerow([t, i, repr(float(lam))])


def summary_row(
    cfg: NetworkConfig,
    n_samples: int,
    ens: EnsembleReport,
    pred: EigStatsPrediction | None,
) -> list:
    lo = hi = None
    if pred is not None:
        if pred.lambda_max_point is not None:
            lo = hi = pred.lambda_max_point
        else:
            lo, hi = pred.lambda_max_lower, pred.lambda_max_upper
    return [
        str(ens.kind), cfg.width, n_samples, cfg.outputs, cfg.depth,
        ens.mean, (pred.mean if pred else None),
        ens.second_moment, (pred.second_moment if pred else None),
        ens.lambda_max, lo, hi,
        ens.alignment, ens.outlier_gap,
    ]


def write_summary_csv(rows: list[list], fileobj: io.TextIOBase, extra_columns: list[str] | None = None) -> None:
    w = csv.writer(fileobj, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS + (extra_columns or []))
    for row in rows:
        w.writerow([_fmt(x) for x in row])


def write_histogram_csv(ens: EnsembleReport, fileobj: io.TextIOBase) -> None:
    """Pooled log-binned histogram: columns bin_lo, bin_hi, count.

    The first row is the zero bucket (everything at or below the floor).
    """
    eigs = ens.pooled_eigenvalues
    lam_max = float(np.max(eigs)) if eigs.size else 0.0
    edges, counts, zero = _histogram(eigs, lam_max)
    w = csv.writer(fileobj, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    w.writerow([repr(0.0), repr(float(edges[0])), zero])
    for i, c in enumerate(counts):
        w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
