"""Closed-form eigenvalue-statistics predictions for the dual Gram kinds.

For a P x P metric with eigenvalues ``lambda_i`` the statistics are the
mean ``sum(lambda) / P``, the second moment ``sum(lambda**2) / P`` and the
maximum.  The kernel ("ntk") statistics are normalized per sample instead,
i.e. divided by N, which is what makes them independent of the width.

Where the asymptotic result is an equality the prediction carries a point
value for the maximum; for the softmax-curvature metric it carries a
lower/upper bound pair.  Mean-subtracted kinds have no closed form beyond
"the outliers are gone and the edge is O(1)", and are flagged as such.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .meanfield import NetworkConfig, OrderParams

__all__ = [
    "GramKind",
    "EigStatsPrediction",
    "SoftmaxCoeffs",
    "softmax_coeffs",
    "predict_fim_mse",
    "predict_fim_block",
    "predict_fim_cross",
    "predict_ntk",
    "predict_metric_a",
    "predict_metric_a_block",
    "predict",
    "critical_learning_rate",
]


@dataclass(frozen=True)
class GramKind:
    """A Gram-matrix family, optionally restricted to one layer block.

    Block indices follow the weight-layer numbering (1..L) for the
    parameter-space kinds and the activation-layer numbering (0..L-1) for
    the feature-space kinds.
    """

    tag: str
    block: int | None = None

    _TAGS = (
        "fim_mse",
        "fim_mse_block",
        "fim_cross",
        "fim_cross_block",
        "ntk",
        "ntk_mean_sub",
        "metric_a",
        "metric_a_block",
        "fim_mse_mean_sub",
    )

    def __post_init__(self):
        if self.tag not in self._TAGS:
            raise DomainError(f"unknown gram kind {self.tag!r}")
        if self.tag.endswith("_block") and self.block is None:
            raise DomainError(f"{self.tag} requires a block index")
        if not self.tag.endswith("_block") and self.block is not None:
            raise DomainError(f"{self.tag} does not take a block index")

    def __str__(self):
        return self.tag if self.block is None else f"{self.tag}:{self.block}"

    @classmethod
    def parse(cls, text: str) -> "GramKind":
        text = text.strip().lower()
        if ":" in text:
            tag, _, idx = text.partition(":")
            try:
                return cls(tag, int(idx))
            except ValueError as exc:
                raise DomainError(f"bad block index in gram kind {text!r}") from exc
        return cls(text)


FIM_MSE = GramKind("fim_mse")
FIM_CROSS = GramKind("fim_cross")
NTK = GramKind("ntk")
NTK_MEAN_SUB = GramKind("ntk_mean_sub")
METRIC_A = GramKind("metric_a")
FIM_MSE_MEAN_SUB = GramKind("fim_mse_mean_sub")


@dataclass(frozen=True)
class EigStatsPrediction:
    """Predicted eigenvalue statistics for one Gram kind.

    ``lambda_max_point`` is set when the asymptotic maximum is an equality;
    ``lambda_max_lower``/``lambda_max_upper`` when only bounds are known.
    ``outlier_count`` is the number of large separated eigenvalues.
    """

    kind: GramKind
    mean: float
    second_moment: float
    lambda_max_point: float | None = None
    lambda_max_lower: float | None = None
    lambda_max_upper: float | None = None
    outlier_count: int = 0
    note: str = ""

    def __post_init__(self):
        # power-mean consistency; does not apply to the per-sample-normalized
        # kernel statistics, whose mean keeps a factor of the output count
        if not self.kind.tag.startswith("ntk") and math.isfinite(self.mean) and math.isfinite(self.second_moment):
            if self.mean > math.sqrt(max(self.second_moment, 0.0)) * (1 + 1e-9) + 1e-12:
                raise DomainError("mean exceeds sqrt(second moment)")
        if (
            self.lambda_max_lower is not None
            and self.lambda_max_upper is not None
            and self.lambda_max_lower > self.lambda_max_upper + 1e-12
        ):
            raise DomainError("lambda_max lower bound exceeds upper bound")

    @property
    def lambda_max(self) -> float | None:
        """Best available value for the largest eigenvalue."""
        if self.lambda_max_point is not None:
            return self.lambda_max_point
        return self.lambda_max_upper

    def to_json_dict(self) -> dict:
        bounds = None
        if self.lambda_max_lower is not None or self.lambda_max_upper is not None:
            bounds = [self.lambda_max_lower, self.lambda_max_upper]
        return {
            "kind": str(self.kind),
            "mean": self.mean,
            "second_moment": self.second_moment,
            "lambda_max": self.lambda_max_point,
            "bounds": bounds,
            "outlier_count": self.outlier_count,
            **({"note": self.note} if self.note else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


@dataclass(frozen=True)
class SoftmaxCoeffs:
    """Moment coefficients of a batch of softmax outputs."""

    beta1: float
    beta2: float
    beta3: float
    beta4: float


def softmax_coeffs(g: np.ndarray) -> SoftmaxCoeffs:
    """Compute the four softmax moment coefficients from a C x N array.

    Each column of ``g`` must lie on the probability simplex.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 2:
        raise DomainError("softmax array must be 2-d (outputs x samples)")
    if np.any(g < -1e-12) or np.any(g > 1 + 1e-12):
        raise DomainError("softmax entries must lie in [0, 1]")
    colsums = g.sum(axis=0)
    if np.max(np.abs(colsums - 1.0)) > 1e-8:
        raise DomainError("softmax columns must sum to 1")
    C, N = g.shape
    beta1 = 1.0 - float(np.mean(np.sum(g**2, axis=0)))
    # pairwise pieces; (n, m) entries are sums over the output index
    s1 = g.T @ g                 # sum_k g_k(n) g_k(m)
    s2 = g.T @ (g**2)            # sum_k g_k(n) g_k(m)^2
    off = ~np.eye(N, dtype=bool)
    beta2 = float(np.sum((s1 - 2.0 * s2 + s1**2)[off])) / N**2
    beta3 = float(np.mean(np.sum((1.0 - 2.0 * g) * g**2, axis=0) + np.sum(g**2, axis=0) ** 2))
    beta4 = float(np.max(np.mean(g * (1.0 - g), axis=1)))
    return SoftmaxCoeffs(beta1=beta1, beta2=beta2, beta3=beta3, beta4=beta4)


def _lambda_core(op: OrderParams, N: int) -> float:
    """Shared factor ((N-1)/N) kappa2 + kappa1 / N."""
    return (N - 1) / N * op.kappa2 + op.kappa1 / N


def predict_fim_mse(op: OrderParams, cfg: NetworkConfig, N: int) -> EigStatsPrediction:
    """Statistics of the regression metric (sum of output-gradient Grams)."""
    M, C = cfg.width, cfg.outputs
    mean = op.kappa1 * C / M
    second = op.alpha * C * ((N - 1) / N * op.kappa2**2 + op.kappa1**2 / N)
    lam = op.alpha * M * _lambda_core(op, N)
    return EigStatsPrediction(
        kind=FIM_MSE,
        mean=mean,
        second_moment=second,
        lambda_max_point=lam,
        outlier_count=C,
    )


def predict_fim_block(op: OrderParams, cfg: NetworkConfig, N: int, l: int) -> EigStatsPrediction:
    """Statistics of the layer-l diagonal block of the regression metric.

    The last layer uses the effective ratio ``outputs / width`` so that the
    block parameter counts stay consistent with the full metric.
    """
    L = cfg.depth
    if not 1 <= l <= L:
        raise DomainError(f"block index must be in 1..{L}, got {l}")
    M, C = cfg.width, cfg.outputs
    w1 = float(op.qtil1[l - 1] * op.qhat1[l - 1])
    w2 = float(op.qtil2[l - 1] * op.qhat2[l - 1])
    alpha_lm1 = cfg.width_ratios[l - 1]
    alpha_l = cfg.width_ratios[l] if l < L else C / M
    mean = w1 / alpha_l * C / M
    second = (alpha_lm1 / alpha_l) * ((N - 1) / N * w2**2 + w1**2 / N) * C
    lam = alpha_lm1 * ((N - 1) / N * w2 + w1 / N) * M
    return EigStatsPrediction(
        kind=GramKind("fim_mse_block", l),
        mean=mean,
        second_moment=second,
        lambda_max_point=lam,
        outlier_count=C,
    )


def predict_fim_cross(
    op: OrderParams, cfg: NetworkConfig, N: int, coeffs: SoftmaxCoeffs
) -> EigStatsPrediction:
    """Statistics of the classification metric (softmax-curvature weighted).

    The maximum is only bounded: from below by the best per-output softmax
    variance times the regression maximum, from above through the second
    moment.
    """
    M = cfg.width
    mean = coeffs.beta1 * op.kappa1 / M
    second = op.alpha * (coeffs.beta2 * op.kappa2**2 + coeffs.beta3 * op.kappa1**2 / N)
    lower = coeffs.beta4 * op.alpha * M * _lambda_core(op, N)
    upper = math.sqrt(max(op.alpha * second, 0.0)) * M
    return EigStatsPrediction(
        kind=FIM_CROSS,
        mean=mean,
        second_moment=second,
        lambda_max_lower=lower,
        lambda_max_upper=upper,
        outlier_count=cfg.outputs,
    )


def predict_ntk(op: OrderParams, cfg: NetworkConfig, N: int) -> EigStatsPrediction:
    """Statistics of the kernel Gram under unit-variance parameter scaling.

    Per-sample normalization: the mean and second moment divide the
    eigenvalue sums by N.  All three statistics are independent of the
    width.
    """
    C = cfg.outputs
    mean = op.alpha * op.kappa1p * C
    second = op.alpha**2 * C * ((N - 1) * op.kappa2p**2 + op.kappa1p**2)
    lam = op.alpha * ((N - 1) * op.kappa2p + op.kappa1p)
    return EigStatsPrediction(
        kind=NTK,
        mean=mean,
        second_moment=second,
        lambda_max_point=lam,
        outlier_count=C,
    )


def predict_metric_a(
    op: OrderParams, cfg: NetworkConfig, N: int, per_output: bool = False
) -> EigStatsPrediction:
    """Statistics of the input/feature-space metric.

    ``per_output=True`` gives the single-output metric (one outlier); the
    summed metric multiplies the mean and second moment by the output count
    while the maximum stays the same.
    """
    M, C = cfg.width, cfg.outputs
    mult = 1 if per_output else C
    mean = mult * op.kappat1 / M
    second = mult * op.alphat * ((N - 1) / N * op.kappat2**2 + op.kappat1**2 / N) / M
    lam = op.alphat * ((N - 1) / N * op.kappat2 + op.kappat1 / N)
    return EigStatsPrediction(
        kind=METRIC_A,
        mean=mean,
        second_moment=second,
        lambda_max_point=lam,
        outlier_count=mult,
    )


def predict_metric_a_block(op: OrderParams, cfg: NetworkConfig, N: int, l: int) -> EigStatsPrediction:
    """Statistics of the layer-l diagonal block of the per-output feature metric."""
    L = cfg.depth
    if not 0 <= l <= L - 1:
        raise DomainError(f"feature block index must be in 0..{L - 1}, got {l}")
    sw2 = cfg.sigma_w2
    Ml = cfg.layer_widths[l]
    qt1 = float(op.qtil1[l])  # layer l+1
    qt2 = float(op.qtil2[l])
    mean = sw2 * qt1 / Ml
    second = sw2**2 * ((N - 1) / N * qt2**2 + qt1**2 / N) / Ml
    lam = sw2 * ((N - 1) / N * qt2 + qt1 / N)
    return EigStatsPrediction(
        kind=GramKind("metric_a_block", l),
        mean=mean,
        second_moment=second,
        lambda_max_point=lam,
        outlier_count=1,
    )


def _predict_mean_sub(kind: GramKind, cfg: NetworkConfig) -> EigStatsPrediction:
    return EigStatsPrediction(
        kind=kind,
        mean=float("nan"),
        second_moment=float("nan"),
        outlier_count=0,
        note="O(1) edge after output centering; no closed form",
    )


def predict(
    kind: GramKind,
    op: OrderParams,
    cfg: NetworkConfig,
    N: int,
    coeffs: SoftmaxCoeffs | None = None,
) -> EigStatsPrediction:
    """Dispatch to the kind-specific prediction."""
    if kind.tag == "fim_mse":
        return predict_fim_mse(op, cfg, N)
    if kind.tag == "fim_mse_block":
        return predict_fim_block(op, cfg, N, kind.block)
    if kind.tag == "fim_cross":
        if coeffs is None:
            raise DomainError("fim_cross prediction needs softmax coefficients")
        return predict_fim_cross(op, cfg, N, coeffs)
    if kind.tag == "ntk":
        return predict_ntk(op, cfg, N)
    if kind.tag == "metric_a":
        return predict_metric_a(op, cfg, N)
    if kind.tag == "metric_a_block":
        return predict_metric_a_block(op, cfg, N, kind.block)
    if kind.tag in ("fim_mse_mean_sub", "ntk_mean_sub"):
        return _predict_mean_sub(kind, cfg)
    raise DomainError(f"no closed-form prediction for gram kind {kind}")


def critical_learning_rate(pred: EigStatsPrediction) -> float:
    """Largest stable step size 2 / lambda_max for plain gradient descent."""
    lam = pred.lambda_max
    if lam is None or not math.isfinite(lam):
        raise DomainError(f"no lambda_max available for kind {pred.kind}")
    if lam == 0:
        raise DomainError("lambda_max is zero; critical learning rate undefined")
    return 2.0 / lam
