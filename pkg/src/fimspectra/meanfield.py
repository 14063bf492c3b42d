"""Order-parameter recursions for wide fully-connected networks.

The forward pass of a wide random network is summarized by two scalars per
layer: the mean squared activation ``qhat1`` and the mean activation
overlap ``qhat2`` between two independent standard-normal inputs.  The
backward pass is summarized by the squared magnitude ``qtil1`` and overlap
``qtil2`` of the signals backpropagated from one output unit.  Because the
inputs are i.i.d. standard normal, these take the same value for every
sample (pair), so the module stores scalars per layer rather than
matrices.

Index conventions
-----------------
* ``qhat1[l]``, ``qhat2[l]`` refer to the activations of layer ``l`` for
  ``l = 0..L-1`` (layer 0 is the input itself, so ``qhat1[0] = 1`` and
  ``qhat2[0] = 0``).
* ``qtil1[i]``, ``qtil2[i]`` refer to the backpropagated signals at layer
  ``i+1`` for ``i = 0..L-1`` (the linear output layer gives
  ``qtil = 1`` at layer L).

This pairing makes the layer sums of the eigenvalue-statistics constants
plain elementwise dot products: the term for layer ``l`` couples
``qtil[l]`` with ``qhat[l-1]``, which share the storage index ``l-1``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation, closed_form_moments
from .errors import ConfigError, NumericalError
from .gauss import QuadratureRule, gauss1d, gauss2d_iphi, gauss_hermite_rule

__all__ = [
    "NetworkConfig",
    "OrderParams",
    "forward_recursion",
    "backward_recursion",
    "kappas",
    "order_params",
    "write_order_table",
]


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and initialization ensemble of a network family.

    ``depth`` counts weight layers, so ``depth=2`` is a single hidden
    layer.  Hidden layer ``l`` has width ``round(width_ratios[l] * width)``
    for ``l <= depth-1`` (ratio index 0 is the input layer) and the output
    layer has ``outputs`` units with a linear readout.
    """

    depth: int
    width: int
    outputs: int
    sigma_w2: float
    sigma_b2: float
    activations: tuple[Activation, ...]
    width_ratios: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.width < 1 or self.outputs < 1:
            raise ConfigError("width and outputs must be positive")
        if self.sigma_w2 <= 0:
            raise ConfigError("sigma_w2 must be positive")
        if self.sigma_b2 < 0:
            raise ConfigError("sigma_b2 must be non-negative")
        if not self.width_ratios:
            object.__setattr__(self, "width_ratios", (1.0,) * self.depth)
        if len(self.width_ratios) != self.depth:
            raise ConfigError(
                f"need {self.depth} width ratios (input plus hidden layers), "
                f"got {len(self.width_ratios)}"
            )
        if any(r <= 0 for r in self.width_ratios):
            raise ConfigError("width ratios must be positive")
        if len(self.activations) == 1 and self.depth > 2:
            object.__setattr__(self, "activations", self.activations * (self.depth - 1))
        if len(self.activations) != self.depth - 1:
            raise ConfigError(
                f"need {self.depth - 1} hidden activations, got {len(self.activations)}"
            )

    @property
    def layer_widths(self) -> tuple[int, ...]:
        """Unit counts ``(M_0, ..., M_L)`` with ``M_L = outputs``."""
        hidden = tuple(int(round(r * self.width)) for r in self.width_ratios)
        return hidden + (self.outputs,)

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def alpha(self) -> float:
        """Leading coefficient of the parameter count: sum of ratio products."""
        r = self.width_ratios
        return float(sum(r[l] * r[l - 1] for l in range(1, self.depth)))

    @property
    def alphat(self) -> float:
        """Sum of the input and hidden width ratios."""
        return float(sum(self.width_ratios))

    @property
    def is_non_centered(self) -> bool:
        """Whether the ensemble satisfies the non-centered condition.

        True when biases are random (``sigma_b2 > 0``) or every hidden
        activation has a non-zero Gaussian mean.  The positivity of the
        overlap constants (and hence the outlier statistics) is only
        guaranteed in this regime; centered configurations are still
        accepted because the degenerate statistics remain well defined.
        """
        return self.sigma_b2 > 0 or all(a.gaussian_mean for a in self.activations)

    def n_params_layer(self, l: int) -> int:
        """Exact parameter count (weights plus biases) of layer ``l`` in 1..L."""
        widths = self.layer_widths
        return widths[l] * widths[l - 1] + widths[l]

    @property
    def n_params(self) -> int:
        return sum(self.n_params_layer(l) for l in range(1, self.depth + 1))


@dataclass(frozen=True)
class OrderParams:
    """Per-layer order parameters and the derived layer-sum constants."""

    qhat1: np.ndarray
    qhat2: np.ndarray
    qtil1: np.ndarray
    qtil2: np.ndarray
    kappa1: float
    kappa2: float
    kappa1p: float
    kappa2p: float
    kappat1: float
    kappat2: float
    alpha: float
    alphat: float


def _preact_variances(cfg: NetworkConfig, qhat1, qhat2) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activation (variance, covariance) per layer 1..L, stored at l-1."""
    q1 = cfg.sigma_w2 * np.asarray(qhat1) + cfg.sigma_b2
    q2 = cfg.sigma_w2 * np.asarray(qhat2) + cfg.sigma_b2
    return q1, q2


def _moments(act: Activation, a: float, b: float, rule: QuadratureRule,
             use_closed_forms: bool) -> tuple[float, float]:
    """(I_phi[a,b], int Du phi(sqrt(a) u)^2); closed form when available."""
    if use_closed_forms:
        cf = closed_form_moments(act, a, b)
        if cf is not None:
            i_phi, _, _ = cf
            i_aa, _, _ = closed_form_moments(act, a, a)
            return i_phi, i_aa
    sa = np.sqrt(a)
    second = gauss1d(lambda u: act(sa * u) ** 2, rule)
    return gauss2d_iphi(act.fn, a, b, rule), second


def _deriv_moments(act: Activation, a: float, b: float, rule: QuadratureRule,
                   use_closed_forms: bool) -> tuple[float, float]:
    """(I_phi'[a,b], int Du phi'(sqrt(a) u)^2); closed form when available."""
    if use_closed_forms:
        cf = closed_form_moments(act, a, b)
        if cf is not None:
            _, i_deriv, _ = cf
            _, i_daa, _ = closed_form_moments(act, a, a)
            return i_deriv, i_daa
    sa = np.sqrt(a)
    second = gauss1d(lambda u: act.deriv(sa * u) ** 2, rule)
    return gauss2d_iphi(act.fn_deriv, a, b, rule), second


def forward_recursion(
    cfg: NetworkConfig,
    rule: QuadratureRule | None = None,
    use_closed_forms: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Iterate the forward order-parameter maps from the input layer.

    Starting from ``qhat1 = 1`` and ``qhat2 = 0`` (i.i.d. standard normal
    inputs), each step forms the pre-activation variance/covariance
    ``q = sigma_w2 * qhat + sigma_b2`` and pushes it through the layer's
    activation moments.

    Returns arrays of length ``depth`` covering layers ``0..L-1``.
    """
    rule = rule or gauss_hermite_rule()
    qhat1 = [1.0]
    qhat2 = [0.0]
    for l in range(cfg.depth - 1):
        act = cfg.activations[l]
        a = cfg.sigma_w2 * qhat1[-1] + cfg.sigma_b2
        b = cfg.sigma_w2 * qhat2[-1] + cfg.sigma_b2
        i_phi, second = _moments(act, a, b, rule, use_closed_forms)
        qhat1.append(second)
        qhat2.append(i_phi)
        if not (np.isfinite(qhat1[-1]) and np.isfinite(qhat2[-1])):
            raise NumericalError(f"forward recursion diverged at layer {l + 1}")
    return np.asarray(qhat1), np.asarray(qhat2)


def backward_recursion(
    cfg: NetworkConfig,
    forward: tuple[np.ndarray, np.ndarray],
    rule: QuadratureRule | None = None,
    use_closed_forms: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Iterate the backward order-parameter maps from the linear output.

    ``forward`` is the pair produced by :func:`forward_recursion`.  Returns
    arrays of length ``depth`` where index ``i`` holds the value at layer
    ``i+1``; the output layer (index ``depth-1``) is 1 by the linear
    readout.
    """
    rule = rule or gauss_hermite_rule()
    qhat1, qhat2 = forward
    q1, q2 = _preact_variances(cfg, qhat1, qhat2)
    qtil1 = [1.0]
    qtil2 = [1.0]
    for l in range(cfg.depth - 1, 0, -1):
        act = cfg.activations[l - 1]
        i_deriv, second = _deriv_moments(act, q1[l - 1], q2[l - 1], rule, use_closed_forms)
        qtil1.insert(0, cfg.sigma_w2 * qtil1[0] * second)
        qtil2.insert(0, cfg.sigma_w2 * qtil2[0] * i_deriv)
        if not (np.isfinite(qtil1[0]) and np.isfinite(qtil2[0])):
            raise NumericalError(f"backward recursion diverged at layer {l}")
    return np.asarray(qtil1), np.asarray(qtil2)


def kappas(
    cfg: NetworkConfig,
    qhat1: np.ndarray,
    qhat2: np.ndarray,
    qtil1: np.ndarray,
    qtil2: np.ndarray,
) -> OrderParams:
    """Assemble the layer-weighted constants from the recursion outputs.

    The parameter-space constants weight the layer-l term (backward at l,
    forward at l-1) by ``alpha_{l-1}``; the kernel variants add the bias
    contribution and drop the ratio weights; the feature-space variants sum
    the backward magnitudes alone.
    """
    ratios = np.asarray(cfg.width_ratios)  # alpha_0 .. alpha_{L-1}
    alpha = cfg.alpha
    alphat = cfg.alphat
    sw2, sb2 = cfg.sigma_w2, cfg.sigma_b2
    kappa1 = float(np.sum(ratios * qtil1 * qhat1) / alpha)
    kappa2 = float(np.sum(ratios * qtil2 * qhat2) / alpha)
    kappa1p = float(np.sum(sw2 * qtil1 * qhat1 + sb2 * qtil1) / alpha)
    kappa2p = float(np.sum(sw2 * qtil2 * qhat2 + sb2 * qtil2) / alpha)
    kappat1 = float(sw2 * np.sum(qtil1) / alphat)
    kappat2 = float(sw2 * np.sum(qtil2) / alphat)
    return OrderParams(
        qhat1=np.asarray(qhat1),
        qhat2=np.asarray(qhat2),
        qtil1=np.asarray(qtil1),
        qtil2=np.asarray(qtil2),
        kappa1=kappa1,
        kappa2=kappa2,
        kappa1p=kappa1p,
        kappa2p=kappa2p,
        kappat1=kappat1,
        kappat2=kappat2,
        alpha=alpha,
        alphat=alphat,
    )


def order_params(
    cfg: NetworkConfig,
    rule: QuadratureRule | None = None,
    use_closed_forms: bool = True,
) -> OrderParams:
    """Run both recursions and assemble all derived constants."""
    rule = rule or gauss_hermite_rule()
    fwd = forward_recursion(cfg, rule, use_closed_forms)
    bwd = backward_recursion(cfg, fwd, rule, use_closed_forms)
    return kappas(cfg, fwd[0], fwd[1], bwd[0], bwd[1])


def write_order_table(op: OrderParams, fileobj: io.TextIOBase) -> None:
    """Write the per-layer table as CSV (layer, qhat1, qhat2, qtil1, qtil2).

    Rows cover layers 0..L; the input layer has no backward entry and the
    output layer no forward entry, left blank.
    """
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["layer", "qhat1", "qhat2", "qtil1", "qtil2"])
    L = len(op.qhat1)
    for l in range(L + 1):
        qh1 = repr(float(op.qhat1[l])) if l < L else ""
        qh2 = repr(float(op.qhat2[l])) if l < L else ""
        qt1 = repr(float(op.qtil1[l - 1])) if l >= 1 else ""
        qt2 = repr(float(op.qtil2[l - 1])) if l >= 1 else ""
        writer.writerow([l, qh1, qh2, qt1, qt2])
