"""Activation functions with weak derivatives and Gaussian-moment metadata.

Every built-in has a polynomially bounded weak derivative, which is what
the backward order-parameter recursions require.  ``gaussian_mean`` records
whether ``int Du phi(u)`` is non-zero; together with a non-zero bias
variance this is what makes a network "non-centered" and guarantees the
positive sample-overlap constants behind the outlier eigenvalues.

For the piecewise-linear family (identity, ReLU, leaky ReLU) the
correlated Gaussian moments have closed forms (the arc-cosine kernel
integrals), exposed through :func:`closed_form_moments`.  Quadrature
converges only like ``O(1/order)`` across the kink, so the recursions use
these closed forms whenever they exist.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf as _erf

from .errors import DomainError

__all__ = [
    "Activation",
    "TANH",
    "RELU",
    "IDENTITY",
    "ERF",
    "leaky_relu",
    "parse_activation",
    "closed_form_moments",
]


@dataclass(frozen=True)
class Activation:
    """A scalar activation ``phi`` with weak derivative ``phi'``.

    ``name`` doubles as the config-file tag (`"tanh"`, `"relu"`,
    `"leaky_relu:0.2"`, `"identity"`, `"erf"`).
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    fn_deriv: Callable[[np.ndarray], np.ndarray]
    gaussian_mean: bool
    slope: float = 0.0  # leaky-ReLU negative-side slope; unused otherwise

    def __call__(self, x):
        return self.fn(x)

    def deriv(self, x):
        return self.fn_deriv(x)

    def __repr__(self):
        return f"Activation({self.name!r})"


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(x):
    # weak derivative; the value at exactly 0 is a measure-zero convention
    return np.where(np.asarray(x) > 0, 1.0, 0.0)


def _dtanh(x):
    return 1.0 / np.cosh(x) ** 2


def _derf(x):
    return (2.0 / np.sqrt(np.pi)) * np.exp(-np.asarray(x) ** 2)


TANH = Activation("tanh", np.tanh, _dtanh, gaussian_mean=False)
RELU = Activation("relu", _relu, _drelu, gaussian_mean=True)
IDENTITY = Activation("identity", lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(np.asarray(x, dtype=float)), gaussian_mean=False)
ERF = Activation("erf", _erf, _derf, gaussian_mean=False)


def leaky_relu(slope: float = 0.2) -> Activation:
    """Leaky ReLU with the given negative-side slope (default 0.2)."""
    if not 0.0 <= slope < 1.0:
        raise DomainError(f"leaky_relu slope must be in [0, 1), got {slope}")
    s = float(slope)

    def fn(x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, x, s * x)

    def dfn(x):
        return np.where(np.asarray(x) > 0, 1.0, s)

    return Activation(f"leaky_relu:{s:g}", fn, dfn, gaussian_mean=True, slope=s)


_BUILTINS = {a.name: a for a in (TANH, RELU, IDENTITY, ERF)}


def parse_activation(tag: str) -> Activation:
    """Resolve a string tag to an activation.

    Accepts the built-in names and ``"leaky_relu:<slope>"`` (bare
    ``"leaky_relu"`` uses the default slope).
    """
    tag = tag.strip().lower()
    if tag in _BUILTINS:
        return _BUILTINS[tag]
    if tag == "leaky_relu":
        return leaky_relu()
    if tag.startswith("leaky_relu:"):
        try:
            return leaky_relu(float(tag.split(":", 1)[1]))
        except ValueError as exc:
            raise DomainError(f"bad leaky_relu slope in tag {tag!r}") from exc
    raise DomainError(f"unknown activation tag {tag!r}")


def _relu_moments(a: float, b: float) -> tuple[float, float, float]:
    """Arc-cosine kernel moments of ReLU under correlated Gaussians."""
    if a == 0.0:
        return 0.0, 0.0, 0.0
    theta = float(np.arccos(np.clip(b / a, -1.0, 1.0)))
    i_phi = (a / (2.0 * np.pi)) * (np.sin(theta) + (np.pi - theta) * np.cos(theta))
    i_deriv = (np.pi - theta) / (2.0 * np.pi)
    m1sq = a / (2.0 * np.pi)
    return float(i_phi), float(i_deriv), float(m1sq)


def closed_form_moments(act: Activation, a: float, b: float) -> tuple[float, float, float] | None:
    """Analytic ``(I_phi[a,b], I_phi'[a,b], (int Du phi(sqrt(a) u))**2)``.

    Available for the piecewise-linear activations (identity, ReLU, leaky
    ReLU); returns None for activations without known closed forms.  ``b``
    is clamped into ``[-a, a]`` like the quadrature path.
    """
    if a < 0:
        raise DomainError(f"variance a must be non-negative, got {a}")
    b = float(np.clip(b, -a, a))
    if act.name == "identity":
        return b, 1.0, 0.0
    if act.name == "relu":
        return _relu_moments(a, b)
    if act.name.startswith("leaky_relu"):
        s = act.slope
        if a == 0.0:
            # degenerate point mass at 0; matches the phi'(0)^2 convention
            return 0.0, s * s, 0.0
        ir, idr, m1r = _relu_moments(a, b)
        i_phi = s * b + (1.0 - s) ** 2 * ir
        i_deriv = s + (1.0 - s) ** 2 * idr
        m1sq = (1.0 - s) ** 2 * m1r
        return float(i_phi), float(i_deriv), float(m1sq)
    return None
