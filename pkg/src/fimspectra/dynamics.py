"""Function-space training via the kernel Gram, and an explicit trainer.

In the wide regime, full-batch gradient descent moves the network outputs
by ``f <- f + (eta / N) * Theta (y - target_residual)`` where ``Theta`` is
the Gram of output gradients in whatever parameterization training runs
in.  The simulators integrate exactly this discrete map; the reference
trainer runs the same gradient descent on the explicit parameters so the
two can be compared.

State is kept in output space as C x N arrays, flattened output-major to
match the Gram's row convention.
"""
from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import DivergenceError, DomainError, ShapeError
from .meanfield import NetworkConfig, OrderParams
from .network import NetworkInstance
from .spectra import DualGram
from .theory import predict_fim_cross, softmax_coeffs

__all__ = [
    "TrainingTrace",
    "log_cadence",
    "simulate_ntk_mse",
    "simulate_ntk_cross",
    "train_reference",
    "write_trace_csv",
]

DIVERGENCE_THRESHOLD = 1e12


@dataclass
class TrainingTrace:
    """Logged quantities from one training run.

    Only the fields the caller asked for are populated; band fields carry
    the instantaneous softmax-curvature bounds on the top eigenvalue when
    tracking is enabled.
    """

    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    loss_reference: list[float] = field(default_factory=list)
    lambda_max_F: list[float] = field(default_factory=list)
    lambda_max_Fcross: list[float] = field(default_factory=list)
    lambda_max_lo: list[float] = field(default_factory=list)
    lambda_max_hi: list[float] = field(default_factory=list)
    f_final: np.ndarray | None = None
    g_final: np.ndarray | None = None


def log_cadence(steps: int) -> list[int]:
    """Logarithmic checkpoint schedule 0, 1, 2, 5, 10, 20, 50, ... <= steps."""
    out = [0]
    base = 1
    while base <= steps:
        for m in (1, 2, 5):
            s = base * m
            if s <= steps:
                out.append(s)
        base *= 10
    if out[-1] != steps:
        out.append(steps)
    return out


def _theta_matrix(theta) -> np.ndarray:
    if isinstance(theta, DualGram):
        if theta.kind.tag not in ("ntk", "fim_mse"):
            raise DomainError(f"simulation kernel must be a gram of output gradients, got {theta.kind}")
        m = theta.matrix
        # the regression dual is gradients^T gradients / N; undo the 1/N
        return m * theta.n_samples if theta.kind.tag == "fim_mse" else m
    return np.asarray(theta, dtype=float)


def _softmax(f: np.ndarray) -> np.ndarray:
    z = f - f.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def simulate_ntk_mse(
    theta,
    f0: np.ndarray,
    y: np.ndarray,
    eta: float,
    steps: int,
    record: list[int] | None = None,
) -> TrainingTrace:
    """Discrete function-space gradient descent for the squared loss.

    ``theta`` is the CN x CN kernel Gram (a ``DualGram`` or raw array);
    updates are Euler steps ``f <- f + (eta/N) Theta (y - f)`` and the loss
    is ``sum ||y - f||^2 / (2N)``.
    """
    T = _theta_matrix(theta)
    f = np.asarray(f0, dtype=float).copy()
    y = np.asarray(y, dtype=float)
    C, N = f.shape
    if y.shape != f.shape or T.shape != (C * N, C * N):
        raise ShapeError("kernel, state and targets have inconsistent shapes")
    record = sorted(set(record if record is not None else log_cadence(steps)))
    trace = TrainingTrace()

    def loss_of(fc):
        return float(np.sum((y - fc) ** 2) / (2 * N))

    for t in range(steps + 1):
        if t in record or t == steps:
            trace.steps.append(t)
            trace.loss.append(loss_of(f))
            if not np.isfinite(trace.loss[-1]) or trace.loss[-1] > DIVERGENCE_THRESHOLD:
                raise DivergenceError(f"simulation diverged at step {t}", step=t)
        if t == steps:
            break
        resid = (y - f).reshape(C * N)
        f = f + (eta / N) * (T @ resid).reshape(C, N)
    trace.f_final = f
    return trace


def simulate_ntk_cross(
    theta,
    f0: np.ndarray,
    y_onehot: np.ndarray,
    eta: float,
    steps: int,
    op: OrderParams | None = None,
    cfg: NetworkConfig | None = None,
    record: list[int] | None = None,
) -> TrainingTrace:
    """Discrete function-space gradient descent for the softmax loss.

    Updates are ``f <- f + (eta/N) Theta (y - softmax(f))`` with the
    cross-entropy loss logged at checkpoints.  When order parameters and a
    config are supplied, each checkpoint also evaluates the instantaneous
    softmax-curvature bounds on the top metric eigenvalue by feeding the
    current softmax state into the closed-form prediction.
    """
    T = _theta_matrix(theta)
    f = np.asarray(f0, dtype=float).copy()
    y = np.asarray(y_onehot, dtype=float)
    C, N = f.shape
    if y.shape != f.shape or T.shape != (C * N, C * N):
        raise ShapeError("kernel, state and targets have inconsistent shapes")
    if not np.all((y == 0) | (y == 1)) or not np.allclose(y.sum(axis=0), 1.0):
        raise DomainError("targets must be one-hot columns")
    record = sorted(set(record if record is not None else log_cadence(steps)))
    trace = TrainingTrace()

    g = _softmax(f)
    for t in range(steps + 1):
        if t in record or t == steps:
            loss = float(-np.sum(y * np.log(np.clip(g, 1e-300, None))) / N)
            trace.steps.append(t)
            trace.loss.append(loss)
            if op is not None and cfg is not None:
                pred = predict_fim_cross(op, cfg, N, softmax_coeffs(g))
                trace.lambda_max_lo.append(pred.lambda_max_lower)
                trace.lambda_max_hi.append(pred.lambda_max_upper)
            if not np.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
                raise DivergenceError(f"simulation diverged at step {t}", step=t)
        if t == steps:
            break
        resid = (y - g).reshape(C * N)
        f = f + (eta / N) * (T @ resid).reshape(C, N)
        g = _softmax(f)
    trace.f_final = f
    trace.g_final = g
    return trace


def _loss_and_output_grad(f, y, loss_kind, N):
    if loss_kind == "mse":
        loss = float(np.sum((y - f) ** 2) / (2 * N))
        grad = (f - y) / N  # dLoss/df
    elif loss_kind == "cross":
        g = _softmax(f)
        loss = float(-np.sum(y * np.log(np.clip(g, 1e-300, None))) / N)
        grad = (g - y) / N
    else:
        raise DomainError(f"unknown loss kind {loss_kind!r}")
    return loss, grad


def train_reference(
    net: NetworkInstance,
    x: np.ndarray,
    y: np.ndarray,
    eta: float,
    steps: int,
    loss_kind: Literal["mse", "cross"] = "mse",
    record: list[int] | None = None,
    probe: Callable[[NetworkInstance, int], dict] | None = None,
) -> tuple[TrainingTrace, NetworkInstance]:
    """Full-batch gradient descent on the explicit parameters.

    Gradients follow the backpropagation chain; under the kernel
    parameterization the per-layer weight update picks up the factor
    ``sigma_w2 / fan_in`` (and bias updates ``sigma_b2``), since the
    trainable variables are the unit normals behind the weights.

    ``probe``, if given, is called at each checkpoint with a network
    instance carrying the current parameters and may return extra values
    to log (keys matching TrainingTrace list fields are appended).
    """
    cfg = net.cfg
    L = cfg.depth
    N = x.shape[1]
    widths = cfg.layer_widths
    W = [w.copy() for w in net.weights]
    b = [v.copy() for v in net.biases]
    if net.parameterization == "ntk":
        wscale = [cfg.sigma_w2 / widths[l] for l in range(L)]
        bscale = [cfg.sigma_b2] * L
    else:
        wscale = [1.0] * L
        bscale = [1.0] * L
    record = sorted(set(record if record is not None else log_cadence(steps)))
    trace = TrainingTrace()

    def current_net():
        return dataclasses.replace(net, weights=tuple(W), biases=tuple(b))

    for t in range(steps + 1):
        # forward
        acts = [x]
        preacts = []
        h = x
        for l in range(L):
            u = W[l] @ h + b[l][:, None]
            preacts.append(u)
            if l < L - 1:
                h = cfg.activations[l](u)
                acts.append(h)
        f = preacts[-1]
        loss, gout = _loss_and_output_grad(f, y, loss_kind, N)
        if t in record or t == steps:
            trace.steps.append(t)
            trace.loss.append(loss)
            if not np.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
                raise DivergenceError(f"training diverged at step {t}", step=t)
            if probe is not None:
                extra = probe(current_net(), t)
                for key, val in extra.items():
                    getattr(trace, key).append(val)
        if t == steps:
            break
        # backward pass on the scalar loss
        d = gout
        for l in range(L - 1, -1, -1):
            gW = d @ acts[l].T
            gb = d.sum(axis=1)
            if l > 0:
                d = (W[l].T @ d) * cfg.activations[l - 1].deriv(preacts[l - 1])
            W[l] -= eta * wscale[l] * gW
            b[l] -= eta * bscale[l] * gb
    trace.f_final = f
    if loss_kind == "cross":
        trace.g_final = _softmax(f)
    return trace, current_net()


def write_trace_csv(trace: TrainingTrace, fileobj: io.TextIOBase) -> None:
    """Columns step, loss_sim, loss_reference, lmax_F, lmax_Fcross_emp, lmax_lo, lmax_hi."""
    w = csv.writer(fileobj, lineterminator="\n")
    w.writerow(["step", "loss_sim", "loss_reference", "lmax_F", "lmax_Fcross_emp", "lmax_lo", "lmax_hi"])

    def col(lst, i):
        return repr(float(lst[i])) if i < len(lst) else ""

    for i, s in enumerate(trace.steps):
        w.writerow([
            s,
            col(trace.loss, i),
            col(trace.loss_reference, i),
            col(trace.lambda_max_F, i),
            col(trace.lambda_max_Fcross, i),
            col(trace.lambda_max_lo, i),
            col(trace.lambda_max_hi, i),
        ])
