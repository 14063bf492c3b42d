"""Finite-width random networks: instantiation, forward pass, backprop.

A network instance is reconstructible from ``(cfg, seed,
parameterization)``: every tensor is drawn from its own counter-based
stream derived from the seed and a name, so instances are bit-identical
across runs and independent of thread scheduling.

The two parameterizations share the same weight values; they differ only
in which variables count as trainable parameters.  Under the standard
ensemble the weights themselves are ``N(0, sigma_w2 / fan_in)``; under the
kernel parameterization the trainable variables are unit normals and the
scaling lives in the architecture, which multiplies weight gradients by
``sigma_w / sqrt(fan_in)`` and bias gradients by ``sigma_b``.

Per-sample signals are kept densely (activations per layer, backpropagated
signals per output unit); full parameter-space Jacobians are never
materialized, since all Gram computations downstream contract the signals
layer by layer.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ShapeError
from .meanfield import NetworkConfig

__all__ = [
    "Parameterization",
    "NetworkInstance",
    "SignalPack",
    "stream",
    "trial_seed",
    "initialize_network",
    "sample_inputs",
    "forward",
    "backward",
]

Parameterization = Literal["standard", "ntk"]


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.sha256(str(tag).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Named counter-based random stream derived from a master seed.

    ``tags`` may mix strings and integers (e.g. ``("weights", layer)``).
    The same (seed, tags) always yields the same stream, independent of
    call order or threading.
    """
    key = tuple(_tag_to_int(t) for t in tags)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**63 - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def trial_seed(master_seed: int, trial: int) -> int:
    """Stable per-trial seed derived from an ensemble master seed."""
    payload = f"{int(master_seed)}:{int(trial)}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class NetworkInstance:
    """Immutable sampled network: weights, biases, and provenance."""

    cfg: NetworkConfig
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    parameterization: Parameterization
    seed: int

    @property
    def depth(self) -> int:
        return self.cfg.depth


@dataclass
class SignalPack:
    """Per-sample signals from one forward (and optionally backward) pass.

    ``acts[l]`` holds the layer-l activations (``acts[0]`` is the input),
    ``preacts[l-1]`` the layer-l pre-activations, ``deltas[l-1]`` the
    backpropagated signals at layer l with shape (outputs, M_l, N).
    """

    acts: list[np.ndarray]
    preacts: list[np.ndarray]
    outputs: np.ndarray
    softmax: np.ndarray
    deltas: list[np.ndarray] | None = None

    @property
    def n_samples(self) -> int:
        return self.acts[0].shape[1]


def initialize_network(
    cfg: NetworkConfig,
    seed: int,
    parameterization: Parameterization = "standard",
) -> NetworkInstance:
    """Draw a network from the random ensemble.

    Layer-l weights come from the stream ``(seed, "weights", l)`` and have
    standard deviation ``sigma_w / sqrt(fan_in)``; biases come from
    ``(seed, "biases", l)`` with standard deviation ``sigma_b``.
    """
    widths = cfg.layer_widths
    sw = np.sqrt(cfg.sigma_w2)
    sb = np.sqrt(cfg.sigma_b2)
    weights, biases = [], []
    for l in range(1, cfg.depth + 1):
        fan_in, fan_out = widths[l - 1], widths[l]
        gw = stream(seed, "weights", l)
        gb = stream(seed, "biases", l)
        weights.append(gw.standard_normal((fan_out, fan_in)) * (sw / np.sqrt(fan_in)))
        biases.append(gb.standard_normal(fan_out) * sb)
    return NetworkInstance(
        cfg=cfg,
        weights=tuple(weights),
        biases=tuple(biases),
        parameterization=parameterization,
        seed=int(seed),
    )


def sample_inputs(n_samples: int, dim: int, seed: int) -> np.ndarray:
    """Draw i.i.d. standard-normal inputs as a (dim, n_samples) matrix."""
    return stream(seed, "inputs").standard_normal((dim, n_samples))


def _softmax(f: np.ndarray) -> np.ndarray:
    z = f - f.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def forward(net: NetworkInstance, x: np.ndarray) -> SignalPack:
    """Run the forward pass on a (input_dim, N) batch.

    Hidden layers apply their activation; the last layer is linear and its
    pre-activations are the network outputs.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != net.cfg.input_dim:
        raise ShapeError(
            f"inputs must be ({net.cfg.input_dim}, N), got {x.shape}"
        )
    acts = [x]
    preacts = []
    h = x
    for l in range(net.depth):
        u = net.weights[l] @ h + net.biases[l][:, None]
        preacts.append(u)
        if l < net.depth - 1:
            h = net.cfg.activations[l](u)
            acts.append(h)
    f = preacts[-1]
    return SignalPack(acts=acts, preacts=preacts, outputs=f, softmax=_softmax(f))


def backward(net: NetworkInstance, pack: SignalPack) -> SignalPack:
    """Backpropagate one basis vector per output unit through the chain rule.

    Fills ``pack.deltas``; ``deltas[l-1][k]`` is the derivative of output k
    with respect to the layer-l pre-activations, evaluated per sample.  The
    output layer itself gets the standard basis (linear readout).
    """
    L = net.depth
    C = net.cfg.outputs
    N = pack.n_samples
    deltas: list[np.ndarray] = [np.empty(0)] * L
    dL = np.zeros((C, C, N))
    for k in range(C):
        dL[k, k, :] = 1.0
    deltas[L - 1] = dL
    for l in range(L - 1, 0, -1):
        # delta^{l} = phi'(u^l) * (W^{l+1}^T delta^{l+1}), batched over outputs
        back = np.einsum("ji,kjn->kin", net.weights[l], deltas[l], optimize=True)
        deltas[l - 1] = back * net.cfg.activations[l - 1].deriv(pack.preacts[l - 1])[None]
    pack.deltas = deltas
    return pack
