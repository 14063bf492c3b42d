"""Eigenvalue spectra of metric tensors in wide random neural networks.

The library predicts the mean, second moment and largest eigenvalue of
the parameter-space metric (for squared and softmax losses), its layer
blocks, the kernel Gram governing function-space training, and the
input/feature-space metric — all from layerwise Gaussian-integral
recursions — and verifies each prediction by building the corresponding
dual Gram matrix from an actual random network and eigendecomposing it.
"""
from .activations import ERF, IDENTITY, RELU, TANH, Activation, closed_form_moments, leaky_relu, parse_activation
from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    FimspectraError,
    NumericalError,
    ParameterizationError,
    ShapeError,
)
from .gauss import DEFAULT_ORDER, QuadratureRule, gauss1d, gauss2d_iphi, gauss_hermite_rule
from .meanfield import NetworkConfig, OrderParams, backward_recursion, forward_recursion, kappas, order_params
from .network import NetworkInstance, SignalPack, backward, forward, initialize_network, sample_inputs, stream, trial_seed
from .spectra import (
    DualGram,
    EnsembleReport,
    SpectrumReport,
    apply_softmax_q,
    build_dual_block,
    build_dual_fim,
    build_dual_metric_a,
    build_dual_ntk,
    eigen_stats,
    mean_subtract,
    run_ensemble,
    run_trial,
    top_eigvec_alignment,
)
from .theory import (
    EigStatsPrediction,
    GramKind,
    SoftmaxCoeffs,
    critical_learning_rate,
    predict,
    predict_fim_block,
    predict_fim_cross,
    predict_fim_mse,
    predict_metric_a,
    predict_metric_a_block,
    predict_ntk,
    softmax_coeffs,
)
from .dynamics import TrainingTrace, log_cadence, simulate_ntk_cross, simulate_ntk_mse, train_reference

__version__ = "0.1.0"
