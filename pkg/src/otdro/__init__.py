"""Worst-case risk over optimal-transport ambiguity sets with conditional moment constraints."""

from .core import (
    ClassicInstance,
    DiscreteMeasure,
    DualCertificate,
    EvaluationError,
    GroundCost,
    InfeasibleError,
    InputError,
    LiftedInstance,
    NumericalError,
    OTDROError,
    PiecewiseAffineLoss,
    SigmaFieldSpec,
    TransportRecord,
    UnboundedError,
    UnsupportedError,
    ValueDomain,
    WorstCaseCoupling,
    evaluate_loss,
    expected_value,
)
from .divergences import (
    csiszar_dual,
    divergence_decomposed,
    generalized_divergence,
    get_entropy,
    phi_conjugate,
    phi_eval,
)

__version__ = "0.1.0"
