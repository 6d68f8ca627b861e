"""Recovery attacks against the simulated traces."""

from .cpa import (
    CandidateRanking,
    CorrelationCurve,
    HypothesisCounter,
    HypothesisSpace,
    cpa_byte,
    correlate_hypotheses,
    pearson,
    predicted_product_bytes,
)
from .hpa import InputRecovery, cut_first_layer_subtraces, hpa_input_recovery
from .recover import (
    RecoveredLayer,
    RecoveredNeuron,
    RecoveryError,
    RecoveryReport,
    SimulatedOracle,
    reverse_engineer,
)
from .segmentation import NeuronUnit, Region, gather_window, segment_regions, spa_segment
from .structure import (
    INCONCLUSIVE,
    NEXT_LAYER,
    SAME_LAYER,
    BoundaryDecision,
    layer_boundary_test,
)
from .timing import ClassificationResult, classify_activation
from .weights import (
    OperandRecovery,
    StageResult,
    mantissa_near_miss,
    product_starts_from_annotations,
    recover_operand,
    recover_weight_from_traceset,
    unit_starts_from_segmentation,
)

__all__ = [
    "BoundaryDecision",
    "CandidateRanking",
    "ClassificationResult",
    "CorrelationCurve",
    "HypothesisCounter",
    "HypothesisSpace",
    "INCONCLUSIVE",
    "InputRecovery",
    "NEXT_LAYER",
    "NeuronUnit",
    "OperandRecovery",
    "RecoveredLayer",
    "RecoveredNeuron",
    "RecoveryError",
    "RecoveryReport",
    "Region",
    "SAME_LAYER",
    "SimulatedOracle",
    "StageResult",
    "classify_activation",
    "correlate_hypotheses",
    "cpa_byte",
    "cut_first_layer_subtraces",
    "gather_window",
    "hpa_input_recovery",
    "layer_boundary_test",
    "mantissa_near_miss",
    "pearson",
    "predicted_product_bytes",
    "product_starts_from_annotations",
    "recover_operand",
    "recover_weight_from_traceset",
    "reverse_engineer",
    "segment_regions",
    "spa_segment",
    "unit_starts_from_segmentation",
]
