"""Two-hypothesis CPA test for layer boundaries.

A neuron block either continues the current layer (its products consume
the same operands as its predecessors) or starts the next one (its
products consume the previous layer's outputs). Recovery is attempted
under both operand assignments; the wrong assignment correlates worse,
and the relative gap between the two scores is the decision margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import UsageError
from ..leakage import LeakageConfig
from .cpa import HypothesisCounter
from .weights import DEFAULT_MARGIN_THRESHOLD, OperandRecovery, recover_operand

SAME_LAYER = "same_layer"
NEXT_LAYER = "next_layer"
INCONCLUSIVE = "inconclusive"


@dataclass
class BoundaryDecision:
    decision: str  # SAME_LAYER, NEXT_LAYER, or INCONCLUSIVE
    margin: float
    same_score: float
    next_score: float

    def to_json_dict(self) -> dict:
        return {
            "decision": self.decision,
            "margin": self.margin,
            "same_score": self.same_score,
            "next_score": self.next_score,
        }


def _hypothesis_score(
    unit_window: np.ndarray,
    operands: np.ndarray,
    cfg: LeakageConfig,
    max_products: int | None,
    counter: HypothesisCounter | None,
) -> float:
    """Mean recovery score over the unit's products under one operand
    assignment.

    Operand columns repeat cyclically: a block read as k fused neurons
    over a width-w previous layer consumes column ``i % w`` at product
    ``i``. Scoring the whole block (not just its first product) is what
    separates the hypotheses decisively; a single product can correlate
    under the wrong reading because consecutive layer values are far
    from independent.
    """
    width = 4 * cfg.samples_per_byte
    n_products = unit_window.shape[1] // width
    n_use = n_products if max_products is None else min(max_products, n_products)
    if n_use < 1:
        raise UsageError("unit window has no complete product")
    scores = []
    for i in range(n_use):
        rec: OperandRecovery = recover_operand(
            unit_window[:, i * width : (i + 1) * width],
            operands[:, i % operands.shape[1]],
            cfg,
            counter=counter,
        )
        scores.append(rec.score)
    return float(np.mean(scores))


def layer_boundary_test(
    unit_window: np.ndarray,
    same_layer_operands: np.ndarray,
    next_layer_operands: np.ndarray,
    cfg: LeakageConfig,
    margin_threshold: float = DEFAULT_MARGIN_THRESHOLD,
    max_products: int | None = 8,
    counter: HypothesisCounter | None = None,
) -> BoundaryDecision:
    """Decide whether a neuron block belongs to the current or next layer.

    ``unit_window`` is the block's multiplication region
    (n_traces, n_products * 4 * samples_per_byte). The operand matrices
    give, per trace, the values the block would consume under each
    hypothesis (current-layer inputs vs previous-layer outputs).
    """
    unit_window = np.asarray(unit_window, dtype=np.float64)
    same_ops = np.asarray(same_layer_operands, dtype=np.float32)
    next_ops = np.asarray(next_layer_operands, dtype=np.float32)
    if same_ops.ndim != 2 or next_ops.ndim != 2:
        raise UsageError("operand matrices must be (n_traces, n_operands)")

    same_score = _hypothesis_score(unit_window, same_ops, cfg, max_products, counter)
    next_score = _hypothesis_score(unit_window, next_ops, cfg, max_products, counter)
    top = max(same_score, next_score)
    margin = 0.0 if top <= 0 else abs(same_score - next_score) / top
    if margin < margin_threshold:
        decision = INCONCLUSIVE
    elif same_score > next_score:
        decision = SAME_LAYER
    else:
        decision = NEXT_LAYER
    return BoundaryDecision(
        decision=decision, margin=margin, same_score=same_score, next_score=next_score
    )
