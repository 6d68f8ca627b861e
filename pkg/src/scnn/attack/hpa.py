"""Single-trace input recovery against a known first layer.

One inference multiplies every first-layer weight with the same input
component, so a single trace already contains many observations of that
component. The trace is cut into one sub-trace per first-layer neuron
and the staged operand recovery runs across those sub-traces with the
weights as the known factors and the input as the secret, exactly as
batch CPA would treat independent traces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from ..leakage import LeakageConfig, Trace
from .cpa import HypothesisCounter
from .segmentation import spa_segment
from .weights import DEFAULT_MARGIN_THRESHOLD, OperandRecovery, recover_operand

DEFAULT_RELIABILITY_FLOOR = 20


@dataclass
class InputRecovery:
    estimates: list[OperandRecovery]
    observations: int  # sub-traces per component
    warnings: list[str] = field(default_factory=list)

    def values(self) -> list[float | None]:
        return [e.value for e in self.estimates]

    def to_json_dict(self) -> dict:
        return {
            "observations": self.observations,
            "estimates": [e.to_json_dict() for e in self.estimates],
            "warnings": list(self.warnings),
        }


def cut_first_layer_subtraces(
    trace: Trace, cfg: LeakageConfig, n_neurons: int, input_dim: int
) -> np.ndarray:
    """(n_neurons, input_dim * 4 * spb) product regions of the first layer.

    Row j holds neuron j's multiplication block, located by
    segmentation; the architecture (neuron and input counts) is known in
    this attack setting.
    """
    units = spa_segment(trace, cfg)
    if len(units) < n_neurons:
        raise UsageError(
            f"segmentation found {len(units)} units, expected at least {n_neurons}"
        )
    width = 4 * cfg.samples_per_byte
    out = np.empty((n_neurons, input_dim * width), dtype=np.float64)
    for j in range(n_neurons):
        unit = units[j]
        if unit.n_products != input_dim:
            raise UsageError(
                f"unit {j} has {unit.n_products} products, expected {input_dim}"
            )
        out[j] = trace.samples[unit.mul_start : unit.mul_start + input_dim * width]
    return out


def hpa_input_recovery(
    trace: Trace,
    first_layer_weights: np.ndarray,
    cfg: LeakageConfig,
    components: list[int] | None = None,
    margin_threshold: float = DEFAULT_MARGIN_THRESHOLD,
    reliability_floor: int = DEFAULT_RELIABILITY_FLOOR,
    counter: HypothesisCounter | None = None,
) -> InputRecovery:
    """Recover input components from one trace, given first-layer weights.

    ``first_layer_weights`` is the (n_neurons, input_dim) matrix of the
    known network. Each input component is attacked across the
    n_neurons sub-traces that multiply it.
    """
    weights = np.asarray(first_layer_weights, dtype=np.float32)
    if weights.ndim != 2:
        raise UsageError("first_layer_weights must be (n_neurons, input_dim)")
    n_neurons, input_dim = weights.shape
    subtraces = cut_first_layer_subtraces(trace, cfg, n_neurons, input_dim)

    warnings: list[str] = []
    if n_neurons < reliability_floor:
        warnings.append(
            f"only {n_neurons} observations per component, below the reliability "
            f"floor of {reliability_floor}; estimates are low-confidence"
        )

    width = 4 * cfg.samples_per_byte
    todo = components if components is not None else list(range(input_dim))
    estimates = []
    for comp in todo:
        if not 0 <= comp < input_dim:
            raise UsageError(f"component {comp} out of range [0, {input_dim})")
        window = subtraces[:, comp * width : (comp + 1) * width]
        rec = recover_operand(
            window,
            weights[:, comp],
            cfg,
            margin_threshold=margin_threshold,
            counter=counter,
        )
        if warnings:
            rec.warnings = rec.warnings + warnings
        estimates.append(rec)
    return InputRecovery(estimates=estimates, observations=n_neurons, warnings=warnings)
