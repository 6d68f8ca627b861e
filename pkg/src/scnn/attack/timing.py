"""Activation identification from duration measurements.

Durations separate relu and softmax from everything else by scale
alone. Sigmoid and tanh overlap in range, so when the activation inputs
are available the duration-versus-input pattern is used as a
tie-breaker: sigmoid durations fall monotonically with the input,
tanh durations fall monotonically with its magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import UndefinedCorrelationError, UsageError
from ..leakage import (
    DEFAULT_TIMING_PROFILES,
    SOFTMAX_CALIBRATION_OUTPUTS,
    TimingProfile,
)
from ..mlp import ActivationKind
from .cpa import pearson

PATTERN_DECISION_GAP = 0.2


@dataclass
class ClassificationResult:
    kind: ActivationKind
    distances: dict[ActivationKind, float]
    margin: float  # relative gap between best and runner-up distance
    pattern_used: bool = False
    pattern_ambiguous: bool = False
    pattern_scores: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "distances": {k.value: v for k, v in self.distances.items()},
            "margin": self.margin,
            "pattern_used": self.pattern_used,
            "pattern_ambiguous": self.pattern_ambiguous,
            "pattern_scores": dict(self.pattern_scores),
        }


def _profile_stats(p: TimingProfile, scale: float) -> np.ndarray:
    return np.array([p.min_ns, p.mean_ns, p.max_ns]) * scale


def _stats_distance(observed: np.ndarray, profile: np.ndarray) -> float:
    # Normalized per-statistic deviation; log scale so the huge spread
    # between relu and softmax does not swamp the comparison.
    return float(np.mean(np.abs(np.log(observed) - np.log(profile))))


def classify_activation(
    durations_ns: Sequence[float],
    inputs: Sequence[float] | None = None,
    profiles: Mapping[ActivationKind, TimingProfile] | None = None,
    output_count: int | None = None,
) -> ClassificationResult:
    """Identify the activation kind behind a set of measured durations.

    ``inputs`` optionally carries the activation input for each
    duration; ``output_count`` scales the softmax profile when the
    candidate layer width is known.
    """
    d = np.asarray(durations_ns, dtype=np.float64)
    if d.ndim != 1 or d.size < 1:
        raise UsageError("need at least one duration")
    if np.any(d <= 0):
        raise UsageError("durations must be positive")
    profiles = profiles if profiles is not None else DEFAULT_TIMING_PROFILES

    observed = np.array([d.min(), d.mean(), d.max()])
    distances: dict[ActivationKind, float] = {}
    for kind, profile in profiles.items():
        scale = 1.0
        if kind is ActivationKind.SOFTMAX and output_count is not None:
            scale = output_count / SOFTMAX_CALIBRATION_OUTPUTS
        distances[kind] = _stats_distance(observed, _profile_stats(profile, scale))

    ordered = sorted(distances.items(), key=lambda kv: kv[1])
    best_kind, best_dist = ordered[0]
    second_kind, second_dist = ordered[1]
    margin = (second_dist - best_dist) / second_dist if second_dist > 0 else 0.0

    result = ClassificationResult(kind=best_kind, distances=distances, margin=margin)

    contenders = {best_kind, second_kind}
    if (
        inputs is not None
        and contenders == {ActivationKind.SIGMOID, ActivationKind.TANH}
        and len(inputs) == d.size
        and d.size >= 3
    ):
        x = np.asarray(inputs, dtype=np.float64)
        try:
            r_linear = abs(pearson(d, x))
            r_symmetric = abs(pearson(d, np.abs(x)))
        except UndefinedCorrelationError:
            # Constant durations (or inputs): the pattern carries nothing.
            result.pattern_used = True
            result.pattern_ambiguous = True
            result.pattern_scores = {"linear": 0.0, "symmetric": 0.0}
            return result
        result.pattern_used = True
        result.pattern_scores = {"linear": r_linear, "symmetric": r_symmetric}
        if r_symmetric - r_linear > PATTERN_DECISION_GAP:
            result.kind = ActivationKind.TANH
        elif r_linear - r_symmetric > PATTERN_DECISION_GAP:
            result.kind = ActivationKind.SIGMOID
        else:
            result.pattern_ambiguous = True
    return result
