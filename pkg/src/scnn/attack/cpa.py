"""Correlation analysis core: Pearson statistics and hypothesis ranking.

The hot path is ``correlate_hypotheses``: it standardizes the predicted
leakage matrix (hypotheses x traces) and the observed window (traces x
samples) once, then gets the full correlation surface from one matrix
product. Rankings use the peak absolute coefficient over the window,
with peak values quantized to 1e-12 before sorting so that exact
mathematical ties (and affine rescalings of the traces, which Pearson
is invariant to) always break deterministically by ascending hypothesis
value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UndefinedCorrelationError, UsageError
from ..floatbits import f32_bits, hw_of_bytes, storage_byte

PEAK_QUANTUM = 1e-12


def pearson(a, b) -> float:
    """Sample Pearson correlation of two equal-length series.

    Raises :class:`UndefinedCorrelationError` when either side has zero
    variance; callers treat such hypotheses as uninformative.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise UsageError(f"need equal-length 1-D series, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise UsageError("need at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelationError("zero variance series")
    r = float(xc @ yc) / np.sqrt(vx * vy)
    return min(1.0, max(-1.0, r))


def correlate_hypotheses(predictions: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Pearson coefficients of every hypothesis against every sample.

    ``predictions`` is (n_hypotheses, n_traces), ``window`` is
    (n_traces, n_samples). Zero-variance rows or columns produce zero
    coefficients (uninformative, never NaN).
    """
    H = np.asarray(predictions, dtype=np.float64)
    T = np.asarray(window, dtype=np.float64)
    if H.ndim != 2 or T.ndim != 2 or H.shape[1] != T.shape[0]:
        raise UsageError(
            f"shape mismatch: predictions {H.shape} vs window {T.shape}"
        )
    n = H.shape[1]
    if n < 2:
        raise UsageError("need at least 2 traces")
    Hc = H - H.mean(axis=1, keepdims=True)
    hs = np.sqrt((Hc * Hc).sum(axis=1))
    dead_h = hs == 0.0
    hs[dead_h] = 1.0
    Tc = T - T.mean(axis=0, keepdims=True)
    ts = np.sqrt((Tc * Tc).sum(axis=0))
    dead_t = ts == 0.0
    ts[dead_t] = 1.0
    corr = (Hc / hs[:, None]) @ (Tc / ts[None, :])
    if dead_h.any():
        corr[dead_h, :] = 0.0
    if dead_t.any():
        corr[:, dead_t] = 0.0
    return np.clip(corr, -1.0, 1.0)


@dataclass(frozen=True)
class CorrelationCurve:
    """Per-sample coefficients of one hypothesis over a window."""

    hypothesis: float
    coefficients: np.ndarray
    peak_index: int
    peak_abs: float

    @classmethod
    def from_coefficients(cls, hypothesis, coefficients) -> "CorrelationCurve":
        coeff = np.asarray(coefficients, dtype=np.float64)
        idx = int(np.argmax(np.abs(coeff)))
        return cls(
            hypothesis=float(hypothesis),
            coefficients=coeff,
            peak_index=idx,
            peak_abs=float(abs(coeff[idx])),
        )


@dataclass(frozen=True)
class CandidateRanking:
    """Hypotheses ordered by peak |coefficient|, descending.

    Exact ties (after 1e-12 quantization) break by ascending hypothesis
    value, so the ordering is total and deterministic.
    """

    values: np.ndarray  # hypothesis values, ranked
    peaks: np.ndarray  # corresponding peak |coefficient|

    @classmethod
    def from_scores(cls, values, peaks) -> "CandidateRanking":
        v = np.asarray(values)
        p = np.asarray(peaks, dtype=np.float64)
        if v.shape != p.shape or v.ndim != 1 or v.size == 0:
            raise UsageError("values and peaks must be matching non-empty 1-D arrays")
        q = np.round(p / PEAK_QUANTUM) * PEAK_QUANTUM
        order = np.lexsort((v, -q))
        return cls(values=v[order], peaks=p[order])

    @property
    def best(self):
        return self.values[0]

    @property
    def best_peak(self) -> float:
        return float(self.peaks[0])

    def rank_of(self, value) -> int:
        matches = np.flatnonzero(self.values == value)
        if matches.size == 0:
            raise UsageError(f"hypothesis {value!r} not in ranking")
        return int(matches[0])

    @property
    def margin(self) -> float:
        """Relative peak gap between rank 1 and rank 2, in [0, 1]."""
        if len(self.values) < 2:
            return 1.0
        top = float(self.peaks[0])
        if top <= 0.0:
            return 0.0
        return (top - float(self.peaks[1])) / top


@dataclass(frozen=True)
class HypothesisSpace:
    """Candidate set for one CPA run."""

    kind: str  # "grid", "mantissa7", or "byte"
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 1 or v.size == 0:
            raise UsageError("hypothesis space must be non-empty")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def grid(cls, bound: float, step: float) -> "HypothesisSpace":
        """Values ``{-bound, -bound+step, ..., bound}`` as float32."""
        if bound <= 0 or step <= 0:
            raise UsageError(f"grid needs bound > 0 and step > 0, got {bound}, {step}")
        k = int(round(bound / step))
        values = (np.arange(-k, k + 1, dtype=np.float64) * step).astype(np.float32)
        return cls(kind="grid", values=values)

    @classmethod
    def mantissa7(cls) -> "HypothesisSpace":
        return cls(kind="mantissa7", values=np.arange(128, dtype=np.int64))

    @classmethod
    def byte_values(cls) -> "HypothesisSpace":
        return cls(kind="byte", values=np.arange(256, dtype=np.int64))


def predicted_product_bytes(
    candidates: np.ndarray, known: np.ndarray, byte_index: int
) -> np.ndarray:
    """HW-model prediction: storage byte of float32(known * candidate).

    Returns the (n_candidates, n_traces) byte matrix. The multiply uses
    the same float32 semantics as the instrumented device, so the
    correct candidate predicts the leaked byte exactly.
    """
    cand = np.asarray(candidates, dtype=np.float32)
    x = np.asarray(known, dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        products = np.multiply.outer(cand, x).astype(np.float32, copy=False)
    return storage_byte(f32_bits(products), byte_index).reshape(cand.size, x.size)


def cpa_byte(
    window: np.ndarray,
    known: np.ndarray,
    space: HypothesisSpace,
    predict,
    return_curves: bool = False,
    counter=None,
):
    """Rank hypotheses by peak |Pearson| of predicted HW over a window.

    ``window`` is the (n_traces, n_samples) observed samples, already
    aligned (callers cut it from traces via annotations or
    segmentation). ``predict(space_values, known)`` returns the
    (n_hypotheses, n_traces) predicted byte matrix.
    """
    T = np.asarray(window, dtype=np.float64)
    if T.ndim != 2 or T.shape[1] == 0:
        raise UsageError(f"window must be (n_traces, n_samples) and non-empty, got {T.shape}")
    known_arr = np.asarray(known)
    if known_arr.shape[0] != T.shape[0]:
        raise UsageError(
            f"{known_arr.shape[0]} known operands for {T.shape[0]} traces"
        )
    bytes_matrix = predict(space.values, known_arr)
    hw = hw_of_bytes(np.asarray(bytes_matrix, dtype=np.uint8)).astype(np.float64)
    corr = correlate_hypotheses(hw, T)
    if counter is not None:
        counter.add(len(space))
    peaks = np.abs(corr).max(axis=1)
    ranking = CandidateRanking.from_scores(space.values, peaks)
    if return_curves:
        curves = [
            CorrelationCurve.from_coefficients(space.values[i], corr[i])
            for i in range(len(space))
        ]
        return ranking, curves
    return ranking


class HypothesisCounter:
    """Tallies how many hypothesis evaluations an attack performed."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, count: int) -> None:
        self.total += int(count)
