"""Staged recovery of one multiplication operand from product-store leakage.

The attack works on the stored product ``m = known * secret`` and
recovers the secret in three correlation stages:

1. the top seven mantissa bits, hypothesized over [0, 127] with the
   rest assumed zero, against the mantissa-bearing byte windows of the
   product. Mantissas are scale-free, so both factors are normalized to
   exponent 127 and no exponent knowledge is needed;
2. sign and full exponent jointly, with the recovered mantissa pinned,
   against the two top byte windows;
3. a mantissa refinement with sign and exponent fixed, over all four
   byte windows.

The mantissa must come first: the mantissa product dominates the
leakage variance, and a sign/exponent hypothesis completed with an
arbitrary mantissa cannot outrank candidates that happen to track the
mantissa pattern.

The assembled value is exact in sign and exponent and quantized to
seven mantissa bits. An optional grid refinement then rescores nearby
grid values with a full-product prediction, recovering the exact value
when the secret is known to live on a coarse grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from ..floatbits import candidate_from_mantissa7, decompose, f32_bits, hw_of_bytes
from ..leakage import LeakageConfig, TraceSet
from .cpa import (
    CandidateRanking,
    HypothesisCounter,
    correlate_hypotheses,
    predicted_product_bytes,
)
from .segmentation import gather_window, spa_segment

DEFAULT_MARGIN_THRESHOLD = 0.05

MANTISSA_MASK = (1 << 23) - 1


@dataclass(frozen=True)
class StageResult:
    name: str
    ranking: CandidateRanking
    margin: float  # relative peak gap to the first genuinely different candidate

    @property
    def peak(self) -> float:
        return self.ranking.best_peak


def _stage_threshold(stage_name: str, margin_threshold: float) -> float:
    """Significance threshold for one stage.

    The sign/exponent and refinement stages separate hypotheses whose
    predictions differ in only one or two bits per trace, so their
    intrinsic margin scale is several times smaller than the first
    mantissa stage's; their requirement scales down accordingly.
    """
    if stage_name in ("sign_exponent", "mantissa7_refine"):
        return margin_threshold / 5.0
    return margin_threshold


def _neighborhood_margin(ranking: CandidateRanking, radius: float) -> float:
    """Margin of rank 1 over the best candidate outside its neighborhood.

    Candidates within ``radius`` of the winner count as the same answer
    (adjacent 7-bit mantissas are accepted near-misses), so they do not
    reduce the significance of the result.
    """
    top_value = float(ranking.values[0])
    top_peak = ranking.best_peak
    if top_peak <= 0.0:
        return 0.0
    outside = np.abs(ranking.values.astype(np.float64) - top_value) > radius
    if not outside.any():
        return 1.0
    rival = float(ranking.peaks[outside][np.argmax(ranking.peaks[outside])])
    return (top_peak - rival) / top_peak


@dataclass
class OperandRecovery:
    """Outcome of one staged operand recovery."""

    value: float | None
    precision: str  # "mantissa7", "full", or "zero"
    conclusive: bool
    zero_flag: bool
    stages: list[StageResult] = field(default_factory=list)
    score: float = 0.0  # best stage peak; comparable across hypotheses
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "precision": self.precision,
            "conclusive": self.conclusive,
            "zero_flag": self.zero_flag,
            "score": self.score,
            "stage_margins": {s.name: s.margin for s in self.stages},
            "stage_peaks": {s.name: s.peak for s in self.stages},
            "warnings": list(self.warnings),
        }


def _u32_to_f32(u: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(u, dtype=np.uint32).view(np.float32)


def _byte_window(window: np.ndarray, byte_index: int, spb: int) -> np.ndarray:
    return window[:, byte_index * spb : (byte_index + 1) * spb]


def _stage_correlate(candidates_f32, known, window, byte_indices, spb, counter):
    """Composite peak |corr| per candidate over the given byte windows.

    The selected byte-store windows of one product are correlated as a
    single flattened (trace, byte) series. A per-byte correlation would
    be blind to hypotheses whose predicted byte differs from the truth
    by a constant Hamming-weight offset (Pearson is affine-invariant);
    the composite series pins the relative levels of the registers and
    breaks exactly those ties. One coefficient is computed per
    within-byte sample offset and the peak over offsets is returned.

    Candidates whose completed value is not finite cannot occur and are
    scored zero.
    """
    known = np.asarray(known, dtype=np.float32)
    n_traces = known.shape[0]
    nb = len(byte_indices)
    hw_stack = np.empty((len(candidates_f32), n_traces, nb), dtype=np.float64)
    obs_stack = np.empty((n_traces, nb, spb), dtype=np.float64)
    for k, b in enumerate(byte_indices):
        bytes_matrix = predicted_product_bytes(candidates_f32, known, b)
        hw_stack[:, :, k] = hw_of_bytes(bytes_matrix)
        obs_stack[:, k, :] = _byte_window(window, b, spb)
    H = hw_stack.reshape(len(candidates_f32), n_traces * nb)
    T = obs_stack.reshape(n_traces * nb, spb)
    corr = correlate_hypotheses(H, T)
    if counter is not None:
        counter.add(len(candidates_f32))
    peaks = np.abs(corr).max(axis=1)
    peaks[~np.isfinite(np.asarray(candidates_f32, dtype=np.float32))] = 0.0
    return peaks


def _looks_like_zero(window: np.ndarray, cfg: LeakageConfig) -> bool:
    """All-zero product: bytes 0..2 leak HW 0, byte 3 only the sign bit."""
    spb = cfg.samples_per_byte
    levels = [
        float(_byte_window(window, b, spb).mean()) - cfg.mul_amplitude for b in range(4)
    ]
    return all(l < 0.25 for l in levels[:3]) and levels[3] < 1.25


def recover_operand(
    window: np.ndarray,
    known: np.ndarray,
    cfg: LeakageConfig,
    margin_threshold: float = DEFAULT_MARGIN_THRESHOLD,
    grid_refine: tuple[float, float] | None = None,
    counter: HypothesisCounter | None = None,
    value_bound: float = 64.0,
) -> OperandRecovery:
    """Recover the secret factor of one product from its store windows.

    ``window`` is the (n_traces, 4 * samples_per_byte) product region,
    byte 0 first; ``known`` is the per-trace known factor. When no stage
    separates its top candidates by ``margin_threshold`` (relative), the
    result is flagged inconclusive rather than silently guessed.

    ``value_bound`` caps the magnitude the secret may take (the usual
    bounded-range assumption); it prunes exponent hypotheses that a pure
    Hamming-weight trace cannot distinguish from their in-range
    equivalents (byte values with equal weight leak identically, so
    exponents far apart can produce literally identical predictions).
    """
    window = np.asarray(window, dtype=np.float64)
    spb = cfg.samples_per_byte
    if window.ndim != 2 or window.shape[1] != 4 * spb:
        raise UsageError(
            f"window must be (n_traces, {4 * spb}), got {window.shape}"
        )
    known = np.asarray(known, dtype=np.float32)
    if known.shape != (window.shape[0],):
        raise UsageError("need exactly one known operand per trace")
    if grid_refine is not None:
        value_bound = min(value_bound, float(grid_refine[0]))

    if _looks_like_zero(window, cfg):
        return OperandRecovery(
            value=0.0,
            precision="zero",
            conclusive=False,
            zero_flag=True,
            warnings=["product leakage is consistent with a zero operand"],
        )

    stages: list[StageResult] = []

    # Stage 1: top seven mantissa bits via the normalized mantissa
    # product. Both factors are rescaled to exponent 127, so the
    # prediction is the exact float32 mantissa of the product (mantissas
    # are scale-free) and no exponent knowledge is needed yet.
    known_normalized = _u32_to_f32(
        (np.uint32(127) << np.uint32(23)) | (f32_bits(known) & np.uint32(MANTISSA_MASK))
    )
    m7 = np.arange(128, dtype=np.uint32)
    bits_m = (np.uint32(127) << np.uint32(23)) | (m7 << np.uint32(16))
    peaks_m = _stage_correlate(
        _u32_to_f32(bits_m), known_normalized, window, (2, 1), spb, counter
    )
    ranking_m = CandidateRanking.from_scores(m7.astype(np.int64), peaks_m)
    stages.append(StageResult("mantissa7", ranking_m, _neighborhood_margin(ranking_m, 1.0)))
    best_m7 = int(ranking_m.best)

    # Stage 2: sign and full exponent, with the mantissa pinned. The
    # composite over the two top byte windows anchors absolute levels,
    # which per-byte correlation cannot (exponent offsets that only
    # shift non-interacting high bits leave per-byte Pearson unchanged).
    if value_bound <= 0:
        raise UsageError("value_bound must be positive")
    exp_max = decompose(float(value_bound)).exponent
    exp_min = 64  # secrets below 2^-63 are handled by the zero detector
    exp_values = np.arange(exp_min, exp_max + 1, dtype=np.uint32)
    n_exp = len(exp_values)
    se = np.arange(2 * n_exp, dtype=np.int64)
    sign_c = (se // n_exp).astype(np.uint32)
    exp_c = exp_values[se % n_exp]
    bits_se = (
        (sign_c << np.uint32(31))
        | (exp_c << np.uint32(23))
        | (np.uint32(best_m7) << np.uint32(16))
    )
    # Encode (sign, exponent) as a single sortable hypothesis id.
    se_ids = sign_c.astype(np.int64) * 256 + exp_c.astype(np.int64)
    peaks_se = _stage_correlate(_u32_to_f32(bits_se), known, window, (3, 2), spb, counter)
    ranking_se = CandidateRanking.from_scores(se_ids, peaks_se)
    stages.append(StageResult("sign_exponent", ranking_se, ranking_se.margin))
    best_se = int(ranking_se.best)
    sign = best_se // 256
    exponent = best_se % 256

    # Stage 3: mantissa refinement with sign and exponent fixed, now over
    # every byte window of the product.
    bits_r = (
        (np.uint32(sign) << np.uint32(31))
        | (np.uint32(exponent) << np.uint32(23))
        | (m7 << np.uint32(16))
    )
    peaks_r = _stage_correlate(_u32_to_f32(bits_r), known, window, (3, 2, 1, 0), spb, counter)
    ranking_r = CandidateRanking.from_scores(m7.astype(np.int64), peaks_r)
    stages.append(StageResult("mantissa7_refine", ranking_r, _neighborhood_margin(ranking_r, 1.0)))
    best_m7 = int(ranking_r.best)

    value = candidate_from_mantissa7(best_m7, sign, exponent)
    precision = "mantissa7"
    warnings: list[str] = []

    if grid_refine is not None:
        bound, step = grid_refine
        if bound <= 0 or step <= 0:
            raise UsageError("grid_refine needs positive (bound, step)")
        # Candidate grid values near the staged estimate and near its
        # mirror image: with single-signed known operands the product
        # sign is constant, so the staged sign rests on a weak absolute
        # anchor and the exact-prediction rescoring must get the chance
        # to flip it.
        radius = max(3.0 * step, abs(value) * 2.0**-6)
        k_max = int(round(bound / step))
        ks: set[int] = set()
        for center in (value, -value):
            k_lo = max(int(np.ceil((center - radius) / step)), -k_max)
            k_hi = min(int(np.floor((center + radius) / step)), k_max)
            ks.update(range(k_lo, k_hi + 1))
        if ks:
            grid_vals = (np.array(sorted(ks), dtype=np.float64) * step).astype(
                np.float32
            )
            peaks_g = _stage_correlate(grid_vals, known, window, (3, 2, 1, 0), spb, counter)
            ranking_g = CandidateRanking.from_scores(grid_vals.astype(np.float64), peaks_g)
            stages.append(StageResult("grid", ranking_g, ranking_g.margin))
            # The exact-prediction rescoring is the strongest evidence;
            # its winner is adopted even at low margin (the margin still
            # shows up in the conclusive flag and the warnings).
            value = float(np.float32(ranking_g.best))
            precision = "full"

    conclusive = all(
        s.margin >= _stage_threshold(s.name, margin_threshold) for s in stages
    )
    warnings.extend(
        f"stage {s.name} margin {s.margin:.4f} below threshold "
        f"{_stage_threshold(s.name, margin_threshold):.4f}"
        for s in stages
        if s.margin < _stage_threshold(s.name, margin_threshold)
    )

    return OperandRecovery(
        value=float(value),
        precision=precision,
        conclusive=conclusive,
        zero_flag=False,
        stages=stages,
        score=max(s.peak for s in stages),
        warnings=warnings,
    )


def product_starts_from_annotations(ts: TraceSet, layer: int, neuron: int, input_index: int) -> np.ndarray:
    """Per-trace start offsets of one product's store window (ground truth)."""
    starts = np.empty(len(ts), dtype=np.int64)
    for i, tr in enumerate(ts.traces):
        if tr.annotations is None:
            raise UsageError("trace set has no annotations; segment instead")
        found = [
            a
            for a in tr.annotations
            if a.kind == "mul" and a.layer == layer and a.neuron == neuron
        ]
        if input_index >= len(found):
            raise UsageError(
                f"trace {i} has {len(found)} products for layer {layer} neuron {neuron}, "
                f"need index {input_index}"
            )
        starts[i] = found[input_index].start
    return starts


def unit_starts_from_segmentation(ts: TraceSet, unit_index: int, product_index: int) -> np.ndarray:
    """Per-trace start offsets of one product window, located by SPA."""
    starts = np.empty(len(ts), dtype=np.int64)
    spb = ts.config.samples_per_byte
    for i, tr in enumerate(ts.traces):
        units = spa_segment(tr, ts.config)
        if unit_index >= len(units):
            raise UsageError(f"trace {i}: only {len(units)} units, need index {unit_index}")
        s, _ = units[unit_index].product_slice(product_index, spb)
        starts[i] = s
    return starts


def recover_weight_from_traceset(
    ts: TraceSet,
    layer: int,
    neuron: int,
    input_index: int,
    margin_threshold: float = DEFAULT_MARGIN_THRESHOLD,
    grid_refine: tuple[float, float] | None = None,
    counter: HypothesisCounter | None = None,
    input_column: int | None = None,
) -> OperandRecovery:
    """Recover one first-layer weight from an annotated trace set.

    The known operand defaults to input column ``input_index`` (valid
    for the first layer, where products consume the raw inputs in
    order).
    """
    if layer != 0 and input_column is None:
        raise UsageError(
            "recovering beyond the first layer needs input_column with computed operands"
        )
    starts = product_starts_from_annotations(ts, layer, neuron, input_index)
    window = gather_window(ts.traces, starts, 4 * ts.config.samples_per_byte)
    col = input_index if input_column is None else input_column
    return recover_operand(
        window,
        ts.inputs[:, col],
        ts.config,
        margin_threshold=margin_threshold,
        grid_refine=grid_refine,
        counter=counter,
    )


def mantissa_near_miss(recovered: float, true_value: float, tolerance: float = 0.01) -> bool:
    """True when two values share sign and exponent and their mantissa
    fractions differ by less than ``tolerance`` (the accepted precision
    error of the reduced mantissa search)."""
    a = decompose(recovered)
    b = decompose(true_value)
    if a.sign != b.sign or a.exponent != b.exponent:
        return False
    return abs(a.mantissa - b.mantissa) / 2.0**23 < tolerance
