"""Amplitude-based trace segmentation (the SPA step).

Multiplication windows sit at ``mul_amplitude + HW`` (at most
``mul_amplitude + 8``) while activation windows sit at
``act_amplitude``, so a smoothed threshold between the two levels
separates them. Short runs are absorbed into their neighbors to survive
noise, then boundaries are re-localized on the raw samples with a step
fit, which makes noiseless boundaries exact. Multiplication region
lengths are snapped to whole products (4 bytes x samples_per_byte).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import UsageError
from ..leakage import LeakageConfig, Trace

HW_MAX = 8


@dataclass(frozen=True)
class Region:
    kind: str  # "mul" or "act"
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class NeuronUnit:
    """One multiplication block paired with the activation that follows it."""

    mul_start: int
    mul_end: int
    act_start: int
    act_end: int
    n_products: int

    @property
    def mul_span(self) -> tuple[int, int]:
        return (self.mul_start, self.mul_end)

    @property
    def act_span(self) -> tuple[int, int]:
        return (self.act_start, self.act_end)

    @property
    def act_length(self) -> int:
        return self.act_end - self.act_start

    def product_slice(self, product_index: int, samples_per_byte: int) -> tuple[int, int]:
        width = 4 * samples_per_byte
        start = self.mul_start + product_index * width
        if product_index < 0 or product_index >= self.n_products:
            raise UsageError(
                f"product index {product_index} out of range [0, {self.n_products})"
            )
        return (start, start + width)


def _segmentation_threshold(cfg: LeakageConfig) -> float:
    mul_top = cfg.mul_amplitude + HW_MAX
    act_floor = cfg.act_amplitude - cfg.act_ripple
    return 0.5 * (mul_top + act_floor)


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x.astype(np.float64)
    kernel = np.ones(width) / width
    # Reflect edges so boundary samples keep a full-width neighborhood.
    padded = np.pad(x.astype(np.float64), width, mode="edge")
    smoothed = np.convolve(padded, kernel, mode="same")
    return smoothed[width:-width]


def _runs(mask: np.ndarray) -> list[tuple[int, int, bool]]:
    if mask.size == 0:
        return []
    changes = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    bounds = np.concatenate(([0], changes, [mask.size]))
    return [
        (int(bounds[i]), int(bounds[i + 1]), bool(mask[bounds[i]]))
        for i in range(len(bounds) - 1)
    ]


def _close_then_open(mask: np.ndarray, close_gap: int, min_act: int) -> np.ndarray:
    """Morphological cleanup of the activation mask.

    First fill short non-act gaps lying between act runs (noise dips
    inside an activation window), then drop act runs still shorter than
    ``min_act`` (noise spikes inside a multiplication region). Real
    multiplication regions span at least one product and are never
    closed over.
    """
    mask = mask.copy()
    runs = _runs(mask)
    for i, (start, end, is_act) in enumerate(runs):
        if (
            not is_act
            and end - start < close_gap
            and 0 < i < len(runs) - 1
        ):
            mask[start:end] = True
    for start, end, is_act in _runs(mask):
        if is_act and end - start < min_act:
            mask[start:end] = False
    return mask


def _refine_boundary(raw: np.ndarray, coarse: int, radius: int, threshold: float, rising: bool) -> int:
    """Step-fit re-localization of one boundary on raw samples.

    Picks the cut minimizing the count of samples on the wrong side of
    the threshold; exact on noiseless traces.
    """
    lo = max(0, coarse - radius)
    hi = min(len(raw), coarse + radius)
    if hi <= lo:
        return coarse
    above = (raw[lo:hi] > threshold).astype(np.int32)
    if not rising:
        above = 1 - above
    # cost(c) = sum(above[:c]) + sum(1 - above[c:]) for cut positions c in [0, hi-lo]
    prefix = np.concatenate(([0], np.cumsum(above)))
    total = prefix[-1]
    n = len(above)
    costs = prefix[: n + 1] + (n - np.arange(n + 1)) - (total - prefix[: n + 1])
    return lo + int(np.argmin(costs))


def segment_regions(trace: Trace, cfg: LeakageConfig) -> list[Region]:
    """Classified (mul/act) regions of one trace, in order."""
    raw = np.asarray(trace.samples, dtype=np.float64)
    if raw.size == 0:
        return []
    threshold = _segmentation_threshold(cfg)
    smoothed = _moving_average(raw, cfg.samples_per_byte)
    mask = smoothed > threshold  # True = activation-like
    # Gaps shorter than half a product inside an act window are noise
    # dips; act runs shorter than half the shortest activation window
    # are noise spikes.
    close_gap = 2 * cfg.samples_per_byte - 2
    min_act = max(
        4,
        min(int(p.min_ns / cfg.time_unit_ns) for p in cfg.profiles.values()) // 2,
    )
    mask = _close_then_open(mask, close_gap=close_gap, min_act=min_act)
    if not mask.any():
        return []  # nothing activation-like: no detectable structure

    runs = _runs(mask)
    radius = 2 * cfg.samples_per_byte
    boundaries = [0]
    for i in range(1, len(runs)):
        coarse = runs[i][0]
        rising = runs[i][2]
        refined = _refine_boundary(raw, coarse, radius, threshold, rising)
        boundaries.append(max(refined, boundaries[-1]))
    boundaries.append(len(raw))
    regions: list[Region] = []
    for i, (_, _, is_act) in enumerate(runs):
        start, end = boundaries[i], boundaries[i + 1]
        if end <= start:
            continue
        kind = "act" if is_act else "mul"
        if regions and regions[-1].kind == kind:
            regions[-1] = Region(kind=kind, start=regions[-1].start, end=end)
        else:
            regions.append(Region(kind=kind, start=start, end=end))
    return regions


def spa_segment(trace: Trace, cfg: LeakageConfig) -> list[NeuronUnit]:
    """Ordered (mul region, act region) pairs of one trace.

    A fused multiplication block (several neurons followed by a single
    vector activation, as an output softmax produces) appears as one
    unit whose product count is the whole block.
    """
    regions = segment_regions(trace, cfg)
    units: list[NeuronUnit] = []
    width = 4 * cfg.samples_per_byte
    i = 0
    while i + 1 < len(regions):
        mul, act = regions[i], regions[i + 1]
        if mul.kind != "mul" or act.kind != "act":
            i += 1
            continue
        n_products = int(round(mul.length / width))
        if n_products >= 1:
            units.append(
                NeuronUnit(
                    mul_start=mul.start,
                    mul_end=mul.end,
                    act_start=act.start,
                    act_end=act.end,
                    n_products=n_products,
                )
            )
        i += 2
    return units


def gather_window(traces, starts, width: int) -> np.ndarray:
    """(n_traces, width) matrix cut from per-trace start offsets."""
    starts = np.asarray(starts, dtype=np.int64)
    if starts.ndim != 1 or len(starts) != len(traces):
        raise UsageError("need one start offset per trace")
    out = np.empty((len(traces), width), dtype=np.float64)
    for i, tr in enumerate(traces):
        s = int(starts[i])
        if s < 0 or s + width > len(tr.samples):
            raise UsageError(
                f"window [{s}, {s + width}) out of bounds for trace {i} of length {len(tr.samples)}"
            )
        out[i] = tr.samples[s : s + width]
    return out
