"""Synthetic side-channel trace generation.

The simulator turns an execution log into a sampled trace under two
leakage mechanisms:

* value leakage: each product store emits one window per storage byte
  whose noiseless level is ``mul_amplitude + HW(byte)``, bytes in
  least-significant-first order (the bus is pre-charged to zero, so a
  load's consumption tracks the number of set bits);
* timing leakage: each activation evaluation emits a window at
  ``act_amplitude`` whose length in samples is the activation's
  input-dependent duration divided by the sample period.

Gaussian noise is added per sample. Every trace is deterministic given
(config seed, trace seed), and per-trace RNG streams are independent so
batch simulation parallelizes without changing results.

The per-kind duration envelopes below are calibration constants for the
simulated 8-bit target; the shapes are parametric but pinned to those
envelopes: constant-plus-jitter for relu, a monotone ramp (slower for
negative inputs) for sigmoid, a symmetric peak at zero with a sharp
fast path near |x| = 2 for tanh, and output-count scaling for softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import UsageError
from .floatbits import f32_bits, hw_of_bytes, storage_byte
from .mlp import (
    ActEval,
    ActivationKind,
    ExecutionLog,
    MulStore,
    NetworkDescription,
    SoftmaxEval,
    forward,
)


@dataclass(frozen=True)
class TimingProfile:
    """Duration envelope (ns) of one activation kind."""

    min_ns: float
    max_ns: float
    mean_ns: float

    def __post_init__(self) -> None:
        if not self.min_ns <= self.mean_ns <= self.max_ns:
            raise UsageError(
                f"profile must satisfy min <= mean <= max, got {self}"
            )


#: Calibration defaults measured on the simulated 8-bit target.
DEFAULT_TIMING_PROFILES: dict[ActivationKind, TimingProfile] = {
    ActivationKind.RELU: TimingProfile(5879.0, 6069.0, 5975.0),
    ActivationKind.SIGMOID: TimingProfile(152155.0, 222102.0, 189144.0),
    ActivationKind.TANH: TimingProfile(51909.0, 210663.0, 184864.0),
    ActivationKind.SOFTMAX: TimingProfile(724366.0, 877194.0, 813712.0),
}

#: Output count at which the softmax profile was calibrated.
SOFTMAX_CALIBRATION_OUTPUTS = 3

# Noise (in HW units) per target preset. The low-SNR arm preset is
# calibrated so that weight recovery needs about twice the traces the
# avr preset needs.
SNR_PRESETS = {"avr": 1.0, "arm": 4.0}

#: Relative extra measurements recommended per preset (low-SNR targets
#: need about twice the traces of the high-SNR reference).
TRACE_MULTIPLIERS = {"avr": 1, "arm": 2}


def _mix_bits(u: np.ndarray) -> np.ndarray:
    """32-bit finalizer scramble, vectorized (uint64 lanes, mod 2^32)."""
    z = u.astype(np.uint64)
    mask = np.uint64(0xFFFFFFFF)
    z = (z + np.uint64(0x9E3779B9)) & mask
    z ^= z >> np.uint64(16)
    z = (z * np.uint64(0x85EBCA6B)) & mask
    z ^= z >> np.uint64(13)
    z = (z * np.uint64(0xC2B2AE35)) & mask
    z ^= z >> np.uint64(16)
    return z


def _jitter01(x) -> np.ndarray:
    """Deterministic pseudo-uniform in [0, 1) from the bits of ``x``.

    Keeps trace length a pure function of the activation inputs while
    still exercising the full duration envelope.
    """
    bits = f32_bits(np.atleast_1d(np.asarray(x, dtype=np.float32)))
    return _mix_bits(bits).astype(np.float64) / 2.0**32


def _fold_vector(values: Sequence[float]) -> float:
    """Fold a vector into one float32 so vector inputs can be jittered."""
    bits = f32_bits(np.asarray(values, dtype=np.float32))
    acc = np.uint64(0x9E3779B9)
    for b in bits:
        acc = _mix_bits(np.array([acc ^ np.uint64(b)], dtype=np.uint64))[0]
    return float(np.array([acc & np.uint64(0xFFFFFFFF)], dtype=np.uint32).view(np.float32)[0])


def duration_ns(
    kind: ActivationKind,
    x: float,
    output_count: int = 1,
    profiles: Mapping[ActivationKind, TimingProfile] | None = None,
) -> float:
    """Duration of one activation evaluation, in nanoseconds.

    ``output_count`` only matters for softmax, whose cost grows with the
    number of outputs; its envelope is scaled by
    ``output_count / SOFTMAX_CALIBRATION_OUTPUTS``.
    """
    profiles = profiles if profiles is not None else DEFAULT_TIMING_PROFILES
    p = profiles[kind]
    span = p.max_ns - p.min_ns
    if kind is ActivationKind.RELU:
        return p.min_ns + float(_jitter01(x)[0]) * span
    if kind is ActivationKind.SIGMOID:
        # Monotone ramp: fastest at x = +2, slowest at x = -2.
        t = min(1.0, max(0.0, (2.0 - float(np.float32(x))) / 4.0))
        return p.min_ns + t * span
    if kind is ActivationKind.TANH:
        # Symmetric in |x|, slowest near 0, sharp fast path toward |x| = 2.
        # The exponent is chosen so the mean over x ~ U[-2, 2] matches the
        # calibrated mean exactly.
        if span == 0.0:
            return p.max_ns
        shape = span / (p.max_ns - p.mean_ns) - 1.0
        t = min(1.0, abs(float(np.float32(x))) / 2.0)
        return p.max_ns - span * t**shape
    if kind is ActivationKind.SOFTMAX:
        if output_count < 1:
            raise UsageError(f"output_count must be >= 1, got {output_count}")
        scale = output_count / SOFTMAX_CALIBRATION_OUTPUTS
        return (p.min_ns + float(_jitter01(x)[0]) * span) * scale
    raise UsageError(f"unknown activation {kind}")  # pragma: no cover


def duration_bounds_ns(
    kind: ActivationKind,
    output_count: int = 1,
    profiles: Mapping[ActivationKind, TimingProfile] | None = None,
) -> tuple[float, float]:
    """Envelope of :func:`duration_ns` for the given kind and output count."""
    profiles = profiles if profiles is not None else DEFAULT_TIMING_PROFILES
    p = profiles[kind]
    if kind is ActivationKind.SOFTMAX:
        scale = output_count / SOFTMAX_CALIBRATION_OUTPUTS
        return p.min_ns * scale, p.max_ns * scale
    return p.min_ns, p.max_ns


@dataclass(frozen=True)
class LeakageConfig:
    """Everything that governs trace synthesis."""

    noise_sigma: float = 1.0
    samples_per_byte: int = 4
    mul_amplitude: float = 10.0
    act_amplitude: float = 20.0
    act_ripple: float = 0.3
    time_unit_ns: float = 250.0
    snr_preset: str = "avr"
    seed: int = 0
    profiles: Mapping[ActivationKind, TimingProfile] = field(
        default_factory=lambda: dict(DEFAULT_TIMING_PROFILES)
    )

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise UsageError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.samples_per_byte < 1:
            raise UsageError("samples_per_byte must be positive")
        if self.time_unit_ns <= 0:
            raise UsageError("time_unit_ns must be positive")
        if self.mul_amplitude == self.act_amplitude:
            raise UsageError("mul_amplitude and act_amplitude must differ")
        if self.snr_preset not in SNR_PRESETS:
            raise UsageError(f"unknown preset {self.snr_preset!r}, expected one of {sorted(SNR_PRESETS)}")

    @classmethod
    def avr(cls, seed: int = 0, **overrides) -> "LeakageConfig":
        """High-SNR 8-bit target preset."""
        kw = dict(noise_sigma=SNR_PRESETS["avr"], snr_preset="avr", seed=seed)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def arm(cls, seed: int = 0, **overrides) -> "LeakageConfig":
        """Low-SNR 32-bit target preset; plan on about twice the traces."""
        kw = dict(noise_sigma=SNR_PRESETS["arm"], snr_preset="arm", seed=seed)
        kw.update(overrides)
        return cls(**kw)

    @property
    def recommended_trace_multiplier(self) -> int:
        return TRACE_MULTIPLIERS[self.snr_preset]

    def act_samples(self, kind: ActivationKind, x: float, output_count: int = 1) -> int:
        """Sample count of one activation window, clamped so the implied
        duration stays inside the profile envelope."""
        d = duration_ns(kind, x, output_count, self.profiles)
        lo_ns, hi_ns = duration_bounds_ns(kind, output_count, self.profiles)
        lo = int(np.ceil(lo_ns / self.time_unit_ns - 1e-9))
        hi = int(np.floor(hi_ns / self.time_unit_ns + 1e-9))
        n = int(round(d / self.time_unit_ns))
        if lo > hi:
            # Envelope narrower than one sample: use the nearest representable count.
            return max(1, n)
        return max(1, min(hi, max(lo, n)))

    def to_json_dict(self) -> dict:
        return {
            "noise_sigma": self.noise_sigma,
            "samples_per_byte": self.samples_per_byte,
            "mul_amplitude": self.mul_amplitude,
            "act_amplitude": self.act_amplitude,
            "act_ripple": self.act_ripple,
            "time_unit_ns": self.time_unit_ns,
            "snr_preset": self.snr_preset,
            "seed": self.seed,
            "recommended_trace_multiplier": self.recommended_trace_multiplier,
            "profiles": {
                kind.value: {
                    "min_ns": p.min_ns,
                    "max_ns": p.max_ns,
                    "mean_ns": p.mean_ns,
                }
                for kind, p in self.profiles.items()
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "LeakageConfig":
        profiles = {
            ActivationKind(k): TimingProfile(p["min_ns"], p["max_ns"], p["mean_ns"])
            for k, p in data.get("profiles", {}).items()
        } or dict(DEFAULT_TIMING_PROFILES)
        return cls(
            noise_sigma=data["noise_sigma"],
            samples_per_byte=data["samples_per_byte"],
            mul_amplitude=data["mul_amplitude"],
            act_amplitude=data["act_amplitude"],
            act_ripple=data.get("act_ripple", 0.3),
            time_unit_ns=data["time_unit_ns"],
            snr_preset=data["snr_preset"],
            seed=data["seed"],
            profiles=profiles,
        )


@dataclass(frozen=True)
class Annotation:
    """Ground-truth span of one logged event inside a trace."""

    kind: str  # "mul" or "act"
    layer: int
    neuron: int
    start: int
    end: int  # exclusive


@dataclass(frozen=True)
class Trace:
    samples: np.ndarray  # float32
    annotations: tuple[Annotation, ...] | None = None

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class TraceSet:
    traces: tuple[Trace, ...]
    inputs: np.ndarray  # float32, shape (n_traces, input_dim)
    config: LeakageConfig

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float32)
        if len(self.traces) != inputs.shape[0]:
            raise UsageError(
                f"{len(self.traces)} traces but {inputs.shape[0]} input rows"
            )
        object.__setattr__(self, "traces", tuple(self.traces))
        object.__setattr__(self, "inputs", inputs)

    def __len__(self) -> int:
        return len(self.traces)


def _noise_rng(cfg_seed: int, trace_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg_seed & 0xFFFFFFFFFFFFFFFF, trace_seed, 1]))


def _mask_rng(cfg_seed: int, trace_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg_seed & 0xFFFFFFFFFFFFFFFF, trace_seed, 2]))


def _ripple(length: int, amplitude: float) -> np.ndarray:
    # Data-independent texture so activation windows are not perfectly flat.
    idx = np.arange(length, dtype=np.float64)
    return amplitude * np.sin(2.0 * np.pi * idx / 8.0)


def simulate_trace(
    net: NetworkDescription,
    input_vector,
    cfg: LeakageConfig,
    trace_seed: int,
    countermeasures=None,
    log: ExecutionLog | None = None,
) -> Trace:
    """Synthesize one trace for one inference.

    ``countermeasures`` is an optional
    :class:`scnn.countermeasures.CountermeasureConfig`; with everything
    disabled (or None) the output is bit-identical to the baseline.
    ``log`` allows reusing a precomputed execution log (the caller is
    responsible for it matching net/input).
    """
    from .countermeasures import CountermeasureConfig, shuffled_forward  # local: avoid cycle

    cm = countermeasures if countermeasures is not None else CountermeasureConfig()
    if log is None:
        if cm.shuffle:
            log = shuffled_forward(net, input_vector, seed=(cm.seed, trace_seed))[1]
        else:
            log = forward(net, input_vector)[1]

    spb = cfg.samples_per_byte
    n_outputs = net.layers[-1].n_neurons
    mask_rng = _mask_rng(cm.seed, trace_seed) if cm.mask else None
    profiles = dict(cfg.profiles)
    if cm.constant_time:
        from .countermeasures import constant_time_profile

        profiles = constant_time_profile(profiles)

    pieces: list[np.ndarray] = []
    annotations: list[Annotation] = []
    cursor = 0
    for event in log:
        if isinstance(event, MulStore):
            bits = f32_bits(np.array([event.product], dtype=np.float32))
            byte_vals = np.array(
                [int(storage_byte(bits, b)[0]) for b in range(4)], dtype=np.uint8
            )
            if mask_rng is not None:
                from .countermeasures import masked_store_leakage

                byte_vals = masked_store_leakage(byte_vals, mask_rng)
            levels = cfg.mul_amplitude + hw_of_bytes(byte_vals).astype(np.float64)
            window = np.repeat(levels, spb)
            annotations.append(
                Annotation("mul", event.layer, event.neuron, cursor, cursor + len(window))
            )
        elif isinstance(event, ActEval):
            n = _act_samples_with(cfg, profiles, event.kind, event.pre_activation, 1)
            window = cfg.act_amplitude + _ripple(n, cfg.act_ripple)
            annotations.append(
                Annotation("act", event.layer, event.neuron, cursor, cursor + n)
            )
        elif isinstance(event, SoftmaxEval):
            folded = _fold_vector(event.inputs)
            n = _act_samples_with(cfg, profiles, ActivationKind.SOFTMAX, folded, n_outputs)
            window = cfg.act_amplitude + _ripple(n, cfg.act_ripple)
            annotations.append(Annotation("act", event.layer, -1, cursor, cursor + n))
        else:  # pragma: no cover - log event types are closed
            raise UsageError(f"unknown event {event!r}")
        pieces.append(window)
        cursor += len(window)

    samples = np.concatenate(pieces) if pieces else np.zeros(0)
    if cfg.noise_sigma > 0:
        samples = samples + _noise_rng(cfg.seed, trace_seed).normal(
            0.0, cfg.noise_sigma, len(samples)
        )
    return Trace(samples=samples.astype(np.float32), annotations=tuple(annotations))


def _act_samples_with(cfg, profiles, kind, x, output_count) -> int:
    d = duration_ns(kind, x, output_count, profiles)
    lo_ns, hi_ns = duration_bounds_ns(kind, output_count, profiles)
    lo = int(np.ceil(lo_ns / cfg.time_unit_ns - 1e-9))
    hi = int(np.floor(hi_ns / cfg.time_unit_ns + 1e-9))
    n = int(round(d / cfg.time_unit_ns))
    if lo > hi:
        return max(1, n)
    return max(1, min(hi, max(lo, n)))


def simulate_batch(
    net: NetworkDescription,
    inputs,
    cfg: LeakageConfig,
    countermeasures=None,
) -> TraceSet:
    """One trace per input row, trace seed = row index."""
    arr = np.asarray(inputs, dtype=np.float32)
    if arr.ndim != 2:
        raise UsageError(f"inputs must be 2-D (n_traces, input_dim), got shape {arr.shape}")
    traces = tuple(
        simulate_trace(net, arr[i], cfg, trace_seed=i, countermeasures=countermeasures)
        for i in range(arr.shape[0])
    )
    return TraceSet(traces=traces, inputs=arr, config=cfg)
