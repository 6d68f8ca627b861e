"""Mitigations against the recovery attacks, plus their evaluation.

Three composable countermeasures:

* shuffling: process the neurons of each layer in a fresh random order
  per inference, breaking the time alignment window-based CPA needs;
* masking: XOR every stored product byte with a fresh uniform mask on
  the leakage path, making first-order leakage independent of the data
  (the arithmetic itself is untouched, so network outputs are
  bit-identical);
* constant-time activations: pad every activation evaluation to its
  kind's worst-case duration so timing no longer depends on the input.

All three preserve forward-pass outputs bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import UsageError
from .mlp import ActivationKind, ExecutionLog, NetworkDescription, forward


@dataclass(frozen=True)
class CountermeasureConfig:
    shuffle: bool = False
    mask: bool = False
    constant_time: bool = False
    seed: int = 0

    @property
    def any_enabled(self) -> bool:
        return self.shuffle or self.mask or self.constant_time

    def to_json_dict(self) -> dict:
        return {
            "shuffle": self.shuffle,
            "mask": self.mask,
            "constant_time": self.constant_time,
            "seed": self.seed,
        }


def shuffled_forward(
    net: NetworkDescription, input_vector, seed
) -> tuple[np.ndarray, ExecutionLog]:
    """Forward pass with a fresh uniform neuron permutation per layer.

    ``seed`` may be anything accepted by ``numpy.random.default_rng``.
    Outputs equal the unshuffled forward pass bit-exactly; only the order
    of logged events changes.
    """
    rng = np.random.default_rng(seed)
    orders = {
        li: rng.permutation(layer.n_neurons).tolist()
        for li, layer in enumerate(net.layers)
    }
    return forward(net, input_vector, neuron_orders=orders)


def masked_store_leakage(product_bytes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Leaked byte values for one masked product store.

    Each stored byte is XORed with a fresh uniform mask byte, so the
    leaked Hamming weight is Binomial(8, 1/2) regardless of the data.
    """
    data = np.asarray(product_bytes, dtype=np.uint8)
    if data.shape != (4,):
        raise UsageError(f"expected 4 product bytes, got shape {data.shape}")
    masks = rng.integers(0, 256, size=4, dtype=np.uint8)
    return data ^ masks


def constant_time_profile(
    profiles: Mapping[ActivationKind, "TimingProfile"],
) -> dict[ActivationKind, "TimingProfile"]:
    """Pad every activation to its kind's worst case: min = mean = max."""
    from .leakage import TimingProfile

    return {
        kind: TimingProfile(p.max_ns, p.max_ns, p.max_ns) for kind, p in profiles.items()
    }


# ---------------------------------------------------------------------------
# degradation evaluation
# ---------------------------------------------------------------------------


@dataclass
class AttackOutcome:
    success_rate: float
    trials: int
    successes: int
    notes: str = ""

    def to_json_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "trials": self.trials,
            "successes": self.successes,
            "notes": self.notes,
        }


@dataclass
class DegradationReport:
    config: CountermeasureConfig
    baseline_cpa: AttackOutcome
    protected_cpa: AttackOutcome
    baseline_shuffle_cpa: AttackOutcome
    protected_shuffle_cpa: AttackOutcome
    baseline_samples_per_inference: int
    protected_samples_per_inference: int
    traces_per_trial: int

    def to_json_dict(self) -> dict:
        return {
            "countermeasures": self.config.to_json_dict(),
            "weight_cpa": {
                "baseline": self.baseline_cpa.to_json_dict(),
                "protected": self.protected_cpa.to_json_dict(),
            },
            "positional_cpa_6_neurons": {
                "baseline": self.baseline_shuffle_cpa.to_json_dict(),
                "protected": self.protected_shuffle_cpa.to_json_dict(),
            },
            "overhead": {
                "baseline_samples_per_inference": self.baseline_samples_per_inference,
                "protected_samples_per_inference": self.protected_samples_per_inference,
                "extra_samples": self.protected_samples_per_inference
                - self.baseline_samples_per_inference,
            },
            "traces_per_trial": self.traces_per_trial,
        }


def _near_miss_ok(recovered: float | None, true_value: float) -> bool:
    from .floatbits import decompose

    if recovered is None:
        return False
    try:
        a = decompose(recovered)
        b = decompose(true_value)
    except Exception:
        return False
    if a.sign != b.sign or a.exponent != b.exponent:
        return False
    return abs(a.mantissa - b.mantissa) / 2.0**23 < 0.01


def _single_weight_trial(weight, cfg, cm, trial_seed, n_traces):
    """One weight-recovery attempt against a 1-weight network."""
    from .attack.weights import recover_weight_from_traceset
    from .leakage import simulate_batch
    from .mlp import LayerSpec, NetworkDescription

    net = NetworkDescription(
        input_dim=1,
        layers=(
            LayerSpec(
                weights=np.array([[weight]], dtype=np.float32),
                bias=np.zeros(1, dtype=np.float32),
                activation=ActivationKind.RELU,
            ),
            LayerSpec(
                weights=np.array([[1.0]], dtype=np.float32),
                bias=np.zeros(1, dtype=np.float32),
                activation=ActivationKind.RELU,
            ),
        ),
    )
    rng = np.random.default_rng(trial_seed)
    inputs = rng.uniform(-1.0, 1.0, size=(n_traces, 1)).astype(np.float32)
    ts = simulate_batch(net, inputs, cfg, countermeasures=cm)
    rec = recover_weight_from_traceset(ts, layer=0, neuron=0, input_index=0)
    return _near_miss_ok(rec.value, float(np.float32(weight)))


def _positional_trial(cfg, cm, trial_seed, n_traces):
    """CPA on the first neuron position of a 6-neuron layer.

    With shuffling on, the neuron occupying that window changes per
    trace, so recovering the intended neuron 0 weight mostly fails.
    """
    from .attack.segmentation import spa_segment
    from .attack.weights import recover_operand
    from .mlp import random_network

    rng = np.random.default_rng(trial_seed)
    net = random_network(
        input_dim=2,
        layer_sizes=[6, 2],
        activations=ActivationKind.RELU,
        weight_range=5.0,
        precision=0.01,
        seed=int(rng.integers(0, 2**31)),
    )
    target = float(net.layers[0].weights[0, 0])
    if abs(target) < 0.05:
        # Re-draw degenerate targets; tiny weights make success ill-defined.
        return _positional_trial(cfg, cm, trial_seed + 7919, n_traces)
    from .leakage import simulate_batch

    inputs = rng.uniform(-1.0, 1.0, size=(n_traces, 2)).astype(np.float32)
    ts = simulate_batch(net, inputs, cfg, countermeasures=cm)
    spb = cfg.samples_per_byte
    window = np.zeros((len(ts), 4 * spb), dtype=np.float64)
    for i, tr in enumerate(ts.traces):
        units = spa_segment(tr, cfg)
        if not units:
            return False
        start = units[0].mul_start  # first product of the first unit
        window[i] = tr.samples[start : start + 4 * spb]
    rec = recover_operand(window, ts.inputs[:, 0], cfg)
    return _near_miss_ok(rec.value, target)


def _samples_per_inference(cfg, cm, seed=12345) -> int:
    from .leakage import simulate_trace
    from .mlp import random_network

    net = random_network(
        input_dim=4,
        layer_sizes=[6, 3],
        activations=[ActivationKind.SIGMOID, ActivationKind.SOFTMAX],
        weight_range=2.0,
        precision=0.01,
        seed=seed,
    )
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=4).astype(np.float32)
    return len(simulate_trace(net, x, cfg, trace_seed=0, countermeasures=cm))


def evaluate(
    cm: CountermeasureConfig,
    trials: int = 20,
    traces_per_trial: int = 1000,
    cfg=None,
    seed: int = 0,
) -> DegradationReport:
    """Measure attack degradation and overhead for a countermeasure set.

    Runs the weight-recovery CPA and the positional (shuffle-sensitive)
    CPA ``trials`` times each, baseline vs protected, and reports the
    emitted-sample overhead. With all countermeasures off the protected
    numbers equal the baseline exactly.
    """
    from .leakage import LeakageConfig

    if trials < 1:
        raise UsageError("trials must be >= 1")
    cfg = cfg if cfg is not None else LeakageConfig.avr(seed=seed)
    baseline_cm = CountermeasureConfig(seed=cm.seed)

    def run(kind, active_cm):
        successes = 0
        rng = np.random.default_rng([seed, 17 if kind == "weight" else 23])
        for t in range(trials):
            trial_seed = int(rng.integers(0, 2**31))
            if kind == "weight":
                grid = rng.integers(-500, 501)
                weight = float(grid) * 0.01
                if abs(weight) < 0.05:
                    weight = 1.23
                ok = _single_weight_trial(weight, cfg, active_cm, trial_seed, traces_per_trial)
            else:
                ok = _positional_trial(cfg, active_cm, trial_seed, traces_per_trial)
            successes += bool(ok)
        return AttackOutcome(
            success_rate=successes / trials, trials=trials, successes=successes
        )

    mask_cm = CountermeasureConfig(mask=cm.mask, constant_time=cm.constant_time, seed=cm.seed)
    report = DegradationReport(
        config=cm,
        baseline_cpa=run("weight", baseline_cm),
        protected_cpa=run("weight", mask_cm),
        baseline_shuffle_cpa=run("shuffle", baseline_cm),
        protected_shuffle_cpa=run("shuffle", cm),
        baseline_samples_per_inference=_samples_per_inference(cfg, baseline_cm),
        protected_samples_per_inference=_samples_per_inference(cfg, cm),
        traces_per_trial=traces_per_trial,
    )
    return report
