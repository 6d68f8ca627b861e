"""Layer-by-layer recovery of an unknown network behind a trace oracle.

The pipeline drives everything else in this subpackage:

1. query the oracle once with random known inputs and segment every
   trace into (multiplication block, activation) units;
2. walk the units in execution order, deciding for each whether it
   continues the current layer or starts the next one. Product counts
   settle most decisions structurally; when both readings are
   structurally possible the two-hypothesis correlation test decides;
3. recover each block's weights by the staged byte attack (optionally
   snapped to a known weight grid), accumulate exact pre-activations,
   and classify each finished layer's activation from its duration
   pattern;
4. feed the computed layer outputs forward as the known operands for
   the next layer until the units are exhausted.

Every sub-step that falls below its significance margin is recorded in
the report instead of aborting the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from ..leakage import LeakageConfig, TraceSet, simulate_batch
from ..mlp import ActivationKind, LayerSpec, NetworkDescription, activate, softmax
from .cpa import HypothesisCounter
from .segmentation import gather_window, spa_segment
from .structure import INCONCLUSIVE, NEXT_LAYER, SAME_LAYER, layer_boundary_test
from .timing import ClassificationResult, classify_activation
from .weights import DEFAULT_MARGIN_THRESHOLD, OperandRecovery, recover_operand


class RecoveryError(UsageError):
    """Trace structure is inconsistent with any layered reading."""


class SimulatedOracle:
    """Query access to a device under attack, backed by the simulator.

    The attack side only ever sees the returned traces; the network
    description stays private to the oracle. With ``log_queries`` every
    call is recorded so a run can prove it used nothing else.
    """

    def __init__(self, net, config, countermeasures=None, log_queries=False):
        self.net = net
        self.config = config
        self.countermeasures = countermeasures
        self.log_queries = log_queries
        self.queries: list[dict] = []

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def __call__(self, inputs: np.ndarray) -> TraceSet:
        arr = np.asarray(inputs, dtype=np.float32)
        if self.log_queries:
            import hashlib

            self.queries.append(
                {
                    "n_traces": int(arr.shape[0]),
                    "input_dim": int(arr.shape[1]),
                    "inputs_sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
                }
            )
        return simulate_batch(self.net, arr, self.config, countermeasures=self.countermeasures)


@dataclass
class RecoveredNeuron:
    weights: list[float]
    precisions: list[str]
    scores: list[float]
    conclusive: bool

    def to_json_dict(self) -> dict:
        return {
            "weights": self.weights,
            "precisions": self.precisions,
            "scores": self.scores,
            "conclusive": self.conclusive,
        }


@dataclass
class RecoveredLayer:
    neurons: list[RecoveredNeuron] = field(default_factory=list)
    activation: ActivationKind | None = None
    activation_confidence: ClassificationResult | None = None
    fused_block: bool = False  # vector activation over the whole layer

    @property
    def n_neurons(self) -> int:
        return len(self.neurons)

    def weight_matrix(self) -> np.ndarray:
        return np.array([n.weights for n in self.neurons], dtype=np.float32)

    def to_json_dict(self) -> dict:
        return {
            "neurons": self.n_neurons,
            "activation": self.activation.value if self.activation else None,
            "activation_confidence": (
                self.activation_confidence.to_json_dict()
                if self.activation_confidence
                else None
            ),
            "fused_block": self.fused_block,
            "weights": [n.to_json_dict() for n in self.neurons],
        }


@dataclass
class RecoveryReport:
    input_dim: int
    trace_budget: int
    layers: list[RecoveredLayer] = field(default_factory=list)
    boundary_decisions: list[dict] = field(default_factory=list)
    hypothesis_evaluations: int = 0
    warnings: list[str] = field(default_factory=list)
    conclusive: bool = True
    oracle_queries: list[dict] | None = None

    @property
    def layer_sizes(self) -> list[int]:
        return [l.n_neurons for l in self.layers]

    def to_network(self) -> NetworkDescription:
        """Rebuild the recovered network (biases assumed zero)."""
        layers = []
        for layer in self.layers:
            if layer.activation is None:
                raise UsageError("cannot rebuild: a layer has no recovered activation")
            w = layer.weight_matrix()
            layers.append(
                LayerSpec(
                    weights=w,
                    bias=np.zeros(w.shape[0], dtype=np.float32),
                    activation=layer.activation,
                )
            )
        return NetworkDescription(input_dim=self.input_dim, layers=tuple(layers))

    def to_json_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "trace_budget": self.trace_budget,
            "layer_sizes": self.layer_sizes,
            "layers": [l.to_json_dict() for l in self.layers],
            "boundary_decisions": self.boundary_decisions,
            "hypothesis_evaluations": self.hypothesis_evaluations,
            "warnings": self.warnings,
            "conclusive": self.conclusive,
            "oracle_queries": self.oracle_queries,
        }


@dataclass
class _UnitView:
    """One unit's windows across all traces."""

    n_products: int
    mul_starts: np.ndarray  # (n_traces,)
    act_lengths: np.ndarray  # (n_traces,) in samples


@dataclass
class _LayerState:
    inputs: np.ndarray  # (n_traces, width) known operands feeding this layer
    neurons: list[RecoveredNeuron] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    durations_ns: list[np.ndarray] = field(default_factory=list)
    fused_block: bool = False
    fused_output_count: int = 1


def _collect_units(ts: TraceSet) -> tuple[list[_UnitView], np.ndarray, list[str]]:
    """Segment every trace and align them on the majority structure.

    Traces whose segmentation disagrees with the majority signature
    (same unit count and per-unit product counts) are discarded; the
    attack proceeds on the conforming subset. Returns the unit views,
    the indices of the kept traces, and any warnings.
    """
    per_trace = [spa_segment(tr, ts.config) for tr in ts.traces]
    signatures = [tuple(u.n_products for u in units) for units in per_trace]
    tally: dict[tuple, int] = {}
    for sig in signatures:
        tally[sig] = tally.get(sig, 0) + 1
    majority, count = max(tally.items(), key=lambda kv: (kv[1], kv[0]))
    if len(majority) == 0:
        raise RecoveryError("no leakage structure detected in the traces")
    if count < max(2, int(0.8 * len(per_trace))):
        raise RecoveryError(
            f"only {count} of {len(per_trace)} traces share a common structure"
        )
    keep = np.flatnonzero([sig == majority for sig in signatures])
    warnings = []
    if len(keep) < len(per_trace):
        warnings.append(
            f"discarded {len(per_trace) - len(keep)} of {len(per_trace)} traces "
            "with nonconforming segmentation"
        )
    views = []
    for u in range(len(majority)):
        views.append(
            _UnitView(
                n_products=majority[u],
                mul_starts=np.array(
                    [per_trace[t][u].mul_start for t in keep], dtype=np.int64
                ),
                act_lengths=np.array(
                    [per_trace[t][u].act_length for t in keep], dtype=np.int64
                ),
            )
        )
    return views, keep, warnings


def _recover_unit_neurons(
    window: np.ndarray,
    operands: np.ndarray,
    n_neurons: int,
    cfg: LeakageConfig,
    margin_threshold: float,
    grid: tuple[float, float] | None,
    counter: HypothesisCounter,
    warnings: list[str],
    where: str,
) -> tuple[list[RecoveredNeuron], list[np.ndarray]]:
    """Weights and exact pre-activations for the neurons of one block."""
    width = 4 * cfg.samples_per_byte
    per_neuron = operands.shape[1]
    neurons = []
    pre_acts = []
    for j in range(n_neurons):
        recs: list[OperandRecovery] = []
        for i in range(per_neuron):
            p = j * per_neuron + i
            recs.append(
                recover_operand(
                    window[:, p * width : (p + 1) * width],
                    operands[:, i],
                    cfg,
                    margin_threshold=margin_threshold,
                    grid_refine=grid,
                    counter=counter,
                )
            )
        values = [r.value if r.value is not None else 0.0 for r in recs]
        conclusive = all(r.conclusive or r.zero_flag for r in recs)
        if not conclusive:
            warnings.append(f"{where} neuron {j}: weight recovery below margin")
        neurons.append(
            RecoveredNeuron(
                weights=[float(v) for v in values],
                precisions=[r.precision for r in recs],
                scores=[r.score for r in recs],
                conclusive=conclusive,
            )
        )
        # Replays the device accumulation order, so exact weights give
        # bit-exact pre-activations.
        acc = np.zeros(operands.shape[0], dtype=np.float32)
        for i in range(per_neuron):
            acc = (acc + np.float32(values[i]) * operands[:, i]).astype(np.float32)
        pre_acts.append(acc)
    return neurons, pre_acts


def _close_layer(
    state: _LayerState,
    cfg: LeakageConfig,
    warnings: list[str],
    layer_index: int,
) -> RecoveredLayer:
    durations = np.concatenate(state.durations_ns)
    inputs = np.concatenate(state.pre_activations) if not state.fused_block else None
    output_count = state.fused_output_count if state.fused_block else len(state.neurons)
    cls = classify_activation(
        durations, inputs=inputs, profiles=cfg.profiles, output_count=output_count
    )
    if cls.pattern_ambiguous:
        warnings.append(
            f"layer {layer_index}: sigmoid/tanh timing patterns indistinguishable"
        )
    return RecoveredLayer(
        neurons=state.neurons,
        activation=cls.kind,
        activation_confidence=cls,
        fused_block=state.fused_block,
    )


def _layer_outputs(layer: RecoveredLayer, state: _LayerState) -> np.ndarray:
    pre = np.stack(state.pre_activations, axis=1).astype(np.float32)
    if layer.activation is ActivationKind.SOFTMAX:
        out = np.stack([softmax(row).astype(np.float32) for row in pre])
        return out
    table = {
        ActivationKind.RELU: lambda v: np.maximum(v, np.float32(0.0)),
    }
    if layer.activation in table:
        return table[layer.activation](pre).astype(np.float32)
    flat = np.array(
        [activate(layer.activation, float(v)) for v in pre.ravel()], dtype=np.float32
    )
    return flat.reshape(pre.shape)


def reverse_engineer(
    oracle,
    input_dim: int,
    budget: int,
    grid: tuple[float, float] | None = None,
    margin_threshold: float = DEFAULT_MARGIN_THRESHOLD,
    seed: int = 0,
) -> RecoveryReport:
    """Recover layout, weights, and activations through a trace oracle.

    ``oracle`` maps an input matrix to a :class:`TraceSet`; ``budget``
    is the number of traces requested (one oracle query, reused by every
    step). ``grid`` optionally names the (bound, step) weight grid the
    target is known to use, enabling exact weight recovery.
    """
    if budget < 2:
        raise UsageError("budget must be at least 2 traces")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(budget, input_dim)).astype(np.float32)
    ts = oracle(X)
    cfg = ts.config
    counter = HypothesisCounter()
    warnings: list[str] = []
    report = RecoveryReport(input_dim=input_dim, trace_budget=budget)

    units, kept, seg_warnings = _collect_units(ts)
    warnings.extend(seg_warnings)
    kept_traces = [ts.traces[i] for i in kept]
    X = X[kept]
    if units[0].n_products != input_dim:
        raise RecoveryError(
            f"first unit consumes {units[0].n_products} operands, expected input_dim {input_dim}"
        )

    width = 4 * cfg.samples_per_byte
    time_unit = cfg.time_unit_ns
    finished: list[RecoveredLayer] = []
    state = _LayerState(inputs=X)

    def unit_window(view: _UnitView) -> np.ndarray:
        return gather_window(kept_traces, view.mul_starts, view.n_products * width)

    def close_current() -> np.ndarray:
        layer = _close_layer(state, cfg, warnings, len(finished))
        finished.append(layer)
        return _layer_outputs(layer, state)

    def fused_duration_plausible(view: _UnitView, k: int) -> bool:
        """A fused block of k neurons implies one vector activation over
        k outputs; its window length must fit that envelope."""
        from ..leakage import duration_bounds_ns

        lo_ns, hi_ns = duration_bounds_ns(
            ActivationKind.SOFTMAX, output_count=k, profiles=cfg.profiles
        )
        mean_ns = float(view.act_lengths.mean()) * time_unit
        return 0.8 * lo_ns <= mean_ns <= 1.2 * hi_ns

    for u, view in enumerate(units):
        P = view.n_products
        n_cur = len(state.neurons)
        same_ok = P == state.inputs.shape[1] and not state.fused_block
        next_ok = n_cur >= 1 and P % n_cur == 0
        if next_ok and P // n_cur > 1 and not fused_duration_plausible(view, P // n_cur):
            next_ok = False
        if u == 0:
            same_ok, next_ok = True, False

        if same_ok and next_ok:
            outputs_preview = _layer_outputs(
                _close_layer(state, cfg, [], len(finished)), state
            )
            decision = layer_boundary_test(
                unit_window(view),
                same_layer_operands=state.inputs,
                next_layer_operands=outputs_preview,
                cfg=cfg,
                margin_threshold=margin_threshold,
                counter=counter,
            )
            report.boundary_decisions.append(
                {"unit": u, **decision.to_json_dict()}
            )
            if decision.decision == INCONCLUSIVE:
                warnings.append(
                    f"unit {u}: layer boundary below margin, taking higher score"
                )
                report.conclusive = False
            take_next = decision.decision == NEXT_LAYER or (
                decision.decision == INCONCLUSIVE
                and decision.next_score > decision.same_score
            )
        elif same_ok:
            take_next = False
            if u > 0:
                report.boundary_decisions.append(
                    {"unit": u, "decision": SAME_LAYER, "margin": 1.0,
                     "same_score": 1.0, "next_score": 0.0, "structural": True}
                )
        elif next_ok:
            take_next = True
            report.boundary_decisions.append(
                {"unit": u, "decision": NEXT_LAYER, "margin": 1.0,
                 "same_score": 0.0, "next_score": 1.0, "structural": True}
            )
        else:
            raise RecoveryError(
                f"unit {u} with {P} products fits neither the current layer "
                f"(width {state.inputs.shape[1]}) nor a next layer of {n_cur} outputs"
            )

        if take_next:
            outputs = close_current()
            state = _LayerState(inputs=outputs)
            n_cur = 0

        block_neurons = 1
        if P != state.inputs.shape[1]:
            # Fused vector-activation block: several neurons, one window.
            block_neurons = P // state.inputs.shape[1]
            state.fused_block = True
            state.fused_output_count = block_neurons

        neurons, pre_acts = _recover_unit_neurons(
            unit_window(view),
            state.inputs,
            block_neurons,
            cfg,
            margin_threshold,
            grid,
            counter,
            warnings,
            where=f"layer {len(finished)} unit {u}",
        )
        state.neurons.extend(neurons)
        state.pre_activations.extend(pre_acts)
        # One activation window per unit (fused blocks share one window).
        state.durations_ns.append(view.act_lengths.astype(np.float64) * time_unit)

    close_current()
    report.layers = finished
    report.hypothesis_evaluations = counter.total
    report.warnings = warnings
    if any(not n.conclusive for l in finished for n in l.neurons):
        report.conclusive = False
    if getattr(oracle, "log_queries", False):
        report.oracle_queries = list(getattr(oracle, "queries", []))
    return report
