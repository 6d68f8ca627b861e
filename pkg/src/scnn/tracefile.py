"""Bit-exact persistence for trace sets, networks, and reports.

Trace file layout (all integers little-endian):

    offset  size  field
    0       4     magic ``SCNN``
    4       2     format version (currently 1)
    6       4     header JSON length in bytes
    10      n     header JSON, UTF-8
    10+n    ...   samples, float32 little-endian, trace by trace

Header JSON fields: ``n_traces``, ``samples_per_trace`` (list, one entry
per trace; lengths differ because activation timing is data-dependent),
``config`` (leakage config echo), ``inputs_file`` (sidecar name), and
optionally ``annotations`` (per trace, list of
``[kind, layer, neuron, start, end]``).

Inputs are stored next to the trace file as ``<name>.inputs.json`` so
the binary payload stays pure sample data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptTraceFileError, SchemaError
from .leakage import Annotation, LeakageConfig, Trace, TraceSet
from .mlp import ActivationKind, LayerSpec, NetworkDescription

MAGIC = b"SCNN"
VERSION = 1
_HEADER_PREFIX = struct.Struct("<4sHI")

# Refuse headers bigger than this; protects against running off corrupt lengths.
_MAX_HEADER_BYTES = 64 * 1024 * 1024


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".inputs.json")


def save_traceset(ts: TraceSet, path) -> None:
    """Write a trace set; samples round-trip bit-exactly."""
    path = Path(path)
    header = {
        "n_traces": len(ts),
        "samples_per_trace": [len(tr) for tr in ts.traces],
        "config": ts.config.to_json_dict(),
        "inputs_file": _sidecar_path(path).name,
    }
    if all(tr.annotations is not None for tr in ts.traces):
        header["annotations"] = [
            [[a.kind, a.layer, a.neuron, a.start, a.end] for a in tr.annotations]
            for tr in ts.traces
        ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER_PREFIX.pack(MAGIC, VERSION, len(blob)))
            fh.write(blob)
            for tr in ts.traces:
                fh.write(np.ascontiguousarray(tr.samples, dtype="<f4").tobytes())
        with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump({"inputs": ts.inputs.tolist()}, fh)
    except OSError as exc:
        raise CorruptTraceFileError(f"cannot write trace set to {path}: {exc}") from exc


def load_traceset(path) -> TraceSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorruptTraceFileError(f"cannot read {path}: {exc}") from exc

    if len(raw) < _HEADER_PREFIX.size:
        raise CorruptTraceFileError(f"{path}: file shorter than fixed header")
    magic, version, header_len = _HEADER_PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptTraceFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptTraceFileError(f"{path}: unsupported version {version}")
    if header_len > _MAX_HEADER_BYTES or _HEADER_PREFIX.size + header_len > len(raw):
        raise CorruptTraceFileError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[_HEADER_PREFIX.size : _HEADER_PREFIX.size + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptTraceFileError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptTraceFileError(f"{path}: header must be a JSON object")

    try:
        n_traces = int(header["n_traces"])
        counts = [int(c) for c in header["samples_per_trace"]]
        config = LeakageConfig.from_json_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptTraceFileError(f"{path}: malformed header field: {exc}") from exc
    if n_traces < 0 or len(counts) != n_traces or any(c < 0 for c in counts):
        raise CorruptTraceFileError(f"{path}: inconsistent trace counts")

    payload = raw[_HEADER_PREFIX.size + header_len :]
    expected = 4 * sum(counts)
    if len(payload) < expected:
        raise CorruptTraceFileError(
            f"{path}: truncated sample payload ({len(payload)} bytes, need {expected})"
        )

    raw_annotations = header.get("annotations")
    if raw_annotations is not None and (
        not isinstance(raw_annotations, list) or len(raw_annotations) != n_traces
    ):
        raise CorruptTraceFileError(f"{path}: annotations do not match trace count")

    traces = []
    offset = 0
    for i, count in enumerate(counts):
        samples = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).copy()
        offset += 4 * count
        annotations = None
        if raw_annotations is not None:
            try:
                annotations = tuple(
                    Annotation(str(k), int(l), int(nn), int(s), int(e))
                    for k, l, nn, s, e in raw_annotations[i]
                )
            except (TypeError, ValueError) as exc:
                raise CorruptTraceFileError(f"{path}: malformed annotation: {exc}") from exc
        traces.append(Trace(samples=samples, annotations=annotations))

    sidecar = path.with_name(str(header.get("inputs_file", "")))
    if not header.get("inputs_file") or not sidecar.exists():
        raise CorruptTraceFileError(f"{path}: missing inputs sidecar {sidecar.name!r}")
    try:
        inputs = np.asarray(
            json.loads(sidecar.read_text(encoding="utf-8"))["inputs"], dtype=np.float32
        )
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptTraceFileError(f"{path}: bad inputs sidecar: {exc}") from exc
    if inputs.size == 0:
        inputs = inputs.reshape(n_traces, 0 if n_traces else 0)
    if inputs.ndim != 2 or inputs.shape[0] != n_traces:
        raise CorruptTraceFileError(f"{path}: inputs sidecar shape {inputs.shape} mismatches n_traces")
    return TraceSet(traces=tuple(traces), inputs=inputs, config=config)


# ---------------------------------------------------------------------------
# network JSON
# ---------------------------------------------------------------------------


def network_to_json_dict(net: NetworkDescription) -> dict:
    return {
        "input_dim": net.input_dim,
        "layers": [
            {
                "neurons": layer.n_neurons,
                "activation": layer.activation.value,
                "weights": [[float(w) for w in row] for row in layer.weights],
                "bias": [float(b) for b in layer.bias],
            }
            for layer in net.layers
        ],
    }


def network_from_json_dict(data: dict) -> NetworkDescription:
    if not isinstance(data, dict):
        raise SchemaError("network: expected a JSON object")
    if "input_dim" not in data:
        raise SchemaError("network.input_dim: missing")
    if not isinstance(data["input_dim"], int) or data["input_dim"] < 1:
        raise SchemaError(f"network.input_dim: expected positive integer, got {data['input_dim']!r}")
    raw_layers = data.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise SchemaError("network.layers: expected a non-empty list")

    layers = []
    fan_in = data["input_dim"]
    for i, entry in enumerate(raw_layers):
        where = f"network.layers[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{where}: expected an object")
        for key in ("neurons", "activation", "weights", "bias"):
            if key not in entry:
                raise SchemaError(f"{where}.{key}: missing")
        try:
            kind = ActivationKind(entry["activation"])
        except ValueError:
            raise SchemaError(
                f"{where}.activation: unknown kind {entry['activation']!r}"
            ) from None
        if kind is ActivationKind.SOFTMAX and i != len(raw_layers) - 1:
            raise SchemaError(f"{where}.activation: softmax is only legal on the output layer")
        n = entry["neurons"]
        if not isinstance(n, int) or n < 1:
            raise SchemaError(f"{where}.neurons: expected positive integer, got {n!r}")
        weights = entry["weights"]
        if not isinstance(weights, list) or len(weights) != n:
            raise SchemaError(f"{where}.weights: expected {n} rows")
        for r, row in enumerate(weights):
            if not isinstance(row, list) or len(row) != fan_in:
                raise SchemaError(
                    f"{where}.weights[{r}]: expected {fan_in} values, got "
                    f"{len(row) if isinstance(row, list) else type(row).__name__}"
                )
        bias = entry["bias"]
        if not isinstance(bias, list) or len(bias) != n:
            raise SchemaError(f"{where}.bias: expected {n} values")
        try:
            layers.append(
                LayerSpec(
                    weights=np.asarray(weights, dtype=np.float32),
                    bias=np.asarray(bias, dtype=np.float32),
                    activation=kind,
                )
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: non-numeric matrix entry: {exc}") from exc
        fan_in = n
    try:
        return NetworkDescription(input_dim=data["input_dim"], layers=tuple(layers))
    except Exception as exc:
        raise SchemaError(f"network: {exc}") from exc


def save_network(net: NetworkDescription, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network_to_json_dict(net), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_network(path) -> NetworkDescription:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CorruptTraceFileError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"network: invalid JSON in {path}: {exc}") from exc
    return network_from_json_dict(data)
