"""Model files: an 8-byte magic line followed by one JSON document.

Arrays are stored as nested lists in row-major order.  Python's float repr
round-trips float64 exactly, so save -> load -> save is byte-identical and
loaded models reproduce predictions bit for bit.

Training sets (stacked EnNF pairs) are stored as ``.npz``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..ennf import EnnfParams, TrainingSet
from ..errors import FormatVersionMismatch, IoError
from ..ggp import GgpParams
from ..gp import SeKernelParams
from ..numerics import MlpParams
from ..perm_ops import EquivariantOperatorParams

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "config_fingerprint",
    "params_to_dict",
    "params_from_dict",
    "persist_model",
    "load_model",
    "save_training_set",
    "load_training_set",
]

MAGIC = b"SETBAYS\n"
FORMAT_VERSION = 1


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _mlp_to(p: MlpParams) -> dict:
    return {
        "activation": p.activation,
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def _mlp_from(d: dict) -> MlpParams:
    weights = [np.array(w, dtype=float).reshape(len(w), -1) for w in d["weights"]]
    return MlpParams(weights, [np.array(b, dtype=float) for b in d["biases"]], d["activation"])


def _op_to(op: EquivariantOperatorParams) -> dict:
    return {
        "self_net": _mlp_to(op.self_net),
        "int_net": _mlp_to(op.int_net),
        "fit_net": _mlp_to(op.fit_net),
        "cond_width": op.cond_width,
    }


def _op_from(d: dict) -> EquivariantOperatorParams:
    return EquivariantOperatorParams(
        _mlp_from(d["self_net"]), _mlp_from(d["int_net"]), _mlp_from(d["fit_net"]), int(d["cond_width"])
    )


def params_to_dict(params) -> dict:
    if isinstance(params, GgpParams):
        return {
            "kind": "ggp",
            "operator": _op_to(params.operator),
            "data_net": _mlp_to(params.data_net),
            "rank": params.rank,
            "y_shift": params.y_shift,
            "y_scale": params.y_scale,
        }
    if isinstance(params, EnnfParams):
        return {
            "kind": "ennf",
            "operator": _op_to(params.operator),
            "shift": params.shift.tolist(),
            "scale": params.scale.tolist(),
            "residual": params.residual,
            "anomaly_scale": None if params.anomaly_scale is None else params.anomaly_scale.tolist(),
        }
    if isinstance(params, SeKernelParams):
        return {
            "kind": "se_kernel",
            "signal_sd": params.signal_sd,
            "length_scales": params.length_scales.tolist(),
            "noise_sd": params.noise_sd,
        }
    if isinstance(params, (list, tuple)) and params and all(isinstance(p, EnnfParams) for p in params):
        return {"kind": "ennf_table", "entries": [params_to_dict(p) for p in params]}
    raise TypeError(f"cannot serialise {type(params).__name__}")


def params_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "ggp":
        return GgpParams(_op_from(d["operator"]), _mlp_from(d["data_net"]), int(d["rank"]), d["y_shift"], d["y_scale"])
    if kind == "ennf":
        return EnnfParams(_op_from(d["operator"]), d["shift"], d["scale"], bool(d["residual"]), d.get("anomaly_scale"))
    if kind == "se_kernel":
        return SeKernelParams(d["signal_sd"], d["length_scales"], d["noise_sd"])
    if kind == "ennf_table":
        return [params_from_dict(e) for e in d["entries"]]
    raise FormatVersionMismatch(f"unknown model kind {kind!r}")


def persist_model(params, path, fingerprint: str | None = None) -> Path:
    doc = {
        "format_version": FORMAT_VERSION,
        "config_fingerprint": fingerprint,
        "model": params_to_dict(params),
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(MAGIC + json.dumps(doc, sort_keys=True).encode() + b"\n")
    except OSError as exc:
        raise IoError(f"cannot write model to {path}: {exc}") from exc
    return path


def load_model(path, with_metadata: bool = False):
    """Parameters stored by :func:`persist_model` (plus the document header if asked)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read model from {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatVersionMismatch("not a model file (bad magic line)")
    try:
        doc = json.loads(raw[len(MAGIC) :])
    except json.JSONDecodeError as exc:
        raise FormatVersionMismatch(f"corrupt model document: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"model format {doc.get('format_version')} != {FORMAT_VERSION}")
    params = params_from_dict(doc["model"])
    if with_metadata:
        return params, {k: v for k, v in doc.items() if k != "model"}
    return params


def save_training_set(data: TrainingSet, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, inputs=data.inputs, targets=data.targets, variable=data.variable)
    except OSError as exc:
        raise IoError(f"cannot write training set to {path}: {exc}") from exc
    return path


def load_training_set(path) -> TrainingSet:
    try:
        with np.load(path) as z:
            return TrainingSet(z["inputs"], z["targets"], z["variable"])
    except (OSError, KeyError, ValueError) as exc:
        raise IoError(f"cannot read training set from {path}: {exc}") from exc
