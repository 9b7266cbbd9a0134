"""JSON checkpoints that round-trip float64 values bit-exactly.

Floats are written with ``float.hex`` so no decimal rounding happens on
either side. Layout::

    {"format": "mixnorm-checkpoint", "version": 1,
     "input_shape": [...], "specs": [...], "meta": {...},
     "layers": [{"kind": ..., "params": {name: array},
                 "bn": {momentum, eps, running_mean, running_var},
                 "mn": {capacity, zeta, step, queue: [gmm dict, ...]}}]}

An array is ``{"shape": [...], "hex": [...]}``; a gmm dict follows
``GmmParams.to_dict`` with hex-encoded leaves.
"""

import json
from pathlib import Path

import numpy as np

from .gmm import GmmParams
from .smallnet.layers import BatchNorm, MixtureNorm
from .smallnet.net import build_net

FORMAT = "mixnorm-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_float(v):
    return float(v).hex()


def decode_float(s):
    return float.fromhex(s)


def encode_array(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "hex": [v.hex() for v in a.ravel().tolist()]}


def decode_array(d):
    values = [float.fromhex(s) for s in d["hex"]]
    return np.array(values, dtype=np.float64).reshape(d["shape"])


def encode_gmm(params):
    return {"K": params.K, "D": params.D, "lambda": encode_array(params.weights),
            "mu": encode_array(params.means), "sigma2": encode_array(params.variances)}


def decode_gmm(d):
    params = GmmParams(decode_array(d["lambda"]), decode_array(d["mu"]), decode_array(d["sigma2"]))
    if params.K != d["K"] or params.D != d["D"]:
        raise CheckpointError("queue entry K/D disagree with array shapes")
    return params


def _optional(a):
    return None if a is None else encode_array(a)


def _layer_state(layer):
    out = {"kind": layer.kind, "params": {k: encode_array(v) for k, v in layer.params.items()}}
    if isinstance(layer, BatchNorm):
        s = layer.state
        out["bn"] = {"momentum": encode_float(s.momentum), "eps": encode_float(s.eps),
                     "running_mean": _optional(s.running_mean), "running_var": _optional(s.running_var)}
    if isinstance(layer, MixtureNorm):
        q = layer.queue
        out["mn"] = {"capacity": q.capacity, "zeta": encode_float(q.zeta), "step": layer.step,
                     "queue": [encode_gmm(p) for p in q.entries]}
    return out


def net_to_dict(net, meta=None):
    if net.specs is None or net.input_shape is None:
        raise CheckpointError("only networks built from specs can be checkpointed")
    return {
        "format": FORMAT,
        "version": VERSION,
        "input_shape": list(net.input_shape),
        "specs": net.specs,
        "meta": meta or {},
        "layers": [_layer_state(layer) for layer in net.layers],
    }


def net_from_dict(d):
    if d.get("format") != FORMAT:
        raise CheckpointError(f"not a checkpoint (format={d.get('format')!r})")
    if d.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
    net = build_net(d["specs"], tuple(d["input_shape"]), seed=d["meta"].get("seed", 0))
    if len(net.layers) != len(d["layers"]):
        raise CheckpointError("layer count does not match the specs")
    for i, (layer, state) in enumerate(zip(net.layers, d["layers"])):
        if state["kind"] != layer.kind:
            raise CheckpointError(f"layer {i}: stored kind {state['kind']!r}, built {layer.kind!r}")
        for name, enc in state["params"].items():
            value = decode_array(enc)
            if value.shape != layer.params[name].shape:
                raise CheckpointError(f"layer {i} param {name}: shape {value.shape} != {layer.params[name].shape}")
            layer.params[name][...] = value
        if "bn" in state:
            s, b = layer.state, state["bn"]
            s.momentum, s.eps = decode_float(b["momentum"]), decode_float(b["eps"])
            s.running_mean = None if b["running_mean"] is None else decode_array(b["running_mean"])
            s.running_var = None if b["running_var"] is None else decode_array(b["running_var"])
        if "mn" in state:
            m = state["mn"]
            layer.queue.capacity, layer.queue.zeta = m["capacity"], decode_float(m["zeta"])
            layer.step = m["step"]
            layer.queue.entries.clear()
            for entry in m["queue"]:
                layer.queue.push(decode_gmm(entry))
    return net, d["meta"]


def save_checkpoint(path, net, meta=None):
    Path(path).write_text(json.dumps(net_to_dict(net, meta), indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: invalid JSON at line {err.lineno}") from None
    return net_from_dict(d)
