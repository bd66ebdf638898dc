"""Binary checkpoint container.

Layout: ``AUNETCKP`` magic, uint32 little-endian header length, UTF-8 JSON
header, then every parameter array as contiguous little-endian float32 in
graph, layer, (W, b) order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .arch import FusionMode, TwoStreamGraph
from .graph import Kind, LayerGraph, LayerSpec

MAGIC = b"AUNETCKP"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def _graph_header(g: LayerGraph) -> dict:
    return {
        "input_shape": list(g.input_shape),
        "layers": [
            {"kind": l.kind.value, "n_in": l.n_in, "n_out": l.n_out, "trainable": l.trainable, "name": l.name}
            for l in g.layers
        ],
    }


def _graphs(net):
    if isinstance(net, TwoStreamGraph):
        return list(net.parts.items())
    return [("main", net)]


def to_bytes(net) -> bytes:
    meta = net.meta
    header = {
        "format_version": FORMAT_VERSION,
        "profile": meta.get("profile"),
        "fusion_mode": meta.get("fusion_mode"),
        "seed": meta.get("seed"),
        "extra": {k: v for k, v in meta.items() if k not in ("profile", "fusion_mode", "seed")},
        "graphs": {name: _graph_header(g) for name, g in _graphs(net)},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<I", len(hb)), hb]
    for _, g in _graphs(net):
        for l, p in zip(g.layers, g.params):
            if l.has_params:
                chunks.append(np.ascontiguousarray(p["W"], dtype=_LE_F32).tobytes())
                chunks.append(np.ascontiguousarray(p["b"], dtype=_LE_F32).tobytes())
    return b"".join(chunks)


def from_bytes(data: bytes):
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header['format_version']}")
    offset = 12 + n
    graphs = {}
    order = ("color", "motion", "head") if "head" in header["graphs"] else ("main",)
    for name in order:
        gh = header["graphs"][name]
        layers = [LayerSpec(Kind(d["kind"]), d["n_in"], d["n_out"], d["trainable"], d["name"]) for d in gh["layers"]]
        params = []
        for l in layers:
            if not l.has_params:
                params.append(None)
                continue
            p = {}
            for key, shape in l.param_shapes().items():
                count = int(np.prod(shape))
                arr = np.frombuffer(data, dtype=_LE_F32, count=count, offset=offset)
                p[key] = arr.astype(np.float32).reshape(shape)
                offset += 4 * count
            params.append(p)
        graphs[name] = LayerGraph(layers, gh["input_shape"], params)
    if offset != len(data):
        raise ValueError(f"checkpoint has {len(data) - offset} trailing bytes")
    meta = {"profile": header["profile"], "fusion_mode": header["fusion_mode"], "seed": header["seed"], **header["extra"]}
    if "main" in graphs:
        net = graphs["main"]
        net.meta = meta
        return net
    return TwoStreamGraph(graphs["color"], graphs["motion"], graphs["head"], FusionMode(header["fusion_mode"]), meta)


def save(net, path) -> str:
    """Write ``net`` to ``path``; returns the sha256 of the bytes written."""
    data = to_bytes(net)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    return from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
