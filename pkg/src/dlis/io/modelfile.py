"""Binary model container.

Byte layout (all integers little-endian)::

    0   4   magic b"DLIS"
    4   2   format version (u16)
    6   4   header length H (u32)
    10  H   UTF-8 JSON header: network metadata, layer table, array table,
            optional compression-state metadata
    ..  P   payload: arrays back to back, offsets relative to payload start
    ..  4   CRC-32 of every preceding byte

Reals are stored little-endian in the network's precision (``<f4`` by
default).  A CSR layer stores its ``values``, ``col_idx`` and ``row_ptr``
(``<u4``) instead of the dense weight array, which is rebuilt on load.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..compression.state import (ChannelRecord, ChannelRemoval, CompressionState, PruneMask,
                                 TernaryLayer, TernaryParams)
from ..errors import ModelFormatError, ShapeError
from ..graph import LayerSpec, NetworkSpec, validate
from ..tensor import CsrMatrix, csr_to_dense

MAGIC = b"DLIS"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class _Payload:
    def __init__(self):
        self.table = []
        self.chunks = []
        self.size = 0

    def add(self, arr) -> int:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        self.table.append({"dtype": le.dtype.str, "shape": list(arr.shape),
                           "offset": self.size, "nbytes": len(raw)})
        self.chunks.append(raw)
        self.size += len(raw)
        return len(self.table) - 1


def _layer_entry(layer, payload):
    entry = {"kind": layer.kind, "in": layer.in_channels, "out": layer.out_channels,
             "kernel": layer.kernel, "stride": layer.stride, "pad": layer.pad,
             "format": layer.weight_format, "skip_from": layer.skip_from, "name": layer.name,
             "params": [], "shortcut": [_layer_entry(s, payload) for s in layer.shortcut]}
    for pname, arr in layer.params.items():
        if pname == "weight" and layer.weight_format == "csr":
            entry["weight_shape"] = list(arr.shape)
            continue
        entry["params"].append([pname, payload.add(arr)])
    if layer.weight_format == "csr":
        c = layer.csr
        entry["csr"] = {"rows": c.rows, "cols": c.cols, "values": payload.add(c.values),
                        "col_idx": payload.add(c.col_idx), "row_ptr": payload.add(c.row_ptr)}
    return entry


def _state_entry(state, payload):
    if state is None:
        return None
    out = {"technique": state.technique, "level": state.level, "notes": state.notes}
    if state.mask is not None:
        out["mask"] = [[k, payload.add(m.astype(np.uint8))] for k, m in state.mask.masks.items()]
    if state.channels is not None:
        ch = state.channels
        out["channels"] = {"original_params": ch.original_params,
                           "removed_params": ch.removed_params,
                           "removals": [[r.layer, r.channel, r.saliency, r.penalized]
                                        for r in ch.removals]}
    if state.ternary is not None:
        tp = state.ternary
        layers = []
        for k, tl in tp.layers.items():
            layers.append({"key": k, "wp": tl.wp, "wn": tl.wn, "threshold": tl.threshold,
                         "codes": payload.add(tl.codes),
                         "shadow": None if tl.shadow is None else payload.add(tl.shadow)})
        out["ternary"] = {"threshold": tp.threshold, "layers": layers}
    return out


def to_bytes(net: NetworkSpec, state: CompressionState | None = None) -> bytes:
    validate(net)
    payload = _Payload()
    header = {"name": net.name, "arch": net.arch, "input_shape": list(net.input_shape),
              "num_classes": net.num_classes,
              "layers": [_layer_entry(layer, payload) for layer in net.layers]}
    header["state"] = _state_entry(state, payload)
    header["arrays"] = payload.table
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(payload.chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(net: NetworkSpec, state: CompressionState | None, path, manifest=True):
    """Write ``net`` (and optional compression state) to ``path``.

    A text manifest of the layer table is written to ``path + ".manifest.txt"``
    unless ``manifest`` is False.
    """
    data = to_bytes(net, state)
    with open(path, "wb") as fh:
        fh.write(data)
    if manifest:
        with open(str(path) + ".manifest.txt", "w", encoding="utf-8") as fh:
            fh.write(manifest_text(net, state))
    return len(data)


class _Reader:
    def __init__(self, data, base, table):
        self.data = data
        self.base = base
        self.table = table

    def get(self, idx):
        if not isinstance(idx, int) or not 0 <= idx < len(self.table):
            raise ModelFormatError(f"array reference {idx!r} out of range", 10)
        t = self.table[idx]
        start = self.base + t["offset"]
        end = start + t["nbytes"]
        if end > len(self.data) - 4:
            raise ModelFormatError(f"array {idx} runs past the payload", start)
        dtype = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        if count * dtype.itemsize != t["nbytes"]:
            raise ModelFormatError(f"array {idx} size does not match its shape", start)
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=start)
        return arr.reshape(t["shape"]).astype(dtype.newbyteorder("="))


def _layer_from(entry, rd):
    params = {k: rd.get(v) for k, v in entry["params"]}
    csr = None
    if entry["format"] == "csr":
        c = entry["csr"]
        csr = CsrMatrix(c["rows"], c["cols"], rd.get(c["values"]), rd.get(c["col_idx"]),
                        rd.get(c["row_ptr"]))
        csr.check()
        weight = csr_to_dense(csr).reshape(entry["weight_shape"])
        params = {"weight": weight, **params}  # the weight always leads
    return LayerSpec(entry["kind"], entry["in"], entry["out"], entry["kernel"], entry["stride"],
                     entry["pad"], entry["format"], params, entry["skip_from"],
                     [_layer_from(s, rd) for s in entry["shortcut"]], csr, entry["name"])


def _state_from(entry, rd):
    if entry is None:
        return None
    state = CompressionState(entry["technique"], entry["level"], notes=entry.get("notes", {}))
    if "mask" in entry:
        state.mask = PruneMask({k: rd.get(v).astype(bool) for k, v in entry["mask"]})
    if "channels" in entry:
        ch = entry["channels"]
        state.channels = ChannelRecord([ChannelRemoval(*r) for r in ch["removals"]],
                                       ch["original_params"], ch["removed_params"])
    if "ternary" in entry:
        tp = entry["ternary"]
        layers = {v["key"]: TernaryLayer(v["wp"], v["wn"], v["threshold"], rd.get(v["codes"]),
                                         None if v["shadow"] is None else rd.get(v["shadow"]))
                  for v in tp["layers"]}
        state.ternary = TernaryParams(layers, tp["threshold"])
    return state


def from_bytes(data: bytes):
    """Parse a model container; returns ``(net, state)``."""
    if len(data) < _PREFIX.size:
        raise ModelFormatError("file shorter than the fixed prefix", len(data))
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}", 4)
    head_end = _PREFIX.size + hlen
    if head_end + 4 > len(data):
        raise ModelFormatError("truncated header", len(data))
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError("checksum mismatch (file truncated or corrupted)", len(data) - 4)
    try:
        header = json.loads(data[_PREFIX.size:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}", _PREFIX.size) from None
    rd = _Reader(data, head_end, header["arrays"])
    try:
        layers = [_layer_from(e, rd) for e in header["layers"]]
        net = NetworkSpec(header["name"], layers, tuple(header["input_shape"]),
                          header["num_classes"], header["arch"])
        validate(net)
        state = _state_from(header.get("state"), rd)
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"inconsistent layer table: {exc}", _PREFIX.size) from None
    return net, state


def load_model(path):
    """Read a model file written by :func:`save_model`; returns ``(net, state)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    return from_bytes(data)


def manifest_text(net: NetworkSpec, state: CompressionState | None = None) -> str:
    validate(net)
    lines = [f"model {net.name}", f"arch {net.arch}",
             f"input {'x'.join(str(v) for v in net.input_shape)}",
             f"classes {net.num_classes}",
             f"technique {state.technique if state else 'plain'}",
             f"level {state.level if state else 0.0}",
             "index kind in out kernel stride pad format nnz output"]
    for i, layer in enumerate(net.layers):
        w = layer.params.get("weight")
        nnz = "-" if w is None else str(int(np.count_nonzero(w)))
        shape = "x".join(str(v) for v in net.shapes[i])
        lines.append(f"{i} {layer.kind} {layer.in_channels} {layer.out_channels} "
                     f"{layer.kernel} {layer.stride} {layer.pad} {layer.weight_format} "
                     f"{nnz} {shape}")
        for j, sub in enumerate(layer.shortcut):
            w = sub.params.get("weight")
            nnz = "-" if w is None else str(int(np.count_nonzero(w)))
            lines.append(f"{i}.shortcut.{j} {sub.kind} {sub.in_channels} {sub.out_channels} "
                         f"{sub.kernel} {sub.stride} {sub.pad} {sub.weight_format} {nnz} -")
    return "\n".join(lines) + "\n"
