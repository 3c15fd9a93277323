"""Binary model files.

Layout (little endian):

====================  =========================================
bytes                 content
====================  =========================================
0:6                   magic ``PKNET1``
6:8                   format version, uint16
8:12                  header length ``H``, uint32
12:12+H               UTF-8 JSON node table (ids, kinds, inputs,
                      attrs, parameter names and shapes)
12+H:-4               raw float32 parameter payload, node order,
                      parameter names sorted within a node
-4:                   CRC32 of everything before it, uint32
====================  =========================================
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from . import tensor as T
from .graph import GraphError, LayerNode, NetworkGraph

__all__ = ["ModelFormatError", "serialize", "deserialize", "save", "load"]

_MAGIC = b"PKNET1"
_VERSION = 1


class ModelFormatError(GraphError):
    """The byte stream is not a readable model file."""


def serialize(graph: NetworkGraph) -> bytes:
    table = []
    payload = bytearray()
    for nid in graph.order:
        node = graph.nodes[nid]
        pnames = sorted(node.params)
        table.append({
            "id": nid,
            "kind": node.kind,
            "inputs": list(node.inputs),
            "attrs": node.attrs,
            "params": [[name, list(node.params[name].shape)] for name in pnames],
        })
        for name in pnames:
            arr = np.ascontiguousarray(node.params[name].data, dtype="<f4")
            payload.extend(arr.tobytes())
    header = json.dumps({"nodes": table}, sort_keys=True).encode("utf-8")
    body = _MAGIC + struct.pack("<HI", _VERSION, len(header)) + header + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize(blob: bytes) -> NetworkGraph:
    if len(blob) < len(_MAGIC) + 10:
        raise ModelFormatError("file too short to be a model")
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ModelFormatError("bad magic; not a model file")
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ModelFormatError(f"checksum mismatch (stored {stored:#x}, computed {actual:#x}); "
                               "file is corrupt or truncated")
    version, hlen = struct.unpack("<HI", blob[6:12])
    if version != _VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    try:
        table = json.loads(blob[12:12 + hlen].decode("utf-8"))["nodes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from exc
    offset = 12 + hlen
    nodes = []
    for entry in table:
        params = {}
        for name, shape in entry["params"]:
            n = int(np.prod(shape)) if shape else 1
            end = offset + 4 * n
            if end > len(blob) - 4:
                raise ModelFormatError("payload shorter than the header promises")
            arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
            params[name] = T.Tensor(arr, requires_grad=True, name=f"{entry['id']}.{name}")
            offset = end
        nodes.append(LayerNode(entry["id"], entry["kind"], list(entry["inputs"]),
                               dict(entry["attrs"]), params))
    if offset != len(blob) - 4:
        raise ModelFormatError("trailing bytes after parameter payload")
    return NetworkGraph(nodes)


def save(graph: NetworkGraph, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(graph))


def load(path: str) -> NetworkGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
