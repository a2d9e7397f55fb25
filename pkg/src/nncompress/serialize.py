"""Single-file container format for model graphs and training checkpoints.

Layout, in order:

* 4-byte magic ``NNCM``
* unsigned 32-bit little-endian manifest length
* UTF-8 JSON manifest (structure, attributes, parameter table, checksum)
* parameter blob: row-major float64, little-endian, parameters packed
  back to back at the byte offsets recorded in the manifest

Hook transforms survive a round trip when they carry a codec: an object
with a ``codec_kind`` string and a ``codec_state()`` method returning
``(attrs, params)``, plus a decoder registered under that kind.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .graph import Hook, HookPosition, ModelGraph, NodeSpec
from .tensor import Tensor

MAGIC = b"NNCM"
FORMAT_VERSION = 1

_F8 = np.dtype("<f8")


class SerializationError(ValueError):
    """Corrupt, truncated, or incompatible model file."""


_DECODERS: Dict[str, Callable] = {}


def register_hook_codec(kind: str, decoder: Callable[[dict, Dict[str, Tensor]], Callable]):
    """Register a factory that rebuilds a hook transform from saved state."""
    _DECODERS[kind] = decoder


def _pack_params(table: list, blob: bytearray, params: Dict[str, Tensor], trainable_flags=None):
    for name, t in params.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(t.data, dtype=_F8)
        table.append(
            {
                "name": name,
                "offset": len(blob),
                "shape": list(arr.shape),
                "trainable": bool(t.requires_grad),
            }
        )
        blob.extend(arr.tobytes(order="C"))


def _unpack_params(table: list, blob: bytes) -> Dict[str, Tensor]:
    out = {}
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise SerializationError(
                f"truncated blob: parameter {entry['name']!r} needs bytes [{start}, {end}) "
                f"but blob has {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype=_F8, count=count, offset=start).reshape(shape).copy()
        out[entry["name"]] = Tensor(arr, requires_grad=entry["trainable"])
    return out


def serialize_model(graph: ModelGraph, extra: Optional[dict] = None) -> bytes:
    blob = bytearray()
    nodes = []
    for nid, node in graph.nodes.items():
        table: list = []
        _pack_params(table, blob, node.params)
        nodes.append(
            {"id": nid, "kind": node.kind, "inputs": list(node.inputs), "attrs": node.attrs, "params": table}
        )
    hooks = []
    for h in graph.hooks:
        codec_kind = getattr(h.transform, "codec_kind", None)
        if codec_kind is None:
            raise SerializationError(
                f"hook {h.family!r} at {h.node_id!r} has no codec and cannot be saved"
            )
        attrs, hparams = h.transform.codec_state()
        table = []
        _pack_params(table, blob, hparams)
        hooks.append(
            {
                "node_id": h.node_id,
                "position": h.position.value,
                "param_name": h.param_name,
                "input_index": h.input_index,
                "family": h.family,
                "kind": codec_kind,
                "attrs": attrs,
                "params": table,
            }
        )
    manifest = {
        "format": "nncm",
        "version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "nodes": nodes,
        "hooks": hooks,
        "extra": extra or {},
        "blob_size": len(blob),
        "checksum": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(mbytes)) + mbytes + bytes(blob)


def deserialize_model(data: bytes) -> Tuple[ModelGraph, dict]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise SerializationError("bad magic: not a model file")
    (mlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + mlen:
        raise SerializationError("truncated manifest")
    try:
        manifest = json.loads(data[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SerializationError(f"unreadable manifest: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise SerializationError(
            f"unsupported format version {manifest.get('version')!r}, expected {FORMAT_VERSION}"
        )
    blob = data[8 + mlen :]
    if len(blob) < manifest["blob_size"]:
        raise SerializationError(
            f"truncated blob: manifest declares {manifest['blob_size']} bytes, found {len(blob)}"
        )
    blob = blob[: manifest["blob_size"]]
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise SerializationError("checksum mismatch: parameter data is corrupt")

    graph = ModelGraph(input_shape=tuple(manifest["input_shape"]))
    for entry in manifest["nodes"]:
        graph.add_node(
            NodeSpec(
                id=entry["id"],
                kind=entry["kind"],
                inputs=list(entry["inputs"]),
                attrs=entry["attrs"],
                params=_unpack_params(entry["params"], blob),
            )
        )
    for entry in manifest["hooks"]:
        kind = entry["kind"]
        if kind not in _DECODERS:
            raise SerializationError(f"no decoder registered for hook kind {kind!r}")
        transform = _DECODERS[kind](entry["attrs"], _unpack_params(entry["params"], blob))
        graph.insert_hook(
            Hook(
                node_id=entry["node_id"],
                position=HookPosition(entry["position"]),
                family=entry["family"],
                transform=transform,
                param_name=entry["param_name"],
                input_index=entry["input_index"],
            )
        )
    return graph, manifest.get("extra", {})


def save_model(graph: ModelGraph, path, extra: Optional[dict] = None):
    with open(path, "wb") as f:
        f.write(serialize_model(graph, extra))


def load_model(path) -> Tuple[ModelGraph, dict]:
    with open(path, "rb") as f:
        return deserialize_model(f.read())


def save_checkpoint(graph: ModelGraph, path, config: dict, epoch: int, state: Optional[dict] = None):
    """Training snapshot: the model plus everything needed to resume or export."""
    save_model(graph, path, extra={"checkpoint": {"config": config, "epoch": epoch, "state": state or {}}})


def load_checkpoint(path) -> Tuple[ModelGraph, dict]:
    graph, extra = load_model(path)
    if "checkpoint" not in extra:
        raise SerializationError("file is a plain model, not a training checkpoint")
    return graph, extra["checkpoint"]
