"""Binary tensor files, saved networks and JSON reports."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from tnsynth.errors import InvalidArgument, InvalidState
from tnsynth.network import TensorNetwork, edge_partition, topology_text
from tnsynth.tensor import Index, Tensor

MAGIC = b"TNSR"
VERSION = 1


class FormatError(InvalidArgument):
    """A tensor file or saved artifact is malformed."""


def encode_tensor(t: Tensor) -> bytes:
    names = [ix.name for ix in t.indices]
    if len(set(names)) != len(names):
        raise FormatError(f"duplicate index names {names}")
    parts = [MAGIC, struct.pack("<HH", VERSION, t.ndim)]
    for ix in t.indices:
        raw = ix.name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", ix.size))
    parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_tensor(buf: bytes, ids: Mapping[str, int] = None) -> Tensor:
    """Parse a tensor file. ``ids`` optionally fixes the id of each name."""
    view = memoryview(buf)
    if len(buf) < 8 or bytes(view[:4]) != MAGIC:
        raise FormatError("not a TNSR file (bad magic)")
    version, order = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    pos = 8
    indices: List[Index] = []
    for k in range(order):
        if pos + 2 > len(buf):
            raise FormatError("truncated header")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n + 8 > len(buf):
            raise FormatError("truncated header")
        try:
            name = bytes(view[pos:pos + n]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"index name is not UTF-8: {exc}") from None
        pos += n
        (size,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if size < 1:
            raise FormatError(f"index {name} has size 0")
        iid = ids[name] if ids is not None and name in ids else k
        indices.append(Index(iid, name, int(size)))
    names = [ix.name for ix in indices]
    if len(set(names)) != len(names):
        raise FormatError(f"duplicate index names {names}")
    count = int(np.prod([ix.size for ix in indices], dtype=np.int64))
    if len(buf) - pos != 8 * count:
        raise FormatError(
            f"payload has {len(buf) - pos} bytes, expected {8 * count}"
        )
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    return Tensor(indices, data.astype(np.float64).reshape([ix.size for ix in indices]))


def write_tensor(path, t: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path, ids: Mapping[str, int] = None) -> Tensor:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return decode_tensor(buf, ids)


def save_network(g: TensorNetwork, directory, meta: Mapping = None) -> None:
    """Write each node as ``node_<id>.tnsr`` plus topology and metadata files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("node_*.tnsr"):
        old.unlink()
    for n, t in sorted(g.nodes.items()):
        write_tensor(d / f"node_{n}.tnsr", t)
    (d / "topology.txt").write_text(topology_text(g))
    info = dict(meta or {})
    info["free"] = [ix.name for ix in g.free_indices]
    (d / "network.json").write_text(json.dumps(info, indent=2))


def load_network(directory, free_names: Sequence[str] = None) -> Tuple[TensorNetwork, Dict]:
    """Rebuild a network from factor files; shared index names become edges.

    ``free_names`` (data tensor index names, in order) fix free index ids to
    0..d-1; otherwise the saved ``network.json`` listing is used.
    """
    d = Path(directory)
    meta_path = d / "network.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    files = sorted(d.glob("node_*.tnsr"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FormatError(f"no node files in {directory}")
    names = list(free_names) if free_names is not None else meta.get("free")
    if names is None:
        raise FormatError("free index names unknown (no network.json)")
    ids = {n: i for i, n in enumerate(names)}
    raw = {int(p.stem.split("_")[1]): p.read_bytes() for p in files}
    # assign ids to edge names after the free ones
    extra = sorted({ix.name for b in raw.values() for ix in decode_tensor(b).indices} - set(ids))
    for k, name in enumerate(extra):
        ids[name] = len(names) + k
    nodes = {n: decode_tensor(b, ids) for n, b in raw.items()}
    g = TensorNetwork(nodes, range(len(names)))
    seen = {ix.name for t in nodes.values() for ix in t.indices}
    missing = [n for n in names if n not in seen]
    if missing:
        raise FormatError(f"free indices {missing} missing from the network")
    try:
        g.check()
    except InvalidState as exc:
        raise FormatError(f"saved network is malformed: {exc}") from None
    return g, meta


def edge_list(g: TensorNetwork) -> List[Dict]:
    names = g.names()
    out = []
    for e in g.edges():
        part = edge_partition(g, e.index.id)
        out.append({
            "nodes": [e.u, e.v],
            "index": e.index.name,
            "rank": e.index.size,
            "partition": part.names(names),
        })
    return out


def node_sizes(g: TensorNetwork) -> List[Dict]:
    return [
        {"node": n, "indices": [ix.name for ix in t.indices], "shape": list(t.shape),
         "size": t.size}
        for n, t in sorted(g.nodes.items())
    ]
