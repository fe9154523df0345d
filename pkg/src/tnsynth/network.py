"""Tree tensor networks: size accounting, contraction, orthonormalization, rounding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from tnsynth.errors import InvalidArgument, InvalidState
from tnsynth.tensor import Index, Tensor, _matricize, contract, from_matrix, permute, svd

logger = logging.getLogger(__name__)

# singular values at or below this fraction of the data norm are dropped for free
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class Partition:
    """A bipartition of the free index ids.

    ``block`` is the side that does not contain the smallest id of
    ``universe``; two partitions built from complementary sides are equal.
    """

    block: FrozenSet[int]
    universe: FrozenSet[int]

    @classmethod
    def of(cls, side: Iterable[int], universe: Iterable[int]) -> "Partition":
        side = frozenset(side)
        universe = frozenset(universe)
        if not side <= universe:
            raise InvalidArgument(f"{sorted(side - universe)} are not free indices")
        if not side or side == universe:
            raise InvalidArgument("a partition block must be a proper nonempty subset")
        if min(universe) in side:
            side = universe - side
        return cls(side, universe)

    @property
    def complement(self) -> FrozenSet[int]:
        return self.universe - self.block

    def sides(self) -> Tuple[FrozenSet[int], FrozenSet[int]]:
        return self.block, self.complement

    @cached_property
    def display(self) -> Tuple[int, ...]:
        """The smaller side (the one with the smallest id on ties), sorted."""
        a, b = self.block, self.complement
        if len(a) < len(b):
            return tuple(sorted(a))
        return tuple(sorted(b))

    def sort_key(self):
        return (len(self.display), self.display)

    def compatible(self, other: "Partition") -> bool:
        """True if both partitions can be edges of one tree (laminar up to complement)."""
        a, b = self.block, other.block
        return not (a & b) or a <= b or b <= a or not (self.universe - (a | b))

    def names(self, names: Mapping[int, str]) -> List[str]:
        return [names[i] for i in self.display]


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    index: Index


def leg_subtrees(node_legs: Mapping[int, Sequence[int]],
                 free_ids: FrozenSet[int]) -> Dict[Tuple[int, int], FrozenSet[int]]:
    """Free ids reachable through each (node, leg) of a tree.

    For a free leg this is just the leg itself.
    """
    owners: Dict[int, List[int]] = {}
    for n, legs in node_legs.items():
        for leg in legs:
            owners.setdefault(leg, []).append(n)
    memo: Dict[Tuple[int, int], FrozenSet[int]] = {}

    def reach(node: int, leg: int) -> FrozenSet[int]:
        key = (node, leg)
        if key in memo:
            return memo[key]
        if leg in free_ids:
            out = frozenset([leg])
        else:
            other = [n for n in owners[leg] if n != node]
            if not other:
                out = frozenset()
            else:
                nb = other[0]
                out = frozenset().union(
                    *(reach(nb, l) for l in node_legs[nb] if l != leg)
                )
        memo[key] = out
        return out

    for n, legs in node_legs.items():
        for leg in legs:
            reach(n, leg)
    return memo


def find_split_site(node_legs: Mapping[int, Sequence[int]], free_ids: FrozenSet[int],
                    side: FrozenSet[int]):
    """Locate where a split realizing ``side`` can happen.

    Returns ``("exists", None, None)`` if some edge already realizes the
    partition, ``("split", node, legs)`` for the first node (ascending id)
    whose legs all lie on one side, or ``("fail", None, None)``.
    """
    subtrees = leg_subtrees(node_legs, free_ids)
    other = free_ids - side
    for (n, leg), reach in subtrees.items():
        if leg not in free_ids and (reach == side or reach == other):
            return "exists", None, None
    for n in sorted(node_legs):
        chosen = []
        ok = True
        for leg in node_legs[n]:
            reach = subtrees[(n, leg)]
            if reach <= side:
                chosen.append(leg)
            elif reach & side:
                ok = False
                break
        if ok and 0 < len(chosen) < len(node_legs[n]):
            return "split", n, chosen
    return "fail", None, None


class TensorNetwork:
    """A tree of tensors. Indices shared by two nodes are contracted edges.

    Instances are treated as values; every transformation returns a new
    network. Node ids increase monotonically and are never reused.
    """

    def __init__(self, nodes: Mapping[int, Tensor], free_ids: Iterable[int],
                 next_node: int = None, next_index: int = None, splits: int = 0):
        self.nodes: Dict[int, Tensor] = dict(nodes)
        self.free_ids: FrozenSet[int] = frozenset(free_ids)
        all_ids = [i for t in self.nodes.values() for i in t.ids()]
        self.next_node = next_node if next_node is not None else max(self.nodes, default=-1) + 1
        self.next_index = (
            next_index if next_index is not None else max(all_ids, default=-1) + 1
        )
        self.splits = splits

    @classmethod
    def single(cls, t: Tensor) -> "TensorNetwork":
        return cls({0: t}, t.ids())

    def derive(self, remove: Iterable[int] = (), add: Mapping[int, Tensor] = None,
               replace: Mapping[int, Tensor] = None, **kw) -> "TensorNetwork":
        nodes = dict(self.nodes)
        for n in remove:
            del nodes[n]
        for n, t in (replace or {}).items():
            nodes[n] = t
        next_node = self.next_node
        for n, t in (add or {}).items():
            nodes[n] = t
            next_node = max(next_node, n + 1)
        return TensorNetwork(
            nodes, self.free_ids, next_node=kw.get("next_node", next_node),
            next_index=kw.get("next_index", self.next_index),
            splits=kw.get("splits", self.splits),
        )

    @cached_property
    def owners(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for n in sorted(self.nodes):
            for i in self.nodes[n].ids():
                out.setdefault(i, []).append(n)
        return out

    def node_legs(self) -> Dict[int, Tuple[int, ...]]:
        return {n: t.ids() for n, t in self.nodes.items()}

    @cached_property
    def subtrees(self) -> Dict[Tuple[int, int], FrozenSet[int]]:
        return leg_subtrees(self.node_legs(), self.free_ids)

    @cached_property
    def index_by_id(self) -> Dict[int, Index]:
        return {ix.id: ix for t in self.nodes.values() for ix in t.indices}

    @property
    def free_indices(self) -> List[Index]:
        return sorted((self.index_by_id[i] for i in self.free_ids), key=lambda ix: ix.id)

    def edges(self) -> List[Edge]:
        out = []
        for i, ns in sorted(self.owners.items()):
            if len(ns) == 2:
                out.append(Edge(ns[0], ns[1], self.index_by_id[i]))
        return out

    def free_edges(self) -> List[Tuple[int, Index]]:
        return [(ns[0], self.index_by_id[i]) for i, ns in sorted(self.owners.items())
                if i in self.free_ids]

    def neighbors(self, node: int) -> List[Tuple[int, Index]]:
        out = []
        for ix in self.nodes[node].indices:
            for m in self.owners[ix.id]:
                if m != node:
                    out.append((m, ix))
        return out

    def edge_endpoints(self, index_id: int) -> Tuple[int, int]:
        ns = self.owners.get(index_id, [])
        if len(ns) != 2:
            raise InvalidArgument(f"index {index_id} is not a contracted edge")
        return ns[0], ns[1]

    def size(self) -> int:
        return sum(t.size for t in self.nodes.values())

    def names(self) -> Dict[int, str]:
        return {i: ix.name for i, ix in self.index_by_id.items()}

    def fresh_index(self, size: int, taken_names: Iterable[str] = ()) -> Tuple[Index, "int"]:
        """A new edge index named ``r<k>`` (k = split counter) and the next counter."""
        taken = set(taken_names) | {ix.name for ix in self.index_by_id.values()}
        k = self.splits + 1
        while f"r{k}" in taken:
            k += 1
        return Index(self.next_index, f"r{k}", size), k

    def check(self) -> None:
        """Raise InvalidState unless this is a well-formed tree network."""
        for i, ns in self.owners.items():
            if len(ns) > 2:
                raise InvalidState(f"index {i} attached to {len(ns)} nodes")
            if len(ns) == 1 and i not in self.free_ids:
                raise InvalidState(f"dangling index {i} is not a free index")
            if len(ns) == 2:
                if i in self.free_ids:
                    raise InvalidState(f"free index {i} is contracted")
                a, b = (self.nodes[n].index(i).size for n in ns)
                if a != b:
                    raise InvalidState(f"edge {i} has sizes {a} and {b}")
        if set(self.owners) & self.free_ids != set(self.free_ids):
            raise InvalidState("free indices missing from the network")
        if len(self.edges()) != len(self.nodes) - 1 or not self.connected():
            raise InvalidState("network is not a tree")

    def connected(self) -> bool:
        if not self.nodes:
            return False
        start = min(self.nodes)
        seen = {start}
        stack = [start]
        while stack:
            n = stack.pop()
            for m, _ in self.neighbors(n):
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return len(seen) == len(self.nodes)

    def __repr__(self) -> str:
        return f"TensorNetwork(nodes={len(self.nodes)}, size={self.size()})"


def network_size(g: TensorNetwork) -> int:
    return g.size()


def contract_all(g: TensorNetwork) -> Tensor:
    """The tensor represented by ``g``; free indices in ascending id order.

    Pairs are contracted greedily, smallest intermediate first.
    """
    if not g.connected():
        raise InvalidState("cannot contract a disconnected network")
    work = dict(g.nodes)
    while len(work) > 1:
        owners: Dict[int, List[int]] = {}
        for n, t in work.items():
            for i in t.ids():
                owners.setdefault(i, []).append(n)
        best = None
        for i, ns in owners.items():
            if len(ns) != 2:
                continue
            a, b = work[ns[0]], work[ns[1]]
            shared = set(a.ids()) & set(b.ids())
            cost = 1
            for ix in a.indices + b.indices:
                if ix.id not in shared:
                    cost *= ix.size
            key = (cost, min(ns), max(ns))
            if best is None or key < best[0]:
                best = (key, ns[0], ns[1])
        if best is None:
            raise InvalidState("cannot contract a disconnected network")
        _, u, v = best
        merged = contract(work.pop(u), work.pop(v))
        work[u] = merged
    (t,) = work.values()
    order = sorted(range(t.ndim), key=lambda p: t.indices[p].id)
    return permute(t, order)


def edge_partition(g: TensorNetwork, index_id: int) -> Partition:
    u, _ = g.edge_endpoints(index_id)
    return Partition.of(g.subtrees[(u, index_id)], g.free_ids)


def edge_partitions(g: TensorNetwork) -> Dict[int, Partition]:
    """Partition realized by every contracted edge, keyed by edge index id."""
    return {e.index.id: edge_partition(g, e.index.id) for e in g.edges()}


def _absorb(t: Tensor, index_id: int, factor: np.ndarray) -> Tensor:
    """Multiply ``factor`` (new x old) into ``t`` along ``index_id``."""
    pos = t.position(index_id)
    out = np.tensordot(factor, t.data, axes=([1], [pos]))
    out = np.moveaxis(out, 0, pos)
    idx = list(t.indices)
    idx[pos] = idx[pos].resized(factor.shape[0])
    return Tensor(idx, out)


def _toward(g: TensorNetwork, root: int) -> List[Tuple[int, int, int]]:
    """(child, parent, edge id) triples, children listed before their parents."""
    order = []
    seen = {root}
    stack = [root]
    while stack:
        n = stack.pop()
        for m, ix in g.neighbors(n):
            if m not in seen:
                seen.add(m)
                order.append((m, n, ix.id))
                stack.append(m)
    return order[::-1]


def orthonormalize(g: TensorNetwork, root: int) -> TensorNetwork:
    """QR sweep making every node an isometry toward ``root``.

    Afterwards ``||contract_all(g)|| == ||g.nodes[root]||``.
    """
    if root not in g.nodes:
        raise InvalidArgument(f"node {root} not in network")
    nodes = dict(g.nodes)
    for child, parent, eid in _toward(g, root):
        t = nodes[child]
        m = _matricize(t, set(t.ids()) - {eid})
        q, r = np.linalg.qr(m.matrix)
        e = m.cols[0].resized(q.shape[1])
        nodes[child] = from_matrix(q, m.rows, (e,), [e if ix.id == eid else ix
                                                      for ix in t.indices])
        nodes[parent] = _absorb(nodes[parent], eid, r)
    return g.derive(replace=nodes)


def _truncate_edge(g: TensorNetwork, eid: int, allowance: float, data_norm: float):
    u, v = g.edge_endpoints(eid)
    g = orthonormalize(g, u)
    t = g.nodes[u]
    m = _matricize(t, set(t.ids()) - {eid})
    U, s, Vt = svd(m.matrix)
    tails = np.concatenate([np.cumsum((s ** 2)[::-1])[::-1], [0.0]])
    nonzero = int(np.sum(s > ZERO_TOL * data_norm))
    keep = max(nonzero, 1)
    # tails[k] is the squared mass dropped when keeping k values
    while keep > 1 and tails[keep - 1] - tails[nonzero] <= allowance:
        keep -= 1
    if keep >= m.cols[0].size:
        return g, 0.0
    e = m.cols[0].resized(keep)
    new_u = from_matrix(U[:, :keep] * s[:keep], m.rows, (e,),
                        [e if ix.id == eid else ix for ix in t.indices])
    new_v = _absorb(g.nodes[v], eid, Vt[:keep])
    return g.derive(replace={u: new_u, v: new_v}), float(tails[keep])


def round_network(g: TensorNetwork, budget: float, data_norm: float) -> TensorNetwork:
    """Re-truncate every edge, spending at most ``budget`` squared error in total.

    Edges are visited in canonical partition order; each gets an equal share
    of what is left, so unspent allowance rolls over to later edges.
    """
    parts = edge_partitions(g)
    order = sorted(parts, key=lambda eid: parts[eid].sort_key())
    remaining = max(float(budget), 0.0)
    for k, eid in enumerate(order):
        share = remaining / (len(order) - k)
        g, spent = _truncate_edge(g, eid, share, data_norm)
        remaining = max(remaining - spent, 0.0)
    return g


def merge_nodes(g: TensorNetwork, a: int, b: int) -> TensorNetwork:
    if a == b or b not in {m for m, _ in g.neighbors(a)}:
        raise InvalidArgument(f"nodes {a} and {b} are not adjacent")
    merged = contract(g.nodes[a], g.nodes[b])
    return g.derive(remove=(a, b), add={g.next_node: merged})


def topology_text(g: TensorNetwork) -> str:
    """Plain-text listing of free and contracted edges."""
    names = g.names()
    lines = [f"free {ix.name} {ix.size} @ {n}" for n, ix in g.free_edges()]
    for e in g.edges():
        part = edge_partition(g, e.index.id)
        lines.append(
            f"edge {e.u}-{e.v} rank {e.index.size} partition "
            "{" + ",".join(part.names(names)) + "}"
        )
    return "\n".join(lines) + "\n"


def parse_topology(text: str):
    """Inverse of :func:`topology_text`.

    Returns ``(free, edges)`` with ``free`` a list of (name, size, node) and
    ``edges`` a list of (u, v, rank, block names).
    """
    free, edges = [], []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "free" and len(parts) == 5 and parts[3] == "@":
            free.append((parts[1], int(parts[2]), int(parts[4])))
        elif parts[0] == "edge" and len(parts) >= 6:
            u, v = (int(x) for x in parts[1].split("-"))
            block = line.split("partition", 1)[1].strip()
            if not (block.startswith("{") and block.endswith("}")):
                raise InvalidArgument(f"bad partition in line: {raw!r}")
            names = [n.strip() for n in block[1:-1].split(",") if n.strip()]
            edges.append((u, v, int(parts[3]), names))
        else:
            raise InvalidArgument(f"cannot parse topology line: {raw!r}")
    return free, edges


def to_dot(g: TensorNetwork) -> str:
    lines = ["graph tn {"]
    for n, t in sorted(g.nodes.items()):
        lines.append(f'  n{n} [label="T{n}\\n{"x".join(map(str, t.shape))}"];')
    for n, ix in g.free_edges():
        lines.append(f'  f{ix.id} [shape=plaintext, label="{ix.name}"];')
        lines.append(f"  n{n} -- f{ix.id};")
    for e in g.edges():
        lines.append(f'  n{e.u} -- n{e.v} [label="{e.index.name}={e.index.size}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def network_from_factors(factors: Mapping[int, Tensor],
                         free_ids: Iterable[int]) -> TensorNetwork:
    g = TensorNetwork(factors, free_ids)
    g.check()
    return g


def relative_error(g: TensorNetwork, t: Tensor) -> float:
    approx = contract_all(g)
    if approx.ids() != tuple(sorted(t.ids())):
        raise InvalidArgument("network free indices do not match the tensor")
    ref = t.data.transpose(sorted(range(t.ndim), key=lambda p: t.indices[p].id))
    norm = float(np.linalg.norm(ref))
    diff = float(np.linalg.norm((approx.data - ref).ravel()))
    return diff / norm if norm > 0 else diff
