"""Enumeration of sketches and their symbolic tree shapes."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Dict, FrozenSet, Iterator, List, Mapping, Sequence, Tuple

from tnsynth.dsl import Program, sketch
from tnsynth.errors import InvalidArgument
from tnsynth.network import Partition, edge_partitions, find_split_site


def all_partitions(free_ids: Sequence[int]) -> List[Partition]:
    """Every bipartition of ``free_ids`` once, in canonical order."""
    ids = sorted(free_ids)
    universe = frozenset(ids)
    rest = ids[1:]
    out = []
    for k in range(1, len(ids)):
        for combo in combinations(rest, k):
            out.append(Partition.of(combo, universe))
    return sorted(set(out), key=Partition.sort_key)


def max_splits_for(d: int) -> int:
    return max(2 * d - 3, 1)


@dataclass(frozen=True)
class SketchSpace:
    free_ids: Tuple[int, ...]
    max_splits: int

    def __post_init__(self):
        object.__setattr__(self, "free_ids", tuple(sorted(self.free_ids)))
        if len(self.free_ids) < 3:
            raise InvalidArgument("sketch enumeration needs at least 3 free indices")
        if self.max_splits < 1:
            raise InvalidArgument("max_splits must be positive")
        cap = max_splits_for(len(self.free_ids))
        if self.max_splits > cap:
            object.__setattr__(self, "max_splits", cap)


def enumerate_blocks(space: SketchSpace) -> Iterator[Tuple[Partition, ...]]:
    """Compatible partition families, by size then lexicographically."""
    parts = all_partitions(space.free_ids)
    n = len(parts)
    compat = [[parts[i].compatible(parts[j]) for j in range(n)] for i in range(n)]

    def extend(chosen: List[int], start: int, size: int):
        if len(chosen) == size:
            yield tuple(parts[i] for i in chosen)
            return
        for j in range(start, n):
            if all(compat[i][j] for i in chosen):
                chosen.append(j)
                yield from extend(chosen, j + 1, size)
                chosen.pop()

    for size in range(1, space.max_splits + 1):
        yield from extend([], 0, size)


def enumerate_sketches(space: SketchSpace) -> Iterator[Program]:
    for blocks in enumerate_blocks(space):
        yield sketch(blocks)


@dataclass
class Topology:
    """A tree shape without data.

    ``legs`` maps node id to its leg ids: free index ids, or edge ids
    (negative integers) for contracted edges. ``edges`` maps each edge id
    to the partition it realizes.
    """

    legs: Dict[int, List[int]]
    edges: Dict[int, Partition]
    free_ids: FrozenSet[int]

    def edge_nodes(self, eid: int) -> Tuple[int, int]:
        a, b = (n for n, legs in self.legs.items() if eid in legs)
        return a, b

    def partitions(self) -> FrozenSet[Partition]:
        return frozenset(self.edges.values())


def topology_from_blocks(blocks: Sequence[Partition], free_ids) -> Topology:
    """Build the tree realizing ``blocks`` by replaying the splits symbolically."""
    free = frozenset(free_ids)
    legs: Dict[int, List[int]] = {0: sorted(free)}
    edges: Dict[int, Partition] = {}
    next_node = 1
    for k, b in enumerate(blocks):
        if b.universe != free:
            raise InvalidArgument("sketch block does not match the free indices")
        status, node, chosen = find_split_site(legs, free, b.block)
        if status == "exists":
            continue
        if status == "fail":
            raise InvalidArgument(f"blocks are not compatible at position {k}")
        eid = -(k + 1)
        rest = [l for l in legs[node] if l not in chosen]
        del legs[node]
        legs[next_node] = list(chosen) + [eid]
        legs[next_node + 1] = [eid] + rest
        next_node += 2
        edges[eid] = b
    return Topology(legs, edges, free)


def topology_from_sketch(s: Program, free_ids) -> Topology:
    return topology_from_blocks(s.blocks, free_ids)


def topology_of_network(g) -> Topology:
    """The symbolic shape of a concrete network (edge legs renamed negative)."""
    parts = edge_partitions(g)
    rename = {eid: -(k + 1) for k, eid in enumerate(sorted(parts))}
    legs = {n: [rename.get(i, i) for i in t.ids()] for n, t in g.nodes.items()}
    return Topology(legs, {rename[e]: p for e, p in parts.items()}, g.free_ids)


def _canonical_form(top: Topology):
    """Isomorphism-invariant description: per node, its free legs and edge partitions."""
    out = []
    for n, legs in top.legs.items():
        free = tuple(sorted(l for l in legs if l in top.free_ids))
        parts = tuple(sorted((top.edges[l].sort_key() for l in legs if l in top.edges)))
        out.append((free, parts))
    return sorted(out)


def same_shape(a: Topology, b: Topology) -> bool:
    """True when both trees have identical edge partitions and node attachments."""
    return a.partitions() == b.partitions() and _canonical_form(a) == _canonical_form(b)


def node_terms(top: Topology, dims: Mapping[int, int]) -> List[Tuple[int, Tuple[int, ...]]]:
    """Per node: product of its free dimensions and the edges it touches."""
    terms = []
    for n in sorted(top.legs):
        const = 1
        edges = []
        for l in top.legs[n]:
            if l in top.edges:
                edges.append(l)
            else:
                const *= dims[l]
        terms.append((const, tuple(edges)))
    return terms


def is_chain(top: Topology) -> bool:
    """True if every node touches at most two contracted edges (a train shape)."""
    return all(sum(1 for l in legs if l in top.edges) <= 2 for legs in top.legs.values())
