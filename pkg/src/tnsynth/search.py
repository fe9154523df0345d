"""Structure search: enumerate sketches, complete ranks, execute the best, round."""

from __future__ import annotations

import heapq
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tnsynth.dsl import (
    ExecState,
    Program,
    exec_osplit,
    exec_program,
    is_valid,
    program_from_network,
)
from tnsynth.errors import InvalidArgument, UnsupportedOrder
from tnsynth.network import (
    Partition,
    TensorNetwork,
    contract_all,
    relative_error,
    round_network,
)
from tnsynth.ranksearch import (
    DEFAULT_BIN_FRACTION,
    SpectrumTable,
    build_bins,
    complete_sketch,
    complete_sketch_equal,
)
from tnsynth.sketch import (
    SketchSpace,
    all_partitions,
    enumerate_sketches,
    is_chain,
    max_splits_for,
    topology_from_blocks,
    topology_of_network,
)
from tnsynth.tensor import Index, Tensor, canonical

logger = logging.getLogger(__name__)

RANK_STRATEGIES = ("constraint", "equal")


@dataclass
class SearchConfig:
    eps: float
    k: int = 1
    max_splits: Optional[int] = None  # None: min(2d - 3, 6)
    bin_fraction: float = DEFAULT_BIN_FRACTION
    seed: int = 0
    parallelism: int = 1
    rank_strategy: str = "constraint"

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise InvalidArgument(f"eps must lie in (0, 1), got {self.eps}")
        if self.k < 1:
            raise InvalidArgument("k must be at least 1")
        if self.rank_strategy not in RANK_STRATEGIES:
            raise InvalidArgument(f"unknown rank strategy {self.rank_strategy!r}")
        if self.parallelism < 1:
            raise InvalidArgument("parallelism must be at least 1")

    def splits_for(self, d: int) -> int:
        cap = max_splits_for(d)
        return min(cap, 6) if self.max_splits is None else min(cap, self.max_splits)


@dataclass
class SearchResult:
    network: TensorNetwork
    program: Program
    eps: float
    achieved_rel_error: float
    compression_ratio: float
    predicted_cost: int
    timings: Dict[str, float] = field(default_factory=dict)
    sketch_count: int = 0
    exec_count: int = 0
    method: str = "search"

    @property
    def size(self) -> int:
        return self.network.size()


@dataclass
class Candidate:
    program: Program
    predicted_cost: int
    order: int
    network: Optional[TensorNetwork] = None
    budget_sq: float = 0.0

    def key(self):
        return (self.predicted_cost, len(self.program), self.order)


class _TopK:
    """Shared, monotonically tightening record of the k best predicted costs."""

    def __init__(self, k: int):
        self.k = k
        self._heap: List[Tuple] = []  # max-heap via negated keys
        self._lock = threading.Lock()
        self.items: Dict[int, Candidate] = {}

    def cut(self) -> Optional[int]:
        heap = self._heap
        if len(heap) < self.k:
            return None
        return -heap[0][0]

    def offer(self, c: Candidate) -> None:
        key = c.key()
        neg = (-key[0], -key[1], -key[2])
        with self._lock:
            if len(self._heap) < self.k:
                heapq.heappush(self._heap, neg)
                self.items[c.order] = c
            elif neg > self._heap[0]:
                _, _, old = heapq.heapreplace(self._heap, neg)
                self.items.pop(-old, None)
                self.items[c.order] = c

    def ranked(self) -> List[Candidate]:
        return sorted(self.items.values(), key=Candidate.key)


def _check_order(t: Tensor) -> None:
    if t.ndim < 3:
        raise UnsupportedOrder(
            f"order-{t.ndim} tensor: structure search needs order 3 or more "
            "(an order-2 tensor has a single possible split, a truncated SVD)"
        )


def synth(t: Tensor, eps: float, k: int, cfg: SearchConfig,
          stats: Dict = None) -> List[Candidate]:
    """Top-k executed candidates by predicted cost, with their remaining budgets."""
    _check_order(t)
    stats = stats if stats is not None else {}
    t = canonical(t)
    free = t.ids()
    t0 = time.perf_counter()
    table = SpectrumTable(t)
    parts = all_partitions(free)
    if cfg.parallelism > 1:
        with ThreadPoolExecutor(cfg.parallelism) as pool:
            list(pool.map(table.get, parts))
    else:
        for p in parts:
            table.get(p)
    bins = build_bins(table, parts, eps, cfg.bin_fraction)
    t1 = time.perf_counter()

    space = SketchSpace(free, cfg.splits_for(len(free)))
    top = _TopK(k)
    counter = {"sketches": 0}

    def work(item):
        order, s = item
        cut = top.cut()
        if cfg.rank_strategy == "equal":
            out = complete_sketch_equal(s, t, eps, table, cut)
        else:
            out = complete_sketch(s, t, eps, table, bins, cut)
        if out is not None:
            top.offer(Candidate(out[0], out[1], order))

    sketches = enumerate(enumerate_sketches(space))
    if cfg.parallelism > 1:
        with ThreadPoolExecutor(cfg.parallelism) as pool:
            for _ in pool.map(work, sketches, chunksize=16):
                counter["sketches"] += 1
    else:
        for item in sketches:
            work(item)
            counter["sketches"] += 1
    t2 = time.perf_counter()

    ranked = top.ranked()
    s0 = ExecState.initial(t, eps)
    executed = []
    for c in ranked:
        st = exec_program(c.program, s0)
        c.network, c.budget_sq = st.network, st.budget_sq
        executed.append(c)
    t3 = time.perf_counter()
    stats.update(
        sketch_count=counter["sketches"],
        exec_count=len(executed),
        spectra=t1 - t0,
        complete=t2 - t1,
        execute=t3 - t2,
        data_norm=s0.data_norm,
    )
    return executed


def _finish(t: Tensor, g: TensorNetwork, program: Program, eps: float,
            predicted: int, timings: Dict[str, float], method: str,
            sketch_count: int = 0, exec_count: int = 0) -> SearchResult:
    err = relative_error(g, t)
    return SearchResult(
        network=g, program=program, eps=eps, achieved_rel_error=err,
        compression_ratio=t.size / g.size(), predicted_cost=predicted,
        timings=timings, sketch_count=sketch_count, exec_count=exec_count,
        method=method,
    )


def search_structure(t: Tensor, cfg: SearchConfig) -> SearchResult:
    """Smallest rounded network among the top-k synthesized candidates.

    The unsplit tensor itself is the fallback, so the result is never larger
    than the input.
    """
    _check_order(t)
    start = time.perf_counter()
    t = canonical(t)
    stats: Dict = {}
    candidates = synth(t, cfg.eps, cfg.k, cfg, stats)
    t0 = time.perf_counter()
    best_g = TensorNetwork.single(t)
    best_p = Program()
    best_cost = t.size
    for c in candidates:
        g = round_network(c.network, c.budget_sq, stats["data_norm"])
        if g.size() < best_g.size():
            best_g, best_p, best_cost = g, c.program, c.predicted_cost
    t1 = time.perf_counter()
    timings = {
        "spectra": stats["spectra"],
        "complete": stats["complete"],
        "execute": stats["execute"],
        "round": t1 - t0,
    }
    timings["total"] = time.perf_counter() - start
    return _finish(t, best_g, best_p, cfg.eps, best_cost, timings, "search",
                   stats["sketch_count"], stats["exec_count"])


def decompose_with_topology(t: Tensor, s: Program, eps: float,
                            cfg: SearchConfig = None) -> SearchResult:
    """Complete, execute and round one given sketch, skipping enumeration."""
    _check_order(t)
    cfg = cfg or SearchConfig(eps)
    start = time.perf_counter()
    t = canonical(t)
    free = frozenset(t.ids())
    if any(b.universe != free for b in s.blocks):
        raise InvalidArgument("sketch indices do not match the tensor")
    if not is_valid(s):
        raise InvalidArgument("sketch blocks are not a compatible family")
    table = SpectrumTable(t)
    if cfg.rank_strategy == "equal":
        program, cost = complete_sketch_equal(s, t, eps, table)
    else:
        program, cost = complete_sketch(s, t, eps, table,
                                        bin_fraction=cfg.bin_fraction)
    t0 = time.perf_counter()
    st = exec_program(program, ExecState.initial(t, eps))
    t1 = time.perf_counter()
    g = round_network(st.network, st.budget_sq, st.data_norm)
    if g.size() >= t.size:
        g = TensorNetwork.single(t)
    t2 = time.perf_counter()
    timings = {"complete": t0 - start, "execute": t1 - t0, "round": t2 - t1,
               "total": t2 - start}
    return _finish(t, g, program, eps, cost, timings, "reuse", 1, 1)


def equal_split(t: Tensor, blocks: Sequence[Partition], eps: float,
                method: str) -> SearchResult:
    """Execute ``blocks`` in order, each split limited to an equal budget share."""
    _check_order(t)
    start = time.perf_counter()
    t = canonical(t)
    st = ExecState.initial(t, eps)
    share = st.budget_sq / max(len(blocks), 1)
    for b in blocks:
        st = exec_osplit(st, b, None, allowance=share)
    g = round_network(st.network, st.budget_sq, st.data_norm)
    if g.size() >= t.size:
        g = TensorNetwork.single(t)
    timings = {"total": time.perf_counter() - start}
    return _finish(t, g, program_from_network(g), eps, g.size(), timings,
                   method, 0, 1)


def tt_blocks(free_ids: Sequence[int]) -> List[Partition]:
    ids = sorted(free_ids)
    universe = frozenset(ids)
    return [Partition.of(ids[: k + 1], universe) for k in range(len(ids) - 1)]


def ht_blocks(free_ids: Sequence[int]) -> List[Partition]:
    """Partitions of a balanced binary dimension tree, leaves first."""
    ids = sorted(free_ids)
    universe = frozenset(ids)
    found: List[Tuple[int, ...]] = []

    def rec(group: List[int]):
        if len(group) < len(ids):
            found.append(tuple(group))
        if len(group) > 1:
            mid = (len(group) + 1) // 2
            rec(group[:mid])
            rec(group[mid:])

    rec(ids)
    out: List[Partition] = []
    for g in sorted(found, key=len):
        p = Partition.of(g, universe)
        if p not in out:
            out.append(p)
    return out


def tt_baseline(t: Tensor, eps: float) -> SearchResult:
    return equal_split(t, tt_blocks(t.ids()), eps, "tt")


def ht_baseline(t: Tensor, eps: float) -> SearchResult:
    return equal_split(t, ht_blocks(t.ids()), eps, "ht")


def random_family(d: int, rng: np.random.Generator) -> List[Partition]:
    """A random compatible partition family of random size in [1, 2d - 3]."""
    parts = all_partitions(range(d))
    order = rng.permutation(len(parts))
    family: List[Partition] = []
    for i in order:
        p = parts[i]
        if all(p.compatible(q) for q in family):
            family.append(p)
    size = int(rng.integers(1, len(family) + 1))
    keep = sorted(rng.choice(len(family), size=size, replace=False))
    return sorted((family[i] for i in keep), key=Partition.sort_key)


def network_from_blocks(blocks: Sequence[Partition], dims: Sequence[int],
                        ranks: Sequence[int], rng: np.random.Generator,
                        names: Sequence[str] = None) -> TensorNetwork:
    """Random Gaussian factors on the tree realizing ``blocks``."""
    d = len(dims)
    names = list(names) if names else [f"I{i + 1}" for i in range(d)]
    top = topology_from_blocks(blocks, range(d))
    edge_ix = {}
    for k, eid in enumerate(sorted(top.edges, reverse=True)):
        edge_ix[eid] = Index(d + k, f"r{k + 1}", int(ranks[k]))
    free_ix = {i: Index(i, names[i], int(dims[i])) for i in range(d)}
    nodes = {}
    for n in sorted(top.legs):
        idx = [edge_ix[l] if l in edge_ix else free_ix[l] for l in top.legs[n]]
        nodes[n] = Tensor(idx, rng.standard_normal([ix.size for ix in idx]))
    g = TensorNetwork(nodes, range(d), splits=len(edge_ix))
    g.check()
    return g


def generate_synthetic(d: int, dims: Sequence[int], rank_range: Tuple[int, int],
                       seed: int, blocks: Sequence[Partition] = None,
                       ranks: Sequence[int] = None):
    """Random tree-structured tensor and its ground-truth network.

    ``blocks``/``ranks`` pin the structure (used to draw sibling batches
    from one topology); otherwise both are sampled from ``seed``.
    """
    if len(dims) != d:
        raise InvalidArgument(f"expected {d} dimensions, got {len(dims)}")
    lo, hi = rank_range
    if lo < 1 or lo > hi:
        raise InvalidArgument(f"bad rank range {rank_range}")
    rng = np.random.default_rng(seed)
    if blocks is None:
        blocks = random_family(d, rng)
    if ranks is None:
        ranks = [int(r) for r in rng.integers(lo, hi + 1, size=len(blocks))]
    gt = network_from_blocks(blocks, dims, ranks, rng)
    return contract_all(gt), gt


def ground_truth_is_chain(gt: TensorNetwork) -> bool:
    return is_chain(topology_of_network(gt))


def default_threads() -> int:
    value = os.environ.get("TNSYNTH_THREADS")
    try:
        return max(int(value), 1) if value else 1
    except ValueError:
        return 1
