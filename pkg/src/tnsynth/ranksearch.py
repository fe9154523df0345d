"""Rank completion of sketches as a 0-1 program over binned truncation options.

Singular values of the original tensor's matricizations bound those met
during execution from above, so one spectrum per partition is enough to
price every sketch before any data is fitted.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tnsynth.dsl import Program, fill
from tnsynth.errors import InvalidArgument
from tnsynth.network import Partition
from tnsynth.sketch import node_terms, topology_from_sketch
from tnsynth.tensor import Tensor, _matricize, frobenius_norm, singular_values

DEFAULT_BIN_FRACTION = 0.1


@dataclass(frozen=True)
class Spectrum:
    sigma: np.ndarray  # ascending
    prefix_sq: np.ndarray  # prefix_sq[i] = sum of the i smallest squared values

    @property
    def length(self) -> int:
        return len(self.sigma)


class SpectrumTable:
    """Lazily computed, shared spectra of ``t`` keyed by partition."""

    def __init__(self, t: Tensor):
        self.tensor = t
        self.norm_sq = frobenius_norm(t) ** 2
        self.dims = {ix.id: ix.size for ix in t.indices}
        self._cache: Dict[Partition, Spectrum] = {}
        self._lock = threading.Lock()

    def __contains__(self, p: Partition) -> bool:
        return p in self._cache

    def __len__(self) -> int:
        return len(self._cache)

    def get(self, p: Partition) -> Spectrum:
        spec = self._cache.get(p)
        if spec is None:
            m = _matricize(self.tensor, p.block)
            sigma = np.sort(singular_values(m.matrix))
            prefix = np.concatenate([[0.0], np.cumsum(sigma ** 2)])
            spec = Spectrum(sigma, prefix)
            with self._lock:
                spec = self._cache.setdefault(p, spec)
        return spec


def build_spectrum_table(t: Tensor, blocks: Iterable[Partition]) -> SpectrumTable:
    table = SpectrumTable(t)
    for b in blocks:
        table.get(b)
    return table


def bin_options(spec: Spectrum, budget_sq: float, c: float) -> List[Tuple[int, float]]:
    """(discard count, squared error) choices spaced about ``c * budget_sq`` apart.

    For each target level the largest discard count whose error does not
    exceed it is taken. Discarding nothing is always an option.
    """
    if not 0 < c <= 1:
        raise InvalidArgument(f"bin fraction must lie in (0, 1], got {c}")
    prefix = spec.prefix_sq[: spec.length]  # never discard every value
    steps = int(math.ceil(1.0 / c - 1e-9))
    out = {0: 0.0}
    for i in range(steps + 1):
        target = min(budget_sq, i * c * budget_sq)
        b = int(np.searchsorted(prefix, target, side="right")) - 1
        if b >= 0:
            out[b] = float(prefix[b])
    return sorted(out.items())


@dataclass
class BinSet:
    options: Dict[Partition, List[Tuple[int, float]]]
    bin_fraction: float
    budget_sq: float

    def __getitem__(self, p: Partition) -> List[Tuple[int, float]]:
        return self.options[p]


def build_bins(table: SpectrumTable, blocks: Iterable[Partition], eps: float,
               c: float = DEFAULT_BIN_FRACTION) -> BinSet:
    budget = (eps ** 2) * table.norm_sq
    opts = {b: bin_options(table.get(b), budget, c) for b in blocks}
    return BinSet(opts, c, budget)


def extend_bins(bins: BinSet, table: SpectrumTable, blocks: Iterable[Partition]) -> None:
    for b in blocks:
        if b not in bins.options:
            bins.options[b] = bin_options(table.get(b), bins.budget_sq, bins.bin_fraction)


@dataclass
class CostModel:
    """One-hot choice of a truncation option per hole.

    ``terms`` lists, per tree node, the product of its free dimensions and
    the positions of the holes whose ranks multiply into its size.
    """

    hole_ids: List[int]
    lengths: List[int]
    options: List[List[Tuple[int, float]]]
    terms: List[Tuple[int, Tuple[int, ...]]]
    budget_sq: float
    topk_cut: Optional[int] = None

    def ranks(self, choice: Sequence[int]) -> List[int]:
        return [self.lengths[h] - self.options[h][k][0] for h, k in enumerate(choice)]

    def objective(self, choice: Sequence[int]) -> int:
        ranks = self.ranks(choice)
        total = 0
        for const, holes in self.terms:
            v = const
            for h in holes:
                v *= ranks[h]
            total += v
        return total

    def error(self, choice: Sequence[int]) -> float:
        return sum(self.options[h][k][1] for h, k in enumerate(choice))

    def feasible(self, choice: Sequence[int]) -> bool:
        if self.error(choice) > self.budget_sq:
            return False
        return self.topk_cut is None or self.objective(choice) <= self.topk_cut

    def ilp(self) -> "ZeroOneProgram":
        return ZeroOneProgram.from_model(self)


@dataclass
class ZeroOneProgram:
    """Explicit 0-1 linear encoding of a :class:`CostModel`.

    Variables ``x[h][k]`` select option ``k`` of hole ``h``. Each product of
    hole ranks in the objective is replaced by binaries ``y`` tied to their
    factor variables by ``y <= x_i`` and ``y >= sum(x_i) - (n - 1)``.
    """

    n_x: List[int]
    one_hot: List[List[Tuple[int, int]]]
    budget: List[Tuple[Tuple[int, int], float]]
    budget_rhs: float
    y_factors: List[Tuple[Tuple[int, int], ...]]
    objective: List[float]
    constant: int
    cut: Optional[int]

    @classmethod
    def from_model(cls, m: CostModel) -> "ZeroOneProgram":
        n_x = [len(o) for o in m.options]
        one_hot = [[(h, k) for k in range(n)] for h, n in enumerate(n_x)]
        budget = [((h, k), lam) for h, opts in enumerate(m.options)
                  for k, (_, lam) in enumerate(opts)]
        y_factors, objective = [], []
        constant = 0
        for const, holes in m.terms:
            if not holes:
                constant += const
                continue
            for combo in itertools.product(*(range(n_x[h]) for h in holes)):
                coef = const
                for h, k in zip(holes, combo):
                    coef *= m.lengths[h] - m.options[h][k][0]
                y_factors.append(tuple(zip(holes, combo)))
                objective.append(coef)
        return cls(n_x, one_hot, budget, m.budget_sq, y_factors, objective,
                   constant, m.topk_cut)

    def evaluate(self, x: Mapping[Tuple[int, int], int]) -> Optional[int]:
        """Objective at binary point ``x`` with ``y`` at its least feasible value.

        Returns None if ``x`` violates a constraint.
        """
        for row in self.one_hot:
            if sum(x.get(v, 0) for v in row) != 1:
                return None
        if sum(lam * x.get(v, 0) for v, lam in self.budget) > self.budget_rhs:
            return None
        total = self.constant
        for coef, factors in zip(self.objective, self.y_factors):
            # y <= each factor and y >= sum - (n - 1): with binaries and a
            # nonnegative coefficient the minimum sets y to the factors' AND
            y = max(0, sum(x.get(f, 0) for f in factors) - (len(factors) - 1))
            assert all(y <= x.get(f, 0) for f in factors)
            total += coef * y
        if self.cut is not None and total > self.cut:
            return None
        return int(total)


def build_cost_model(s: Program, table: SpectrumTable, bins: BinSet,
                     topk_cut: Optional[int] = None) -> CostModel:
    top = topology_from_sketch(s, table.dims)
    holes = [e for e in s.exprs if e.is_hole]
    pos = {}
    for k, e in enumerate(s.exprs):
        if e.is_hole:
            pos[-(k + 1)] = len(pos)
    terms = []
    for const, edges in node_terms(top, table.dims):
        fixed = 1
        hs = []
        for eid in edges:
            if eid in pos:
                hs.append(pos[eid])
            else:
                fixed *= s.exprs[-eid - 1].rank
        terms.append((const * fixed, tuple(hs)))
    lengths = [table.get(e.block).length for e in holes]
    options = [bins[e.block] for e in holes]
    return CostModel([e.rank.id for e in holes], lengths, options, terms,
                     bins.budget_sq, topk_cut)


@dataclass
class Solution:
    assignment: Dict[int, int]  # hole id -> discard count
    choice: Tuple[int, ...]
    cost: int


def solve(model: CostModel) -> Optional[Solution]:
    """Exact branch and bound over per-hole options.

    Among optimal points the lexicographically smallest discard vector (in
    hole order) is returned. None if nothing satisfies the top-k cut.
    """
    n = len(model.hole_ids)
    if n == 0:
        cost = model.objective(())
        if model.topk_cut is not None and cost > model.topk_cut:
            return None
        return Solution({}, (), cost)

    lengths = model.lengths
    opts = model.options
    lams = [[lam for _, lam in o] for o in opts]
    discards = [[d for d, _ in o] for o in opts]
    budget = model.budget_sq
    # options sorted by discard ascending; lambdas are nondecreasing with discard
    terms = model.terms

    def bound(ranks: List[int]) -> int:
        total = 0
        for const, holes in terms:
            v = const
            for h in holes:
                v *= ranks[h]
            total += v
        return total

    best_cost = model.topk_cut if model.topk_cut is not None else None
    best_vec: Optional[Tuple[int, ...]] = None
    ranks = [lengths[h] - discards[h][0] for h in range(n)]
    choice = [0] * n

    def min_rank(h: int, remaining: float) -> int:
        ls = lams[h]
        k = int(np.searchsorted(ls, remaining, side="right")) - 1
        return lengths[h] - discards[h][max(k, 0)]

    def visit(h: int, remaining: float):
        nonlocal best_cost, best_vec
        if h == n:
            cost = bound(ranks)
            vec = tuple(discards[i][choice[i]] for i in range(n))
            if best_cost is None or cost < best_cost or (
                cost == best_cost and (best_vec is None or vec < best_vec)
            ):
                best_cost, best_vec = cost, vec
                best_choice[:] = choice
            return
        # try larger discards first so good incumbents appear early
        for k in range(len(lams[h]) - 1, -1, -1):
            lam = lams[h][k]
            if lam > remaining:
                continue
            choice[h] = k
            ranks[h] = lengths[h] - discards[h][k]
            left = remaining - lam
            for j in range(h + 1, n):
                ranks[j] = min_rank(j, left)
            lb = bound(ranks)
            if best_cost is not None:
                if lb > best_cost:
                    continue
                if lb == best_cost and best_vec is not None:
                    prefix = tuple(discards[i][choice[i]] for i in range(h + 1))
                    if prefix > best_vec[: h + 1]:
                        continue
            visit(h + 1, left)

    best_choice = [0] * n
    visit(0, budget)
    if best_vec is None:
        return None
    assignment = {model.hole_ids[h]: best_vec[h] for h in range(n)}
    return Solution(assignment, tuple(best_choice), int(best_cost))


def brute_force(model: CostModel) -> Optional[Solution]:
    """Exhaustive enumeration of every option combination (test oracle)."""
    best = None
    for combo in itertools.product(*(range(len(o)) for o in model.options)):
        if not model.feasible(combo):
            continue
        cost = model.objective(combo)
        vec = tuple(model.options[h][k][0] for h, k in enumerate(combo))
        if best is None or (cost, vec) < (best.cost, tuple(best.assignment.values())):
            best = Solution({model.hole_ids[h]: vec[h] for h in range(len(vec))},
                            combo, cost)
    return best


def complete_sketch(s: Program, t: Tensor, eps: float, table: SpectrumTable = None,
                    bins: BinSet = None, topk_cut: Optional[int] = None,
                    bin_fraction: float = DEFAULT_BIN_FRACTION):
    """Fill every hole with rank ``length - discard`` from the optimal model point.

    Returns ``(program, predicted_cost)`` or None when the cut excludes all points.
    """
    table = table if table is not None else SpectrumTable(t)
    holes = [e.block for e in s.exprs if e.is_hole]
    if bins is None:
        bins = build_bins(table, holes, eps, bin_fraction)
    else:
        extend_bins(bins, table, holes)
    model = build_cost_model(s, table, bins, topk_cut)
    sol = solve(model)
    if sol is None:
        return None
    ranks = dict(zip(model.hole_ids, model.ranks(sol.choice)))
    return fill(s, ranks), sol.cost


def complete_sketch_equal(s: Program, t: Tensor, eps: float,
                          table: SpectrumTable = None,
                          topk_cut: Optional[int] = None):
    """Completion that gives every hole the same share of the squared budget."""
    table = table if table is not None else SpectrumTable(t)
    holes = [e for e in s.exprs if e.is_hole]
    budget = (eps ** 2) * table.norm_sq
    share = budget / max(len(holes), 1)
    options = []
    for e in holes:
        spec = table.get(e.block)
        b = int(np.searchsorted(spec.prefix_sq[: spec.length], share, side="right")) - 1
        options.append([(max(b, 0), float(spec.prefix_sq[max(b, 0)]))])
    bins = BinSet({e.block: o for e, o in zip(holes, options)}, 1.0, budget)
    model = build_cost_model(s, table, bins, topk_cut)
    choice = (0,) * len(holes)
    cost = model.objective(choice)
    if topk_cut is not None and cost > topk_cut:
        return None
    ranks = dict(zip(model.hole_ids, model.ranks(choice)))
    return fill(s, ranks), cost
