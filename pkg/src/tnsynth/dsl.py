"""Split programs: representation, execution, validity and hole filling.

A program is a sequence of output-directed splits ``osplit {I..} rank=r``.
Executing one finds a node whose legs separate cleanly into the requested
block and its complement, then cuts that node with a truncated SVD.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from tnsynth.errors import ExecutionFailure, InvalidArgument
from tnsynth.network import (
    ZERO_TOL,
    Partition,
    TensorNetwork,
    edge_partitions,
    find_split_site,
    orthonormalize,
)
from tnsynth.tensor import Tensor, _matricize, from_matrix, frobenius_norm, svd

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hole:
    id: int

    def __str__(self) -> str:
        return "?"


Rank = Union[int, Hole]


@dataclass(frozen=True)
class Expr:
    block: Partition
    rank: Rank

    @property
    def is_hole(self) -> bool:
        return isinstance(self.rank, Hole)


@dataclass(frozen=True)
class Program:
    """Ordered split expressions; a sketch when some rank is a ``Hole``."""

    exprs: Tuple[Expr, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "exprs", tuple(self.exprs))
        holes = [e.rank.id for e in self.exprs if e.is_hole]
        if len(holes) != len(set(holes)):
            raise InvalidArgument("hole ids must be unique")

    def __len__(self) -> int:
        return len(self.exprs)

    def __iter__(self):
        return iter(self.exprs)

    @property
    def blocks(self) -> List[Partition]:
        return [e.block for e in self.exprs]

    @property
    def holes(self) -> List[Hole]:
        return [e.rank for e in self.exprs if e.is_hole]

    @property
    def complete(self) -> bool:
        return not self.holes

    def ranks(self) -> Dict[Partition, int]:
        return {e.block: e.rank for e in self.exprs if not e.is_hole}


def sketch(blocks: Iterable[Partition]) -> Program:
    """A sketch with a fresh hole for every block."""
    return Program(tuple(Expr(b, Hole(k)) for k, b in enumerate(blocks)))


@dataclass(frozen=True)
class ExecState:
    network: TensorNetwork
    budget_sq: float
    data_norm: float

    @classmethod
    def initial(cls, t: Tensor, eps: float) -> "ExecState":
        norm = frobenius_norm(t)
        return cls(TensorNetwork.single(t), (eps * norm) ** 2, norm)

    @property
    def eps_remaining(self) -> float:
        return float(np.sqrt(self.budget_sq) / self.data_norm) if self.data_norm else 0.0


def min_rank(sigma_desc: np.ndarray, budget_sq: float, data_norm: float) -> int:
    """Fewest singular values to keep so the dropped squared mass fits the budget.

    Values at or below ``ZERO_TOL * data_norm`` never count against the budget.
    """
    sq = sigma_desc ** 2
    nonzero = int(np.sum(sigma_desc > ZERO_TOL * data_norm))
    tails = np.concatenate([np.cumsum(sq[:nonzero][::-1])[::-1], [0.0]])
    # tails[k] = squared mass of nonzero values beyond the first k; the slack
    # absorbs rounding between spectra computed from different factorizations
    slack = budget_sq * 1e-9 + (ZERO_TOL * data_norm) ** 2
    feasible = np.nonzero(tails <= budget_sq + slack)[0]
    return int(feasible[0]) if len(feasible) else nonzero


def exec_isplit(st: ExecState, node: int, isplit_ids: Iterable[int],
                r: Optional[int], allowance: float = None) -> ExecState:
    """Cut ``node`` into a factor over ``isplit_ids`` and one over its other legs.

    With ``r=None`` the rank is the smallest one whose truncation error fits
    ``allowance`` (capped by the remaining budget).
    """
    g = st.network
    t = g.nodes[node]
    isplit_ids = set(isplit_ids)
    if not isplit_ids or not isplit_ids < set(t.ids()):
        raise InvalidArgument("isplit indices must be a proper nonempty subset of the node")
    if r is not None and r < 1:
        raise InvalidArgument(f"rank must be positive, got {r}")
    g = orthonormalize(g, node)
    t = g.nodes[node]
    m = _matricize(t, isplit_ids)
    U, s, Vt = svd(m.matrix)
    if r is None:
        share = st.budget_sq if allowance is None else min(allowance, st.budget_sq)
        r = max(min_rank(s, share, st.data_norm), 1)
    need = min_rank(s, st.budget_sq, st.data_norm)
    if need > r:
        raise ExecutionFailure(
            f"rank {r} too small: budget requires at least {need}"
        )
    keep = min(r, len(s))
    dropped = float(np.sum(s[keep:] ** 2))
    e, k = g.fresh_index(keep)
    left = from_matrix(U[:, :keep], m.rows, (e,))
    right = from_matrix(s[:keep, None] * Vt[:keep], (e,), m.cols)
    a, b = g.next_node, g.next_node + 1
    g = g.derive(remove=(node,), add={a: left, b: right},
                 next_index=g.next_index + 1, splits=k)
    return ExecState(g, max(st.budget_sq - dropped, 0.0), st.data_norm)


def exec_osplit(st: ExecState, block: Partition, r: Optional[int],
                allowance: float = None) -> ExecState:
    g = st.network
    if block.universe != g.free_ids:
        raise InvalidArgument("partition does not match the network's free indices")
    status, node, legs = find_split_site(g.node_legs(), g.free_ids, block.block)
    if status == "exists":
        logger.debug("partition %s already realized; rank %s ignored",
                     block.display, r)
        return st
    if status == "fail":
        raise ExecutionFailure(
            f"no node can realize partition {sorted(block.display)}"
        )
    return exec_isplit(st, node, legs, r, allowance)


def exec_program(p: Program, s0: ExecState) -> ExecState:
    """Run every expression left to right; the first failure aborts the run."""
    if not p.complete:
        raise InvalidArgument("cannot execute a sketch with holes")
    st = s0
    for k, e in enumerate(p.exprs):
        try:
            st = exec_osplit(st, e.block, e.rank)
        except ExecutionFailure as exc:
            raise ExecutionFailure(str(exc), expr_index=k) from None
    return st


def valid_extension(s: Program, block: Partition) -> bool:
    return all(block != b and block.compatible(b) for b in s.blocks)


def is_valid(s: Program) -> bool:
    seen: List[Partition] = []
    for b in s.blocks:
        if not all(b != o and b.compatible(o) for o in seen):
            return False
        seen.append(b)
    return True


def fill(s: Program, assignment: Mapping[int, int]) -> Program:
    """Replace each hole (by hole id) with its assigned rank."""
    exprs = []
    for e in s.exprs:
        if e.is_hole:
            if e.rank.id not in assignment:
                raise InvalidArgument(f"no rank assigned to hole {e.rank.id}")
            exprs.append(replace(e, rank=int(assignment[e.rank.id])))
        else:
            exprs.append(e)
    return Program(tuple(exprs))


def programs_equivalent(p1: Program, p2: Program) -> bool:
    return Counter((e.block, e.rank) for e in p1) == Counter((e.block, e.rank) for e in p2)


def program_from_network(g: TensorNetwork) -> Program:
    """The output-directed program that rebuilds ``g``'s structure and ranks."""
    parts = edge_partitions(g)
    exprs = [Expr(parts[i], g.index_by_id[i].size) for i in parts]
    return Program(tuple(sorted(exprs, key=lambda e: e.block.sort_key())))


_LINE = re.compile(r"^osplit\s*\{([^}]*)\}\s*rank\s*=\s*(\?|\d+)\s*$", re.IGNORECASE)


def parse_program(text: str, free_names: Mapping[str, int]) -> Program:
    """Parse ``osplit {I1,I2} rank=5`` lines; ``rank=?`` makes a hole.

    ``free_names`` maps index names to ids. Lines starting with ``#`` and
    blank lines are ignored.
    """
    universe = frozenset(free_names.values())
    exprs = []
    holes = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise InvalidArgument(f"line {lineno}: cannot parse {raw!r}")
        names = [n.strip() for n in m.group(1).split(",") if n.strip()]
        unknown = [n for n in names if n not in free_names]
        if unknown:
            raise InvalidArgument(f"line {lineno}: unknown index names {unknown}")
        block = Partition.of((free_names[n] for n in names), universe)
        if m.group(2) == "?":
            rank: Rank = Hole(holes)
            holes += 1
        else:
            rank = int(m.group(2))
            if rank < 1:
                raise InvalidArgument(f"line {lineno}: rank must be positive")
        exprs.append(Expr(block, rank))
    return Program(tuple(exprs))


def format_program(p: Program, names: Mapping[int, str]) -> str:
    lines = []
    for e in p.exprs:
        block = ",".join(e.block.names(names))
        lines.append(f"osplit {{{block}}} rank={e.rank}")
    return "\n".join(lines) + ("\n" if lines else "")
