"""Dense tensors with named indices and the kernels built on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
import scipy.linalg

from tnsynth.errors import InvalidArgument, ShapeMismatch


@dataclass(frozen=True, order=True)
class Index:
    """A named tensor mode. Identity is the integer ``id``."""

    id: int
    name: str
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise InvalidArgument(f"index {self.name} has size {self.size}")

    def resized(self, size: int) -> "Index":
        return Index(self.id, self.name, size)


class Tensor:
    """Immutable dense float64 array whose axes are labelled by ``Index``."""

    __slots__ = ("indices", "data")

    def __init__(self, indices: Sequence[Index], data):
        indices = tuple(indices)
        arr = np.asarray(data, dtype=np.float64)
        shape = tuple(ix.size for ix in indices)
        if arr.shape != shape:
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise ShapeMismatch(
                    f"data with {arr.size} entries does not fit shape {shape}"
                )
            arr = arr.reshape(shape)
        ids = [ix.id for ix in indices]
        if len(set(ids)) != len(ids):
            raise InvalidArgument(f"duplicate index ids in {ids}")
        if arr is data or not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
        self.indices: Tuple[Index, ...] = indices
        self.data: np.ndarray = arr

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return len(self.indices)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def ids(self) -> Tuple[int, ...]:
        return tuple(ix.id for ix in self.indices)

    def position(self, index_id: int) -> int:
        for pos, ix in enumerate(self.indices):
            if ix.id == index_id:
                return pos
        raise InvalidArgument(f"index id {index_id} not in tensor")

    def index(self, index_id: int) -> Index:
        return self.indices[self.position(index_id)]

    def __repr__(self) -> str:
        names = ", ".join(f"{ix.name}:{ix.size}" for ix in self.indices)
        return f"Tensor({names})"


def permute(t: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(t.ndim)):
        raise InvalidArgument(f"{order} is not a permutation of 0..{t.ndim - 1}")
    if order == tuple(range(t.ndim)):
        return t
    return Tensor(
        [t.indices[o] for o in order], np.ascontiguousarray(t.data.transpose(order))
    )


def canonical(t: Tensor) -> Tensor:
    """Reorder axes by ascending index id."""
    order = sorted(range(t.ndim), key=lambda p: t.indices[p].id)
    return permute(t, order)


@dataclass(frozen=True)
class Matricization:
    """A matrix view of a tensor plus what is needed to undo it."""

    matrix: np.ndarray
    rows: Tuple[Index, ...]
    cols: Tuple[Index, ...]
    original: Tuple[Index, ...]


def matricize(t: Tensor, rows: Iterable[int]) -> Matricization:
    """Flatten ``t`` into a matrix with the ids in ``rows`` as row modes.

    Row and column modes each appear in ascending id order.
    """
    row_ids = {r.id if isinstance(r, Index) else r for r in rows}
    ids = set(t.ids())
    if not row_ids <= ids:
        raise InvalidArgument(f"row ids {sorted(row_ids - ids)} not in tensor")
    if not row_ids or row_ids == ids:
        raise InvalidArgument("matricization needs a proper nonempty row set")
    return _matricize(t, row_ids)


def _matricize(t: Tensor, row_ids) -> Matricization:
    # also accepts empty/full row sets (internal use: orthonormalize on leaves)
    rpos = sorted((p for p in range(t.ndim) if t.indices[p].id in row_ids),
                  key=lambda p: t.indices[p].id)
    cpos = sorted((p for p in range(t.ndim) if t.indices[p].id not in row_ids),
                  key=lambda p: t.indices[p].id)
    rows = tuple(t.indices[p] for p in rpos)
    cols = tuple(t.indices[p] for p in cpos)
    nr = int(np.prod([ix.size for ix in rows], dtype=np.int64))
    nc = int(np.prod([ix.size for ix in cols], dtype=np.int64))
    mat = t.data.transpose(rpos + cpos).reshape(nr, nc)
    return Matricization(mat, rows, cols, t.indices)


def unmatricize(m: Matricization) -> Tensor:
    """Inverse of :func:`matricize`; restores the original axis order."""
    return from_matrix(m.matrix, m.rows, m.cols, m.original)


def from_matrix(mat: np.ndarray, rows: Sequence[Index], cols: Sequence[Index],
                order: Sequence[Index] = None) -> Tensor:
    """Fold a matrix back into a tensor with axes ``rows + cols``.

    If ``order`` is given the result is permuted to that index order.
    """
    axes = tuple(rows) + tuple(cols)
    t = Tensor(axes, np.reshape(mat, [ix.size for ix in axes]))
    if order is None:
        return t
    pos = {ix.id: p for p, ix in enumerate(axes)}
    return permute(t, [pos[ix.id] for ix in order])


def frobenius_norm(t) -> float:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return float(np.linalg.norm(data.ravel()))


def svd(m: np.ndarray):
    """Economy SVD ``m = U @ diag(s) @ Vt`` with ``s`` descending."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise InvalidArgument("svd input has non-finite entries")
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails to converge; gesvd is slower but robust
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")


def singular_values(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise InvalidArgument("svd input has non-finite entries")
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(m, compute_uv=False, lapack_driver="gesvd")


def contract(a: Tensor, b: Tensor) -> Tensor:
    """Sum over every index id shared by ``a`` and ``b``.

    The result carries the remaining indices in ascending id order.
    """
    bpos = {ix.id: p for p, ix in enumerate(b.indices)}
    ax_a, ax_b = [], []
    for p, ix in enumerate(a.indices):
        q = bpos.get(ix.id)
        if q is None:
            continue
        if b.indices[q].size != ix.size:
            raise ShapeMismatch(
                f"index {ix.name} has size {ix.size} and {b.indices[q].size}"
            )
        ax_a.append(p)
        ax_b.append(q)
    out = np.tensordot(a.data, b.data, axes=(ax_a, ax_b))
    shared = {a.indices[p].id for p in ax_a}
    idx = [ix for ix in a.indices if ix.id not in shared]
    idx += [ix for ix in b.indices if ix.id not in shared]
    return canonical(Tensor(idx, out))
