"""Quad-tree matrices stored as chunks in a :class:`~qtinv.taskrt.Runtime`.

Internal nodes are :class:`~qtinv.taskrt.Node` chunks with four child ids in
the order (0,0), (0,1), (1,0), (1,1); a ``None`` child is an all-zero
submatrix.  Leaves are :class:`~qtinv.blockmat.LeafMatrix` chunks.

Every algebraic operation exists twice: as a task body (``_mul``, ``_add``,
...) that recursively registers child tasks, and as a registration helper
(``mul``, ``add``, ...) that works both from the main program and from
inside a running task.  The public functions (``multiply``, ``add_scaled``,
...) register the work and execute it right away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .blockmat import (
    DimensionMismatch,
    LeafMatrix,
    leaf_add,
    leaf_multiply,
    leaf_scale,
    leaf_transpose,
    leaf_truncate,
)
from .taskrt import ChunkId, Join, Node, Runtime

__all__ = [
    "DENSIFY_CAP",
    "HMatrix",
    "PadSpec",
    "add",
    "add_scaled",
    "assemble",
    "densify",
    "frobenius_norm",
    "from_dense",
    "gershgorin_upper_bound",
    "identity",
    "mul",
    "multiply",
    "nnz_per_row",
    "norm",
    "quadrants",
    "scale",
    "transpose",
    "truncate",
]

DENSIFY_CAP = 8192


@dataclass(frozen=True)
class PadSpec:
    """Identity padding up to a power-of-two number of leaves."""

    logical_dim: int
    padded_dim: int

    @classmethod
    def for_dim(cls, n: int, leaf_dim: int) -> PadSpec:
        if n < 0:
            raise ValueError("matrix order must be nonnegative")
        nleaves = max(1, -(-n // leaf_dim))
        return cls(n, leaf_dim * (1 << (nleaves - 1).bit_length()))


@dataclass(frozen=True, eq=False)
class HMatrix:
    rt: Runtime
    dim: int
    leaf_dim: int
    blocksize: int
    root: ChunkId | None
    logical_dim: int | None = None

    def __post_init__(self):
        if self.logical_dim is None:
            object.__setattr__(self, "logical_dim", self.dim)
        if self.dim < self.leaf_dim or (self.dim // self.leaf_dim) & (self.dim // self.leaf_dim - 1):
            raise ValueError(f"dim {self.dim} is not a power-of-two multiple of leaf dim {self.leaf_dim}")

    @property
    def is_null(self) -> bool:
        return self.root is None

    def with_root(self, root: ChunkId | None) -> HMatrix:
        return replace(self, root=root)

    def __repr__(self) -> str:
        return f"HMatrix(dim={self.dim}, leaf_dim={self.leaf_dim}, root={self.root!r})"


def _check_same(*mats: HMatrix) -> None:
    ref = mats[0]
    for m in mats[1:]:
        if m.dim != ref.dim or m.leaf_dim != ref.leaf_dim or m.blocksize != ref.blocksize:
            raise DimensionMismatch(f"quad-tree shapes differ: {ref} vs {m}")
        if m.rt is not ref.rt:
            raise ValueError("operands live in different runtimes")


# -- task bodies -------------------------------------------------------------

def _q(i: int, j: int) -> int:
    return 2 * i + j


def _mul(ctx, a, b, ta, tb, tau):
    pa, pb = ctx.get(a), ctx.get(b)
    if pa is None or pb is None:
        return None
    if isinstance(pa, LeafMatrix):
        out = leaf_truncate(leaf_multiply(pa, pb, ta, tb), tau)
        return out if out.nblocks else None
    kids = []
    for i in (0, 1):
        for j in (0, 1):
            pairs = []
            for k in (0, 1):
                x = pa[_q(k, i) if ta else _q(i, k)]
                y = pb[_q(j, k) if tb else _q(k, j)]
                if x is not None and y is not None:
                    pairs.append((x, y))
            if not pairs:
                kids.append(None)
            elif len(pairs) == 1:
                kids.append(ctx.register_task(_mul, pairs[0], (ta, tb, tau), "multiply"))
            else:
                # exact partial products, truncated once after summation
                terms = [ctx.register_task(_mul, xy, (ta, tb, 0.0), "multiply") for xy in pairs]
                kids.append(ctx.register_task(_add, tuple(terms), (1.0, 1.0, tau), "add"))
    return Node(*kids)


def _add(ctx, a, b, alpha, beta, tau=0.0):
    pa, pb = ctx.get(a), ctx.get(b)
    if pa is None and pb is None:
        return None
    some = pa if pa is not None else pb
    if isinstance(some, LeafMatrix):
        if pa is None:
            out = leaf_scale(pb, beta)
        elif pb is None:
            out = leaf_scale(pa, alpha)
        else:
            out = leaf_add(pa, pb, alpha, beta)
        out = leaf_truncate(out, tau)
        return out if out.nblocks else None
    kids = []
    for q in range(4):
        x = pa[q] if pa is not None else None
        y = pb[q] if pb is not None else None
        kids.append(add(ctx, x, y, alpha, beta, tau))
    return Node(*kids)


def _transpose(ctx, a):
    pa = ctx.get(a)
    if pa is None:
        return None
    if isinstance(pa, LeafMatrix):
        return leaf_transpose(pa)
    return Node(*(transpose_id(ctx, pa[q]) for q in (0, 2, 1, 3)))


def _truncate(ctx, a, tau):
    pa = ctx.get(a)
    if pa is None:
        return None
    if isinstance(pa, LeafMatrix):
        out = leaf_truncate(pa, tau)
        return out if out.nblocks else None
    return Node(*(truncate_id(ctx, pa[q], tau) for q in range(4)))


def _sum_present(*xs):
    return sum(x for x in xs if x is not None)


def _sqnorm(ctx, a):
    pa = ctx.get(a)
    if pa is None:
        return 0.0
    if isinstance(pa, LeafMatrix):
        return pa.frobenius_sq()
    kids = [ctx.register_task(_sqnorm, (c,), (), "sqnorm") for c in pa.children if c is not None]
    return Join(_sum_present, kids)


def _norm(ctx, a):
    return Join(math.sqrt, [ctx.register_task(_sqnorm, (a,), (), "sqnorm")])


# -- registration helpers (main program or running task) -------------------

def mul(reg, a, b, ta=False, tb=False, tau=0.0):
    """Register ``op(a) @ op(b)`` truncated at ``tau``; null operands short-circuit."""
    if a is None or b is None:
        return None
    return reg.register_task(_mul, (a, b), (bool(ta), bool(tb), float(tau)), "multiply")


def add(reg, a, b, alpha=1.0, beta=1.0, tau=0.0):
    """Register ``alpha * a + beta * b``, leaf blocks below ``tau`` dropped."""
    if alpha == 0.0:
        a = None
    if beta == 0.0:
        b = None
    if a is None and b is None:
        return None
    if tau == 0.0 and b is None and alpha == 1.0:
        return a
    if tau == 0.0 and a is None and beta == 1.0:
        return b
    return reg.register_task(_add, (a, b), (float(alpha), float(beta), float(tau)), "add")


def scale_id(reg, a, alpha):
    return add(reg, a, None, alpha, 0.0)


def transpose_id(reg, a):
    if a is None:
        return None
    return reg.register_task(_transpose, (a,), (), "transpose")


def truncate_id(reg, a, tau):
    if a is None:
        return None
    return reg.register_task(_truncate, (a,), (float(tau),), "truncate")


def norm(reg, a):
    """Register the Frobenius norm of ``a`` as a scalar chunk."""
    if a is None:
        return reg.register_chunk(0.0)
    return reg.register_task(_norm, (a,), (), "norm")


# -- construction ------------------------------------------------------------

def _build_tree(rt: Runtime, leaves: dict, r0: int, c0: int, size: int):
    if size == 1:
        return leaves.get((r0, c0))
    h = size // 2
    kids = [
        _build_tree(rt, leaves, r0, c0, h),
        _build_tree(rt, leaves, r0, c0 + h, h),
        _build_tree(rt, leaves, r0 + h, c0, h),
        _build_tree(rt, leaves, r0 + h, c0 + h, h),
    ]
    if all(k is None for k in kids):
        return None
    return rt.register_chunk(Node(*kids))


def assemble(
    rt: Runtime,
    entries,
    logical_dim: int,
    leaf_dim: int = 128,
    blocksize: int = 8,
    pad: PadSpec | None = None,
) -> HMatrix:
    """Build a quad-tree from ``(row, col, value)`` entries.

    ``entries`` is an iterable of triples or a ``(rows, cols, values)`` tuple
    of arrays.  Duplicates are summed.  Rows/columns past ``logical_dim`` are
    filled with the identity.
    """
    pad = pad or PadSpec.for_dim(logical_dim, leaf_dim)
    if pad.logical_dim != logical_dim:
        raise ValueError("pad spec does not match logical dimension")
    if isinstance(entries, tuple) and len(entries) == 3 and not np.isscalar(entries[0]):
        rows, cols, vals = (np.asarray(x) for x in entries)
    else:
        triples = list(entries)
        rows = np.array([t[0] for t in triples], dtype=np.int64)
        cols = np.array([t[1] for t in triples], dtype=np.int64)
        vals = np.array([t[2] for t in triples], dtype=np.float64)
    rows = rows.astype(np.int64).ravel()
    cols = cols.astype(np.int64).ravel()
    vals = vals.astype(np.float64).ravel()
    if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= logical_dim or cols.max() >= logical_dim):
        raise IndexError(f"entry index outside 0..{logical_dim - 1}")
    padidx = np.arange(logical_dim, pad.padded_dim, dtype=np.int64)
    rows = np.concatenate([rows, padidx])
    cols = np.concatenate([cols, padidx])
    vals = np.concatenate([vals, np.ones(len(padidx))])

    nleaf = pad.padded_dim // leaf_dim
    lkey = (rows // leaf_dim) * nleaf + cols // leaf_dim
    order = np.argsort(lkey, kind="stable")
    rows, cols, vals, lkey = rows[order], cols[order], vals[order], lkey[order]
    ukeys, starts = np.unique(lkey, return_index=True)
    ends = np.append(starts[1:], len(lkey))
    leaves = {}
    for key, lo, hi in zip(ukeys, starts, ends):
        dense = np.zeros((leaf_dim, leaf_dim))
        np.add.at(dense, (rows[lo:hi] % leaf_dim, cols[lo:hi] % leaf_dim), vals[lo:hi])
        leaf = LeafMatrix.from_dense(dense, blocksize)
        if leaf.nblocks:
            leaves[divmod(int(key), nleaf)] = rt.register_chunk(leaf)
    root = _build_tree(rt, leaves, 0, 0, nleaf)
    return HMatrix(rt, pad.padded_dim, leaf_dim, blocksize, root, logical_dim)


def from_dense(rt: Runtime, array, leaf_dim: int = 128, blocksize: int = 8) -> HMatrix:
    array = np.asarray(array, dtype=np.float64)
    r, c = np.nonzero(array)
    return assemble(rt, (r, c, array[r, c]), array.shape[0], leaf_dim, blocksize)


def identity(rt: Runtime, dim: int, leaf_dim: int = 128, blocksize: int = 8) -> HMatrix:
    """Identity with shared subtrees: one chunk per level."""
    node = rt.register_chunk(LeafMatrix.identity(leaf_dim, blocksize))
    size = leaf_dim
    while size < dim:
        node = rt.register_chunk(Node(node, None, None, node))
        size *= 2
    return HMatrix(rt, dim, leaf_dim, blocksize, node)


# -- executed operations ------------------------------------------------------

def run_root(rt: Runtime, root, workers=None):
    """Execute ``root`` and return its chunk id, or None for a null result."""
    if root is None:
        return None
    rid, _ = rt.execute(root, workers)
    return None if rt.get(rid) is None else rid


def _run(a: HMatrix, root, workers=None) -> HMatrix:
    return a.with_root(run_root(a.rt, root, workers))


def multiply(a: HMatrix, b: HMatrix, ta: bool = False, tb: bool = False, tau: float = 0.0,
             workers: int | None = None) -> HMatrix:
    _check_same(a, b)
    return _run(a, mul(a.rt, a.root, b.root, ta, tb, tau), workers)


def add_scaled(a: HMatrix, b: HMatrix, alpha: float = 1.0, beta: float = 1.0,
               workers: int | None = None) -> HMatrix:
    _check_same(a, b)
    return _run(a, add(a.rt, a.root, b.root, alpha, beta), workers)


def scale(a: HMatrix, alpha: float) -> HMatrix:
    return _run(a, scale_id(a.rt, a.root, alpha))


def transpose(a: HMatrix) -> HMatrix:
    return _run(a, transpose_id(a.rt, a.root))


def truncate(a: HMatrix, tau: float) -> HMatrix:
    """Drop leaf blocks with Frobenius norm below ``tau``."""
    return _run(a, truncate_id(a.rt, a.root, tau))


def frobenius_norm(a: HMatrix) -> float:
    cid, _ = a.rt.execute(norm(a.rt, a.root))
    return float(a.rt.get(cid))


def quadrants(s: HMatrix) -> tuple[HMatrix, HMatrix, HMatrix, HMatrix]:
    """Children (0,0), (0,1), (1,0), (1,1) as matrices of half the size."""
    payload = s.rt.get(s.root)
    if not isinstance(payload, Node):
        raise ValueError("quadrants needs an internal node")
    h = s.dim // 2
    kids = [c if c is not None and s.rt.get(c) is not None else None for c in payload.children]
    return tuple(HMatrix(s.rt, h, s.leaf_dim, s.blocksize, c) for c in kids)


# -- direct traversals (main program, no tasks) ------------------------------

def _leaves(a: HMatrix):
    """Yield ``(row_offset, col_offset, LeafMatrix)`` in quad-tree order."""
    stack = [(a.root, 0, 0, a.dim)]
    while stack:
        cid, r, c, size = stack.pop()
        if cid is None:
            continue
        p = a.rt.get(cid)
        if p is None:
            continue
        if isinstance(p, LeafMatrix):
            yield r, c, p
            continue
        h = size // 2
        for q in (3, 2, 1, 0):
            stack.append((p[q], r + h * (q // 2), c + h * (q % 2), h))


def densify(a: HMatrix, crop: bool = False, cap: int = DENSIFY_CAP) -> np.ndarray:
    if a.dim > cap:
        raise ValueError(f"refusing to densify a {a.dim}x{a.dim} matrix (cap {cap})")
    out = np.zeros((a.dim, a.dim))
    ld = a.leaf_dim
    for r, c, leaf in _leaves(a):
        out[r:r + ld, c:c + ld] = leaf.to_dense()
    if crop:
        n = a.logical_dim
        return out[:n, :n]
    return out


def nnz_per_row(a: HMatrix) -> float:
    total = sum(leaf.nnz() for _, _, leaf in _leaves(a))
    return total / a.logical_dim if a.logical_dim else 0.0


def gershgorin_upper_bound(s: HMatrix) -> float:
    """``max_i (s_ii + sum_{j != i} |s_ij|)``, an upper bound on the spectrum."""
    rowabs = np.zeros(s.dim)
    diag = np.zeros(s.dim)
    ld = s.leaf_dim
    for r, c, leaf in _leaves(s):
        dense = leaf.to_dense()
        rowabs[r:r + ld] += np.abs(dense).sum(axis=1)
        if r == c:
            diag[r:r + ld] = np.diag(dense)
    if s.root is None:
        return 0.0
    return float(np.max(diag + (rowabs - np.abs(diag))))


def entries(a: HMatrix) -> Iterable[tuple[int, int, float]]:
    """Nonzero entries ``(row, col, value)`` in quad-tree leaf order."""
    for r, c, leaf in _leaves(a):
        d = leaf.to_dense()
        ii, jj = np.nonzero(d)
        for i, j in zip(ii, jj):
            yield r + int(i), c + int(j), float(d[i, j])
