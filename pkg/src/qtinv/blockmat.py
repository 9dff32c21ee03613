"""Block-sparse leaf matrices and the leaf-level kernels.

A leaf is a ``dim x dim`` matrix cut into ``blocksize x blocksize`` blocks.
Only nonzero blocks are stored.  Blocks are kept in row-major key order
(``key = block_row * nblocks + block_col``) so every traversal and every
summation happens in the same order regardless of who calls it.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

__all__ = [
    "DimensionMismatch",
    "LEAF_HEADER_BYTES",
    "LeafMatrix",
    "NotPositiveDefinite",
    "leaf_add",
    "leaf_inverse_cholesky",
    "leaf_multiply",
    "leaf_scale",
    "leaf_transpose",
    "leaf_truncate",
]

LEAF_HEADER_BYTES = 64


class DimensionMismatch(ValueError):
    """Operands do not have compatible shapes."""


class NotPositiveDefinite(ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class LeafMatrix:
    """Immutable block-sparse square matrix.

    ``keys`` is a sorted int64 array of block keys and ``data`` the matching
    ``(nblocks, blocksize, blocksize)`` float64 stack.  Both arrays are marked
    read-only.
    """

    __slots__ = ("dim", "blocksize", "keys", "data")

    def __init__(self, dim: int, blocksize: int, keys=None, data=None):
        if dim < 1 or dim & (dim - 1):
            raise ValueError(f"leaf dim must be a power of two, got {dim}")
        if blocksize < 1 or dim % blocksize:
            raise ValueError(f"blocksize {blocksize} does not divide {dim}")
        if keys is None:
            keys = np.empty(0, dtype=np.int64)
            data = np.empty((0, blocksize, blocksize))
        keys = np.asarray(keys, dtype=np.int64)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (len(keys), blocksize, blocksize):
            raise ValueError("block data shape does not match keys/blocksize")
        if len(keys) > 1 and np.any(np.diff(keys) <= 0):
            raise ValueError("block keys must be strictly increasing")
        keys.flags.writeable = False
        data.flags.writeable = False
        self.dim = dim
        self.blocksize = blocksize
        self.keys = keys
        self.data = data

    @property
    def nb(self) -> int:
        return self.dim // self.blocksize

    @property
    def nblocks(self) -> int:
        return len(self.keys)

    @property
    def size_bytes(self) -> int:
        return self.nblocks * self.blocksize**2 * 8 + LEAF_HEADER_BYTES

    @property
    def blocks(self) -> dict[tuple[int, int], np.ndarray]:
        nb = self.nb
        return {(int(k) // nb, int(k) % nb): blk for k, blk in zip(self.keys, self.data)}

    def __repr__(self) -> str:
        return f"LeafMatrix(dim={self.dim}, blocksize={self.blocksize}, nblocks={self.nblocks})"

    @classmethod
    def zeros(cls, dim: int, blocksize: int) -> LeafMatrix:
        return cls(dim, blocksize)

    @classmethod
    def identity(cls, dim: int, blocksize: int) -> LeafMatrix:
        nb = dim // blocksize
        keys = np.arange(nb, dtype=np.int64) * (nb + 1)
        data = np.broadcast_to(np.eye(blocksize), (nb, blocksize, blocksize)).copy()
        return cls(dim, blocksize, keys, data)

    @classmethod
    def from_dense(cls, array, blocksize: int) -> LeafMatrix:
        """Split a dense square array into blocks, dropping all-zero blocks."""
        array = np.asarray(array, dtype=np.float64)
        dim = array.shape[0]
        if array.shape != (dim, dim):
            raise ValueError("leaf must be square")
        nb = dim // blocksize
        stack = array.reshape(nb, blocksize, nb, blocksize).transpose(0, 2, 1, 3)
        stack = stack.reshape(nb * nb, blocksize, blocksize)
        nz = np.flatnonzero(np.any(stack != 0.0, axis=(1, 2)))
        return cls(dim, blocksize, nz, stack[nz])

    def to_dense(self) -> np.ndarray:
        nb, bs = self.nb, self.blocksize
        full = np.zeros((nb * nb, bs, bs))
        full[self.keys] = self.data
        return full.reshape(nb, nb, bs, bs).transpose(0, 2, 1, 3).reshape(self.dim, self.dim)

    def nnz(self) -> int:
        return int(np.count_nonzero(self.data))

    def frobenius_sq(self) -> float:
        return float(np.einsum("nij,nij->", self.data, self.data))


def _check_compatible(*leaves: LeafMatrix | None) -> None:
    ref = None
    for leaf in leaves:
        if leaf is None:
            continue
        if ref is None:
            ref = leaf
        elif leaf.dim != ref.dim or leaf.blocksize != ref.blocksize:
            raise DimensionMismatch(
                f"leaf shapes differ: {ref.dim}/{ref.blocksize} vs {leaf.dim}/{leaf.blocksize}"
            )


def _oriented(a: LeafMatrix, trans: bool):
    if not trans:
        return a.keys, a.data
    nb = a.nb
    r, c = np.divmod(a.keys, nb)
    tkeys = c * nb + r
    order = np.argsort(tkeys, kind="stable")
    return tkeys[order], a.data[order].transpose(0, 2, 1)


def _merge(nb_keys_data, dim: int, blocksize: int) -> LeafMatrix:
    """Sum lists of (keys, blocks) into one leaf; keys may overlap across lists."""
    parts = [(k, d) for k, d in nb_keys_data if len(k)]
    if not parts:
        return LeafMatrix(dim, blocksize)
    if len(parts) == 1:
        keys, data = parts[0]
        return LeafMatrix(dim, blocksize, keys.copy(), np.array(data))
    keys = parts[0][0]
    for k, _ in parts[1:]:
        keys = np.union1d(keys, k)
    out = np.zeros((len(keys), blocksize, blocksize))
    for k, d in parts:
        out[np.searchsorted(keys, k)] += d
    return LeafMatrix(dim, blocksize, keys, out)


def leaf_multiply(
    a: LeafMatrix,
    b: LeafMatrix,
    ta: bool = False,
    tb: bool = False,
    accum: LeafMatrix | None = None,
) -> LeafMatrix:
    """Return ``accum + op(a) @ op(b)`` computed block by block.

    Absent blocks are skipped.  For each output block the products are summed
    in ascending order of the inner block index.
    """
    _check_compatible(a, b, accum)
    nb, bs, dim = a.nb, a.blocksize, a.dim
    ak, ad = _oriented(a, ta)
    bk, bd = _oriented(b, tb)
    prod_keys = np.empty(0, dtype=np.int64)
    prod = np.empty((0, bs, bs))
    if len(ak) and len(bk):
        a_row, a_inner = np.divmod(ak, nb)
        b_col = bk % nb
        # rows of op(b) are contiguous because keys are row-major sorted
        bounds = np.searchsorted(bk, np.arange(nb + 1, dtype=np.int64) * nb)
        counts = bounds[a_inner + 1] - bounds[a_inner]
        total = int(counts.sum())
        if total:
            ia = np.repeat(np.arange(len(ak)), counts)
            first = np.repeat(np.cumsum(counts) - counts, counts)
            ib = np.repeat(bounds[a_inner], counts) + (np.arange(total) - first)
            key = a_row[ia] * nb + b_col[ib]
            order = np.lexsort((a_inner[ia], key))
            ia, ib, key = ia[order], ib[order], key[order]
            terms = np.matmul(ad[ia], bd[ib])
            prod_keys, starts, nterms = np.unique(key, return_index=True, return_counts=True)
            prod = terms[starts]
            for r in range(1, int(nterms.max())):
                sel = np.flatnonzero(nterms > r)
                prod[sel] += terms[starts[sel] + r]
    if accum is None:
        out = LeafMatrix(dim, bs, prod_keys, prod) if len(prod_keys) else LeafMatrix(dim, bs)
    else:
        out = _merge([(accum.keys, accum.data), (prod_keys, prod)], dim, bs)
    return leaf_truncate(out, 0.0)


def leaf_truncate(a: LeafMatrix, tau: float) -> LeafMatrix:
    """Drop blocks whose Frobenius norm is below ``tau``; always drop zero blocks."""
    if tau < 0:
        raise ValueError("truncation threshold must be nonnegative")
    if not a.nblocks:
        return a
    norms = np.sqrt(np.einsum("nij,nij->n", a.data, a.data))
    keep = (norms >= tau) & (norms > 0.0)
    if keep.all():
        return a
    return LeafMatrix(a.dim, a.blocksize, a.keys[keep], a.data[keep])


def leaf_add(a: LeafMatrix, b: LeafMatrix, alpha: float = 1.0, beta: float = 1.0) -> LeafMatrix:
    """``alpha * a + beta * b`` with exact-zero blocks removed."""
    _check_compatible(a, b)
    out = _merge([(a.keys, alpha * a.data), (b.keys, beta * b.data)], a.dim, a.blocksize)
    return leaf_truncate(out, 0.0)


def leaf_scale(a: LeafMatrix, alpha: float) -> LeafMatrix:
    return leaf_truncate(LeafMatrix(a.dim, a.blocksize, a.keys, alpha * a.data), 0.0)


def leaf_transpose(a: LeafMatrix) -> LeafMatrix:
    keys, data = _oriented(a, True)
    return LeafMatrix(a.dim, a.blocksize, keys, np.ascontiguousarray(data))


def leaf_inverse_cholesky(s: LeafMatrix) -> LeafMatrix:
    """Upper triangular ``Z`` with ``Z.T @ S @ Z = I``.

    ``Z`` is the transposed inverse of the lower Cholesky factor of the
    densified leaf.  Entries below the diagonal are structural zeros.
    """
    dense = s.to_dense()
    chol, info = lapack.dpotrf(dense, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf argument error {info}")
    inv, info = lapack.dtrtri(chol, lower=1)
    if info:
        raise NotPositiveDefinite(info - 1)
    z = np.triu(np.tril(inv).T)
    return LeafMatrix.from_dense(z, s.blocksize)
