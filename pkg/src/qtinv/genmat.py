"""Synthetic overlap matrices and Matrix Market I/O.

Each center carries ``funcs_per_center`` normalized Gaussians.  The overlap
of two functions with kernel exponents ``a`` and ``b`` at distance ``d`` is

    (2 sqrt(a b) / (a + b))**1.5 * exp(-2 a b / (a + b) * d**2)

which is ``exp(-a d**2)`` when ``a == b``.  The matrix is a Gram matrix, so
it is positive semidefinite before the cutoff; the diagonal shift keeps it
definite after small entries are dropped.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from . import quadtree as qt
from .quadtree import HMatrix
from .taskrt import Runtime

__all__ = [
    "GenSpec",
    "IndefiniteMatrix",
    "MatrixMarketError",
    "generate",
    "generate_coo",
    "load_mm",
    "read_mm",
    "save_mm",
]

EXPONENT_RATIO = 1.0 / 3.0  # successive functions on a center get more diffuse
MM_HEADER = "%%MatrixMarket matrix coordinate real"


class IndefiniteMatrix(ValueError):
    """The cutoff destroyed positive definiteness."""

    def __init__(self, message: str, certificate: dict):
        self.certificate = certificate
        super().__init__(message)


class MatrixMarketError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(frozen=True)
class GenSpec:
    geometry: Literal["chain", "cluster3d"] = "chain"
    n_centers: int = 1024
    spacing: float = 1.0
    density: float = 1.0
    funcs_per_center: int = 2
    alpha: float = 0.3
    cutoff: float = 1e-8
    shift: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.geometry not in ("chain", "cluster3d"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.n_centers < 0 or self.funcs_per_center < 1:
            raise ValueError("need n_centers >= 0 and funcs_per_center >= 1")
        if not (self.spacing > 0 and self.density > 0 and self.alpha > 0):
            raise ValueError("spacing, density and alpha must be positive")
        if not 0 <= self.cutoff < 1:
            raise ValueError("cutoff must lie in [0, 1)")
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")

    @property
    def n(self) -> int:
        return self.n_centers * self.funcs_per_center


def _morton_order(cells: np.ndarray) -> np.ndarray:
    """Sort integer 3-d cells along a Z-order curve for locality."""
    cells = cells - cells.min(axis=0)
    code = np.zeros(len(cells), dtype=np.int64)
    for bit in range(20):
        for axis in range(3):
            code |= ((cells[:, axis] >> bit) & 1) << (3 * bit + axis)
    return np.argsort(code, kind="stable")


def _centers(spec: GenSpec) -> np.ndarray:
    n = spec.n_centers
    if spec.geometry == "chain":
        pos = np.zeros((n, 3))
        pos[:, 0] = np.arange(n) * spec.spacing
        return pos
    rng = np.random.default_rng(spec.seed)
    h = spec.density ** (-1.0 / 3.0)
    radius = (3.0 * n / (4.0 * math.pi)) ** (1.0 / 3.0) + 2.0
    k = int(math.ceil(radius))
    ax = np.arange(-k, k + 1)
    cells = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = np.einsum("ij,ij->i", cells, cells)
    cells = cells[np.argsort(dist, kind="stable")[:n]]
    cells = cells[_morton_order(cells)]
    jitter = rng.uniform(-0.25, 0.25, size=cells.shape)
    return (cells + jitter) * h


def _overlap(a, b, d2):
    s = a + b
    return (2.0 * np.sqrt(a * b) / s) ** 1.5 * np.exp(-2.0 * a * b / s * d2)


def _pairs(pos: np.ndarray, radius: float) -> np.ndarray:
    if len(pos) < 2:
        return np.empty((0, 2), dtype=np.int64)
    return cKDTree(pos).query_pairs(radius, output_type="ndarray").astype(np.int64)


def generate_coo(spec: GenSpec) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(n, rows, cols, values)`` with both triangles stored.

    Raises :class:`IndefiniteMatrix` when the dropped overlaps could outweigh
    the diagonal shift and the matrix is in fact not positive definite.
    """
    nf = spec.funcs_per_center
    pos = _centers(spec)
    expo = spec.alpha * EXPONENT_RATIO ** np.arange(nf)
    amin = float(expo.min())
    if spec.cutoff > 0:
        # beyond this radius every overlap is below 1e-16 * cutoff
        far_radius = math.sqrt(-math.log(spec.cutoff * 1e-16) / amin)
    else:
        far_radius = float(np.ptp(pos, axis=0).max() + 1.0) if len(pos) else 1.0

    pairs = _pairs(pos, far_radius)
    ci, cj = pairs[:, 0], pairs[:, 1]
    d2 = np.einsum("ij,ij->i", pos[ci] - pos[cj], pos[ci] - pos[cj])

    rows, cols, vals = [], [], []
    dropped = np.zeros(spec.n)
    # same-center off-diagonal overlaps
    for f in range(nf):
        for g in range(f + 1, nf):
            v = float(_overlap(expo[f], expo[g], 0.0))
            idx = np.arange(spec.n_centers) * nf
            rows.append(idx + f)
            cols.append(idx + g)
            vals.append(np.full(spec.n_centers, v))
    for f in range(nf):
        for g in range(nf):
            v = _overlap(expo[f], expo[g], d2)
            r, c = ci * nf + f, cj * nf + g
            small = v < spec.cutoff
            np.add.at(dropped, r[small], v[small])
            np.add.at(dropped, c[small], v[small])
            rows.append(r[~small])
            cols.append(c[~small])
            vals.append(v[~small])
    r = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    v = np.concatenate(vals) if vals else np.empty(0)
    diag = np.arange(spec.n, dtype=np.int64)
    rows_all = np.concatenate([diag, r, c])
    cols_all = np.concatenate([diag, c, r])
    vals_all = np.concatenate([np.full(spec.n, 1.0 + spec.shift), v, v])
    order = np.lexsort((cols_all, rows_all))
    rows_all, cols_all, vals_all = rows_all[order], cols_all[order], vals_all[order]

    # lambda_min(S) >= shift - ||dropped part||_2 >= shift - max dropped row sum
    dropped_bound = float(dropped.max()) if spec.n else 0.0
    if spec.n and not spec.shift > dropped_bound:
        lam = _lambda_min(spec.n, rows_all, cols_all, vals_all)
        if not lam > 0:
            cert = {"shift": spec.shift, "dropped_row_sum": dropped_bound, "lambda_min": lam}
            raise IndefiniteMatrix(
                f"cutoff {spec.cutoff:g} leaves an indefinite matrix: shift {spec.shift:g} <= "
                f"dropped row mass {dropped_bound:.3g}, lambda_min {lam:.3g}",
                cert,
            )
    return spec.n, rows_all, cols_all, vals_all


def _lambda_min(n, rows, cols, vals) -> float:
    import scipy.sparse as sp
    from scipy.sparse.linalg import eigsh

    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    if n <= 2048:
        return float(np.linalg.eigvalsh(mat.toarray())[0])
    return float(eigsh(mat, k=1, which="SA", return_eigenvectors=False)[0])


def generate(spec: GenSpec, rt: Runtime | None = None, leaf_dim: int = 128,
             blocksize: int = 8) -> HMatrix:
    """Generate the overlap matrix of ``spec`` as a quad-tree in ``rt``."""
    n, r, c, v = generate_coo(spec)
    return qt.assemble(rt or Runtime(), (r, c, v), n, leaf_dim, blocksize)


# -- Matrix Market ---------------------------------------------------------------

def save_mm(a: HMatrix, path: str | os.PathLike) -> None:
    """Write the logical part of ``a`` in coordinate format, 17 significant digits.

    Symmetric matrices store only the lower triangle.
    """
    n = a.logical_dim
    ents = [(i, j, x) for i, j, x in qt.entries(a) if i < n and j < n]
    lookup = {(i, j): x for i, j, x in ents}
    symmetric = all(lookup.get((j, i)) == x for i, j, x in ents)
    if symmetric:
        ents = [e for e in ents if e[0] >= e[1]]
    ents.sort(key=lambda e: (e[1], e[0]))
    with open(path, "w") as fh:
        fh.write(f"{MM_HEADER} {'symmetric' if symmetric else 'general'}\n")
        fh.write(f"{n} {n} {len(ents)}\n")
        for i, j, x in ents:
            fh.write(f"{i + 1} {j + 1} {x:.17g}\n")


def read_mm(path: str | os.PathLike) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Parse a real coordinate file into ``(n, rows, cols, values)``, 0-based.

    Symmetric storage is expanded to both triangles.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError(path, 1, "empty file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "%%MatrixMarket" or [h.lower() for h in head[1:4]] != [
        "matrix", "coordinate", "real"
    ]:
        raise MatrixMarketError(path, 1, f"unsupported header {lines[0]!r}")
    sym = head[4].lower()
    if sym not in ("general", "symmetric"):
        raise MatrixMarketError(path, 1, f"unsupported symmetry {head[4]!r}")
    lineno = 1
    size = None
    for lineno in range(2, len(lines) + 1):
        text = lines[lineno - 1].strip()
        if text and not text.startswith("%"):
            size = text.split()
            break
    if size is None:
        raise MatrixMarketError(path, lineno, "missing size line")
    try:
        nr, nc, nnz = (int(x) for x in size)
    except ValueError:
        raise MatrixMarketError(path, lineno, f"bad size line {' '.join(size)!r}") from None
    if nr != nc:
        raise MatrixMarketError(path, lineno, f"matrix is {nr}x{nc}, expected square")
    rows, cols, vals = [], [], []
    for k in range(lineno + 1, len(lines) + 1):
        text = lines[k - 1].strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        try:
            i, j, x = int(parts[0]), int(parts[1]), float(parts[2])
            if len(parts) != 3:
                raise ValueError
        except (ValueError, IndexError):
            raise MatrixMarketError(path, k, f"bad entry {text!r}") from None
        if not (1 <= i <= nr and 1 <= j <= nc):
            raise MatrixMarketError(path, k, f"index ({i}, {j}) outside {nr}x{nc}")
        if sym == "symmetric" and j > i:
            raise MatrixMarketError(path, k, "symmetric storage needs row >= col")
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(x)
    if len(vals) != nnz:
        raise MatrixMarketError(path, len(lines), f"expected {nnz} entries, found {len(vals)}")
    r = np.array(rows, dtype=np.int64)
    c = np.array(cols, dtype=np.int64)
    v = np.array(vals, dtype=np.float64)
    if sym == "symmetric":
        off = r != c
        r, c, v = np.concatenate([r, c[off]]), np.concatenate([c, r[off]]), np.concatenate([v, v[off]])
    return nr, r, c, v


def load_mm(path: str | os.PathLike, rt: Runtime | None = None, leaf_dim: int = 128,
            blocksize: int = 8) -> HMatrix:
    n, r, c, v = read_mm(path)
    return qt.assemble(rt or Runtime(), (r, c, v), n, leaf_dim, blocksize)
