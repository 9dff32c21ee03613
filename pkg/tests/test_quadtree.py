import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_sparse, random_spd
from qtinv import quadtree as qt
from qtinv.blockmat import DimensionMismatch, LeafMatrix
from qtinv.quadtree import PadSpec
from qtinv.taskrt import Node, Runtime


def reachable_all_zero(h):
    """True if a stored node has only null children or a leaf has no blocks."""
    rt = h.rt

    def is_null(cid):
        return cid is None or rt.get(cid) is None

    def bad(cid):
        p = rt.get(cid)
        if isinstance(p, LeafMatrix):
            return p.nblocks == 0 or not np.any(p.data)
        kids = [c for c in p.children if not is_null(c)]
        return not kids or any(bad(c) for c in kids)

    return not is_null(h.root) and bad(h.root)


# -- PadSpec / assemble ---------------------------------------------------------------

@pytest.mark.parametrize("n,leaf,padded", [(5, 4, 8), (8, 4, 8), (9, 4, 16), (1, 128, 128), (0, 4, 4)])
def test_padspec(n, leaf, padded):
    assert PadSpec.for_dim(n, leaf).padded_dim == padded


def test_assemble_empty_gives_identity_on_pad():
    rt = Runtime()
    h = qt.assemble(rt, [], 4, leaf_dim=8, blocksize=2)
    d = qt.densify(h)
    assert h.dim == 8 and h.logical_dim == 4
    np.testing.assert_array_equal(d[:4, :4], 0.0)
    np.testing.assert_array_equal(np.diag(d)[4:], 1.0)


def test_assemble_single_entry_prunes_siblings():
    rt = Runtime()
    h = qt.assemble(rt, [(0, 0, 2.0)], 16, leaf_dim=4, blocksize=2)
    node = rt.get(h.root)
    while isinstance(node, Node):
        assert node.children[1:3] == (None, None)
        node = rt.get(node.children[0])
    assert qt.densify(h)[0, 0] == 2.0
    assert len(list(qt.entries(h))) == 1 + 0  # 16 is a power of two: no pad


def test_assemble_tridiagonal_with_padding():
    n = 5
    t = 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    r, c = np.nonzero(t)
    h = qt.assemble(Runtime(), (r, c, t[r, c]), n, leaf_dim=4, blocksize=2)
    assert h.dim == 8
    d = qt.densify(h)
    np.testing.assert_array_equal(d[:5, :5], t)
    np.testing.assert_array_equal(d[5:, 5:], np.eye(3))
    np.testing.assert_array_equal(d[:5, 5:], 0.0)
    np.testing.assert_array_equal(qt.densify(h, crop=True), t)


def test_assemble_sums_duplicates_and_checks_range():
    rt = Runtime()
    h = qt.assemble(rt, [(1, 1, 1.5), (1, 1, 2.0)], 4, leaf_dim=4, blocksize=2)
    assert qt.densify(h)[1, 1] == 3.5
    with pytest.raises(IndexError):
        qt.assemble(rt, [(4, 0, 1.0)], 4, leaf_dim=4, blocksize=2)


def test_roundtrip_entries(rng):
    a = random_sparse(64, rng, 0.1)
    h = qt.from_dense(Runtime(), a, 16, 4)
    back = np.zeros_like(a)
    for i, j, x in qt.entries(h):
        back[i, j] = x
    np.testing.assert_array_equal(back, a)


# -- multiply / add / transpose / norm ------------------------------------------------------

def test_multiply_null():
    rt = Runtime()
    z = qt.assemble(rt, [], 64, 16, 4)
    z = z.with_root(None)
    b = qt.from_dense(rt, np.eye(64), 16, 4)
    assert qt.multiply(z, b).is_null


def test_identity_times_b_bitwise(rng):
    rt = Runtime()
    b = qt.from_dense(rt, random_sparse(128, rng, 0.2), 32, 8)
    out = qt.multiply(qt.identity(rt, 128, 32, 8), b)
    np.testing.assert_array_equal(qt.densify(out), qt.densify(b))


@pytest.mark.parametrize("ta,tb", [(False, False), (True, False), (False, True), (True, True)])
def test_multiply_sparse_256(rng, ta, tb):
    a, b = random_sparse(256, rng), random_sparse(256, rng)
    rt = Runtime()
    out = qt.multiply(qt.from_dense(rt, a, 32, 8), qt.from_dense(rt, b, 32, 8), ta, tb)
    ref = (a.T if ta else a) @ (b.T if tb else b)
    assert np.max(np.abs(qt.densify(out) - ref)) <= 1e-12


def test_multiply_shape_mismatch():
    rt = Runtime()
    with pytest.raises(DimensionMismatch):
        qt.multiply(qt.identity(rt, 64, 16, 4), qt.identity(rt, 128, 16, 4))


def test_add_scaled_cases(rng):
    rt = Runtime()
    a = qt.from_dense(rt, random_sparse(64, rng, 0.3), 16, 4)
    b = qt.from_dense(rt, random_sparse(64, rng, 0.3), 16, 4)
    assert qt.add_scaled(a, b.with_root(None)).root == a.root
    assert qt.add_scaled(a, qt.scale(a, -1.0)).is_null
    ref = 2.5 * qt.densify(a) - 0.75 * qt.densify(b)
    assert np.max(np.abs(qt.densify(qt.add_scaled(a, b, 2.5, -0.75)) - ref)) <= 1e-14


def test_transpose_cases(rng):
    rt = Runtime()
    s = random_spd(64, rng)
    hs = qt.from_dense(rt, s, 16, 4)
    np.testing.assert_array_equal(qt.densify(qt.transpose(hs)), qt.densify(hs))
    assert qt.transpose(hs.with_root(None)).is_null
    a = random_sparse(64, rng, 0.3)
    np.testing.assert_array_equal(qt.densify(qt.transpose(qt.from_dense(rt, a, 16, 4))), a.T)


def test_frobenius_norm_cases(rng):
    rt = Runtime()
    assert qt.frobenius_norm(qt.identity(rt, 64, 16, 4).with_root(None)) == 0.0
    assert qt.frobenius_norm(qt.identity(rt, 256, 32, 8)) == pytest.approx(16.0, rel=1e-15)
    a = rng.standard_normal((128, 128))
    got = qt.frobenius_norm(qt.from_dense(rt, a, 32, 8))
    assert abs(got - np.linalg.norm(a)) <= 1e-13 * np.linalg.norm(a)


def test_truncate_only_at_leaves(rng):
    rt = Runtime()
    a = rng.standard_normal((64, 64)) * 1e-6
    a[:8, :8] = 1.0
    out = qt.truncate(qt.from_dense(rt, a, 16, 8), 1e-3)
    d = qt.densify(out)
    np.testing.assert_array_equal(d[:8, :8], 1.0)
    assert np.count_nonzero(d) == 64
    assert not reachable_all_zero(out)


@given(
    logn=st.integers(2, 9),
    leaf_log=st.integers(1, 5),
    seed=st.integers(0, 2**32 - 1),
    density=st.sampled_from([0.0, 0.01, 0.1, 0.5]),
    alpha=st.floats(-2, 2),
    beta=st.floats(-2, 2),
    ta=st.booleans(),
    tb=st.booleans(),
)
def test_ops_match_dense_property(logn, leaf_log, seed, density, alpha, beta, ta, tb):
    n = 2**logn
    leaf = 2 ** min(leaf_log, logn)
    rng = np.random.default_rng(seed)
    a, b = random_sparse(n, rng, density), random_sparse(n, rng, density)
    rt = Runtime()
    ha, hb = qt.from_dense(rt, a, leaf, min(leaf, 4)), qt.from_dense(rt, b, leaf, min(leaf, 4))
    prod = qt.multiply(ha, hb, ta, tb)
    np.testing.assert_allclose(qt.densify(prod), (a.T if ta else a) @ (b.T if tb else b), rtol=0, atol=1e-12)
    lin = qt.add_scaled(ha, hb, alpha, beta)
    np.testing.assert_allclose(qt.densify(lin), alpha * a + beta * b, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(qt.densify(qt.transpose(ha)), a.T)
    for h in (ha, hb, prod, lin):
        assert not reachable_all_zero(h)


@given(seed=st.integers(0, 2**32 - 1), tau=st.sampled_from([1e-3, 1e-2, 1e-1, 1.0]))
def test_truncated_multiply_error_bound_property(seed, tau):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((64, 64)) * np.exp(-np.abs(np.subtract.outer(np.arange(64), np.arange(64))) / 4)
    rt = Runtime()
    h = qt.from_dense(rt, a, 16, 4)
    exact = qt.densify(qt.multiply(h, h))
    cut = qt.multiply(h, h, tau=tau)
    blocks = lambda m: sum(leaf.nblocks for _, _, leaf in qt._leaves(m))  # noqa: E731
    removed = blocks(qt.multiply(h, h)) - blocks(cut)
    assert np.linalg.norm(exact - qt.densify(cut)) <= tau * np.sqrt(removed) + 1e-12


# -- gershgorin / quadrants / densify -----------------------------------------------------

def test_gershgorin_examples(rng):
    rt = Runtime()
    assert qt.gershgorin_upper_bound(qt.identity(rt, 64, 16, 4)) == 1.0
    h = qt.from_dense(rt, np.array([[4.0, 2.0], [2.0, 5.0]]), 1, 1)
    assert qt.gershgorin_upper_bound(h) == 7.0


@given(seed=st.integers(0, 2**32 - 1), cond=st.floats(1.0, 1e4))
def test_gershgorin_bounds_spectrum_property(seed, cond):
    s = random_spd(64, np.random.default_rng(seed), cond)
    beta = qt.gershgorin_upper_bound(qt.from_dense(Runtime(), s, 16, 4))
    assert beta >= np.linalg.eigvalsh(s)[-1] * (1 - 1e-12)


def test_quadrants(rng):
    rt = Runtime()
    blockdiag = np.kron(np.eye(2), random_spd(32, rng))
    a, b, bt, c = qt.quadrants(qt.from_dense(rt, blockdiag, 16, 4))
    assert b.is_null and bt.is_null
    a, b, bt, c = qt.quadrants(qt.identity(rt, 64, 16, 4))
    np.testing.assert_array_equal(qt.densify(a), np.eye(32))
    np.testing.assert_array_equal(qt.densify(c), np.eye(32))
    assert b.is_null
    s = rng.standard_normal((64, 64))
    a, b, bt, c = qt.quadrants(qt.from_dense(rt, s, 16, 4))
    np.testing.assert_array_equal(qt.densify(a), s[:32, :32])
    np.testing.assert_array_equal(qt.densify(bt), s[32:, :32])
    with pytest.raises(ValueError):
        qt.quadrants(qt.from_dense(rt, s[:16, :16], 16, 4))


def test_densify_and_nnz():
    rt = Runtime()
    z = qt.identity(rt, 64, 16, 4)
    np.testing.assert_array_equal(qt.densify(z.with_root(None)), 0.0)
    assert qt.nnz_per_row(z) == 1.0
    t = 2 * np.eye(64) - np.eye(64, k=1) - np.eye(64, k=-1)
    assert qt.nnz_per_row(qt.from_dense(rt, t, 16, 4)) == 3 - 2 / 64
    with pytest.raises(ValueError):
        qt.densify(z, cap=32)
