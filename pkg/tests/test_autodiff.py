"""Finite-difference checks for every tape primitive (64-bit, random inputs)."""

import numpy as np
import pytest

from deformsim import autodiff as ad

RTOL = 1e-5


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f w.r.t. every entry of x."""
    x = x.copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(f, *inputs, h=1e-6):
    """Compare tape gradients against central FD for each input slot."""
    tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in inputs]
    loss = f(*tensors)
    assert isinstance(loss, ad.Tensor)
    loss.backward()
    for slot, (t, x) in enumerate(zip(tensors, inputs)):
        def f_slot(xi, slot=slot):
            args = [inp.copy() for inp in inputs]
            args[slot] = xi
            return f(*args)

        g_fd = fd_grad(f_slot, x, h=h)
        g_ad = t.grad
        assert g_ad is not None, f"no gradient reached input {slot}"
        denom = max(np.linalg.norm(g_fd), 1e-12)
        rel = np.linalg.norm(g_ad - g_fd) / denom
        assert rel <= RTOL, f"input {slot}: rel err {rel:.3e}"


def project(y, p):
    return ad.sum_(ad.mul(y, p))


def test_add_sub_broadcast():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    p = rng.normal(size=(4, 3))
    check_grads(lambda a, b: project(ad.add(a, b), p), a, b)
    check_grads(lambda a, b: project(ad.sub(a, b), p), a, b)


def test_mul_div_broadcast():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 5))
    b = rng.uniform(0.5, 2.0, size=(2, 1))
    p = rng.normal(size=(2, 5))
    check_grads(lambda a, b: project(ad.mul(a, b), p), a, b)
    check_grads(lambda a, b: project(ad.div(a, b), p), a, b)


def test_power():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.5, 2.0, size=(6,))
    p = rng.normal(size=(6,))
    check_grads(lambda a: project(ad.power(a, 3), p), a)
    check_grads(lambda a: project(ad.power(a, -1.5), p), a)


def test_pointwise_nonlinearities():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.5, 2.0, size=(7,))
    b = rng.normal(size=(7,))
    p = rng.normal(size=(7,))
    check_grads(lambda a: project(ad.exp(a), p), a)
    check_grads(lambda a: project(ad.log(a), p), a)
    check_grads(lambda a: project(ad.sqrt(a), p), a)
    check_grads(lambda b: project(ad.tanh(b), p), b)
    shifted = b + np.where(np.abs(b) < 0.1, 0.5, 0.0)  # keep away from the kink
    check_grads(lambda x: project(ad.absolute(x), p), shifted)


def test_reductions():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 4, 2))
    p0 = rng.normal(size=(4, 2))
    p1 = rng.normal(size=(3, 4))
    check_grads(lambda a: ad.sum_(a), a)
    check_grads(lambda a: ad.mean(a), a)
    check_grads(lambda a: project(ad.sum_(a, axis=0), p0), a)
    check_grads(lambda a: project(ad.mean(a, axis=2), p1), a)
    check_grads(lambda a: ad.sum_(ad.mean(a, axis=(0, 2))), a)


def test_min_max_where_clip():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(8,))
    b = a + np.where(rng.normal(size=8) > 0, 0.5, -0.5)  # no ties
    p = rng.normal(size=(8,))
    cond = rng.normal(size=8) > 0
    check_grads(lambda a, b: project(ad.maximum(a, b), p), a, b)
    check_grads(lambda a, b: project(ad.minimum(a, b), p), a, b)
    check_grads(lambda a, b: project(ad.where(cond, a, b), p), a, b)
    far = 3.0 * a + np.sign(a)  # entries away from the clip edges
    check_grads(lambda x: project(ad.clip(x, -1.0, 1.0), p), far)


def test_shape_ops():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(2, 4))
    p6 = rng.normal(size=(12,))
    pt = rng.normal(size=(4, 3))
    pc = rng.normal(size=(5, 4))
    ps = rng.normal(size=(2, 3, 4))
    check_grads(lambda a: project(ad.reshape(a, (12,)), p6), a)
    check_grads(lambda a: project(ad.swapaxes(a, 0, 1), pt), a)
    check_grads(lambda a, b: project(ad.concatenate([a, b], axis=0), pc), a, b)
    check_grads(lambda a: project(ad.stack([a, 2.0 * a], axis=0), ps), a)


def test_getitem_and_gather():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(6, 3))
    idx = np.array([0, 2, 2, 5, 1])  # repeats exercise accumulation
    p = rng.normal(size=(5, 3))
    p2 = rng.normal(size=(3, 3))
    check_grads(lambda a: project(a[idx], p), a)
    check_grads(lambda a: project(a[1:4], p2), a)
    check_grads(lambda a: project(ad.gather(a, idx, axis=0), p), a)
    pcol = rng.normal(size=(6, 2))
    check_grads(lambda a: project(ad.gather(a, np.array([2, 0]), axis=1), pcol), a)


def test_scatter_add():
    rng = np.random.default_rng(8)
    vals = rng.normal(size=(10, 3))
    idx = rng.integers(0, 4, size=10)
    p = rng.normal(size=(4, 3))
    check_grads(lambda v: project(ad.scatter_add(v, idx, 4), p), vals)
    scalar_vals = rng.normal(size=(10,))
    ps = rng.normal(size=(4,))
    check_grads(lambda v: project(ad.scatter_add(v, idx, 4), ps), scalar_vals)


def test_scatter_add_matches_loop():
    rng = np.random.default_rng(9)
    vals = rng.normal(size=(20, 2))
    idx = rng.integers(0, 5, size=20)
    out = ad.scatter_add(vals, idx, 5)
    ref = np.zeros((5, 2))
    for n in range(20):
        ref[idx[n]] += vals[n]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-15)


def test_matmul_all_arities():
    rng = np.random.default_rng(10)
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    x = rng.normal(size=(4,))
    y = rng.normal(size=(3,))
    Ab = rng.normal(size=(5, 3, 4))
    Bb = rng.normal(size=(5, 4, 2))
    p_mm = rng.normal(size=(3, 2))
    p_b = rng.normal(size=(5, 3, 2))
    p_mv = rng.normal(size=(3,))
    p_vm = rng.normal(size=(2,))
    check_grads(lambda A, B: project(ad.matmul(A, B), p_mm), A, B)
    check_grads(lambda A, B: project(ad.matmul(A, B), p_b), Ab, Bb)
    check_grads(lambda A, B: project(ad.matmul(A, B), p_b), Ab, B)  # broadcast
    check_grads(lambda A, x: project(ad.matmul(A, x), p_mv), A, x)
    check_grads(lambda x, B: project(ad.matmul(x, B), p_vm), x, B)
    check_grads(lambda x, y: ad.matmul(x, x) + ad.matmul(y, y), x, y)


def test_norm():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(5, 3)) + 0.5
    p = rng.normal(size=(5,))
    check_grads(lambda a: project(ad.norm(a, axis=1), p), a)
    check_grads(lambda a: ad.sum_(ad.norm(a, axis=0)), a)


def test_det3_trace3():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(4, 3, 3)) + np.eye(3)
    p = rng.normal(size=(4,))
    check_grads(lambda a: project(ad.det3(a), p), a)
    check_grads(lambda a: project(ad.trace3(a), p), a)


def _random_spread_matrices(rng, n):
    """Batched 3x3 with well-separated singular values (safe for SVD FD)."""
    out = np.empty((n, 3, 3))
    for i in range(n):
        q1, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        q2, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        s = np.diag([2.0, 1.2, 0.6] + rng.uniform(-0.05, 0.05, size=3))
        out[i] = q1 @ s @ q2.T
    return out


def test_svd3_all_outputs():
    rng = np.random.default_rng(13)
    a = _random_spread_matrices(rng, 3)
    pu = rng.normal(size=(3, 3, 3))
    ps = rng.normal(size=(3, 3))
    pv = rng.normal(size=(3, 3, 3))

    def f(a):
        u, s, v = ad.svd3(a)
        return project(u, pu) + project(s, ps) + project(v, pv)

    check_grads(f, a, h=1e-7)


def test_svd3_partial_outputs():
    rng = np.random.default_rng(14)
    a = _random_spread_matrices(rng, 2)
    ps = rng.normal(size=(2, 3))
    pr = rng.normal(size=(2, 3, 3))

    def f_s_only(a):
        _, s, _ = ad.svd3(a)
        return project(s, ps)

    def f_rotation(a):
        u, _, v = ad.svd3(a)
        r = ad.matmul(u, ad.transpose_last2(v))
        return project(r, pr)

    check_grads(f_s_only, a, h=1e-7)
    check_grads(f_rotation, a, h=1e-7)


def test_svd3_reconstruction():
    rng = np.random.default_rng(15)
    a = rng.normal(size=(6, 3, 3))
    u, s, v = ad.svd3(a)
    recon = u @ (s[..., None] * np.swapaxes(v, -1, -2))
    np.testing.assert_allclose(recon, a, atol=1e-12)


def test_reuse_accumulates():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(5,))
    check_grads(lambda x: ad.sum_(ad.mul(x, x)) + ad.sum_(ad.exp(x)), x)


def test_operator_overloads_match_functions():
    rng = np.random.default_rng(17)
    x = rng.uniform(0.5, 1.5, size=(4,))
    p = rng.normal(size=(4,))

    def f(x):
        y = (2.0 * x + 1.0) / (x * x) - x**2
        return project(y, p)

    check_grads(f, x)


def test_no_grad_blocks_taping():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    z = ad.sum_(ad.mul(x, x))
    z.backward()
    np.testing.assert_allclose(x.grad, 2.0 * np.ones(3))


def test_plain_ndarray_passthrough():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(3, 3))
    assert isinstance(ad.exp(x), np.ndarray)
    assert isinstance(ad.matmul(x, x), np.ndarray)
    u, s, v = ad.svd3(x)
    assert isinstance(u, np.ndarray)
    out = ad.scatter_add(x, np.array([0, 1, 0]), 2)
    assert isinstance(out, np.ndarray)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(x, 2.0)
    with pytest.raises(ValueError):
        y.backward()
