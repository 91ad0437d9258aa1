import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capdistill import numerics as nm


def t64(x, rg=False):
    return nm.Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry_zero():
    assert np.allclose(nm.softmax(nm.tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_inputs_stable():
    out = nm.softmax(nm.tensor([1000.0, 1000.0])).data
    assert np.allclose(out, [0.5, 0.5])
    assert np.isfinite(out).all()


def test_softmax_hand_value():
    out = nm.softmax(nm.tensor([0.0, np.log(3.0)])).data
    assert np.allclose(out, [0.25, 0.75], atol=1e-6)


def test_softmax_nonfinite_raises():
    with pytest.raises(nm.NumericsError):
        nm.softmax(nm.tensor([np.inf, 0.0]))
    with pytest.raises(nm.NumericsError):
        nm.softmax(nm.tensor([np.nan, 0.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-200, 200)))
def test_softmax_rows_are_distributions(x):
    out = nm.softmax(nm.Tensor(x), axis=-1).data
    assert (out >= 0).all()
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# conv1d


def test_conv1d_identity_kernel():
    x = nm.tensor(np.random.default_rng(0).normal(size=(7, 1)))
    k = nm.tensor(np.ones((1, 1, 1)))
    assert np.allclose(nm.conv1d(x, k).data, x.data)


def test_conv1d_zero_kernel():
    x = nm.tensor(np.random.default_rng(1).normal(size=(5, 3)))
    k = nm.tensor(np.zeros((2, 3, 3)))
    assert (nm.conv1d(x, k, padding=1).data == 0).all()


def test_conv1d_hand_example():
    x = nm.tensor(np.array([[1.0], [2.0], [3.0]]))
    k = nm.tensor(np.ones((1, 1, 3)))
    out = nm.conv1d(x, k, stride=1, padding=0)
    assert out.shape == (1, 1)
    assert np.allclose(out.data, [[6.0]])


def test_conv1d_output_length_formula():
    r = np.random.default_rng(2)
    for T, k, s, p in [(10, 3, 1, 0), (10, 3, 2, 1), (17, 5, 3, 2), (4, 4, 1, 0)]:
        x = nm.tensor(r.normal(size=(T, 2)))
        kern = nm.tensor(r.normal(size=(3, 2, k)))
        out = nm.conv1d(x, kern, stride=s, padding=p)
        assert out.shape[0] == (T + 2 * p - k) // s + 1


def test_conv1d_kernel_too_wide():
    x = nm.tensor(np.zeros((3, 2)))
    k = nm.tensor(np.zeros((1, 2, 6)))
    with pytest.raises(nm.ShapeError):
        nm.conv1d(x, k, padding=1)


def test_conv1d_channel_mismatch():
    with pytest.raises(nm.ShapeError):
        nm.conv1d(nm.tensor(np.zeros((5, 3))), nm.tensor(np.zeros((2, 4, 3))))


def test_conv1d_linearity():
    r = np.random.default_rng(3)
    k = t64(r.normal(size=(4, 3, 3)))
    bias = None
    x = t64(r.normal(size=(2, 9, 3)))
    y = t64(r.normal(size=(2, 9, 3)))
    a, b = 1.7, -0.4
    lhs = nm.conv1d(nm.add(nm.scale(x, a), nm.scale(y, b)), k, bias, stride=2, padding=1)
    rhs = nm.add(nm.scale(nm.conv1d(x, k, bias, stride=2, padding=1), a),
                 nm.scale(nm.conv1d(y, k, bias, stride=2, padding=1), b))
    assert np.allclose(lhs.data, rhs.data, rtol=1e-5)


# ---------------------------------------------------------------------------
# autodiff plumbing


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], rg=True)
    with pytest.raises(nm.ShapeError):
        nm.scale(x, 2.0).backward()


def test_assign_only_on_leaves():
    x = t64([1.0], rg=True)
    y = nm.scale(x, 2.0)
    with pytest.raises(ValueError):
        y.assign_([3.0])
    x.assign_([5.0])
    assert x.data[0] == 5.0


def test_no_grad_blocks_graph():
    x = t64([1.0], rg=True)
    with nm.no_grad():
        y = nm.scale(x, 3.0)
    assert not y.requires_grad
    assert y.is_leaf()


def test_mixed_dtype_rejected():
    a = nm.Tensor(np.zeros(3, dtype=np.float32))
    b = nm.Tensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(nm.NumericsError):
        nm.add(a, b)


def test_gradient_accumulates_over_reuse():
    x = t64([3.0], rg=True)
    y = nm.add(nm.scale(x, 2.0), nm.scale(x, 5.0))
    y.backward()
    assert np.allclose(x.grad, [7.0])


# ---------------------------------------------------------------------------
# grad_check harness


def test_grad_check_quadratic():
    with nm.precision("f64"):
        th = nm.tensor([1.0, 2.0], requires_grad=True)
        rep = nm.grad_check(lambda: nm.sum_(nm.square(th)), [th], eps=1e-5)
    assert rep.passed
    assert rep.max_rel_err <= 1e-6
    assert np.allclose(th.grad, [2.0, 4.0])


def test_grad_check_constant_loss_zero_error():
    with nm.precision("f64"):
        th = nm.tensor([0.3, -0.7], requires_grad=True)
        const = nm.tensor([4.0])
        rep = nm.grad_check(lambda: nm.sum_(const), [th], eps=1e-5)
    assert rep.passed
    assert rep.max_rel_err == 0.0


def test_grad_check_nonfinite_diagnostic():
    with nm.precision("f64"):
        th = nm.tensor([1e-6], requires_grad=True)

        def loss():
            clamped = np.log(th.data)  # nan for negative perturbation
            return nm.add(nm.sum_(th), nm.Tensor(np.array(clamped.sum())))

        rep = nm.grad_check(loss, [th], eps=1e-5)
    assert not rep.passed
    assert rep.failure is not None


def test_grad_check_pass_flag_matches_tolerance():
    with nm.precision("f64"):
        th = nm.tensor([0.5, 1.5], requires_grad=True)
        rep = nm.grad_check(lambda: nm.sum_(nm.square(th)), [th], eps=1e-5,
                            tolerance=1e-5)
    assert rep.passed == (rep.max_rel_err <= rep.tolerance)


def _check(fn, params, seed, eps=1e-5, tol=1e-5):
    rep = nm.grad_check(fn, params, eps=eps, tolerance=tol)
    assert rep.passed, f"seed {seed}: max rel err {rep.max_rel_err:.3e}"


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_every_primitive_op(seed):
    r = np.random.default_rng(1000 + seed)
    with nm.precision("f64"):
        a = nm.tensor(r.normal(0, 1, (3, 4)), requires_grad=True)
        b = nm.tensor(r.normal(0, 1, (3, 4)), requires_grad=True)
        c = nm.tensor(r.normal(0, 1, (4,)), requires_grad=True)      # broadcast operand
        m2 = nm.tensor(r.normal(0, 1, (4, 5)), requires_grad=True)
        m3 = nm.tensor(r.normal(0, 1, (2, 3, 4)), requires_grad=True)
        pos = nm.tensor(r.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
        # keep relu inputs off the kink
        shifted = nm.tensor(np.sign(r.normal(size=(3, 4))) * r.uniform(0.05, 1.0, (3, 4)),
                            requires_grad=True)
        gain = nm.tensor(r.normal(1, 0.1, (4,)), requires_grad=True)
        bias = nm.tensor(r.normal(0, 0.1, (4,)), requires_grad=True)
        table = nm.tensor(r.normal(0, 1, (6, 3)), requires_grad=True)
        ids = r.integers(0, 6, (2, 5))
        idx = r.integers(0, 4, (3,))
        cx = nm.tensor(r.normal(0, 1, (2, 8, 3)), requires_grad=True)
        ck = nm.tensor(r.normal(0, 0.5, (4, 3, 3)), requires_grad=True)
        cb = nm.tensor(r.normal(0, 0.1, (4,)), requires_grad=True)

        cases = [
            (lambda: nm.sum_(nm.add(a, c)), [a, c]),
            (lambda: nm.sum_(nm.sub(a, b)), [a, b]),
            (lambda: nm.sum_(nm.mul(a, c)), [a, c]),
            (lambda: nm.sum_(nm.div(a, pos)), [a, pos]),
            (lambda: nm.sum_(nm.scale(a, -2.5)), [a]),
            (lambda: nm.sum_(nm.relu(shifted)), [shifted]),
            (lambda: nm.sum_(nm.square(a)), [a]),
            (lambda: nm.sum_(nm.log_clamped(pos)), [pos]),
            (lambda: nm.sum_(nm.mean(a, axis=1)), [a]),
            (lambda: nm.sum_(nm.square(nm.sum_(a, axis=0))), [a]),
            (lambda: nm.sum_(nm.square(nm.reshape(a, (4, 3)))), [a]),
            (lambda: nm.sum_(nm.square(nm.transpose(m3, (2, 0, 1)))), [m3]),
            (lambda: nm.sum_(nm.square(nm.matmul(a, m2))), [a, m2]),
            (lambda: nm.sum_(nm.square(nm.matmul(m3, m2))), [m3, m2]),
            (lambda: nm.sum_(nm.square(nm.softmax(a, axis=-1))), [a]),
            (lambda: nm.sum_(nm.square(nm.log_softmax(a, axis=-1))), [a]),
            # weight the normalized rows: an unweighted square-sum is
            # constant (= n_rows) and its gradient identically zero
            (lambda: nm.sum_(nm.mul(nm.l2_normalize(a), b)), [a]),
            (lambda: nm.sum_(nm.take_last(a, idx)), [a]),
            (lambda: nm.sum_(nm.square(nm.embedding(table, ids))), [table]),
            (lambda: nm.sum_(nm.square(nm.layer_norm(a, gain, bias))), [a, gain, bias]),
            (lambda: nm.sum_(nm.square(nm.conv1d(cx, ck, cb, stride=2, padding=1))),
             [cx, ck, cb]),
        ]
        for fn, params in cases:
            _check(fn, params, seed)


def test_l2_normalize_zero_norm_floored():
    x = nm.tensor(np.zeros((2, 3)), requires_grad=True)
    out = nm.l2_normalize(x)
    assert np.isfinite(out.data).all()
    nm.sum_(out).backward()
    assert np.isfinite(x.grad).all()
