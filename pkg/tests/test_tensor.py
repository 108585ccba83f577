import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from headscale import tensor as T
from headscale.errors import ContractError, DimensionError, NonFiniteError, ParameterError, TokenIndexError
from headscale.tensor import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_hand_computed():
    # 1*5+2*7=19, 1*6+2*8=22, 3*5+4*7=43, 3*6+4*8=50
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_zero():
    out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
def test_matmul_gradient_contract(shapes):
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=shapes[0]), requires_grad=True)
    b = Tensor(rng.normal(size=shapes[1]), requires_grad=True)
    w = rng.normal(size=shapes[0][:-1] + shapes[1][-1:])
    out = T.tsum(T.mul(T.matmul(a, b), Tensor(w)))
    out.backward()
    # d/da = dout . b^T, d/db = a^T . dout
    expect_a = w @ np.swapaxes(b.data, -1, -2)
    expect_b = np.swapaxes(a.data, -1, -2) @ w
    if b.ndim == 2 and a.ndim == 3:
        expect_b = expect_b.sum(axis=0)
    assert np.allclose(a.grad, expect_a, rtol=1e-12)
    assert np.allclose(b.grad, expect_b, rtol=1e-12)


# -- softmax_temp ------------------------------------------------------------

def test_softmax_equal_logits_uniform():
    for lam in (0.01, 1.0, 50.0):
        p = T.softmax_temp(Tensor([0.0, 0.0, 0.0]), lam, 3).data
        assert np.allclose(p, 1 / 3, rtol=0, atol=1e-15)


def test_softmax_large_temperature_concentrates():
    p = T.softmax_temp(Tensor([10.0, 0.0]), 100.0, 2).data
    assert p[0] == pytest.approx(1.0, abs=1e-300) and p[1] < 1e-300


def test_softmax_matches_extended_precision():
    lam = 1 / math.sqrt(32)
    z = [1.0, 2.0, 3.0]
    mpmath.mp.dps = 50
    ex = [mpmath.exp(mpmath.mpf(lam) * zj) for zj in z]
    expect = [float(e / sum(ex)) for e in ex]
    got = T.softmax_temp(Tensor(z), lam, 3).data
    assert np.allclose(got, expect, rtol=1e-14, atol=0)


def test_softmax_mask_zeroes_tail_exactly():
    p = T.softmax_temp(Tensor([1.0, 2.0, 3.0, 4.0]), 0.5, 2).data
    assert p[2] == 0.0 and p[3] == 0.0
    assert abs(p.sum() - 1) < 1e-12


def test_softmax_parameter_errors():
    with pytest.raises(ParameterError):
        T.softmax_temp(Tensor([1.0, 2.0]), 0.0, 2)
    with pytest.raises(ParameterError):
        T.softmax_temp(Tensor([1.0, 2.0]), -1.0, 2)
    with pytest.raises(ParameterError):
        T.softmax_temp(Tensor([1.0, 2.0]), 1.0, 0)


def test_softmax_stable_for_huge_logits():
    p = T.softmax_temp(Tensor([1e6, 1e6 - 1.0]), 1.0, 2).data
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12


rows = arrays(np.float64, st.integers(2, 12), elements=st.floats(-20, 20, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(z=rows, lam=st.floats(0.01, 5.0), shift=st.floats(-50, 50), data=st.data())
def test_softmax_properties(z, lam, shift, data):
    mask = data.draw(st.integers(1, z.size))
    p = T.softmax_temp(Tensor(z), lam, mask).data
    assert abs(p.sum() - 1.0) <= 1e-9
    assert (p[mask:] == 0).all()
    shifted = z.copy()
    shifted[:mask] += shift
    assert np.allclose(T.softmax_temp(Tensor(shifted), lam, mask).data, p, atol=1e-9)


def _entropy(p):
    nz = p[p > 0]
    return -(nz * np.log(nz)).sum()


@settings(max_examples=60, deadline=None)
@given(z=rows)
def test_entropy_non_increasing_in_temperature(z):
    grid = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 4.0]
    ents = [_entropy(T.softmax_temp(Tensor(z), lam).data) for lam in grid]
    assert all(b <= a + 1e-12 for a, b in zip(ents, ents[1:]))


def test_softmax_causal_mask_and_per_head_temperature_gradient():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    lam = Tensor(rng.uniform(0.3, 1.5, size=(3, 1, 1)), requires_grad=True)
    w = rng.normal(size=(2, 3, 5, 5))
    mask = T.causal_mask(5)

    def f():
        return T.tsum(T.mul(T.softmax_temp(z, lam, mask), Tensor(w))).item()

    T.tsum(T.mul(T.softmax_temp(z, lam, mask), Tensor(w))).backward()
    assert rel_err(z.grad, numeric_grad(f, z.data)) < 1e-6
    assert rel_err(lam.grad, numeric_grad(f, lam.data)) < 1e-6
    assert (z.grad[..., ~mask] == 0).all()


# -- cross entropy -----------------------------------------------------------

def test_cross_entropy_uniform_is_ln_v():
    for V in (2, 5, 256):
        loss = T.cross_entropy(Tensor(np.zeros((4, V))), np.arange(4) % V).item()
        assert abs(loss - math.log(V)) < 1e-12


def test_cross_entropy_perfect_prediction_tends_to_zero():
    targets = np.array([0, 2, 1])
    for mag, bound in ((10.0, 1e-3), (40.0, 1e-15)):
        logits = np.zeros((3, 4))
        logits[np.arange(3), targets] = mag
        assert T.cross_entropy(Tensor(logits), targets).item() < bound


def test_cross_entropy_matches_scalar_oracle():
    logits = [[0.1, -0.3, 2.0, 0.5, 0.0], [1.5, 1.5, -1.0, 0.2, 0.3], [-2.0, 0.0, 0.7, 3.1, -0.4]]
    targets = [2, 0, 3]
    total = 0.0
    for row, t in zip(logits, targets):
        total += -(row[t] - math.log(math.fsum(math.exp(v) for v in row)))
    expect = total / 3
    assert T.cross_entropy(Tensor(logits), np.array(targets)).item() == pytest.approx(expect, rel=1e-14)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(TokenIndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor(np.random.default_rng(0).normal(size=(5,)), requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.scale(x, 2.0).backward()


def test_backward_accumulates_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.add(T.mul(x, x), T.scale(x, 3.0))
    T.tsum(y).backward()
    assert np.allclose(x.grad, 2 * x.data + 3)


PRIMITIVES = {
    "matmul": lambda a, b: T.matmul(a, b),
    "matmul_shared": lambda a, b: T.matmul(T.reshape(a, (2, 2, 4)), b),
    "add_broadcast": lambda a, b: T.add(T.matmul(a, b), T.take(b, 0)),
    "mul": lambda a, b: T.mul(a, b),
    "mul_self": lambda a, b: T.mul(a, a),
    "silu": lambda a, b: T.silu(a),
    "rms_norm": lambda a, b: T.rms_norm(a, T.take(b, (slice(None), 0))),
    "rope": lambda a, b: T.rope(a, np.arange(4) + 3, 100.0),
    "transpose": lambda a, b: T.transpose(a),
    "softmax": lambda a, b: T.softmax_temp(a, 0.7),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    op = PRIMITIVES[name]
    w = Tensor(rng.normal(size=op(a, b).shape))

    def f():
        return float((op(a, b).data * w.data).sum())

    T.tsum(T.mul(op(a, b), w)).backward()
    assert rel_err(a.grad, numeric_grad(f, a.data)) <= 1e-6
    if b.grad is not None:
        assert rel_err(b.grad, numeric_grad(f, b.data)) <= 1e-6


def test_embedding_and_cross_entropy_gradients():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    proj = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    ids = np.array([[0, 5, 5, 2]])
    targets = np.array([[5, 5, 2, 1]])

    def loss():
        return T.cross_entropy(T.matmul(T.embedding(w, ids), proj), targets)

    loss().backward()
    assert rel_err(w.grad, numeric_grad(lambda: loss().item(), w.data)) <= 1e-6
    assert rel_err(proj.grad, numeric_grad(lambda: loss().item(), proj.data)) <= 1e-6


def test_embedding_rejects_bad_ids():
    with pytest.raises(TokenIndexError):
        T.embedding(Tensor(np.zeros((4, 2))), np.array([1, 4]))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_is_a_hard_error_when_checks_on():
    with T.finite_checks(True):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            T.scale(Tensor([1e308]), 10.0)
    with T.finite_checks(False):
        assert np.isinf(T.scale(Tensor([1e308]), 10.0).data).all()


def test_tensor_invariants():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert x.data.size == math.prod(x.shape) and x.data.dtype == np.float64 and x.data.flags.c_contiguous
    T.tsum(x).backward()
    assert x.grad.shape == x.shape
