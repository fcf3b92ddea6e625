import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repdiff import autodiff as ad
from repdiff.autodiff import Tensor, grad_check, grad_check_params


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = Tensor([[1.0], [0.0], [-1.0]])
    assert np.array_equal((a @ b).data, np.array([[-2.0], [-2.0]]))


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 1)))


def test_add_shape_error():
    with pytest.raises(ad.ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_l2_normalize_zero_vector():
    with pytest.raises(ValueError, match="zero-norm input"):
        ad.l2_normalize(Tensor(np.zeros((1, 3))))


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6))
def test_cosine_self_is_one(v):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-3:
        v = v + 1.0
    c = ad.cosine_similarity(Tensor(v[None]), Tensor(v[None])).item()
    assert abs(c - 1.0) < 1e-12


def test_quadratic_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.sum_(x * x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_nonscalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_cosine_gradient_orthogonal_to_unit_input():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 5))
    v /= np.linalg.norm(v)
    c = rng.normal(size=(1, 5))
    x = Tensor(v, requires_grad=True)
    ad.sum_(ad.cosine_similarity(x, Tensor(c))).backward()
    assert abs((x.grad @ v.T).item()) < 1e-12


UNARY = {
    "tanh": (ad.tanh, lambda x: x),
    "silu": (ad.silu, lambda x: x),
    "exp": (ad.exp, lambda x: x),
    "log": (ad.log, lambda x: np.abs(x) + 0.5),
    "sqrt": (ad.sqrt, lambda x: np.abs(x) + 0.5),
    "l2_normalize": (lambda t: ad.l2_normalize(t, axis=-1), lambda x: x + 0.1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(100))
def test_unary_primitives_match_finite_differences(name, seed):
    op, domain = UNARY[name]
    rng = np.random.default_rng(seed)
    x = domain(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    r = grad_check(lambda t: ad.sum_(op(t) * Tensor(w)), x)
    assert r.reliable and r.max_rel_err < 1e-6


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.exp(b)),
    "matmul": lambda a, b: a @ ad.transpose(b),
    "cosine": lambda a, b: ad.cosine_similarity(a, b),
    "concat": lambda a, b: ad.concatenate([a, b], axis=1),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(100))
def test_binary_primitives_match_finite_differences(name, seed):
    rng = np.random.default_rng(1000 + seed)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a, b = Tensor(a0.copy()), Tensor(b0.copy())

    def f():
        out = BINARY[name](a, b)
        w = Tensor(np.cos(np.arange(out.size).reshape(out.shape)))
        return ad.sum_(out * w)

    r = grad_check_params(f, {"a": a, "b": b})
    assert r.reliable and r.max_rel_err < 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_reductions_broadcast_and_slice(seed):
    rng = np.random.default_rng(2000 + seed)
    x = Tensor(rng.normal(size=(4, 3)))
    row = Tensor(rng.normal(size=(1, 3)))

    def f():
        y = x * row + row
        return ad.mean(ad.sum_(y, axis=1) ** 2) + ad.sum_(ad.slice_(y, (slice(1, 3), slice(None))))

    r = grad_check_params(f, {"x": x, "row": row})
    assert r.max_rel_err < 1e-6


def test_two_layer_mlp_matches_central_differences():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(8, 3))
    W1 = rng.normal(size=(3, 5))
    W2 = rng.normal(size=(5, 1))

    def loss_np(w1):
        h = X @ w1
        h = h / (1 + np.exp(-h))
        return float(np.mean((h @ W2) ** 2))

    w1 = Tensor(W1.copy(), requires_grad=True)
    out = ad.mean((ad.silu(Tensor(X) @ w1) @ Tensor(W2)) ** 2)
    out.backward()
    fd = central_diff(loss_np, W1.copy(), h=1e-5)
    rel = np.max(np.abs(w1.grad - fd) / np.maximum(1.0, np.abs(fd)))
    assert rel < 1e-6


def test_grad_check_square():
    r = grad_check(lambda t: ad.sum_(t * t), np.array([3.0]), step=1e-5)
    assert r.max_rel_err < 1e-9


def test_grad_check_flags_kink():
    r = grad_check(lambda t: ad.sum_(ad.abs_(t)), np.array([0.0]))
    assert not r.reliable


def test_grad_check_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        grad_check(lambda t: ad.sum_(ad.log(t)), np.array([0.0]))


def test_backward_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(6, 4))
    grads = []
    for _ in range(2):
        x = Tensor(x0, requires_grad=True)
        ad.sum_(ad.tanh(x @ Tensor(x0.T)) ** 2).backward()
        grads.append(x.grad.tobytes())
    assert grads[0] == grads[1]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_shared_subexpression_visited_once():
    # y used twice: gradient must be the sum of both paths, not double-counted per visit
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    ad.sum_(y + y).backward()
    assert np.array_equal(x.grad, [8.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5))
def test_sum_mean_axes_shapes(n, m):
    x = Tensor(np.arange(n * m, dtype=float).reshape(n, m), requires_grad=True)
    ad.sum_(ad.mean(x, axis=0)).backward()
    assert np.allclose(x.grad, 1.0 / n)
