"""Tensor engine: forward goldens, invariants, and gradient checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvmeans import tensor as tt
from kvmeans.tensor import ShapeError, Tape, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# matmul

class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        assert np.array_equal(tt.matmul(eye, a).data, a.data)

    def test_orthogonal_rows(self):
        out = tt.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]]))
        assert out.data.tolist() == [[0.0]]

    def test_against_triple_loop(self):
        a = rng(1).standard_normal((3, 4))
        b = rng(2).standard_normal((4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = tt.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - want).max() < 1e-12

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_batched_broadcast(self):
        a = rng(3).standard_normal((5, 3, 4))
        b = rng(4).standard_normal((4, 2))
        got = tt.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, a @ b)


# ---------------------------------------------------------------------------
# layer_norm

class TestLayerNorm:
    def test_two_point_row(self):
        out = tt.layer_norm(Tensor([1.0, 3.0]), Tensor([1.0, 1.0]),
                            Tensor([0.0, 0.0]), eps=0.0)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-12)

    def test_constant_row_maps_to_bias(self):
        out = tt.layer_norm(Tensor([5.0, 5.0]), Tensor([1.0, 1.0]),
                            Tensor([7.0, 7.0]))
        assert np.allclose(out.data, [7.0, 7.0], atol=1e-12)

    def test_random_row_statistics(self):
        x = rng(5).standard_normal(8)
        out = tt.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)),
                            eps=0.0)
        assert abs(out.data.mean()) < 1e-12
        assert abs(out.data.var() - 1.0) < 1e-9

    def test_empty_axis_errors(self):
        with pytest.raises(ShapeError):
            tt.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)),
                          Tensor(np.zeros(0)))


# ---------------------------------------------------------------------------
# masked_softmax

class TestMaskedSoftmax:
    def test_symmetric_pair(self):
        out = tt.masked_softmax(Tensor([[0.0, 0.0]]), np.zeros((1, 2)))
        assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_masked_entry_exactly_zero(self):
        mask = np.array([[0.0, 0.0, -np.inf]])
        out = tt.masked_softmax(Tensor([[0.0, 0.0, 17.0]]), mask)
        assert out.data[0, 2] == 0.0
        assert np.allclose(out.data[0, :2], [0.5, 0.5])

    def test_log2_golden(self):
        out = tt.masked_softmax(Tensor([[math.log(2.0), 0.0]]), np.zeros((1, 2)))
        assert np.allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_fully_masked_row_errors(self):
        with pytest.raises(ValueError, match="fully masked"):
            tt.masked_softmax(Tensor([[1.0, 2.0]]),
                              np.array([[-np.inf, -np.inf]]))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one(self, seed):
        g = np.random.default_rng(seed)
        logits = g.standard_normal((4, 6)) * 5
        mask = np.where(g.random((4, 6)) < 0.4, -np.inf, 0.0)
        mask[:, 0] = 0.0  # keep every row attendable
        p = tt.masked_softmax(Tensor(logits), mask).data
        assert np.abs(p.sum(axis=-1) - 1.0).max() <= 1e-12
        assert np.all(p[mask == -np.inf] == 0.0)


# ---------------------------------------------------------------------------
# activations

class TestActivations:
    def test_elu_at_zero(self):
        assert tt.elu(Tensor([0.0])).data[0] == 0.0

    def test_elu_negative_closed_form(self):
        assert abs(tt.elu(Tensor([-1.0])).data[0] - (math.exp(-1) - 1)) < 1e-15

    def test_relu_squared(self):
        out = tt.relu_squared(Tensor([-3.0, 2.0]))
        assert out.data.tolist() == [0.0, 4.0]

    def test_sigmoid_matches_definition(self):
        x = rng(6).standard_normal(16) * 8
        got = tt.sigmoid(Tensor(x)).data
        assert np.allclose(got, 1.0 / (1.0 + np.exp(-x)), atol=1e-12)


# ---------------------------------------------------------------------------
# rope

class TestRopePartial:
    def test_position_zero_is_identity(self):
        x = rng(7).standard_normal((3, 8))
        out = tt.rope_partial(Tensor(x), [0, 0, 0], 4)
        assert np.array_equal(out.data, x)

    def test_channels_beyond_width_unchanged(self):
        x = rng(8).standard_normal((5, 8))
        out = tt.rope_partial(Tensor(x), np.arange(5), 4)
        assert np.array_equal(out.data[:, 4:], x[:, 4:])

    def test_quarter_turn(self):
        # base 1.0 makes the first pair's angle equal to the position
        x = Tensor([[1.0, 0.0]])
        out = tt.rope_partial(x, [math.pi / 2], 2, base=1.0)
        assert np.allclose(out.data, [[0.0, 1.0]], atol=1e-12)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            tt.rope_partial(Tensor(np.zeros((1, 8))), [0], 3)

    def test_zero_width_is_identity(self):
        x = rng(9).standard_normal((4, 6))
        out = tt.rope_partial(Tensor(x), np.arange(4), 0)
        assert np.array_equal(out.data, x)

    @given(st.integers(0, 2**31 - 1), st.integers(0, 500))
    @settings(max_examples=30, deadline=None)
    def test_pair_norms_preserved(self, seed, pos):
        g = np.random.default_rng(seed)
        x = g.standard_normal((1, 8))
        out = tt.rope_partial(Tensor(x), [pos], 8).data
        for j in range(4):
            before = math.hypot(x[0, 2 * j], x[0, 2 * j + 1])
            after = math.hypot(out[0, 2 * j], out[0, 2 * j + 1])
            assert abs(before - after) <= 1e-12


# ---------------------------------------------------------------------------
# backward / tape

class TestBackward:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            loss = x * x
        tt.backward(loss, tape)
        assert np.allclose(x.grad, 6.0)

    def test_unused_parameter_gets_no_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        p = Tensor(1.0, requires_grad=True)
        with Tape() as tape:
            loss = x * x
        tt.backward(loss, tape)
        assert p.grad is None

    def test_repeated_backward_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        with Tape() as tape:
            loss = x * x
        tt.backward(loss, tape)
        tt.backward(loss, tape)
        assert np.allclose(x.grad, 8.0)
        tt.zero_grad([x])
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ValueError, match="scalar"):
            tt.backward(y, tape)

    def test_no_grad_detaches(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            with tt.no_grad():
                y = x * x
            loss = (y * x).sum()  # only the path through the live x records
        tt.backward(loss, tape)
        assert np.allclose(x.grad, 9.0)  # d(9x)/dx, not d(x^3)/dx

    def test_determinism(self):
        x = rng(10).standard_normal((32, 32))
        w = rng(11).standard_normal((32, 32))
        a = tt.matmul(Tensor(x), Tensor(w)).data
        b = tt.matmul(Tensor(x), Tensor(w)).data
        assert np.array_equal(a, b)

    def test_tape_records_in_topological_order(self):
        x = Tensor(rng(12).standard_normal((3, 3)), requires_grad=True)
        with Tape() as tape:
            a = x * 2.0
            b = tt.matmul(a, x)
            c = (a + b).sum()
            _ = c * 1.0
        seen = {id(x)}
        for node in tape.nodes:
            for parent in node._parents:
                assert parent._parents is None or id(parent) in seen
            seen.add(id(node))


# ---------------------------------------------------------------------------
# finite-difference checks for every differentiable op

def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(op, x: np.ndarray):
    t = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        out = op(t)
        loss = (out * out).sum() if out.data.size > 1 else out
    tt.backward(loss, tape)
    return t.grad


def check_op(op, x: np.ndarray, tol: float = 1e-4):
    got = analytic_grad(op, x)

    def scalar_f(arr):
        out = op(Tensor(arr.copy())).data
        return float((out * out).sum()) if out.size > 1 else float(out)

    want = fd_grad(scalar_f, x.copy())
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-6)
    assert (np.abs(got - want) / denom).max() < tol


OPS = {
    "matmul": lambda t: tt.matmul(t, Tensor(rng(20).standard_normal((5, 3)))),
    "matmul_rhs": lambda t: tt.matmul(Tensor(rng(21).standard_normal((3, 4))), t),
    "add": lambda t: t + Tensor(rng(22).standard_normal((4, 5))),
    "mul": lambda t: t * Tensor(rng(23).standard_normal((4, 5))),
    "div": lambda t: t / Tensor(2.0 + np.abs(rng(24).standard_normal((4, 5)))),
    "rdiv": lambda t: 1.7 / (t + 10.0),
    "sub": lambda t: 3.0 - t,
    "layer_norm": lambda t: tt.layer_norm(t, Tensor(rng(25).standard_normal(5)),
                                          Tensor(rng(26).standard_normal(5))),
    "softmax": lambda t: tt.masked_softmax(
        t, np.where(np.arange(5) < 4, 0.0, -np.inf)[None, :].repeat(4, 0)),
    "elu": lambda t: tt.elu(t),
    "relu_squared": lambda t: tt.relu_squared(t + 0.05),
    "sigmoid": lambda t: tt.sigmoid(t),
    "exp": lambda t: tt.exp(t),
    "log": lambda t: tt.log(t + 10.0),
    "sqrt": lambda t: tt.sqrt(t + 10.0),
    "rope": lambda t: tt.rope_partial(t, np.arange(4) + 3, 4),
    "l2norm": lambda t: tt.l2norm(t, keepdims=True),
    "clamp_min": lambda t: tt.clamp_min(t, 0.1),
    "mean": lambda t: t.mean(axis=-1),
    "sum_keepdims": lambda t: t.sum(axis=0, keepdims=True),
    "permute": lambda t: tt.permute(t, (1, 0)),
    "reshape": lambda t: tt.reshape(t, (2, 10)),
    "narrow": lambda t: tt.narrow(t, 1, 1, 3),
    "concat": lambda t: tt.concat([t, t * 2.0], axis=0),
    "neg": lambda t: -t,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    x = rng(hash(name) % 2**31).standard_normal((4, 5))
    check_op(OPS[name], x)


def test_gather_scatter_gradients():
    idx = np.array([[0, 2, 2], [1, 0, 3]])

    def gathered(t):
        return tt.gather_rows(t, idx)

    check_op(gathered, rng(30).standard_normal((2, 4, 3)).reshape(2, 4, 3))

    base = rng(31).standard_normal((2, 4, 3))

    def scattered(t):
        return tt.scatter_add_rows(Tensor(base), idx, t)

    check_op(scattered, rng(32).standard_normal((2, 3, 3)))

    def scattered_base(t):
        return tt.scatter_add_rows(t, idx, Tensor(rng(33).standard_normal((2, 3, 3))))

    check_op(scattered_base, base.copy())


def test_embedding_gradient():
    ids = np.array([0, 2, 2, 1])

    def emb(t):
        return tt.embedding(t, ids)

    check_op(emb, rng(34).standard_normal((4, 3)))


def test_embedding_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        tt.embedding(Tensor(np.zeros((4, 3))), np.array([0, 4]))


def test_cross_entropy_gradient():
    targets = np.array([1, 0, 2])

    def ce(t):
        return tt.cross_entropy(t, targets)

    check_op(ce, rng(35).standard_normal((3, 4)))


def test_cross_entropy_uniform_value():
    logits = Tensor(np.zeros((2, 256)))
    loss = tt.cross_entropy(logits, np.array([3, 77]))
    assert abs(loss.item() - math.log(256.0)) < 1e-12


def test_scatter_add_matches_dense_one_hot():
    g = rng(36)
    base = g.standard_normal((2, 4, 3))
    rows = g.standard_normal((2, 5, 3))
    idx = g.integers(0, 4, size=(2, 5))
    got = tt.scatter_add_rows(Tensor(base), idx, Tensor(rows)).data
    for grp in range(2):
        onehot = np.zeros((5, 4))
        onehot[np.arange(5), idx[grp]] = 1.0
        want = base[grp] + onehot.T @ rows[grp]
        assert np.abs(got[grp] - want).max() < 1e-12
