"""Autodiff engine: oracle checks and finite-difference gradients."""

import numpy as np
import pytest

from bicap import tensor as T


def fd_gradient(fn, arrays, weights, h=1e-4):
    """Central finite differences of sum(fn(*arrays) * weights), float64."""
    grads = []
    for k, base in enumerate(arrays):
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float((fn(*arrays) * weights).sum())
            flat[i] = orig - h
            minus = float((fn(*arrays) * weights).sum())
            flat[i] = orig
            fd.reshape(-1)[i] = (plus - minus) / (2 * h)
        grads.append(fd)
    return grads


def autodiff_gradient(fn_t, arrays, weights):
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn_t(*tensors)
    T.backward(T.tsum(T.mul(out, weights)))
    return [t.grad for t in tensors]


def assert_matches_fd(fn_t, fn_np, arrays, rng, tol=1e-4):
    weights = rng.standard_normal(fn_np(*arrays).shape)
    got = autodiff_gradient(fn_t, arrays, weights)
    want = fd_gradient(fn_np, arrays, weights)
    for g, w in zip(got, want):
        denom = np.maximum(np.abs(w), 1e-6)
        assert np.max(np.abs(g - w) / denom) <= tol


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, T.Tensor(np.eye(2, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_one_by_one(self):
        out = T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]]))
        assert out.data.reshape(()) == 6.0

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3)).astype(np.float32)
        b = rng.standard_normal((3, 3)).astype(np.float32)
        want = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    want[i, j] += float(a[i, k]) * float(b[k, j])
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        assert np.max(np.abs(out.data - want)) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_vector_rejected(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.Tensor(np.ones(3)), T.Tensor(np.ones((3, 2))))


class TestSoftmax:
    def test_constant_is_uniform(self):
        out = T.softmax(T.Tensor(np.full(5, 3.0)), axis=-1)
        np.testing.assert_allclose(out.data, 0.2, atol=1e-7)

    def test_hand_case(self):
        out = T.softmax(T.Tensor(np.array([0.0, np.log(2.0)])), axis=-1)
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-7)

    def test_matches_naive(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 7))
        naive = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
        out = T.softmax(T.Tensor(x), axis=-1)
        assert np.max(np.abs(out.data - naive)) <= 1e-7

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.standard_normal((3, 9))
            s = T.softmax(T.Tensor(x), axis=-1).data
            np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
            shifted = T.softmax(T.Tensor(x + 17.3), axis=-1).data
            assert np.max(np.abs(s - shifted)) <= 1e-9


class TestLayerNorm:
    def test_constant_row_zeros(self):
        x = T.Tensor(np.full((2, 6), 4.0))
        out = T.layer_norm(x, T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_standardized_row_unchanged(self):
        rng = np.random.default_rng(3)
        row = rng.standard_normal(16)
        row = (row - row.mean()) / row.std()
        out = T.layer_norm(T.Tensor(row[None]), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data[0], row, atol=1e-4)

    def test_matches_mean_var_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 8))
        gamma = rng.standard_normal(8)
        beta = rng.standard_normal(8)
        eps = 1e-5
        want = gamma * (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps) + beta
        out = T.layer_norm(T.Tensor(x), T.Tensor(gamma), T.Tensor(beta), eps=eps)
        assert np.max(np.abs(out.data - want)) <= 1e-6

    def test_shape_guard(self):
        with pytest.raises(T.ShapeError):
            T.layer_norm(T.Tensor(np.ones((2, 4))), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))


class TestCrossEntropyMasked:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((3, 4)))
        loss = T.cross_entropy_masked(logits, np.array([0, 1, 2]), np.zeros(3, bool))
        np.testing.assert_allclose(float(loss.data), np.log(4.0), atol=1e-6)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 20.0
        loss = T.cross_entropy_masked(T.Tensor(logits), np.array([2]), np.zeros(1, bool))
        assert float(loss.data) <= 1e-3

    def test_masked_positions_contribute_zero(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((4, 6))
        targets = rng.integers(0, 6, 4)
        mask = np.array([False, True, False, True])
        loss = T.cross_entropy_masked(T.Tensor(logits), targets, mask)
        keep = ~mask
        lse = np.log(np.exp(logits).sum(-1))
        want = np.mean([lse[i] - logits[i, targets[i]] for i in range(4) if keep[i]])
        np.testing.assert_allclose(float(loss.data), want, atol=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((2, 5, 7))
        targets = rng.integers(0, 7, (2, 5))
        mask = rng.random((2, 5)) < 0.3
        if mask.all():
            mask[0, 0] = False
        loss = T.cross_entropy_masked(T.Tensor(logits), targets, mask)
        total, n = 0.0, 0
        for b in range(2):
            for t in range(5):
                if not mask[b, t]:
                    p = np.exp(logits[b, t]) / np.exp(logits[b, t]).sum()
                    total += -np.log(p[targets[b, t]])
                    n += 1
        np.testing.assert_allclose(float(loss.data), total / n, atol=1e-6)

    def test_all_masked_raises(self):
        with pytest.raises(ValueError):
            T.cross_entropy_masked(T.Tensor(np.zeros((2, 3))), np.zeros(2, int), np.ones(2, bool))


class TestBackward:
    def test_square(self):
        x = T.Tensor(np.array(3.0), requires_grad=True)
        T.backward(T.mul(x, x))
        assert float(x.grad) == 6.0

    def test_constant_graph_zero_grads(self):
        x = T.Tensor(np.array(2.0), requires_grad=True)
        c = T.Tensor(np.array(5.0))
        T.backward(T.mul(c, T.Tensor(np.array(4.0))))
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(T.mul(x, 2.0))

    def test_accumulation_over_two_uses(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.standard_normal(5), requires_grad=True)
        y = T.Tensor(x.data.copy(), requires_grad=True)
        T.backward(T.tsum(T.add(T.mul(x, x), T.mul(x, x))))
        T.backward(T.tsum(T.mul(y, y)))
        np.testing.assert_allclose(x.grad, 2 * y.grad, atol=1e-12)

    def test_gradients_accumulate_across_calls(self):
        x = T.Tensor(np.array(2.0), requires_grad=True)
        T.backward(T.mul(x, 3.0))
        T.backward(T.mul(x, 3.0))
        assert float(x.grad) == 6.0

    def test_graph_records_are_topological(self):
        x = T.Tensor(np.array(2.0), requires_grad=True)
        loss = T.mul(T.add(x, 1.0), x)
        graph = T.trace(loss)
        position = {node_id: i for i, node_id in enumerate(id(n) for n in graph.nodes)}
        for record in graph.records:
            for parent in record.input_ids:
                assert position[parent] < position[record.output_id]
        producers = [r.output_id for r in graph.records]
        assert len(producers) == len(set(producers))


class TestFiniteDifferences:
    """Every differentiable primitive vs central differences (h=1e-4)."""

    def test_all_primitives(self):
        rng = np.random.default_rng(8)
        x34 = rng.standard_normal((3, 4))
        cases = [
            (lambda a, b: T.add(a, b), lambda a, b: a + b, (x34, rng.standard_normal((3, 4)))),
            (lambda a, b: T.add(a, b), lambda a, b: a + b, (x34, rng.standard_normal(4))),
            (lambda a, b: T.mul(a, b), lambda a, b: a * b, (x34, rng.standard_normal((3, 4)))),
            (lambda a: T.neg(a), lambda a: -a, (x34,)),
            (lambda a, b: T.matmul(a, b), lambda a, b: a @ b, (rng.standard_normal((3, 5)), rng.standard_normal((5, 2)))),
            (
                lambda a, b: T.matmul(a, b),
                lambda a, b: a @ b,
                (rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))),
            ),
            (
                lambda a, b: T.matmul(a, b),
                lambda a, b: a @ b,
                (rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3))),
            ),
            (lambda a: T.transpose(a, (1, 0)), lambda a: a.T, (x34,)),
            (lambda a: T.reshape(a, (4, 3)), lambda a: a.reshape(4, 3), (x34,)),
            (lambda a: T.narrow(a, 0, 1, 2), lambda a: a[1:3], (x34,)),
            (lambda a: T.relu(a), lambda a: np.maximum(a, 0), (x34 + 0.3,)),
            (lambda a: T.exp(a), np.exp, (x34,)),
            (lambda a: T.log(a), np.log, (np.abs(x34) + 0.5,)),
            (lambda a: T.power(a, 3.0), lambda a: a**3.0, (x34,)),
            (lambda a: T.tsum(a, axis=1), lambda a: a.sum(axis=1), (x34,)),
            (lambda a: T.tmean(a, axis=0), lambda a: a.mean(axis=0), (x34,)),
            (lambda a: T.softmax(a, axis=-1), lambda a: np.exp(a) / np.exp(a).sum(-1, keepdims=True), (x34,)),
            (
                lambda x, g, b: T.layer_norm(x, g, b),
                lambda x, g, b: g * (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) + b,
                (rng.standard_normal((3, 6)), rng.standard_normal(6) + 1.0, rng.standard_normal(6)),
            ),
        ]
        for fn_t, fn_np, arrays in cases:
            assert_matches_fd(fn_t, fn_np, [np.asarray(a, dtype=np.float64) for a in arrays], rng)

    def test_conv2d(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        def conv_np(x, w, b):
            return T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1).data

        assert_matches_fd(lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), conv_np, [x, w, b], rng)

    def test_embedding(self):
        rng = np.random.default_rng(10)
        table = rng.standard_normal((6, 4))
        ids = np.array([[0, 3, 3], [5, 1, 0]])

        def emb_np(t):
            return t[ids]

        assert_matches_fd(lambda t: T.embedding(t, ids), emb_np, [table], rng)

    def test_cross_entropy(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal((3, 5))
        targets = np.array([1, 4, 0])
        mask = np.array([False, False, True])

        def ce_np(l):
            return T.cross_entropy_masked(T.Tensor(l), targets, mask).data

        assert_matches_fd(lambda l: T.cross_entropy_masked(l, targets, mask), ce_np, [logits], rng)

    def test_dropout_fixed_mask(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 4))

        def drop_t(a):
            return T.dropout(a, 0.5, np.random.default_rng(99))

        def drop_np(a):
            return T.dropout(T.Tensor(a), 0.5, np.random.default_rng(99)).data

        assert_matches_fd(drop_t, drop_np, [x], rng)

    def test_random_trials_random_graphs(self):
        # composite graphs, 100 random trials across primitives
        rng = np.random.default_rng(13)
        for _ in range(100):
            a = rng.standard_normal((2, 3))
            b = rng.standard_normal((3, 3))

            def fn_t(a, b):
                h = T.matmul(a, b)
                h = T.relu(T.add(h, 0.1))
                return T.softmax(h, axis=-1)

            def fn_np(a, b):
                h = np.maximum(a @ b + 0.1, 0)
                return np.exp(h) / np.exp(h).sum(-1, keepdims=True)

            assert_matches_fd(fn_t, fn_np, [a, b], rng)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.mul(x, 2.0)
        assert not out.requires_grad and out._backward is None

    def test_debug_checks_flag(self):
        T.set_debug_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                T.log(T.Tensor(np.array([-1.0])))
        finally:
            T.set_debug_checks(False)
