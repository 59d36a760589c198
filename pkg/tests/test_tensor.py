import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umrlab import tensor as T
from umrlab.errors import ContractError, DimensionError, NumericDomainError
from umrlab.gradcheck import check_gradients, finite_diff_grad, max_relative_error


def rand(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return T.Tensor(rng.normal(0.0, scale, size=shape))


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_dot_product(self):
        a = T.Tensor([[1.0, 2.0]])
        b = T.Tensor([[3.0], [4.0]])
        assert T.matmul(a, b).data == pytest.approx(np.array([[11.0]]))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for l in range(4):
                    want[i][j] += a[i][l] * b[l][j]
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        assert np.abs(got - want).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(rand((2, 3)), rand((2, 2)))


class TestSoftmaxRows:
    def test_uniform(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0, 0.0]]))
        assert out.data == pytest.approx(np.array([[0.25] * 4]))

    def test_large_entries_stay_finite(self):
        out = T.softmax_rows(T.Tensor([[1000.0, 0.0]]))
        assert np.isfinite(out.data).all()
        assert out.data[0, 0] == pytest.approx(1.0)

    def test_matches_direct_evaluation(self):
        row = np.array([[1.0, 2.0, 3.0]])
        direct = np.exp(row) / np.exp(row).sum()
        out = T.softmax_rows(T.Tensor(row)).data
        assert np.abs(out - direct).max() < 1e-15

    def test_nan_rejected(self):
        with pytest.raises(NumericDomainError):
            T.softmax_rows(T.Tensor([[np.nan, 1.0]]))

    @given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=6), min_size=1, max_size=5))
    def test_rows_sum_to_one(self, rows):
        width = len(rows[0])
        rows = [r[:width] + [0.0] * (width - len(r)) for r in rows]
        out = T.softmax_rows(T.Tensor(rows)).data
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12
        assert (out >= 0).all()


class TestLayerNormRows:
    def test_constant_row_is_zero(self):
        x = T.Tensor([[5.0, 5.0, 5.0]])
        out = T.layer_norm_rows(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
        assert np.abs(out.data).max() < 1e-6

    def test_unit_variance_row(self):
        x = T.Tensor([[1.0, -1.0]])
        out = T.layer_norm_rows(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), eps=1e-12)
        assert out.data == pytest.approx(np.array([[1.0, -1.0]]), abs=1e-6)

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(3)
        row = rng.normal(size=5)
        gain = rng.normal(size=5)
        bias = rng.normal(size=5)
        eps = 1e-5
        mu = sum(row) / 5
        var = sum((v - mu) ** 2 for v in row) / 5
        want = [(v - mu) / (var + eps) ** 0.5 * g + b for v, g, b in zip(row, gain, bias)]
        out = T.layer_norm_rows(T.Tensor([row]), T.Tensor(gain), T.Tensor(bias), eps=eps)
        assert np.abs(out.data[0] - np.array(want)).max() < 1e-14


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out = T.l2_normalize_rows(T.Tensor([[3.0, 4.0]]))
        assert out.data == pytest.approx(np.array([[0.6, 0.8]]))

    def test_unit_row_unchanged(self):
        x = np.array([[1.0, 0.0, 0.0]])
        assert np.array_equal(T.l2_normalize_rows(T.Tensor(x)).data, x)

    def test_zero_row_stays_zero(self):
        out = T.l2_normalize_rows(T.Tensor([[0.0, 0.0]]), eps=1e-12)
        assert np.array_equal(out.data, np.zeros((1, 2)))
        assert np.isfinite(out.data).all()

    @given(st.lists(st.lists(st.floats(-10, 10), min_size=2, max_size=5), min_size=1, max_size=4))
    def test_output_norms(self, rows):
        width = len(rows[0])
        rows = [r[:width] + [1.0] * (width - len(r)) for r in rows]
        x = np.array(rows)
        out = T.l2_normalize_rows(T.Tensor(x), eps=1e-12).data
        norms = np.linalg.norm(x, axis=1)
        out_norms = np.linalg.norm(out, axis=1)
        for n_in, n_out in zip(norms, out_norms):
            if n_in >= 1e-12:
                assert abs(n_out - 1.0) < 1e-12


class TestElementwise:
    def test_exp_zero(self):
        assert T.exp(T.Tensor(np.zeros((1, 1)))).data == pytest.approx(np.array([[1.0]]))

    def test_mean(self):
        assert T.mean(T.Tensor([[2.0, 4.0, 6.0]])).item() == pytest.approx(4.0)

    def test_log_exp_round_trip(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 3))
        back = T.log(T.exp(T.Tensor(x))).data
        assert np.abs(back - x).max() < 1e-12

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(rand((2, 2)), rand((2, 3)))

    def test_concat_slice_round_trip(self):
        a, b = rand((2, 3), 1), rand((3, 3), 2)
        cat = T.concat_rows([a, b])
        assert np.array_equal(T.slice_rows(cat, 2, 5).data, b.data)

    def test_diag_part(self):
        x = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.diag_part(x).data, [1.0, 4.0])


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), grad_tracked=True)
        grads = T.backward(T.sum_all(x))
        assert np.array_equal(grads[x], np.ones((2, 3)))

    def test_square_at_three(self):
        # d(x*x)/dx = 2x = 6 at x = 3
        a = T.Tensor([[3.0]], grad_tracked=True)
        grads = T.backward(T.sum_all(T.mul(a, a)))
        assert grads[a] == pytest.approx(np.array([[6.0]]))

    def test_root_must_be_scalar(self):
        x = T.Tensor([[1.0, 2.0]], grad_tracked=True)
        with pytest.raises(ContractError):
            T.backward(T.exp(x))

    def test_fanout_accumulates(self):
        x = T.Tensor([[2.0]], grad_tracked=True)
        y = T.add(x, x)
        grads = T.backward(T.sum_all(y))
        assert grads[x] == pytest.approx(np.array([[2.0]]))

    def test_deterministic_bitwise(self):
        def build():
            x = T.Tensor(np.linspace(-1, 1, 12).reshape(3, 4), grad_tracked=True)
            w = T.Tensor(np.linspace(0.1, 0.9, 8).reshape(4, 2), grad_tracked=True)
            y = T.softmax_rows(T.matmul(T.gelu(x), w))
            return T.backward(T.mean(y)), x, w

        (g1, x1, w1), (g2, x2, w2) = build(), build()
        assert g1[x1].tobytes() == g2[x2].tobytes()
        assert g1[w1].tobytes() == g2[w2].tobytes()

    def test_graph_topological_order(self):
        x = T.Tensor([[1.0, 2.0]], grad_tracked=True)
        y = T.mean(T.exp(T.scale(x, 2.0)))
        graph = T.ComputeGraph.of(y)
        seen = set()
        for node in graph.nodes:
            for inp in node.inputs:
                if inp._node is not None:
                    assert id(inp._node) in seen
            seen.add(id(node))

    def test_no_grad_blocks_recording(self):
        x = T.Tensor([[1.0]], grad_tracked=True)
        with T.no_grad():
            y = T.exp(x)
        assert y._node is None and not y.grad_tracked


class TestFiniteDiff:
    def test_sum_of_squares(self):
        f = lambda t: T.sum_all(T.mul(t, t))
        got = finite_diff_grad(f, T.Tensor([[1.0, 2.0]]))
        assert np.abs(got - np.array([[2.0, 4.0]])).max() < 1e-9

    def test_constant_function(self):
        f = lambda t: T.Tensor(np.asarray(5.0))
        got = finite_diff_grad(f, T.Tensor([[1.0, 2.0]]))
        assert np.abs(got).max() == 0.0

    def test_non_finite_rejected(self):
        with np.errstate(invalid="ignore"):  # log of a negative -> nan
            with pytest.raises(NumericDomainError):
                finite_diff_grad(lambda t: T.sum_all(T.log(t)), T.Tensor([[-1.0]]))


OPS_FOR_GRADCHECK = [
    ("matmul", lambda a, b: T.mean(T.matmul(a, b)), [(3, 4), (4, 2)]),
    ("affine", lambda x, w, b: T.mean(T.affine(x, w, b)), [(3, 4), (4, 2), (2,)]),
    ("transpose", lambda x: T.mean(T.mul(T.transpose(x), T.transpose(x))), [(2, 3)]),
    ("add", lambda a, b: T.mean(T.add(a, b)), [(2, 3), (2, 3)]),
    ("sub", lambda a, b: T.mean(T.mul(T.sub(a, b), T.sub(a, b))), [(2, 3), (2, 3)]),
    ("mul", lambda a, b: T.mean(T.mul(a, b)), [(2, 3), (2, 3)]),
    ("scale", lambda x: T.mean(T.scale(x, -2.5)), [(2, 3)]),
    ("exp", lambda x: T.mean(T.exp(x)), [(2, 3)]),
    ("log", lambda x: T.mean(T.log(T.add_scalar(T.mul(x, x), 1.0))), [(2, 3)]),
    ("gelu", lambda x: T.mean(T.gelu(x)), [(3, 3)]),
    ("sum_rows", lambda x: T.mean_vec(T.sum_rows(T.mul(x, x))), [(3, 4)]),
    ("concat", lambda a, b: T.mean(T.mul(T.concat_rows([a, b]), T.concat_rows([a, b]))), [(2, 3), (1, 3)]),
    ("slice_rows", lambda x: T.mean(T.slice_rows(x, 1, 3)), [(4, 2)]),
    ("slice_cols", lambda x: T.mean(T.mul(T.slice_cols(x, 0, 2), T.slice_cols(x, 1, 3))), [(3, 4)]),
    ("take_rows", lambda x: T.mean(T.take_rows(x, [0, 2, 2, 1])), [(3, 3)]),
    ("diag", lambda x: T.mean_vec(T.diag_part(T.mul(x, x))), [(3, 3)]),
    ("softmax", lambda x: T.mean(T.mul(T.softmax_rows(x), T.softmax_rows(x))), [(3, 4)]),
    ("layer_norm", lambda x, g, b: T.mean(T.layer_norm_rows(x, g, b, eps=1e-5)), [(3, 4), (4,), (4,)]),
    ("l2norm", lambda x: T.mean(T.mul(T.l2_normalize_rows(x), T.l2_normalize_rows(x))), [(3, 4)]),
    ("attention", lambda q, k, v: T.mean(T.attention(q, k, v, 2)), [(3, 4), (3, 4), (3, 4)]),
    (
        "cross_entropy",
        lambda s: T.cross_entropy_rows(s, np.eye(3)),
        [(3, 3)],
    ),
]


@pytest.mark.parametrize("name,f,shapes", OPS_FOR_GRADCHECK, ids=[o[0] for o in OPS_FOR_GRADCHECK])
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(name, f, shapes, seed):
    rng = np.random.default_rng(seed + 100)
    xs = [T.Tensor(rng.normal(0.0, 1.0, size=s)) for s in shapes]
    assert check_gradients(f, xs) < 1e-4


def test_tensor_data_immutable():
    t = T.Tensor([[1.0, 2.0]])
    with pytest.raises(ValueError):
        t.data[0, 0] = 9.0


def test_tensor_shape_matches_data():
    t = T.Tensor(np.zeros((2, 3)))
    assert t.size == 6 and t.shape == (2, 3)
