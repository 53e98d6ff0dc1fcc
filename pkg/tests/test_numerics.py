import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mlkv import autodiff as ad
from mlkv import numerics as nx
from mlkv.errors import DimensionError, NumericError
from reference import naive_matmul

finite = st.floats(-50, 50, allow_nan=False, width=32)


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32)
        np.testing.assert_array_equal(nx.matmul(np.eye(2, dtype=np.float32), a), a)

    def test_zero_annihilates(self):
        b = np.random.default_rng(1).standard_normal((4, 2))
        np.testing.assert_array_equal(nx.matmul(np.zeros((3, 4)), b), np.zeros((3, 2)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.abs(nx.matmul(a, b) - naive_matmul(a, b)).max() < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
            nx.matmul(np.zeros((3, 4)), np.zeros((5, 2)))


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(nx.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_matches_extended_precision(self):
        import mpmath

        row = [1.0, 2.0, 3.0]
        z = sum(mpmath.exp(v) for v in row)
        expected = [float(mpmath.exp(v) / z) for v in row]
        np.testing.assert_allclose(nx.softmax_rows(np.array([row])), [expected], atol=1e-7, rtol=0)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
    def test_shift_invariant(self, m, c):
        np.testing.assert_allclose(nx.softmax_rows(m + c), nx.softmax_rows(m), atol=1e-9)

    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
    def test_rows_sum_to_one(self, m):
        p = nx.softmax_rows(m)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_mask_gives_exact_zero(self):
        p = nx.softmax_rows(np.ones((2, 3)), mask=np.array([[True, False, False], [True, True, False]]))
        assert p[0, 1] == 0.0 and p[0, 2] == 0.0 and p[1, 2] == 0.0
        np.testing.assert_allclose(p[1, :2], [0.5, 0.5])

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            nx.softmax_rows(np.array([[0.0, np.nan]]))


class TestLayerNorm:
    def test_constant_row_gives_beta(self):
        out = nx.layer_norm(np.full(7, 0.1, dtype=np.float32), np.ones(7), np.zeros(7))
        np.testing.assert_array_equal(out, np.zeros(7))

    def test_normalized_moments(self):
        x = np.random.default_rng(3).standard_normal(64) * 5 + 2
        y = nx.layer_norm(x, np.ones(64), np.zeros(64))
        assert abs(y.mean()) < 1e-6
        assert abs(y.var() - 1) < 1e-4

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(4)
        x, g, b = rng.standard_normal(16).astype(np.float32), rng.standard_normal(16), rng.standard_normal(16)
        xs = x.astype(np.float64)
        expected = (xs - xs.mean()) / math.sqrt(xs.var() + 1e-5) * g + b
        assert np.abs(nx.layer_norm(x, g.astype(np.float32), b.astype(np.float32)) - expected).max() < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            nx.layer_norm(np.zeros(4), np.ones(3), np.zeros(4))


class TestRotary:
    def test_position_zero_is_identity(self):
        v = np.random.default_rng(5).standard_normal(8)
        np.testing.assert_array_equal(nx.rotary_apply(v, 0), v)

    @given(st.integers(0, 4096), arrays(np.float64, 8, elements=st.floats(-10, 10)))
    def test_pair_norms_preserved(self, pos, v):
        out = nx.rotary_apply(v, pos)
        np.testing.assert_allclose(np.hypot(out[0::2], out[1::2]), np.hypot(v[0::2], v[1::2]), atol=1e-6)

    def test_relative_position(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            q, k = rng.standard_normal(16), rng.standard_normal(16)
            p1, p2, shift = rng.integers(0, 500, 3)
            a = nx.rotary_apply(q, p1) @ nx.rotary_apply(k, p2)
            b = nx.rotary_apply(q, p1 + shift) @ nx.rotary_apply(k, p2 + shift)
            assert abs(a - b) < 1e-5

    def test_odd_dimension(self):
        with pytest.raises(DimensionError):
            nx.rotary_apply(np.zeros(5), 1)


class TestCrossEntropy:
    def test_uniform(self):
        assert nx.cross_entropy(np.zeros((4, 11)), np.array([0, 3, 5, 10])) == pytest.approx(math.log(11), abs=1e-12)

    def test_near_delta(self):
        logits = np.zeros((2, 5))
        logits[0, 2] = logits[1, 4] = 30.0
        assert nx.cross_entropy(logits, np.array([2, 4])) < 1e-9

    def test_matches_logsumexp_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((6, 9)) * 3
        targets = rng.integers(0, 9, 6)
        expected = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(logits, targets)])
        assert abs(nx.cross_entropy(logits, targets) - expected) < 1e-7

    def test_out_of_range_target(self):
        with pytest.raises(ValueError):
            nx.cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_kernels_are_deterministic():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 16)).astype(np.float32)
    w = rng.standard_normal((16, 16)).astype(np.float32)
    for f in (lambda: nx.matmul(x, w), lambda: nx.softmax_rows(x), lambda: nx.rotary_apply(x, 3),
              lambda: nx.layer_norm(x, w[0], w[1]), lambda: nx.gelu(x)):
        assert f().tobytes() == f().tobytes()


class TestGradient:
    def test_linear_map_is_exact(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 3))
        w = rng.standard_normal((3, 2))
        grads = ad.gradient(lambda p: ad.total(ad.linear(ad.Var(x), p["w"])), {"w": w})
        np.testing.assert_array_equal(grads["w"], np.repeat(x.T, 2, axis=1))

    def test_constant_loss_gives_zeros(self):
        grads = ad.gradient(lambda p: 3.0, {"w": np.ones((2, 2))})
        np.testing.assert_array_equal(grads["w"], np.zeros((2, 2)))

    def test_nonfinite_intermediate_named(self):
        with pytest.raises(NumericError, match="blowup"):
            ad.gradient(lambda p: ad.scale(p["w"], np.inf, name="blowup"), {"w": np.ones(2)})

    @pytest.mark.parametrize("op", ["layer_norm", "gelu", "rotary", "softmax", "take", "concat", "bmm"])
    def test_ops_against_finite_differences(self, op):
        rng = np.random.default_rng(10)
        x0 = rng.standard_normal((2, 3, 4))
        g0, b0 = rng.standard_normal(4), rng.standard_normal(4)
        probe = rng.standard_normal((2, 3, 4))

        def build(p):
            x = p["x"]
            if op == "layer_norm":
                y = ad.layer_norm(x, p["g"], p["b"])
            elif op == "gelu":
                y = ad.gelu(x)
            elif op == "rotary":
                y = ad.rotary(x, np.arange(3)[None, :] + 5)
            elif op == "softmax":
                y = ad.masked_softmax(x, np.tril(np.ones((3, 4), dtype=bool)))
            elif op == "take":
                y = ad.take(x, np.array([2, 0, 2, 1]), axis=2)
            elif op == "concat":
                y = ad.concat([x, ad.scale(x, 2.0)], axis=1)
            else:
                y = ad.bmm(x, ad.transpose(x, (0, 2, 1)))
            return ad.total(ad.mul(y, np.resize(probe, y.shape)))

        params = {"x": x0, "g": g0, "b": b0}
        grads = ad.gradient(build, params)
        for name, arr in params.items():
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                hi, lo = {k: v.copy() for k, v in params.items()}, {k: v.copy() for k, v in params.items()}
                hi[name][idx] += 1e-6
                lo[name][idx] -= 1e-6
                f = lambda q: float(build({k: ad.Var(v) for k, v in q.items()}).value)
                num[idx] = (f(hi) - f(lo)) / 2e-6
            np.testing.assert_allclose(grads[name], num, atol=1e-7, rtol=1e-6)
