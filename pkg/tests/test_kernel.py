"""Tensor substrate: oracle equivalence, determinism, stability."""

import numpy as np
import pytest

from x2v.errors import ConfigError, ShapeError
from x2v.kernel import (Rng, check_shape, gaussian_noise, linear, matmul,
                        multi_head_attention, qk_dots, reset_qk_dots, softmax_rows)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = Rng(1)
        a = rng.normal((3, 3))
        assert np.allclose(matmul(np.eye(3, dtype=np.float32), a), a)

    def test_annihilator(self):
        rng = Rng(2)
        a = rng.normal((4, 3))
        assert np.all(matmul(a, np.zeros((3, 2), np.float32)) == 0.0)

    def test_random_vs_triple_loop(self):
        rng = Rng(3)
        for _ in range(100):
            a, b = rng.normal((8, 8)), rng.normal((8, 8))
            got = matmul(a, b).astype(np.float64)
            want = naive_matmul(a, b)
            rel = np.linalg.norm(got - want) / np.linalg.norm(want)
            assert rel <= 1e-6

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))


class TestSoftmax:
    def test_uniform_rows(self):
        x = np.full((3, 5), 2.5, np.float32)
        assert np.allclose(softmax_rows(x), 0.2)

    def test_saturation_no_overflow(self):
        x = np.array([[0.0, 100.0]], np.float32)
        y = softmax_rows(x)
        assert np.all(np.isfinite(y))
        assert np.allclose(y, [[0.0, 1.0]], atol=1e-6)

    def test_rows_sum_to_one_and_match_extended_precision(self):
        rng = Rng(4)
        for _ in range(50):
            x = rng.normal((4, 9)) * 3.0
            y = softmax_rows(x)
            assert np.allclose(y.sum(axis=1), 1.0, atol=1e-6)
            x64 = x.astype(np.float64)
            want = np.exp(x64) / np.exp(x64).sum(axis=1, keepdims=True)
            assert np.max(np.abs(y - want)) <= 1e-6

    def test_finite_at_large_magnitude(self):
        rng = Rng(5)
        x = rng.normal((4, 8)) * 1e4
        assert np.all(np.isfinite(softmax_rows(x)))


class TestMultiHeadAttention:
    def test_one_hot_single_key(self):
        rng = Rng(6)
        q = rng.normal((1, 8))
        v = rng.normal((1, 8))
        out = multi_head_attention(q, q.copy(), v, heads=2)
        assert np.allclose(out, v, atol=1e-7)

    def test_single_head_formula(self):
        rng = Rng(7)
        q, k, v = rng.normal((3, 4)), rng.normal((5, 4)), rng.normal((5, 4))
        got = multi_head_attention(q, k, v, heads=1)
        want = softmax_rows((q @ k.T) / 2.0) @ v
        assert np.allclose(got, want, atol=1e-6)

    def naive(self, q, k, v, heads):
        m, d = q.shape
        dh = d // heads
        out = np.zeros((m, d), np.float64)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            qh, kh, vh = q[:, sl].astype(np.float64), k[:, sl].astype(np.float64), v[:, sl].astype(np.float64)
            scores = qh @ kh.T / np.sqrt(dh)
            probs = np.exp(scores - scores.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            out[:, sl] = probs @ vh
        return out

    def test_random_vs_per_head_oracle(self):
        rng = Rng(8)
        for _ in range(100):
            q, k, v = rng.normal((6, 8)), rng.normal((4, 8)), rng.normal((4, 8))
            got = multi_head_attention(q, k, v, heads=2)
            want = self.naive(q, k, v, 2)
            assert np.max(np.abs(got - want)) <= 1e-6

    def test_indivisible_heads_rejected(self):
        q = np.zeros((2, 6), np.float32)
        with pytest.raises(ConfigError):
            multi_head_attention(q, q, q, heads=4)

    def test_qk_dot_counter(self):
        rng = Rng(9)
        q, k, v = rng.normal((6, 8)), rng.normal((4, 8)), rng.normal((4, 8))
        reset_qk_dots()
        multi_head_attention(q, k, v, heads=2)
        assert qk_dots() == 2 * 6 * 4


class TestLinear:
    def test_identity_weight(self):
        rng = Rng(10)
        x = rng.normal((4, 5))
        assert np.allclose(linear(x, np.eye(5, dtype=np.float32)), x)

    def test_zero_weight_with_bias(self):
        rng = Rng(11)
        x = rng.normal((4, 5))
        b = rng.normal((3,))
        out = linear(x, np.zeros((5, 3), np.float32), b)
        assert np.allclose(out, np.tile(b, (4, 1)))

    def test_vs_matmul_plus_add(self):
        rng = Rng(12)
        x, w, b = rng.normal((6, 5)), rng.normal((5, 4)), rng.normal((4,))
        got = linear(x, w, b)
        want = matmul(x, w) + b
        assert np.max(np.abs(got - want)) <= 1e-7

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            linear(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))


class TestRng:
    def test_fixed_seed_reproduces(self):
        assert np.array_equal(gaussian_noise((3, 4), Rng(42)), gaussian_noise((3, 4), Rng(42)))

    def test_seeds_differ(self):
        assert not np.array_equal(gaussian_noise((3, 4), Rng(1)), gaussian_noise((3, 4), Rng(2)))

    def test_moments(self):
        z = Rng(123).normal((1000, 1000))
        assert abs(float(z.mean())) <= 0.01
        assert abs(float(z.var()) - 1.0) <= 0.02

    def test_state_resume(self):
        a = Rng(7)
        a.normal((4,))
        state = a.state()
        b = Rng(*state)
        assert np.array_equal(a.normal((5,)), b.normal((5,)))

    def test_call_sequence_determinism(self):
        a, b = Rng(9), Rng(9)
        assert a.uniform() == b.uniform()
        assert a.integers(0, 100) == b.integers(0, 100)
        assert np.array_equal(a.normal((2, 2)), b.normal((2, 2)))

    def test_choice_weighted_law(self):
        rng = Rng(13)
        counts = np.zeros(3)
        for _ in range(10000):
            counts[rng.choice_weighted([1.0, 4.0, 9.0])] += 1
        freq = counts / counts.sum()
        assert np.allclose(freq, [1 / 14, 4 / 14, 9 / 14], atol=0.02)

    def test_choice_weighted_zero_fallback_uniform(self):
        rng = Rng(14)
        counts = np.zeros(3)
        for _ in range(3000):
            counts[rng.choice_weighted([0.0, 0.0, 0.0])] += 1
        assert np.allclose(counts / counts.sum(), 1 / 3, atol=0.05)

    def test_spawn_independent_and_deterministic(self):
        a, b = Rng(5), Rng(5)
        ca, cb = a.spawn(), b.spawn()
        assert ca.seed == cb.seed
        assert not np.array_equal(ca.normal((8,)), a.normal((8,)))


class TestShape:
    def test_rank_bounds(self):
        with pytest.raises(ShapeError):
            check_shape((3,))
        with pytest.raises(ShapeError):
            check_shape((1, 2, 3, 4, 5))
        with pytest.raises(ShapeError):
            check_shape((0, 2))
        assert check_shape([2, 3, 4]) == (2, 3, 4)
