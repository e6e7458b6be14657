import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mbrec.rotary import BehaviorRotary, pair_frequencies, rotate_pairs


def rand(shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype)


class TestFrequencies:
    def test_values(self):
        f = pair_frequencies(8, base=10000.0)
        assert f.dtype == torch.float64
        expected = [1.0, 10000.0 ** -0.25, 10000.0 ** -0.5, 10000.0 ** -0.75]
        assert torch.allclose(f, torch.tensor(expected, dtype=torch.float64),
                              atol=0, rtol=1e-15)
        assert f[0] == 1.0

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            pair_frequencies(7)


class TestRotatePairs:
    def test_unit_vector_oracle(self):
        # d_k = 2, theta_0 = 1: position 1 turns (1, 0) into (cos 1, sin 1).
        x = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        out = rotate_pairs(x, torch.tensor([1.0], dtype=torch.float64),
                           pair_frequencies(2))
        assert abs(out[0, 0].item() - 0.5403023058681398) < 1e-12
        assert abs(out[0, 1].item() - 0.8414709848078965) < 1e-12

    def test_position_zero_identity(self):
        x = rand((3, 5, 8))
        out = rotate_pairs(x, torch.zeros(5, dtype=torch.float64),
                           pair_frequencies(8))
        assert torch.allclose(out, x, atol=0, rtol=0)

    def test_norm_preserved(self):
        x = rand((4, 6, 16), seed=1)
        pos = torch.arange(6, dtype=torch.float64) * 3.0
        out = rotate_pairs(x, pos, pair_frequencies(16))
        assert torch.allclose(out.norm(dim=-1), x.norm(dim=-1),
                              atol=1e-12, rtol=0)

    def test_pairwise_structure(self):
        # Pair j ignores every other pair: zeroing pair 1 leaves pair 0 as is.
        x = rand((1, 4), seed=2)
        x2 = x.clone()
        x2[..., 2:] = 0.0
        pos = torch.tensor([2.0], dtype=torch.float64)
        a = rotate_pairs(x, pos, pair_frequencies(4))
        b = rotate_pairs(x2, pos, pair_frequencies(4))
        assert torch.allclose(a[..., :2], b[..., :2], atol=0, rtol=0)

    def test_additivity(self):
        # Rotating by m then by n equals rotating by m + n.
        x = rand((2, 8), seed=3)
        f = pair_frequencies(8)
        m = torch.tensor([3.0, 5.0], dtype=torch.float64)
        n = torch.tensor([4.0, 2.0], dtype=torch.float64)
        once = rotate_pairs(rotate_pairs(x, m, f), n, f)
        direct = rotate_pairs(x, m + n, f)
        assert torch.allclose(once, direct, atol=1e-12, rtol=0)

    def test_scales_multiply_both_components(self):
        x = rand((2, 6), seed=4)
        f = pair_frequencies(6)
        pos = torch.tensor([1.0, 7.0], dtype=torch.float64)
        s = torch.tensor([[2.0, 3.0, 0.5], [1.0, 4.0, 2.0]], dtype=torch.float64)
        scaled = rotate_pairs(x, pos, f, scales=s)
        plain = rotate_pairs(x, pos, f)
        expanded = s.repeat_interleave(2, dim=-1)
        assert torch.allclose(scaled, plain * expanded, atol=0, rtol=0)

    def test_unit_scales_bit_identical(self):
        x = rand((3, 4, 8), seed=5)
        pos = torch.arange(4, dtype=torch.float64)
        f = pair_frequencies(8)
        with_ones = rotate_pairs(x, pos, f, scales=torch.ones(3, 4, 4,
                                                              dtype=torch.float64))
        without = rotate_pairs(x, pos, f)
        assert torch.equal(with_ones, without)


def scaled_logit(q, k, m, n, s_q, s_k, f):
    qr = rotate_pairs(q, m, f, scales=s_q)
    kr = rotate_pairs(k, n, f, scales=s_k)
    return (qr * kr).sum(-1)


class TestShiftInvariance:
    def test_double_precision(self):
        d_k = 8
        f = pair_frequencies(d_k)
        g = torch.Generator().manual_seed(42)
        N = 500
        q = torch.randn(N, d_k, generator=g, dtype=torch.float64)
        k = torch.randn(N, d_k, generator=g, dtype=torch.float64)
        s_q = torch.nn.functional.softplus(
            torch.randn(N, d_k // 2, generator=g, dtype=torch.float64))
        s_k = torch.nn.functional.softplus(
            torch.randn(N, d_k // 2, generator=g, dtype=torch.float64))
        m = torch.randint(0, 100, (N,), generator=g).to(torch.float64)
        n = torch.randint(0, 100, (N,), generator=g).to(torch.float64)
        t = torch.randint(0, 100, (N,), generator=g).to(torch.float64)
        base = scaled_logit(q, k, m, n, s_q, s_k, f)
        shifted = scaled_logit(q, k, m + t, n + t, s_q, s_k, f)
        assert (base - shifted).abs().max().item() <= 1e-10

    def test_single_precision(self):
        d_k = 8
        f = pair_frequencies(d_k).to(torch.float32)
        g = torch.Generator().manual_seed(1)
        q = torch.randn(200, d_k, generator=g)
        k = torch.randn(200, d_k, generator=g)
        s = torch.ones(200, d_k // 2)
        m = torch.randint(0, 30, (200,), generator=g).to(torch.float32)
        n = torch.randint(0, 30, (200,), generator=g).to(torch.float32)
        t = torch.randint(0, 30, (200,), generator=g).to(torch.float32)
        base = scaled_logit(q, k, m, n, s, s, f)
        shifted = scaled_logit(q, k, m + t, n + t, s, s, f)
        assert (base - shifted).abs().max().item() <= 1e-4

    @settings(max_examples=60, deadline=None)
    @given(shift=st.integers(0, 500), m=st.integers(0, 500), n=st.integers(0, 500),
           seed=st.integers(0, 2**16))
    def test_property(self, shift, m, n, seed):
        f = pair_frequencies(4)
        g = torch.Generator().manual_seed(seed)
        q = torch.randn(1, 4, generator=g, dtype=torch.float64)
        k = torch.randn(1, 4, generator=g, dtype=torch.float64)
        s_q = torch.rand(1, 2, generator=g, dtype=torch.float64) + 0.1
        s_k = torch.rand(1, 2, generator=g, dtype=torch.float64) + 0.1
        def pos(v):
            return torch.tensor([float(v)], dtype=torch.float64)
        base = scaled_logit(q, k, pos(m), pos(n), s_q, s_k, f)
        moved = scaled_logit(q, k, pos(m + shift), pos(n + shift), s_q, s_k, f)
        assert (base - moved).abs().max().item() <= 1e-9

    def test_constant_scale_is_c_squared_rope(self):
        # Scaling every pair of q and k by c multiplies each logit by c^2.
        d_k = 6
        f = pair_frequencies(d_k)
        q = rand((5, d_k), seed=6)
        k = rand((5, d_k), seed=7)
        m = torch.tensor([2.0] * 5, dtype=torch.float64)
        n = torch.tensor([9.0] * 5, dtype=torch.float64)
        c = 1.7
        s = torch.full((5, d_k // 2), c, dtype=torch.float64)
        scaled = scaled_logit(q, k, m, n, s, s, f)
        plain = scaled_logit(q, k, m, n, None, None, f)
        assert torch.allclose(scaled, c * c * plain, atol=0, rtol=1e-12)


class TestBehaviorRotary:
    def test_scales_positive_and_shaped(self):
        rot = BehaviorRotary(d_model=16, heads=2, d_k=8).double()
        emb = rand((3, 5, 16), seed=8)
        s = rot.behavior_scales(emb)
        assert s.shape == (3, 2, 5, 4)
        assert (s > 0).all()

    def test_forward_without_behavior_matches_rotate_pairs(self):
        rot = BehaviorRotary(d_model=16, heads=2, d_k=8).double()
        x = rand((3, 2, 5, 8), seed=9)
        pos = torch.arange(5, dtype=torch.float64)
        out = rot(x, pos)
        direct = rotate_pairs(x, pos, rot.freqs)
        assert torch.equal(out, direct)

    def test_forward_with_behavior_applies_scales(self):
        rot = BehaviorRotary(d_model=16, heads=2, d_k=8).double()
        x = rand((3, 2, 5, 8), seed=10)
        emb = rand((3, 5, 16), seed=11)
        pos = torch.arange(5, dtype=torch.float64)
        out = rot(x, pos, emb)
        manual = rotate_pairs(x, pos, rot.freqs, rot.behavior_scales(emb))
        assert torch.equal(out, manual)

    def test_same_behavior_same_scales(self):
        rot = BehaviorRotary(d_model=8, heads=1, d_k=4).double()
        row = rand((1, 1, 8), seed=12)
        emb = row.repeat(1, 6, 1)
        s = rot.behavior_scales(emb)
        assert torch.equal(s[:, :, 0], s[:, :, 5])
