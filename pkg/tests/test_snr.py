import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lumen.core import ImageTensor
from lumen.snr import (
    SNR_EPS,
    SNR_MAX,
    SnrAttention,
    SnrLevel,
    compute_snr_map,
    normalize_snr_map,
    snr_condition_maps,
    snr_fuse,
)


def snr_reference(img: ImageTensor, k: int) -> np.ndarray:
    """Per-pixel brute force with explicit replication padding."""
    w = np.array([0.299, 0.587, 0.114])
    gray = np.tensordot(w, img.data.astype(np.float64), axes=1)
    h, wd = gray.shape
    r = k // 2
    inv = 1.0 / (k * k)
    out = np.zeros_like(gray)
    for i in range(h):
        for j in range(wd):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), wd - 1)
                    acc += gray[ii, jj]
            smooth = acc * inv
            noise = abs(gray[i, j] - smooth)
            if smooth == 0.0 and noise == 0.0:
                out[i, j] = 0.0
            else:
                out[i, j] = min(max(smooth / max(noise, SNR_EPS), 0.0), SNR_MAX)
    return out


class TestComputeSnrMap:
    def test_impulse_example(self):
        img = np.zeros((3, 5, 5), dtype=np.float32)
        img[:, 2, 2] = 1.0
        s = compute_snr_map(ImageTensor.from_array(img), 3)
        assert s.data[2, 2] == pytest.approx((1 / 9) / (1 - 1 / 9), abs=1e-12)

    def test_matches_brute_force(self, rng):
        for trial in range(6):
            k = 3 if trial % 2 == 0 else 5
            img = ImageTensor.from_array(rng.random((3, 32, 32), dtype=np.float32))
            got = compute_snr_map(img, k).data
            np.testing.assert_allclose(got, snr_reference(img, k), atol=1e-9)

    def test_zero_image_maps_to_zero(self):
        img = ImageTensor.from_array(np.zeros((3, 8, 8), dtype=np.float32))
        assert compute_snr_map(img).data.max() == 0.0

    def test_constant_image_clamps_high(self):
        img = ImageTensor.from_array(np.full((3, 8, 8), 0.25, dtype=np.float32))
        np.testing.assert_array_equal(compute_snr_map(img).data, SNR_MAX)

    def test_values_clamped(self, rng):
        img = ImageTensor.from_array(rng.random((3, 16, 16), dtype=np.float32))
        s = compute_snr_map(img).data
        assert s.min() >= 0.0 and s.max() <= SNR_MAX

    @pytest.mark.parametrize("k", [0, 2, -3])
    def test_rejects_bad_kernel(self, k):
        img = ImageTensor.from_array(np.zeros((3, 8, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            compute_snr_map(img, k)


class TestNormalize:
    def test_minmax(self, rng):
        from lumen.core import Plane

        s = normalize_snr_map(Plane(rng.random((6, 6)) * 40))
        assert s.data.min() == 0.0 and s.data.max() == 1.0

    def test_constant_goes_to_half(self):
        from lumen.core import Plane

        s = normalize_snr_map(Plane(np.full((4, 4), 7.0)))
        np.testing.assert_array_equal(s.data, 0.5)


class TestSnrFuse:
    def test_boundary_one_selects_local(self):
        f_s = torch.randn(2, 4, 5, 5)
        f_l = torch.randn(2, 4, 5, 5)
        out = snr_fuse(f_s, f_l, torch.ones(2, 1, 5, 5))
        assert torch.equal(out, f_s * 1.0)

    def test_boundary_zero_selects_nonlocal(self):
        f_s = torch.randn(2, 4, 5, 5)
        f_l = torch.randn(2, 4, 5, 5)
        out = snr_fuse(f_s, f_l, torch.zeros(2, 1, 5, 5))
        assert torch.equal(out, f_l * 1.0)

    @given(seed=st.integers(0, 2**31), frac=st.floats(0.0, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_convex_combination_bounds(self, seed, frac):
        g = torch.Generator().manual_seed(seed)
        f_s = torch.randn(1, 3, 4, 4, generator=g)
        f_l = torch.randn(1, 3, 4, 4, generator=g)
        s = torch.full((1, 1, 4, 4), frac)
        out = snr_fuse(f_s, f_l, s)
        lo = torch.minimum(f_s, f_l)
        hi = torch.maximum(f_s, f_l)
        assert bool((out >= lo - 1e-6).all() and (out <= hi + 1e-6).all())

    def test_out_of_range_map_is_clamped(self):
        f_s = torch.ones(1, 1, 2, 2)
        f_l = torch.zeros(1, 1, 2, 2)
        out = snr_fuse(f_s, f_l, torch.full((1, 1, 2, 2), 3.5))
        assert torch.equal(out, f_s)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            snr_fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 4), torch.zeros(1, 1, 3, 3))
        with pytest.raises(ValueError):
            snr_fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4))


class TestSnrAttention:
    def _make(self, channels=8, tokens=64):
        torch.manual_seed(1)
        return SnrAttention(channels, max_tokens=tokens)

    def test_rows_are_distributions(self):
        attn = self._make()
        feat = torch.randn(2, 8, 4, 4)
        s = torch.rand(2, 1, 4, 4)
        _, weights, _ = attn(feat, s, return_weights=True)
        np.testing.assert_allclose(weights.sum(-1).detach().numpy(), 1.0, atol=1e-6)

    def test_masked_keys_get_zero_weight(self):
        attn = self._make()
        feat = torch.randn(1, 8, 3, 3)
        s = torch.ones(1, 1, 3, 3)
        s[0, 0, 0, 0] = 0.0  # below threshold: masked as key
        _, weights, mask = attn(feat, s, return_weights=True)
        assert bool(mask[0, 0])
        assert float(weights[0, :, 0].detach().abs().max()) == 0.0

    def test_single_unmasked_key_returns_its_value_projection(self):
        attn = self._make()
        feat = torch.randn(1, 8, 2, 2)
        s = torch.zeros(1, 1, 2, 2)
        s[0, 0, 1, 1] = 1.0  # only token 3 stays visible
        out = attn(feat, s)
        tokens = feat.flatten(2).transpose(1, 2)
        e = attn.attn.embed_dim
        w_v = attn.attn.in_proj_weight[2 * e :]
        b_v = attn.attn.in_proj_bias[2 * e :]
        v = tokens[0, 3] @ w_v.T + b_v
        expected = v @ attn.attn.out_proj.weight.T + attn.attn.out_proj.bias
        flat = out.flatten(2).transpose(1, 2)[0]
        for q in range(4):
            torch.testing.assert_close(flat[q], expected, rtol=1e-5, atol=1e-6)

    def test_all_masked_falls_back_to_unmasked(self):
        attn = self._make()
        feat = torch.randn(1, 8, 3, 3)
        masked = attn(feat, torch.zeros(1, 1, 3, 3))
        unmasked = attn(feat, torch.ones(1, 1, 3, 3))
        torch.testing.assert_close(masked, unmasked)

    def test_pooling_keeps_shape(self):
        attn = self._make(tokens=16)
        feat = torch.randn(1, 8, 16, 16)
        out = attn(feat, torch.rand(1, 1, 16, 16))
        assert out.shape == feat.shape


class TestSnrLevel:
    def test_fused_output_shape_and_mix(self):
        torch.manual_seed(0)
        level = SnrLevel(8)
        feat = torch.randn(1, 8, 6, 6)
        s = torch.rand(1, 1, 6, 6)
        out = level(feat, s)
        assert out.shape == feat.shape
        f_s = level.local_features(feat)
        f_l = level.nonlocal_features(feat, s)
        torch.testing.assert_close(out, snr_fuse(f_s, f_l, s))


def test_condition_maps_batch(rng):
    x = torch.from_numpy(rng.random((2, 3, 32, 32)).astype(np.float32))
    s = snr_condition_maps(x, 3)
    assert s.shape == (2, 1, 32, 32)
    assert float(s.min()) >= 0.0 and float(s.max()) <= 1.0
    # matches the single-image path
    one = compute_snr_map(ImageTensor.from_array(x[0].numpy()), 3)
    want = normalize_snr_map(one).data
    np.testing.assert_allclose(s[0, 0].numpy(), want, atol=1e-6)
