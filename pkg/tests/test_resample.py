import math

import numpy as np
import pytest
import torch

from scalegen.geometry import PatchSpec, global_spec
from scalegen.resample import (MaskedImage, lanczos_kernel, resample,
                               square_crop, warp_to_base)


# ---------------------------------------------------------------------------
# Independent oracle: direct 2-D convolution resampler, written from the
# definition with math.sin only (no shared code with the implementation).
# ---------------------------------------------------------------------------

def _sinc(x: float) -> float:
    if x == 0.0:
        return 1.0
    return math.sin(math.pi * x) / (math.pi * x)


def _kern(x: float, a: int) -> float:
    return _sinc(x) * _sinc(x / a) if abs(x) < a else 0.0


def oracle_resample(img: np.ndarray, out_h: int, out_w: int, a: int = 3):
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c))
    for oy in range(out_h):
        cy = (oy + 0.5) * h / out_h - 0.5
        fy = max(h / out_h, 1.0)
        for ox in range(out_w):
            cx = (ox + 0.5) * w / out_w - 0.5
            fx = max(w / out_w, 1.0)
            acc = np.zeros(c)
            wsum = 0.0
            for ky in range(math.ceil(cy - a * fy), math.floor(cy + a * fy) + 1):
                wy = _kern((ky - cy) / fy, a)
                for kx in range(math.ceil(cx - a * fx), math.floor(cx + a * fx) + 1):
                    wgt = wy * _kern((kx - cx) / fx, a)
                    acc += wgt * img[min(max(ky, 0), h - 1), min(max(kx, 0), w - 1)]
                    wsum += wgt
            out[oy, ox] = acc / wsum
    return out


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def test_kernel_peak_and_zeros():
    assert lanczos_kernel(0.0) == 1.0
    assert abs(lanczos_kernel(1.0, 3)) <= 1e-15   # sinc zero at integers
    assert lanczos_kernel(3.0, 3) == 0.0          # support boundary
    assert lanczos_kernel(-3.5, 3) == 0.0


def test_kernel_rejects_bad_support():
    with pytest.raises(ValueError):
        lanczos_kernel(0.5, 0)


def test_kernel_vectorized():
    xs = np.linspace(-4, 4, 33)
    vals = lanczos_kernel(xs, 3)
    assert vals.shape == xs.shape
    assert np.all(vals[np.abs(xs) >= 3] == 0.0)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def test_resample_constant_preserved():
    img = np.full((128, 128, 3), 0.37)
    out = resample(img, 37, 37)
    assert np.abs(out - 0.37).max() <= 1e-6


def test_resample_identity_bit_exact():
    rng = np.random.default_rng(0)
    img = rng.random((64, 64, 3))
    assert np.array_equal(resample(img, 64, 64), img)


def test_resample_rejects_bad_sizes():
    img = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        resample(img, 0, 4)
    with pytest.raises(ValueError):
        resample(img, 4, -1)


def test_resample_matches_direct_convolution_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        h, w = int(rng.integers(5, 16)), int(rng.integers(5, 16))
        oh, ow = int(rng.integers(3, 14)), int(rng.integers(3, 14))
        img = rng.random((h, w, 3))
        got = resample(img, oh, ow)
        want = oracle_resample(img, oh, ow)
        assert np.abs(got - want).max() <= 1e-6


def test_resample_ramp_downsample_vs_oracle():
    ramp = np.tile(np.linspace(0, 1, 16)[None, :, None], (16, 1, 3))
    got = resample(ramp, 16, 8)
    want = oracle_resample(ramp, 16, 8)
    assert np.abs(got - want).max() <= 1e-6


def test_resample_linearity():
    rng = np.random.default_rng(1)
    a = rng.random((20, 14, 3))
    b = rng.random((20, 14, 3))
    lhs = resample(0.3 * a + 1.7 * b, 9, 11)
    rhs = 0.3 * resample(a, 9, 11) + 1.7 * resample(b, 9, 11)
    assert np.abs(lhs - rhs).max() <= 1e-6


def test_resample_grayscale_roundtrip_shape():
    img = np.random.default_rng(2).random((10, 12))
    out = resample(img, 5, 6)
    assert out.shape == (5, 6)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------

def test_square_crop_identity_and_pixel():
    rng = np.random.default_rng(3)
    img = rng.random((6, 6, 3))
    assert np.array_equal(square_crop(img, 0, 0, 6), img)
    assert np.array_equal(square_crop(img, 2, 3, 1)[0, 0], img[2, 3])


def test_square_crop_composition():
    rng = np.random.default_rng(4)
    img = rng.random((16, 16, 3))
    once = square_crop(square_crop(img, 2, 3, 10), 1, 4, 5)
    combined = square_crop(img, 3, 7, 5)
    assert np.array_equal(once, combined)


def test_square_crop_bounds():
    img = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        square_crop(img, 5, 0, 4)
    with pytest.raises(ValueError):
        square_crop(img, -1, 0, 4)


# ---------------------------------------------------------------------------
# Warp to base frame
# ---------------------------------------------------------------------------

def test_warp_identity_full_mask():
    rng = np.random.default_rng(5)
    patch = rng.random((16, 16, 3))
    out = warp_to_base(patch, global_spec(16))
    assert isinstance(out, MaskedImage)
    assert np.array_equal(out.pixels, patch)
    assert np.array_equal(out.mask, np.ones((16, 16)))


def test_warp_half_scale_corner_block():
    rng = np.random.default_rng(6)
    p = 16
    patch = rng.random((p, p, 3))
    out = warp_to_base(patch, PatchSpec(s=2 * p, v=(0.25, 0.25), p=p))
    half = p // 2
    assert out.mask[:half, :half].min() == 1.0
    assert out.mask.sum() == half * half
    assert np.abs(out.pixels[half:]).max() == 0.0
    assert np.abs(out.pixels[:, half:]).max() == 0.0
    # the covered block is the 2x downsample of the patch
    expected = resample(patch, half, half)
    assert np.abs(out.pixels[:half, :half] - expected).max() <= 1e-9


def test_warp_mask_area_center_rule():
    p = 16
    rng = np.random.default_rng(7)
    for s in (17, 23, 32, 48, 100):
        lo = p / (2 * s)
        v = tuple(rng.uniform(lo, 1 - lo, 2))
        out = warp_to_base(np.zeros((p, p, 3)), PatchSpec(s=s, v=v, p=p))
        per_axis = p * p / s
        rows = out.mask.max(axis=1).sum()
        cols = out.mask.max(axis=0).sum()
        assert abs(rows - per_axis) <= 1.0
        assert abs(cols - per_axis) <= 1.0
        assert out.mask.sum() == rows * cols


def test_warp_linearity_and_torch_gradients():
    p = 8
    spec = PatchSpec(s=20, v=(0.4, 0.6), p=p)
    rng = np.random.default_rng(8)
    a = rng.random((p, p, 3))
    b = rng.random((p, p, 3))
    lhs = warp_to_base(0.5 * a + 2.0 * b, spec).pixels
    rhs = 0.5 * warp_to_base(a, spec).pixels + 2.0 * warp_to_base(b, spec).pixels
    assert np.abs(lhs - rhs).max() <= 1e-9

    pt = torch.rand(3, p, p, requires_grad=True)
    warped, mask = warp_to_base(pt, spec)
    warped.sum().backward()
    assert pt.grad is not None
    assert torch.isfinite(pt.grad).all()
    assert float(pt.grad.abs().sum()) > 0


def test_warp_torch_matches_numpy():
    p = 8
    spec = PatchSpec(s=20, v=(0.4, 0.6), p=p)
    rng = np.random.default_rng(9)
    patch = rng.random((p, p, 3))
    out_np = warp_to_base(patch, spec)
    pt = torch.as_tensor(patch.transpose(2, 0, 1), dtype=torch.float64)
    out_t = warp_to_base(pt, spec)
    assert np.abs(out_t.pixels.numpy().transpose(1, 2, 0) - out_np.pixels).max() <= 1e-12
    assert np.array_equal(out_t.mask.numpy(), out_np.mask)


def smooth_synthetic(size: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited test image: gradient, gaussian blobs, low-freq waves.

    Content stays well below the base-resolution Nyquist rate so the two
    resampling orders (downsample-then-warp vs direct) are comparable; any
    geometric misalignment in the warp would still show up at ~1e-2.
    """
    ax = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(ax, ax)
    c0, c1 = rng.uniform(0.15, 0.85, (2, 3))
    img = c0 + (c1 - c0) * ((u + v) / 2)[..., None]
    for _ in range(3):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        sig = rng.uniform(0.08, 0.2)
        col = rng.uniform(0, 1, 3)
        blob = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * sig * sig))
        img = img + blob[..., None] * (col - img) * 0.7
    wave = 0.12 * np.sin(2 * np.pi * (2.3 * u + 1.7 * v))
    return np.clip(img + wave[..., None], 0.0, 1.0)


def test_warp_round_trip_against_direct_path():
    # extract a patch from a synthetic HR image, warp it back, and compare to
    # directly resampling the HR image to base resolution
    rng = np.random.default_rng(10)
    hr = smooth_synthetic(128, rng)
    p = 32
    for _ in range(5):
        s = int(rng.integers(p, 129))
        scaled = resample(hr, s, s)
        top = int(rng.integers(0, s - p, endpoint=True))
        left = int(rng.integers(0, s - p, endpoint=True))
        patch = square_crop(scaled, top, left, p)
        v = ((left + p / 2) / s, (top + p / 2) / s)
        warped = warp_to_base(patch, PatchSpec(s=s, v=v, p=p))
        direct = resample(hr, p, p)
        diff = np.abs(warped.pixels - direct * warped.mask[:, :, None])
        mean_abs = diff.sum() / (3 * warped.mask.sum())
        assert mean_abs <= 1e-3


def test_warp_rejects_bad_patch_shape():
    with pytest.raises(ValueError):
        warp_to_base(np.zeros((8, 9, 3)), global_spec(8))
    with pytest.raises(ValueError):
        warp_to_base(torch.zeros(3, 8, 9), global_spec(8))
