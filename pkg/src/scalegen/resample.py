"""Band-limited Lanczos resampling and the patch-to-base warp.

Images are H x W x 3 (or H x W) arrays of reals, nominally in [0,1]; values
are only clamped at I/O boundaries, never inside the pipeline. Resampling is
separable Lanczos with per-output-pixel weight normalization and
clamp-to-edge boundary handling. All pixel lattices use the pixel-center
convention shared with `geometry`.

`warp_to_base` projects a high-resolution patch into the base image's pixel
frame as a fixed-weight linear map, so gradients can flow through it when it
is used inside a training loss. It accepts either numpy arrays (H, W, C) or
torch tensors (C, H, W).
"""

import functools
import math
from typing import NamedTuple

import numpy as np
import torch

from .geometry import PatchSpec

_EDGE_EPS = 1e-9


class MaskedImage(NamedTuple):
    """Pixels plus a binary validity mask; masked-out pixels carry value 0."""

    pixels: np.ndarray
    mask: np.ndarray


def lanczos_kernel(x, a: int = 3):
    """Lanczos window: sinc(x) * sinc(x/a) for |x| < a, else 0 (sinc(0) = 1)."""
    if a < 1:
        raise ValueError(f"kernel support a must be >= 1, got {a}")
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)
    return out if out.ndim else float(out)


@functools.lru_cache(maxsize=512)
def _axis_weights(n_in: int, n_out: int, a: int) -> np.ndarray:
    """Dense (n_out, n_in) row-normalized Lanczos weight matrix for one axis.

    Output pixel o samples input coordinate (o + 0.5) * n_in/n_out - 0.5; when
    downsampling the kernel is stretched by n_in/n_out to stay band-limited.
    Taps outside the input clamp to the edge pixel.
    """
    ratio = n_in / n_out
    f = max(ratio, 1.0)
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        center = (o + 0.5) * ratio - 0.5
        k0 = math.ceil(center - a * f)
        k1 = math.floor(center + a * f)
        taps = np.arange(k0, k1 + 1)
        vals = lanczos_kernel((taps - center) / f, a)
        np.add.at(w[o], np.clip(taps, 0, n_in - 1), vals)
        w[o] /= w[o].sum()
    w.setflags(write=False)
    return w


def resample(img: np.ndarray, out_h: int, out_w: int, a: int = 3) -> np.ndarray:
    """Separable Lanczos resample to (out_h, out_w); identity when sizes match."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        out = img.copy()
        return out[:, :, 0] if squeeze else out
    rows = _axis_weights(h, out_h, a)
    cols = _axis_weights(w, out_w, a)
    tmp = np.tensordot(rows, img, axes=(1, 0))          # (out_h, w, c)
    out = np.tensordot(tmp, cols, axes=(1, 1))          # (out_h, c, out_w)
    out = np.transpose(out, (0, 2, 1))
    return out[:, :, 0] if squeeze else out


def square_crop(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Exact pixel copy of the size x size region at (top, left)."""
    h, w = img.shape[:2]
    if size < 1:
        raise ValueError(f"crop size must be >= 1, got {size}")
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ValueError(
            f"crop ({top},{left},{size}) out of bounds for {h}x{w} image")
    return img[top:top + size, left:left + size].copy()


def _warp_axis(v: float, spec: PatchSpec, a: int):
    """Weights projecting patch pixels onto the covered base pixels, one axis.

    Returns (weights (n_valid, p), first_index). A base pixel is valid iff its
    center lies within the patch's normalized extent.
    """
    p, s = spec.p, spec.s
    half = spec.half_extent
    lo = v - half
    j0 = max(0, math.ceil(p * (v - half) - 0.5 - _EDGE_EPS))
    j1 = min(p - 1, math.floor(p * (v + half) - 0.5 + _EDGE_EPS))
    if j1 < j0:
        return np.zeros((0, p), dtype=np.float64), 0
    f = s / p
    w = np.zeros((j1 - j0 + 1, p), dtype=np.float64)
    for row, j in enumerate(range(j0, j1 + 1)):
        center = ((j + 0.5) / p - lo) * s - 0.5
        k0 = math.ceil(center - a * f)
        k1 = math.floor(center + a * f)
        taps = np.arange(k0, k1 + 1)
        vals = lanczos_kernel((taps - center) / f, a)
        np.add.at(w[row], np.clip(taps, 0, p - 1), vals)
        w[row] /= w[row].sum()
    return w, j0


def warp_to_base(patch, spec: PatchSpec, a: int = 3) -> MaskedImage:
    """Project a p x p patch into the base image frame with a validity mask.

    The patch covers the normalized region [v - p/2s, v + p/2s]^2; it is
    Lanczos-downsampled by p/s and placed at the corresponding pixel block of
    a p x p canvas. With s = p this is the identity with a full mask.
    """
    is_torch = torch.is_tensor(patch)
    p = spec.p
    if is_torch:
        if patch.shape[-2:] != (p, p):
            raise ValueError(f"patch must be (C, {p}, {p}), got {tuple(patch.shape)}")
    else:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape[:2] != (p, p):
            raise ValueError(f"patch must be ({p}, {p}, C), got {patch.shape}")

    if spec.is_global:
        if is_torch:
            mask = torch.ones((p, p), dtype=patch.dtype, device=patch.device)
            return MaskedImage(patch.clone(), mask)
        return MaskedImage(patch.copy(), np.ones((p, p), dtype=np.float64))

    wx, c0 = _warp_axis(spec.v[0], spec, a)
    wy, r0 = _warp_axis(spec.v[1], spec, a)
    ny, nx = wy.shape[0], wx.shape[0]

    if is_torch:
        wy_t = torch.as_tensor(wy, dtype=patch.dtype, device=patch.device)
        wx_t = torch.as_tensor(wx, dtype=patch.dtype, device=patch.device)
        canvas = patch.new_zeros(patch.shape[:-2] + (p, p))
        mask = torch.zeros((p, p), dtype=patch.dtype, device=patch.device)
        if ny and nx:
            block = wy_t @ patch @ wx_t.T
            canvas[..., r0:r0 + ny, c0:c0 + nx] = block
            mask[r0:r0 + ny, c0:c0 + nx] = 1.0
        return MaskedImage(canvas, mask)

    squeeze = patch.ndim == 2
    if squeeze:
        patch = patch[:, :, None]
    canvas = np.zeros((p, p, patch.shape[2]), dtype=np.float64)
    mask = np.zeros((p, p), dtype=np.float64)
    if ny and nx:
        tmp = np.tensordot(wy, patch, axes=(1, 0))        # (ny, p, c)
        block = np.tensordot(tmp, wx, axes=(1, 1))        # (ny, c, nx)
        canvas[r0:r0 + ny, c0:c0 + nx] = np.transpose(block, (0, 2, 1))
        mask[r0:r0 + ny, c0:c0 + nx] = 1.0
    if squeeze:
        canvas = canvas[:, :, 0]
    return MaskedImage(canvas, mask)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and quantize to 8-bit (the I/O boundary)."""
    return np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0
