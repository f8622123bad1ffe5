"""Multi-scale evaluation: Frechet statistics, patch-FID, extrapolation
sweeps, and radial frequency spectra.

The embedder is a seeded random-convolution feature extractor at a fixed
input size; it replaces a pretrained embedding network, so absolute values
are only meaningful relative to the split-half baseline that every report
carries. Patch-FID draws real patches at random (s, v) through the training
sampler's non-global branch and synthesizes patches at the same specs with a
fresh latent per patch; generated content is never downsampled (a random
sub-crop is taken instead when patches exceed the embedder input).
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch
from PIL import Image as PILImage
from PIL import ImageDraw

from . import seeding
from .datapipe import Manifest, PatchSampler, SamplingPolicy
from .geometry import PatchSpec
from .netcore import Generator, batch_synthesizer, synthesize_patch
from .resample import resample, square_crop, to_uint8

# Eigenvalue handling in the matrix square root: magnitudes below CLAMP_TOL
# (relative) are silently clamped to zero, beyond ERROR_TOL it is an error.
CLAMP_TOL = 1e-8
ERROR_TOL = 1e-4

DEFAULT_PFID_PATCHES = 2048     # desk-scale default; full-scale runs use 50k
FULL_SCALE_PFID_PATCHES = 50_000


@dataclass(frozen=True)
class FeatureStats:
    """Sufficient statistics of an embedded sample: count, mean, and the sum
    of outer products of deviations (m2); sigma = m2 / (n - 1)."""

    n: int
    mu: np.ndarray
    m2: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return self.m2 / (self.n - 1)


def feature_stats(features: np.ndarray, chunk: int = 1024) -> FeatureStats:
    """Streaming mean/covariance over feature rows (float64 accumulation)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need a (n >= 2, F) feature array")
    stats = None
    for i in range(0, features.shape[0], chunk):
        block = features[i:i + chunk]
        n = block.shape[0]
        mu = block.mean(axis=0)
        centered = block - mu
        part = FeatureStats(n=n, mu=mu, m2=centered.T @ centered)
        stats = part if stats is None else merge_stats(stats, part)
    return stats


def merge_stats(a: FeatureStats, b: FeatureStats) -> FeatureStats:
    """Exact parallel combine: stats(A u B) == merge(stats(A), stats(B))."""
    n = a.n + b.n
    delta = b.mu - a.mu
    mu = a.mu + delta * (b.n / n)
    m2 = a.m2 + b.m2 + np.outer(delta, delta) * (a.n * b.n / n)
    return FeatureStats(n=n, mu=mu, m2=m2)


def _as_mu_sigma(x):
    if isinstance(x, FeatureStats):
        return x.mu, x.sigma
    mu, sigma = x
    return np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)


def frechet_distance(a, b) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of the matrix square root is evaluated from the eigenvalues of
    the product S1 @ S2; tiny negative (or complex) eigenvalues from roundoff
    are clamped, larger ones raise.
    """
    mu1, s1 = _as_mu_sigma(a)
    mu2, s2 = _as_mu_sigma(b)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise ValueError("feature statistics dimensions do not match")
    for name, s in (("first", s1), ("second", s2)):
        scale = max(1.0, float(np.abs(s).max()))
        if np.abs(s - s.T).max() > ERROR_TOL * scale:
            raise ValueError(f"{name} covariance is not symmetric")
        low = float(scipy.linalg.eigvalsh(s).min())
        if low < -ERROR_TOL * scale:
            raise ValueError(f"{name} covariance has eigenvalue {low}; not PSD")
    eig = scipy.linalg.eigvals(s1 @ s2)
    scale = max(1.0, float(np.abs(eig).max()))
    if np.abs(eig.imag).max() > ERROR_TOL * scale:
        raise ValueError("product eigenvalues have a large imaginary part")
    real = eig.real
    if real.min() < -ERROR_TOL * scale:
        raise ValueError(f"product eigenvalue {real.min()} too negative to clamp")
    real = np.where(real > CLAMP_TOL * scale, real, np.maximum(real, 0.0))
    trace_sqrt = float(np.sqrt(real).sum())
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * trace_sqrt)


def split_half_baseline(features: np.ndarray,
                        rng: np.random.Generator) -> float | None:
    """Frechet distance between two random halves of one feature sample: the
    finite-sample noise floor reported next to every metric value."""
    n = features.shape[0]
    if n < 4:
        return None
    perm = rng.permutation(n)
    half = n // 2
    return frechet_distance(feature_stats(features[perm[:half]]),
                            feature_stats(features[perm[half:half * 2]]))


# ---------------------------------------------------------------------------
# Embedder
# ---------------------------------------------------------------------------

class Embedder(torch.nn.Module):
    """Deterministic image -> feature map: seeded random convolutions at a
    fixed input size, global average pooling, and a random projection.

    output_scale keeps feature magnitudes small so the finite-sample Frechet
    floor at desk-scale sample counts stays well below the separations being
    measured.
    """

    def __init__(self, input_size: int = 64, dim: int = 128, seed: int = 0,
                 output_scale: float = 2.0):
        super().__init__()
        if input_size < 8 or (input_size & (input_size - 1)) != 0:
            raise ValueError("embedder input size must be a power of two >= 8")
        self.input_size = input_size
        self.dim = dim
        self.seed = seed
        self.output_scale = output_scale
        torch.manual_seed(seeding.stream_int(seed, "embedder"))
        ch, res = 32, input_size
        blocks = [torch.nn.Conv2d(3, ch, 3, 1, 1), torch.nn.LeakyReLU(0.2)]
        while res > 4:
            nxt = min(ch * 2, 256)
            blocks += [torch.nn.Conv2d(ch, nxt, 3, 2, 1), torch.nn.LeakyReLU(0.2)]
            ch, res = nxt, res // 2
        self.stack = torch.nn.Sequential(*blocks)
        self.proj = torch.nn.Linear(ch, dim)
        for mod in self.modules():
            if isinstance(mod, (torch.nn.Conv2d, torch.nn.Linear)):
                torch.nn.init.kaiming_normal_(mod.weight, a=0.2,
                                              nonlinearity="leaky_relu")
                torch.nn.init.zeros_(mod.bias)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def id(self) -> str:
        return f"randconv{self.input_size}-d{self.dim}-s{self.seed}"

    def embed(self, images, batch: int = 256) -> np.ndarray:
        """(n, H, W, 3) or list of (H, W, 3) -> (n, dim) float64 features."""
        arrs = [np.asarray(im, dtype=np.float64) for im in images]
        arrs = [im if im.shape[:2] == (self.input_size,) * 2
                else resample(im, self.input_size, self.input_size)
                for im in arrs]
        feats = []
        with torch.no_grad():
            for i in range(0, len(arrs), batch):
                x = torch.from_numpy(
                    np.stack(arrs[i:i + batch]).transpose(0, 3, 1, 2)
                ).to(torch.float32) - 0.5
                h = self.stack(x).mean(dim=(2, 3))
                feats.append(self.proj(h).numpy().astype(np.float64))
        return np.concatenate(feats, axis=0) * self.output_scale


# ---------------------------------------------------------------------------
# Patch-FID and FID@res
# ---------------------------------------------------------------------------

def _prep_patches(patches: np.ndarray, embedder: Embedder,
                  rng: np.random.Generator, downsample: bool) -> list:
    """Fit patches to the embedder input: random sub-crop by default (never
    downsampling generated detail), band-limited downsample for the ds variant.
    Patches at or below the embedder size pass through (resized up inside
    the embedder if needed)."""
    size = embedder.input_size
    p = patches.shape[1]
    if p <= size:
        return list(patches)
    if downsample:
        return [resample(img, size, size) for img in patches]
    out = []
    for img in patches:
        top = int(rng.integers(0, p - size, endpoint=True))
        left = int(rng.integers(0, p - size, endpoint=True))
        out.append(square_crop(img, top, left, size))
    return out


def pfid(manifest: Manifest, synth_fn, embedder: Embedder,
         n_patches: int = DEFAULT_PFID_PATCHES, seed: int = 0,
         policy: SamplingPolicy | None = None, downsample: bool = False,
         fixed_scale: int | None = None, config_hash: str | None = None) -> dict:
    """Frechet distance between real patches at random (s, v) and generated
    patches at the same specs, fresh latent per patch.

    fixed_scale pins s (used by extrapolation sweeps); downsample=True is the
    ds variant that downsamples patches to the embedder input instead of
    cropping. Returns a report dict with the split-half baseline.
    """
    if n_patches < 2:
        raise ValueError("n_patches must be >= 2")
    p = manifest.p
    if policy is None:
        policy = SamplingPolicy(p=p, global_prob=0.0)
    if fixed_scale is not None:
        policy = SamplingPolicy(p=p, s_lo=max(p, fixed_scale),
                                s_hi=max(p, fixed_scale), global_prob=0.0)
    sampler = PatchSampler(manifest, policy,
                           seed=seeding.stream_int(seed, "pfid", "real"))
    items = [sampler.draw(i) for i in range(n_patches)]
    reals = np.stack([it.pixels for it in items])
    specs = [it.spec for it in items]
    fakes = synth_fn(seeding.substream(seed, "pfid", "gen"), specs)

    crop_rng = seeding.substream(seed, "pfid", "crop")
    real_feats = embedder.embed(_prep_patches(reals, embedder, crop_rng, downsample))
    fake_feats = embedder.embed(_prep_patches(fakes, embedder, crop_rng, downsample))
    value = frechet_distance(feature_stats(real_feats), feature_stats(fake_feats))
    baseline = split_half_baseline(real_feats,
                                   seeding.substream(seed, "pfid", "baseline"))
    return {
        "metric": "ds-pfid" if downsample else "pfid",
        "value": value,
        "baseline": baseline,
        "n": n_patches,
        "seed": seed,
        "fixed_scale": fixed_scale,
        "embedder_id": embedder.id,
        "config_hash": config_hash,
    }


def _center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    side = min(h, w)
    return square_crop(img, (h - side) // 2, (w - side) // 2, side)


def fid_at_res(manifest: Manifest, image_fn, res: int, embedder: Embedder,
               n: int = 256, seed: int = 0,
               config_hash: str | None = None) -> dict:
    """Standard global-image Frechet distance with both sides resampled to res."""
    if n < 2:
        raise ValueError("n must be >= 2")
    from .datapipe import load_image
    rng = seeding.substream(seed, "fid", "real")
    records = manifest.records
    if not records:
        raise ValueError("manifest is empty")
    idx = (rng.permutation(len(records))[:n] if n <= len(records)
           else rng.integers(0, len(records), size=n))
    reals = [resample(_center_square(load_image(records[i].path)), res, res)
             for i in idx]
    fakes = image_fn(seeding.substream(seed, "fid", "gen"), n)
    real_feats = embedder.embed(reals)
    fake_feats = embedder.embed(list(fakes))
    value = frechet_distance(feature_stats(real_feats), feature_stats(fake_feats))
    baseline = split_half_baseline(real_feats,
                                   seeding.substream(seed, "fid", "baseline"))
    return {
        "metric": f"fid@{res}",
        "value": value,
        "baseline": baseline,
        "n": n,
        "seed": seed,
        "embedder_id": embedder.id,
        "config_hash": config_hash,
    }


# ---------------------------------------------------------------------------
# Extrapolation sweep
# ---------------------------------------------------------------------------

def extrapolation_sweep(gen: Generator, z_set: np.ndarray, s_list,
                        v: tuple[float, float] = (0.5, 0.5),
                        manifest: Manifest | None = None,
                        embedder: Embedder | None = None,
                        n_pfid: int = 256, seed: int = 0,
                        train_stats: dict | None = None,
                        out_png=None) -> dict:
    """Render a fixed-v crop at each scale for each latent; flag scales beyond
    the training statistics and attach a per-scale proxy patch-FID when a
    manifest and embedder are supplied."""
    s_list = [int(s) for s in s_list]
    if not s_list:
        raise ValueError("need at least one scale")
    if sorted(s_list) != s_list:
        raise ValueError("scales must be ascending")
    z_set = np.asarray(z_set, dtype=np.float32)
    p = gen.cfg.p

    cells, captions = [], []
    for z in z_set:
        for s in s_list:
            vv = (0.5, 0.5) if s == p else v
            cells.append(synthesize_patch(gen, z, PatchSpec(s=s, v=vv, p=p)))
            captions.append(f"s={s} v=({vv[0]:.2f},{vv[1]:.2f})")
    sheet = contact_sheet(cells, captions, cols=len(s_list))
    if out_png is not None:
        sheet.save(out_png, format="PNG")

    e_s = train_stats.get("e_s") if train_stats else None
    s_max_train = train_stats.get("s_max_train") if train_stats else None
    scales = []
    for s in s_list:
        entry = {"s": s,
                 "beyond_e_s": bool(e_s is not None and s > e_s),
                 "beyond_s_max": bool(s_max_train is not None and s > s_max_train),
                 "proxy_pfid": None}
        if manifest is not None and embedder is not None:
            eligible = [r for r in manifest.hr_records if r.s_im >= max(s, p)]
            if eligible:
                entry["proxy_pfid"] = pfid(
                    manifest, batch_synthesizer(gen), embedder,
                    n_patches=n_pfid, seed=seeding.stream_int(seed, "sweep", s),
                    fixed_scale=s)["value"]
        scales.append(entry)
    return {"metric": "extrapolation", "v": list(v), "scales": scales,
            "e_s": e_s, "s_max_train": s_max_train, "n_z": int(z_set.shape[0]),
            "seed": seed}


# ---------------------------------------------------------------------------
# Frequency spectrum
# ---------------------------------------------------------------------------

def spectrum_profile(images) -> tuple[np.ndarray, np.ndarray]:
    """Azimuthally averaged log power spectrum over a set of equal-size square
    images: returns (frequency radii in cycles/image, log10 mean power)."""
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    shapes = {a.shape[:2] for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"images must share one size, got {sorted(shapes)}")
    (h, w), = shapes
    if h != w:
        raise ValueError("images must be square")
    power = np.zeros((h, w), dtype=np.float64)
    for a in arrs:
        gray = a.mean(axis=2) if a.ndim == 3 else a
        power += np.abs(np.fft.fftshift(np.fft.fft2(gray))) ** 2
    power /= len(arrs)
    cy, cx = h // 2, w // 2
    yy, xx = np.indices((h, w))
    radius = np.round(np.hypot(yy - cy, xx - cx)).astype(int)
    n_bins = h // 2 + 1
    sums = np.bincount(radius.ravel(), weights=power.ravel(), minlength=n_bins)
    counts = np.bincount(radius.ravel(), minlength=n_bins)
    profile = sums[:n_bins] / np.maximum(counts[:n_bins], 1)
    freqs = np.arange(n_bins, dtype=np.float64)
    return freqs, np.log10(profile + 1e-20)


# ---------------------------------------------------------------------------
# Contact sheets
# ---------------------------------------------------------------------------

def contact_sheet(images, captions, cols: int, pad: int = 2,
                  caption_h: int = 12) -> PILImage.Image:
    """Grid of images with one caption strip per cell; deterministic bytes."""
    if len(images) != len(captions):
        raise ValueError("need one caption per image")
    cells = [to_uint8(np.asarray(im)) for im in images]
    cw = max(c.shape[1] for c in cells)
    ch = max(c.shape[0] for c in cells)
    rows = math.ceil(len(cells) / cols)
    sheet = PILImage.new(
        "RGB", (cols * (cw + pad) + pad, rows * (ch + caption_h + pad) + pad),
        (24, 24, 24))
    draw = ImageDraw.Draw(sheet)
    for i, (cell, cap) in enumerate(zip(cells, captions)):
        r, c = divmod(i, cols)
        x = pad + c * (cw + pad)
        y = pad + r * (ch + caption_h + pad)
        sheet.paste(PILImage.fromarray(cell), (x, y))
        draw.text((x + 1, y + ch + 1), cap, fill=(220, 220, 220))
    return sheet
