"""Variable-resolution dataset ingestion and the stochastic patch sampler.

Images are kept at their native resolution; a manifest (JSON-lines) records
id, path, width, height and an LR/HR split tag per image. Training draws
follow one policy: with probability `global_prob` the global view (s = p,
v = (0.5, 0.5)) of a random record resized to p; otherwise an HR record is
square-cropped, Lanczos-downsampled to a random scale s, and a random p x p
crop is taken, recording its center v. Synthetic-side specs are drawn from
the same policy so the real and fake (s, v) marginals agree by construction.

Every draw is addressable as (seed, worker, index) through `PatchSampler`.
"""

import collections
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import seeding
from .geometry import PatchSpec, global_spec
from .resample import from_uint8, resample, square_crop, to_uint8

_IMAGE_EXTS = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class ImageRecord:
    """One dataset entry at its native resolution."""

    id: str
    path: Path
    width: int
    height: int
    split: str  # "LR" or "HR"

    @property
    def s_im(self) -> int:
        return min(self.width, self.height)


@dataclass
class Manifest:
    """Immutable-after-ingest record list plus the model patch size p."""

    records: list
    p: int
    skipped: int = 0

    def __post_init__(self):
        for rec in self.hr_records:
            if rec.s_im < self.p:
                raise ValueError(
                    f"HR record {rec.id} has s_im={rec.s_im} < p={self.p}")

    @property
    def hr_records(self) -> list:
        return [r for r in self.records if r.split == "HR"]

    @property
    def lr_records(self) -> list:
        return [r for r in self.records if r.split == "LR"]

    def eligible_hr(self, policy: "SamplingPolicy") -> list:
        """HR records whose native size admits the policy's scale range."""
        lo = policy.effective_s_lo
        return [r for r in self.hr_records
                if min(r.s_im, policy.effective_s_hi(r.s_im)) >= lo]

    def hr_sizes(self, policy: "SamplingPolicy") -> list:
        return [r.s_im for r in self.eligible_hr(policy)]

    def save(self, path) -> Path:
        path = Path(path)
        base = path.parent
        lines = []
        for rec in self.records:
            rel = Path(rec.path).resolve()
            try:
                rel = rel.relative_to(base.resolve())
            except ValueError:
                pass
            lines.append(json.dumps(
                {"id": rec.id, "path": rel.as_posix(),
                 "width": rec.width, "height": rec.height, "split": rec.split},
                sort_keys=True))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path, p: int) -> "Manifest":
        path = Path(path)
        base = path.parent
        records = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            rec_path = Path(d["path"])
            if not rec_path.is_absolute():
                rec_path = base / rec_path
            records.append(ImageRecord(
                id=d["id"], path=rec_path, width=int(d["width"]),
                height=int(d["height"]), split=d["split"]))
        return cls(records=records, p=p)


@dataclass(frozen=True)
class SamplingPolicy:
    """Scale/center sampling policy shared by the real and synthetic sides.

    s is drawn uniformly on [max(p, s_lo), min(s_im, s_hi)]; s_hi=None means
    unbounded (limited per record by its native size).
    """

    p: int
    s_lo: int | None = None
    s_hi: int | None = None
    global_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.global_prob <= 1.0:
            raise ValueError(f"global_prob must be in [0,1], got {self.global_prob}")
        if self.s_lo is not None and self.s_lo < self.p:
            raise ValueError(f"s_lo={self.s_lo} below patch size p={self.p}")

    @property
    def effective_s_lo(self) -> int:
        return max(self.p, self.s_lo or self.p)

    def effective_s_hi(self, s_im: int) -> int:
        return min(s_im, self.s_hi) if self.s_hi is not None else s_im


@dataclass(frozen=True)
class PatchBatchItem:
    """A real patch with the extraction parameters that reproduce it."""

    pixels: np.ndarray  # (p, p, 3) float64 in [0,1]
    spec: PatchSpec
    source_id: str
    square_offset: int  # crop offset along the long axis of the native image
    crop: tuple[int, int]  # (top, left) in the s-resolution frame


class ImageCache:
    """Small LRU cache of decoded images and precomputed global views."""

    def __init__(self, max_items: int = 256):
        self._data = collections.OrderedDict()
        self.max_items = max_items

    def _get(self, key, builder):
        if key in self._data:
            self._data.move_to_end(key)
            return self._data[key]
        value = builder()
        self._data[key] = value
        if len(self._data) > self.max_items:
            self._data.popitem(last=False)
        return value

    def load(self, record: ImageRecord) -> np.ndarray:
        return self._get(("img", record.id), lambda: load_image(record.path))

    def global_view(self, record: ImageRecord, offset: int, p: int) -> np.ndarray:
        def build():
            img = self.load(record)
            return resample(_native_square(img, offset), p, p)
        return self._get(("global", record.id, offset, p), build)


def load_image(path) -> np.ndarray:
    """Decode PNG/JPEG to (H, W, 3) float64 in [0,1]."""
    with PILImage.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_image(path, img: np.ndarray) -> Path:
    path = Path(path)
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")
    return path


def _native_square(img: np.ndarray, offset: int) -> np.ndarray:
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (offset, 0) if h > w else (0, offset)
    return square_crop(img, top, left, side)


def _draw_square_offset(rng: np.random.Generator, record: ImageRecord) -> int:
    slack = abs(record.height - record.width)
    return int(rng.integers(0, slack, endpoint=True)) if slack else 0


def _draw_scale_center(rng: np.random.Generator, s_im: int,
                       policy: SamplingPolicy):
    p = policy.p
    s_lo = policy.effective_s_lo
    s_hi = policy.effective_s_hi(s_im)
    if s_hi < s_lo:
        raise ValueError(f"record size {s_im} cannot host scales >= {s_lo}")
    s = int(rng.integers(s_lo, s_hi, endpoint=True))
    top = int(rng.integers(0, s - p, endpoint=True))
    left = int(rng.integers(0, s - p, endpoint=True))
    v = ((left + p / 2.0) / s, (top + p / 2.0) / s)
    return s, top, left, v


def sample_real_patch(manifest: Manifest, rng: np.random.Generator,
                      policy: SamplingPolicy,
                      cache: ImageCache | None = None) -> PatchBatchItem:
    """One draw of the mixed global/patch policy, with pixels."""
    if not manifest.records:
        raise ValueError("manifest is empty")
    if rng.random() < policy.global_prob:
        return sample_global_view(manifest, rng, policy, cache)
    eligible = manifest.eligible_hr(policy)
    if not eligible:
        raise ValueError("non-global draw requested but HR subset is empty "
                         "or admits no scale in the policy range")
    record = eligible[int(rng.integers(len(eligible)))]
    offset = _draw_square_offset(rng, record)
    s, top, left, v = _draw_scale_center(rng, record.s_im, policy)
    cache = cache or ImageCache()
    img = cache.load(record)
    sq = _native_square(img, offset)
    scaled = resample(sq, s, s)
    pixels = square_crop(scaled, top, left, policy.p)
    return PatchBatchItem(pixels=pixels, spec=PatchSpec(s=s, v=v, p=policy.p),
                          source_id=record.id, square_offset=offset,
                          crop=(top, left))


def sample_global_view(manifest: Manifest, rng: np.random.Generator,
                       policy: SamplingPolicy,
                       cache: ImageCache | None = None) -> PatchBatchItem:
    """Global-scale draw: random record from LR u HR, resized to p."""
    if not manifest.records:
        raise ValueError("manifest is empty")
    record = manifest.records[int(rng.integers(len(manifest.records)))]
    offset = _draw_square_offset(rng, record)
    cache = cache or ImageCache()
    pixels = cache.global_view(record, offset, policy.p)
    return PatchBatchItem(pixels=pixels.copy(), spec=global_spec(policy.p),
                          source_id=record.id, square_offset=offset,
                          crop=(0, 0))


def sample_fake_spec(rng: np.random.Generator, policy: SamplingPolicy,
                     hr_sizes) -> PatchSpec:
    """Synthetic-side (s, v) draw mirroring the real-side policy exactly."""
    if rng.random() < policy.global_prob:
        return global_spec(policy.p)
    if not len(hr_sizes):
        raise ValueError("non-global draw requested but no HR sizes available")
    s_im = int(hr_sizes[int(rng.integers(len(hr_sizes)))])
    s, _, _, v = _draw_scale_center(rng, s_im, policy)
    return PatchSpec(s=s, v=v, p=policy.p)


class PatchSampler:
    """Indexed sampler: every item is a pure function of (seed, worker, index)."""

    def __init__(self, manifest: Manifest, policy: SamplingPolicy,
                 seed: int, worker: int = 0, cache: ImageCache | None = None):
        self.manifest = manifest
        self.policy = policy
        self.seed = seed
        self.worker = worker
        self.cache = cache or ImageCache()
        self._hr_sizes = manifest.hr_sizes(policy)

    def _rng(self, index: int) -> np.random.Generator:
        return seeding.substream(self.seed, "item", self.worker, index)

    def draw(self, index: int) -> PatchBatchItem:
        return sample_real_patch(self.manifest, self._rng(index), self.policy,
                                 self.cache)

    def draw_global(self, index: int) -> PatchBatchItem:
        return sample_global_view(self.manifest, self._rng(index), self.policy,
                                  self.cache)

    def draw_spec(self, index: int) -> PatchSpec:
        """Spec-only draw with the same (s, v) law as draw(index)."""
        return sample_fake_spec(self._rng(index), self.policy, self._hr_sizes)


def ingest(directory, p: int, hr_threshold: int | None = None,
           out_manifest=None) -> Manifest:
    """Scan a directory of images into a manifest, tagging LR/HR by size.

    A record is HR iff min(width, height) >= max(hr_threshold, p); the default
    threshold p+1 marks anything strictly larger than the patch size as HR.
    Undecodable files are skipped and counted. Ordering is sorted by path, so
    re-running on an unchanged directory reproduces the manifest byte for byte.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"not a directory: {directory}")
    files = sorted(f for f in directory.rglob("*")
                   if f.is_file() and f.suffix.lower() in _IMAGE_EXTS)
    threshold = max(hr_threshold if hr_threshold is not None else p + 1, p)
    records, skipped = [], 0
    for f in files:
        try:
            with PILImage.open(f) as im:
                im.load()
                width, height = im.size
        except Exception:
            skipped += 1
            continue
        split = "HR" if min(width, height) >= threshold else "LR"
        records.append(ImageRecord(
            id=f.relative_to(directory).as_posix(), path=f,
            width=width, height=height, split=split))
    if not records:
        raise ValueError(f"no decodable images under {directory} "
                         f"({skipped} skipped)")
    manifest = Manifest(records=records, p=p, skipped=skipped)
    manifest.save(out_manifest if out_manifest is not None
                  else directory / "manifest.jsonl")
    return manifest


def dataset_stats(manifest: Manifest, policy: SamplingPolicy,
                  n_draws: int, seed: int = 0) -> dict:
    """Counts, native-resolution histogram, HR range and Monte-Carlo E[s]."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    hr = manifest.hr_records
    sizes = sorted(r.s_im for r in manifest.records)
    counts = collections.Counter(sizes)
    hr_sizes_all = sorted(r.s_im for r in hr)
    stats = {
        "n_records": len(manifest.records),
        "n_lr": len(manifest.lr_records),
        "n_hr": len(hr),
        "resolution_counts": {int(k): int(v) for k, v in sorted(counts.items())},
        "hr_min": int(hr_sizes_all[0]) if hr else None,
        "hr_median": float(np.median(hr_sizes_all)) if hr else None,
        "hr_max": int(hr_sizes_all[-1]) if hr else None,
    }
    eligible_sizes = manifest.hr_sizes(policy)
    if not eligible_sizes:
        stats["e_s"] = float(policy.p)  # only global draws are possible
        return stats
    rng = seeding.substream(seed, "dataset-stats")
    drawn = [sample_fake_spec(rng, policy, eligible_sizes).s
             for _ in range(n_draws)]
    stats["e_s"] = float(np.mean(drawn))
    return stats


# ---------------------------------------------------------------------------
# Procedural test corpus
# ---------------------------------------------------------------------------

def render_procedural(size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic image: gradient background, optional checker texture,
    a few anti-aliased disks/rings. Edge widths scale with 1/size, so higher
    native resolutions genuinely carry more high-frequency detail."""
    ax = (np.arange(size, dtype=np.float64) + 0.5) / size
    u, v = np.meshgrid(ax, ax)
    edge = 1.5 / size

    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    ang = rng.uniform(0.0, 2.0 * np.pi)
    t = np.cos(ang) * u + np.sin(ang) * v
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0 + (c1 - c0) * t[..., None]

    if rng.random() < 0.85:
        freq = int(rng.integers(4, 13))
        kappa = max(4.0 * freq * edge, 1e-4)
        pat = np.tanh(np.sin(2 * np.pi * freq * u)
                      * np.sin(2 * np.pi * freq * v) / kappa)
        ca, cb = rng.uniform(0.05, 0.95, size=(2, 3))
        checker = ca + (cb - ca) * (0.5 * (pat + 1.0))[..., None]
        x0, x1 = np.sort(rng.uniform(0.0, 1.0, 2))
        y0, y1 = np.sort(rng.uniform(0.0, 1.0, 2))
        x1, y1 = min(1.0, x0 + max(x1 - x0, 0.35)), min(1.0, y0 + max(y1 - y0, 0.35))
        box = (_smooth_gate(u - x0, edge) * _smooth_gate(x1 - u, edge)
               * _smooth_gate(v - y0, edge) * _smooth_gate(y1 - v, edge))
        alpha = (box * rng.uniform(0.55, 0.95))[..., None]
        img = img * (1 - alpha) + checker * alpha

    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0.15, 0.85, 2)
        rad = rng.uniform(0.08, 0.3)
        col = rng.uniform(0.0, 1.0, 3)
        d = np.hypot(u - cx, v - cy)
        if rng.random() < 0.3:
            alpha = np.exp(-((d - rad) / (3.0 * edge)) ** 2)[..., None]
        else:
            alpha = _smooth_gate(rad - d, edge)[..., None]
        img = img * (1 - alpha) + col * alpha

    # fine stripe texture: detail that only high native resolutions resolve
    if rng.random() < 0.9:
        freq = rng.uniform(12.0, 32.0)
        ang = rng.uniform(0.0, np.pi)
        kappa = max(3.0 * freq * edge, 1e-4)
        stripes = np.tanh(np.sin(2 * np.pi * freq
                                 * (np.cos(ang) * u + np.sin(ang) * v)) / kappa)
        gx, gy = rng.uniform(0.2, 0.8, 2)
        region = _smooth_gate((u - gx) * np.cos(ang) - (v - gy) * np.sin(ang),
                              0.15)
        amp = rng.uniform(0.2, 0.4)
        img = img + (amp * region * stripes)[..., None] * rng.uniform(0.5, 1.0, 3)

    return np.clip(img, 0.0, 1.0)


def _smooth_gate(x: np.ndarray, edge: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x / edge, -40.0, 40.0)))


def generate_corpus(out_dir, count: int = 64,
                    sizes=(64, 96, 128, 192, 256), seed: int = 0) -> list:
    """Write a multi-resolution procedural corpus; returns the file paths."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not sizes:
        raise ValueError("need at least one size")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        size = int(sizes[i % len(sizes)])
        rng = seeding.substream(seed, "corpus", i)
        img = render_procedural(size, rng)
        paths.append(save_image(out_dir / f"img-{i:04d}-{size}.png", img))
    return paths
