"""Generator and discriminator at desk scale.

The generator renders a patch from three inputs: a grid of continuous domain
coordinates (from the patch spec), the scale s of the implicit full image, and
a latent code z for that image. Coordinates pass through a frozen random
Fourier embedding; the stack is a sequence of modulated convolutions whose
per-layer style vector is the sum of two affine branches, one driven by the
latent mapping network and one by the scale mapping network. The scale branch
starts at exactly zero (zero affine weights and biases), so a freshly
initialized scale branch leaves the fixed-scale pretrained function untouched.

Synthesis layers use "valid" convolutions over a coordinate grid extended by
the stack's receptive-field margin. With 1x1 kernels the margin is zero and
every output pixel depends only on its own coordinate, which makes patch
synthesis exactly translation-consistent and tiled full-image rendering agree
with a monolithic pass; with 3x3 kernels the margin mechanism restores the
same agreement.

Checkpoints use a small versioned binary container (magic, version, JSON
header, named raw blobs) so that save -> load -> save is byte-identical.
"""

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import seeding
from .geometry import (FourierBasis, PatchSpec, fourier_embed,
                       normalize_scale, patch_grid_with_margin)

CHECKPOINT_MAGIC = b"SCGN"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; s_max anchors scale normalization."""

    p: int
    s_max: int
    d_z: int = 64
    d_w: int = 64
    fourier_channels: int = 64
    fourier_sigma: float | None = None  # None -> p/8
    fourier_cap: float | None = None    # None -> p/4
    synth_layers: int = 6
    synth_channels: int = 128
    kernel_size: int = 1
    disc_channels: int = 32

    def __post_init__(self):
        if self.p < 8 or (self.p & (self.p - 1)) != 0:
            raise ValueError(f"patch size p must be a power of two >= 8, got {self.p}")
        if self.s_max <= self.p:
            raise ValueError(f"s_max={self.s_max} must exceed p={self.p}")
        if self.kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {self.kernel_size}")

    @property
    def sigma(self) -> float:
        return self.fourier_sigma if self.fourier_sigma is not None else self.p / 8.0

    @property
    def cap(self) -> float:
        return self.fourier_cap if self.fourier_cap is not None else self.p / 4.0


class MappingNet(nn.Module):
    """Two fully-connected layers; no activation after the last, so zeroed
    weights map any input to the final bias exactly."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int):
        super().__init__()
        self.fc0 = nn.Linear(in_dim, hidden)
        self.fc1 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc1(F.leaky_relu(self.fc0(x), 0.2))


class SynthLayer(nn.Module):
    """Modulated convolution: features scaled channel-wise by the style vector
    m = (W_z w + b_z) + (W_s w_s + b_s), then a valid conv and leaky ReLU."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, d_w: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, ksize, padding=0)
        self.affine_z = nn.Linear(d_w, in_ch)
        self.affine_s = nn.Linear(d_w, in_ch)
        nn.init.ones_(self.affine_z.bias)
        nn.init.zeros_(self.affine_s.weight)
        nn.init.zeros_(self.affine_s.bias)

    def style(self, w_z, w_s):
        return self.affine_z(w_z) + self.affine_s(w_s)

    def forward(self, x, m):
        x = x * m[:, :, None, None]
        return F.leaky_relu(self.conv(x), 0.2)


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seeding.stream_int(seed, "gen-init"))
        basis = _make_basis(cfg, seed)
        self.register_buffer("fourier_b", torch.from_numpy(basis.b))
        self.register_buffer("fourier_phi", torch.from_numpy(basis.phi))
        self.map_z = MappingNet(cfg.d_z, cfg.d_w, cfg.d_w)
        self.map_s = MappingNet(1, cfg.d_w, cfg.d_w)
        chans = [cfg.fourier_channels] + [cfg.synth_channels] * cfg.synth_layers
        self.layers = nn.ModuleList([
            SynthLayer(chans[i], chans[i + 1], cfg.kernel_size, cfg.d_w)
            for i in range(cfg.synth_layers)])
        self.to_rgb = nn.Conv2d(cfg.synth_channels, 3, 1)
        self._feat_cache: dict = {}

    def load_state_dict(self, *args, **kwargs):
        # the cache depends on the Fourier buffers, which a load may replace
        self._feat_cache.clear()
        return super().load_state_dict(*args, **kwargs)

    @property
    def basis(self) -> FourierBasis:
        return FourierBasis(b=self.fourier_b.numpy(), phi=self.fourier_phi.numpy())

    @property
    def margin(self) -> int:
        """Receptive-field radius of the stack; 0 for the pointwise config."""
        return self.cfg.synth_layers * ((self.cfg.kernel_size - 1) // 2)

    def scale_branch_parameters(self):
        """Parameters of the scale-conditioning branch (frozen in phase 1)."""
        names = set(self.scale_branch_parameter_names())
        return [p for n, p in self.named_parameters() if n in names]

    def scale_branch_parameter_names(self):
        return [n for n, _ in self.named_parameters()
                if n.startswith("map_s.") or ".affine_s." in n]

    def main_parameters(self):
        names = set(self.scale_branch_parameter_names())
        return [p for n, p in self.named_parameters() if n not in names]

    # ----- forward paths ---------------------------------------------------

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Unit-normalize z onto the hypersphere, then apply the mapping MLP."""
        if z.ndim != 2 or z.shape[1] != self.cfg.d_z:
            raise ValueError(f"z must be (b, {self.cfg.d_z}), got {tuple(z.shape)}")
        zn = z / z.norm(dim=1, keepdim=True).clamp_min(1e-8)
        return self.map_z(zn)

    def modulation_params(self, z: torch.Tensor, s_bar: torch.Tensor):
        """Per-layer style vectors for latent batch z and normalized scales."""
        w_z = self.map_latent(z)
        w_s = self.map_s(s_bar.reshape(-1, 1).to(w_z.dtype))
        return [layer.style(w_z, w_s) for layer in self.layers]

    def s_bar(self, s: int) -> float:
        return normalize_scale(s, self.cfg.p, self.cfg.s_max)

    def features_for(self, spec: PatchSpec) -> torch.Tensor:
        """Fourier feature map (K, H, W) float32 for the margin-extended patch
        grid; exact-key cached (global specs recur on every training step)."""
        key = (spec.s, spec.v, spec.p)
        hit = self._feat_cache.get(key)
        if hit is not None:
            return hit
        grid = patch_grid_with_margin(spec, self.margin)
        feats = torch.from_numpy(
            np.transpose(fourier_embed(grid, self.basis), (2, 0, 1))
        ).to(torch.float32)
        if len(self._feat_cache) >= 32:
            self._feat_cache.pop(next(iter(self._feat_cache)))
        self._feat_cache[key] = feats
        return feats

    def forward(self, z: torch.Tensor, specs) -> torch.Tensor:
        """Render one patch per (z row, spec): (b, 3, p, p) in (0, 1)."""
        if len(specs) != z.shape[0]:
            raise ValueError("need one spec per latent row")
        for spec in specs:
            if spec.p != self.cfg.p:
                raise ValueError(f"spec p={spec.p} != model p={self.cfg.p}")
        feats = torch.stack([self.features_for(s) for s in specs])
        s_bar = torch.tensor([[self.s_bar(s.s)] for s in specs], dtype=torch.float32)
        return self.render(z, feats, s_bar)

    def render(self, z: torch.Tensor, feats: torch.Tensor,
               s_bar: torch.Tensor) -> torch.Tensor:
        """Core pass over precomputed feature grids of any spatial size."""
        styles = self.modulation_params(z, s_bar)
        x = feats
        for layer, m in zip(self.layers, styles):
            x = layer(x, m)
        return torch.sigmoid(self.to_rgb(x))


class Discriminator(nn.Module):
    """Fixed-resolution convolutional critic: p x p x 3 -> scalar logit."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seeding.stream_int(seed, "disc-init"))
        ch = cfg.disc_channels
        blocks = [nn.Conv2d(3, ch, 3, 1, 1), nn.LeakyReLU(0.2)]
        res = cfg.p
        while res > 4:
            nxt = min(ch * 2, 256)
            blocks += [nn.Conv2d(ch, nxt, 3, 2, 1), nn.LeakyReLU(0.2)]
            ch, res = nxt, res // 2
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(ch * 16, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.p
        if x.ndim != 4 or x.shape[1:] != (3, p, p):
            raise ValueError(f"expected (b, 3, {p}, {p}), got {tuple(x.shape)}")
        h = self.features(x)
        return self.head(h.flatten(1)).squeeze(1)


def _make_basis(cfg: ModelConfig, seed: int) -> FourierBasis:
    from .geometry import random_fourier_basis
    return random_fourier_basis(cfg.fourier_channels, cfg.sigma, cfg.cap,
                                seed=seeding.stream_int(seed, "fourier"))


def draw_latents(rng: np.random.Generator, n: int, d_z: int) -> np.ndarray:
    """Standard-normal latent rows, float32, deterministic given the stream."""
    return rng.standard_normal((n, d_z)).astype(np.float32)


# ---------------------------------------------------------------------------
# Inference conveniences (numpy in / numpy out, H x W x 3 in [0,1])
# ---------------------------------------------------------------------------

def _to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)


def synthesize_patch(gen: Generator, z: np.ndarray, spec: PatchSpec) -> np.ndarray:
    z_t = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    with torch.no_grad():
        out = gen(z_t, [spec])
    return _to_image(out[0])


def synthesize_image(gen: Generator, z: np.ndarray, out_res: int,
                     monolithic: bool = False, tile_batch: int = 16) -> np.ndarray:
    """Sample the full domain at out_res, by non-overlapping p-tiles (default)
    or in one monolithic pass over the full coordinate grid."""
    p = gen.cfg.p
    if out_res < p:
        raise ValueError(f"out_res={out_res} below patch resolution {p}")
    z_t = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    if monolithic:
        full = PatchSpec(s=out_res, v=(0.5, 0.5), p=out_res)
        grid = patch_grid_with_margin(full, gen.margin)
        feats = torch.from_numpy(np.transpose(
            fourier_embed(grid, gen.basis), (2, 0, 1))[None]).to(torch.float32)
        s_bar = torch.tensor([[gen.s_bar(out_res)]], dtype=torch.float32)
        with torch.no_grad():
            out = gen.render(z_t, feats, s_bar)
        return _to_image(out[0])

    starts = list(range(0, out_res - p + 1, p))
    if starts[-1] != out_res - p:
        starts.append(out_res - p)  # final tile overlaps; values agree anyway
    jobs = [(oy, ox) for oy in starts for ox in starts]
    canvas = np.zeros((out_res, out_res, 3), dtype=np.float64)
    for i in range(0, len(jobs), tile_batch):
        chunk = jobs[i:i + tile_batch]
        specs = [PatchSpec(s=out_res,
                           v=((ox + p / 2.0) / out_res, (oy + p / 2.0) / out_res),
                           p=p) for oy, ox in chunk]
        with torch.no_grad():
            tiles = gen(z_t.expand(len(chunk), -1), specs)
        for (oy, ox), tile in zip(chunk, tiles):
            canvas[oy:oy + p, ox:ox + p] = _to_image(tile)
    return canvas


def discriminate(disc: Discriminator, img: np.ndarray) -> float:
    p = disc.cfg.p
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (p, p, 3):
        raise ValueError(f"expected ({p}, {p}, 3) image, got {img.shape}")
    x = torch.as_tensor(img.transpose(2, 0, 1)[None], dtype=torch.float32)
    with torch.no_grad():
        return float(disc(x)[0])


def batch_synthesizer(gen: Generator, batch_size: int = 64):
    """Callable (rng, specs) -> (n, p, p, 3) drawing a fresh z per patch."""
    def synth(rng: np.random.Generator, specs) -> np.ndarray:
        out = []
        for i in range(0, len(specs), batch_size):
            chunk = specs[i:i + batch_size]
            z = torch.from_numpy(draw_latents(rng, len(chunk), gen.cfg.d_z))
            with torch.no_grad():
                imgs = gen(z, chunk)
            out.append(imgs.numpy().transpose(0, 2, 3, 1).astype(np.float64))
        return np.concatenate(out, axis=0)
    return synth


def image_synthesizer(gen: Generator, res: int):
    """Callable (rng, n) -> (n, res, res, 3) full images, fresh z each."""
    def synth(rng: np.random.Generator, n: int) -> np.ndarray:
        zs = draw_latents(rng, n, gen.cfg.d_z)
        return np.stack([synthesize_image(gen, z, res) for z in zs])
    return synth


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    gen: Generator
    disc: Discriminator
    meta: dict
    extra: dict  # named arrays outside the two networks (teacher, optimizers)


def save_checkpoint(path, gen: Generator, disc: Discriminator, meta: dict,
                    extra_arrays: dict | None = None) -> Path:
    """Write a versioned container; round-trips byte-identically."""
    meta = dict(meta)
    meta["model"] = asdict(gen.cfg)
    tensors = {}
    for key, val in gen.state_dict().items():
        tensors["g/" + key] = val.detach().cpu().numpy()
    for key, val in disc.state_dict().items():
        tensors["d/" + key] = val.detach().cpu().numpy()
    for key, val in (extra_arrays or {}).items():
        tensors["x/" + key] = np.ascontiguousarray(val)

    index, payload, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        blob = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str,
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        payload.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": index},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in payload:
            fh.write(blob)
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Parse a container into (meta, name->array). Validates magic, version,
    and exact payload length (truncation is an error, not a crash)."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a scalegen checkpoint")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, "
            f"this build supports version {CHECKPOINT_VERSION}")
    if len(data) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    body = data[12 + header_len:]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(body) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(body)} bytes, header declares {expected}")
    arrays = {}
    for t in header["tensors"]:
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])) \
            .reshape(t["shape"]).copy()
    return header["meta"], arrays


def load_checkpoint(path) -> CheckpointBundle:
    meta, arrays = read_checkpoint(path)
    cfg = ModelConfig(**meta["model"])
    gen = Generator(cfg, seed=0)
    disc = Discriminator(cfg, seed=0)
    gen.load_state_dict({k[2:]: torch.from_numpy(v)
                         for k, v in arrays.items() if k.startswith("g/")})
    disc.load_state_dict({k[2:]: torch.from_numpy(v)
                          for k, v in arrays.items() if k.startswith("d/")})
    extra = {k[2:]: v for k, v in arrays.items() if k.startswith("x/")}
    return CheckpointBundle(gen=gen, disc=disc, meta=meta, extra=extra)


def clone_frozen(gen: Generator) -> Generator:
    """Deep copy with gradients disabled (the teacher)."""
    frozen = copy.deepcopy(gen)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen
