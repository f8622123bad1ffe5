"""Continuous coordinate domain and patch transforms.

Images live on the normalized domain [0,1]x[0,1]. A patch is identified by
(s, v, p): the resolution s of the implicit full image, the patch center v in
normalized units, and the fixed patch pixel resolution p. The canonical grid
spans [-0.5, 0.5]^2 with pixel-center sampling; the patch transform maps it
into the domain as (p/s)*c + v.

All functions here are pure and operate on float64 numpy arrays.
"""

from dataclasses import dataclass

import numpy as np

# Slack for floating-point containment checks on v.
_CONTAIN_EPS = 1e-9


@dataclass(frozen=True)
class PatchSpec:
    """A sub-region of the continuous image domain: full-image resolution s,
    normalized center v, and patch pixel resolution p."""

    s: int
    v: tuple[float, float]
    p: int

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"patch resolution p must be >= 1, got {self.p}")
        if self.s < self.p:
            raise ValueError(f"scale s={self.s} must be >= patch size p={self.p}")
        vx, vy = self.v
        if not (np.isfinite(vx) and np.isfinite(vy)):
            raise ValueError(f"patch center must be finite, got {self.v}")
        lo = self.half_extent
        hi = 1.0 - lo
        if not (lo - _CONTAIN_EPS <= vx <= hi + _CONTAIN_EPS
                and lo - _CONTAIN_EPS <= vy <= hi + _CONTAIN_EPS):
            raise ValueError(
                f"patch center {self.v} leaves the domain: need v in "
                f"[{lo}, {hi}]^2 for s={self.s}, p={self.p}")

    @property
    def extent(self) -> float:
        """Patch side length in normalized units."""
        return self.p / self.s

    @property
    def half_extent(self) -> float:
        return self.p / (2.0 * self.s)

    @property
    def is_global(self) -> bool:
        return self.s == self.p


def global_spec(p: int) -> PatchSpec:
    """The base-image spec: the whole domain at patch resolution."""
    return PatchSpec(s=p, v=(0.5, 0.5), p=p)


@dataclass(frozen=True)
class CoordinateGrid:
    """H x W field of 2-D coordinates; coords[i, j] = (x, y).

    frame is "canonical" for the zero-centered pre-transform grid and
    "domain" after the patch transform.
    """

    coords: np.ndarray
    frame: str

    def __post_init__(self):
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise ValueError(f"coords must be (H, W, 2), got {self.coords.shape}")
        if self.frame not in ("canonical", "domain"):
            raise ValueError(f"unknown frame {self.frame!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]


@dataclass(frozen=True)
class FourierBasis:
    """Frozen random Fourier channels: frequency rows b (K x 2), phases phi (K,)."""

    b: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        if self.b.ndim != 2 or self.b.shape[1] != 2:
            raise ValueError(f"frequency matrix must be (K, 2), got {self.b.shape}")
        if self.phi.shape != (self.b.shape[0],):
            raise ValueError("phase vector length must match frequency rows")

    @property
    def k(self) -> int:
        return self.b.shape[0]


def random_fourier_basis(k: int, sigma: float, cap: float | None = None,
                         seed: int = 0) -> FourierBasis:
    """Draw a frozen basis: rows of b isotropic Gaussian with std sigma,
    row norms clipped to cap; phases uniform in [0, 2*pi)."""
    if k < 1:
        raise ValueError(f"need k >= 1 Fourier channels, got {k}")
    rng = np.random.default_rng(seed)
    b = rng.normal(0.0, sigma, size=(k, 2))
    if cap is not None:
        norms = np.linalg.norm(b, axis=1, keepdims=True)
        scale = np.minimum(1.0, cap / np.maximum(norms, 1e-12))
        b = b * scale
    phi = rng.uniform(0.0, 2.0 * np.pi, size=k)
    return FourierBasis(b=b, phi=phi)


def make_canonical_grid(p: int) -> CoordinateGrid:
    """p x p pixel-center lattice on [-0.5, 0.5]^2: entry (i, j) is
    ((j+0.5)/p - 0.5, (i+0.5)/p - 0.5)."""
    if p < 1:
        raise ValueError(f"grid resolution must be >= 1, got {p}")
    axis = (np.arange(p, dtype=np.float64) + 0.5) / p - 0.5
    xs, ys = np.meshgrid(axis, axis)
    return CoordinateGrid(coords=np.stack([xs, ys], axis=-1), frame="canonical")


def patch_grid(spec: PatchSpec) -> CoordinateGrid:
    """Map the canonical grid into the domain: c -> (p/s) * c + v."""
    return patch_grid_with_margin(spec, 0)


def patch_grid_with_margin(spec: PatchSpec, margin: int) -> CoordinateGrid:
    """Patch grid extended by `margin` pixels per side at the same spacing.

    margin=0 is the exact patch grid (all coords in [0,1]^2); margin>0 coords
    may exceed the domain slightly and exist to feed valid convolutions.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    p = spec.p
    idx = (np.arange(-margin, p + margin, dtype=np.float64) + 0.5) / p - 0.5
    scale = spec.p / spec.s
    xs, ys = np.meshgrid(idx * scale + spec.v[0], idx * scale + spec.v[1])
    return CoordinateGrid(coords=np.stack([xs, ys], axis=-1), frame="domain")


def fourier_embed(grid: CoordinateGrid, basis: FourierBasis) -> np.ndarray:
    """sin(2*pi * b @ c + phi) per coordinate: (H, W, K) feature map."""
    if grid.frame != "domain":
        raise ValueError("fourier_embed expects a domain-frame grid")
    proj = grid.coords @ basis.b.T
    return np.sin(2.0 * np.pi * proj + basis.phi)


def normalize_scale(s: int, p: int, s_max: int) -> float:
    """Affine remap of scale to [-1, 1]: s=p -> -1, s=s_max -> +1.

    s may exceed s_max at inference; the result then exceeds 1, which is
    permitted for extrapolation.
    """
    if s_max <= p:
        raise ValueError(f"s_max={s_max} must exceed p={p}")
    if s < p:
        raise ValueError(f"scale s={s} must be >= p={p}")
    return 2.0 * (s - p) / (s_max - p) - 1.0


def cylindrical_encode(grid: CoordinateGrid) -> np.ndarray:
    """Encode x as an angle on a cylinder: x -> theta = 2*pi*(x mod 1 - 0.5),
    output (sin theta, cos theta, y) per coordinate, (H, W, 3).

    Wrapping x modulo 1 before encoding makes the result exactly 2*pi-periodic:
    theta = -pi and theta = +pi produce bit-identical triples.
    """
    x = np.mod(grid.coords[..., 0], 1.0)
    theta = 2.0 * np.pi * (x - 0.5)
    return np.stack([np.sin(theta), np.cos(theta), grid.coords[..., 1]], axis=-1)
