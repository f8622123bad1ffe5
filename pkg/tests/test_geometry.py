import numpy as np
import pytest

from scalegen.geometry import (CoordinateGrid, FourierBasis, PatchSpec,
                               cylindrical_encode, fourier_embed, global_spec,
                               make_canonical_grid, normalize_scale,
                               patch_grid, patch_grid_with_margin,
                               random_fourier_basis)


# ---------------------------------------------------------------------------
# Canonical grid
# ---------------------------------------------------------------------------

def test_canonical_grid_p1_is_origin():
    grid = make_canonical_grid(1)
    assert grid.frame == "canonical"
    assert np.array_equal(grid.coords, np.zeros((1, 1, 2)))


def test_canonical_grid_p2_corners():
    coords = make_canonical_grid(2).coords
    got = {tuple(coords[i, j]) for i in range(2) for j in range(2)}
    assert got == {(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)}


def test_canonical_grid_p256_endpoints():
    coords = make_canonical_grid(256).coords
    assert coords.min() == pytest.approx(-0.5 + 1 / 512, abs=0)
    assert coords.max() == pytest.approx(0.5 - 1 / 512, abs=0)


def test_canonical_grid_rejects_nonpositive():
    with pytest.raises(ValueError):
        make_canonical_grid(0)


def test_canonical_grid_uniform_monotone():
    coords = make_canonical_grid(9).coords
    dx = np.diff(coords[0, :, 0])
    dy = np.diff(coords[:, 0, 1])
    assert np.all(dx > 0) and np.all(dy > 0)
    assert np.allclose(dx, dx[0], atol=1e-15)
    assert np.allclose(dy, dy[0], atol=1e-15)


# ---------------------------------------------------------------------------
# Patch transform
# ---------------------------------------------------------------------------

def test_patch_spec_invariants():
    with pytest.raises(ValueError):
        PatchSpec(s=16, v=(0.5, 0.5), p=32)  # s < p
    with pytest.raises(ValueError):
        PatchSpec(s=64, v=(0.1, 0.5), p=32)  # outside containment
    PatchSpec(s=64, v=(0.25, 0.75), p=32)  # boundary is allowed


def test_patch_grid_identity_scale_centers_domain():
    spec = PatchSpec(s=8, v=(0.5, 0.5), p=8)
    coords = patch_grid(spec).coords
    # canonical (0,0) does not exist for even p; check the affine map directly
    assert coords[0, 0, 0] == pytest.approx(0.5 + (0.5 / 8 - 0.5), abs=1e-15)


def test_patch_grid_half_scale_corner():
    # s = 2p, v = (0.25, 0.25): canonical corner (-0.5,-0.5) -> (0, 0)
    spec = PatchSpec(s=16, v=(0.25, 0.25), p=8)
    corner = 0.5 * -0.5 + 0.25
    assert corner == 0.0
    coords = patch_grid(spec).coords
    # the corner of the continuous patch region is v - p/2s = 0 exactly;
    # first pixel center sits half a pixel inside it
    assert coords[0, 0, 0] == pytest.approx(0.0 + 0.5 / 16, abs=1e-15)


def test_patch_grid_global_recovers_unit_lattice_exactly():
    for p in (4, 32, 256):
        coords = patch_grid(global_spec(p)).coords
        lattice = (np.arange(p) + 0.5) / p
        assert np.abs(coords[0, :, 0] - lattice).max() <= 1e-12
        assert np.abs(coords[:, 0, 1] - lattice).max() <= 1e-12
        assert patch_grid(global_spec(p)).frame == "domain"


def test_patch_grid_outputs_inside_domain():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = 8
        s = int(rng.integers(p, 10 * p))
        lo = p / (2 * s)
        v = tuple(rng.uniform(lo, 1 - lo, 2))
        coords = patch_grid(PatchSpec(s=s, v=v, p=p)).coords
        assert coords.min() >= 0.0 and coords.max() <= 1.0


def test_patch_grid_nesting_refinement():
    # doubling s with the aligned center samples the refined lattice of the
    # parent patch region exactly
    p, s1 = 4, 8
    v1 = (0.5, 0.5)
    s2 = 2 * s1
    v2x = v1[0] - p / (2 * s1) + p / (2 * s2)
    spec2 = PatchSpec(s=s2, v=(v2x, v2x), p=p)
    left1 = v1[0] - p / (2 * s1)
    refined = left1 + (np.arange(2 * p) + 0.5) / s2
    coords2 = patch_grid(spec2).coords
    assert np.abs(coords2[0, :, 0] - refined[:p]).max() <= 1e-12
    assert np.abs(coords2[:, 0, 1] - refined[:p]).max() <= 1e-12


def test_patch_grid_with_margin_extends_spacing():
    spec = PatchSpec(s=16, v=(0.5, 0.5), p=8)
    inner = patch_grid(spec).coords
    outer = patch_grid_with_margin(spec, 2).coords
    assert outer.shape == (12, 12, 2)
    assert np.array_equal(outer[2:-2, 2:-2], inner)
    dx = np.diff(outer[0, :, 0])
    assert np.allclose(dx, dx[0], atol=1e-15)


# ---------------------------------------------------------------------------
# Fourier embedding
# ---------------------------------------------------------------------------

def _basis(rows, phases):
    return FourierBasis(b=np.asarray(rows, dtype=np.float64),
                        phi=np.asarray(phases, dtype=np.float64))


def _grid(coords):
    return CoordinateGrid(coords=np.asarray(coords, dtype=np.float64),
                          frame="domain")


def test_fourier_embed_zero_phase_zero_coordinate():
    grid = _grid([[[0.0, 0.3]], [[0.0, 0.9]]])
    feats = fourier_embed(grid, _basis([[1.0, 0.0]], [0.0]))
    assert np.abs(feats).max() <= 1e-15  # sin(0)


def test_fourier_embed_quarter_period():
    grid = _grid([[[0.25, 0.7]]])
    feats = fourier_embed(grid, _basis([[1.0, 0.0]], [0.0]))
    assert feats[0, 0, 0] == pytest.approx(1.0, abs=1e-15)  # sin(pi/2)


def test_fourier_embed_requires_domain_frame():
    with pytest.raises(ValueError):
        fourier_embed(make_canonical_grid(4), _basis([[1.0, 0.0]], [0.0]))


def test_fourier_shift_phase_covariance():
    # embedding a translated grid == embedding with phase-shifted basis
    rng = np.random.default_rng(12)
    for _ in range(10):
        basis = random_fourier_basis(16, sigma=3.0, cap=6.0,
                                     seed=int(rng.integers(1 << 30)))
        spec = PatchSpec(s=32, v=(0.5, 0.5), p=8)
        grid = patch_grid(spec)
        t = rng.uniform(-0.2, 0.2, 2)
        shifted = CoordinateGrid(coords=grid.coords + t, frame="domain")
        lhs = fourier_embed(shifted, basis)
        rhs = fourier_embed(grid, FourierBasis(
            b=basis.b, phi=basis.phi + 2 * np.pi * (basis.b @ t)))
        assert np.abs(lhs - rhs).max() <= 1e-6


def test_random_fourier_basis_seeded_and_capped():
    a = random_fourier_basis(32, sigma=10.0, cap=4.0, seed=5)
    b = random_fourier_basis(32, sigma=10.0, cap=4.0, seed=5)
    assert np.array_equal(a.b, b.b) and np.array_equal(a.phi, b.phi)
    assert np.linalg.norm(a.b, axis=1).max() <= 4.0 + 1e-12
    c = random_fourier_basis(32, sigma=10.0, cap=4.0, seed=6)
    assert not np.array_equal(a.b, c.b)


# ---------------------------------------------------------------------------
# Scale normalization
# ---------------------------------------------------------------------------

def test_normalize_scale_endpoints_exact():
    assert normalize_scale(256, 256, 1024) == -1.0
    assert normalize_scale(1024, 256, 1024) == 1.0
    assert normalize_scale(640, 256, 1024) == 0.0


def test_normalize_scale_monotone_and_extrapolates():
    vals = [normalize_scale(s, 64, 256) for s in range(64, 1025, 16)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert normalize_scale(512, 64, 256) > 1.0  # beyond s_max is permitted


def test_normalize_scale_errors():
    with pytest.raises(ValueError):
        normalize_scale(64, 64, 64)  # s_max <= p
    with pytest.raises(ValueError):
        normalize_scale(32, 64, 256)  # s < p


# ---------------------------------------------------------------------------
# Cylindrical encoding
# ---------------------------------------------------------------------------

def test_cylindrical_trivial_angles():
    grid = _grid([[[0.5, 0.5], [0.75, 0.0]]])
    enc = cylindrical_encode(grid)
    assert np.allclose(enc[0, 0], [0.0, 1.0, 0.5], atol=1e-12)  # theta=0
    assert np.allclose(enc[0, 1], [1.0, 0.0, 0.0], atol=1e-12)  # theta=pi/2


def test_cylindrical_seam_is_exact():
    # x=0 is theta=-pi, x=1 is theta=pi: identical triples, bit for bit
    lo = cylindrical_encode(_grid([[[0.0, 0.3]]]))
    hi = cylindrical_encode(_grid([[[1.0, 0.3]]]))
    assert np.array_equal(lo, hi)


def test_cylindrical_periodicity_exact():
    # dyadic x so that x+1 is itself exact and the wrap loses nothing
    rng = np.random.default_rng(3)
    x = rng.integers(0, 256, (4, 4)).astype(np.float64) / 256.0
    y = rng.uniform(0, 1, (4, 4))
    base = cylindrical_encode(_grid(np.stack([x, y], axis=-1)))
    wrapped = cylindrical_encode(_grid(np.stack([x + 1.0, y], axis=-1)))
    assert np.array_equal(base, wrapped)
