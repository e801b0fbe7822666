import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatflfm.core import GridSpec, PsfStack, SensorImage, VoxelGrid, load_psf, save_psf
from gatflfm.optics import (OpticsConfig, ProjectionOperator, back_project, forward_project,
                            spot_sigma, synthesize_psf)


def shift_zero_fill(a, dy, dx):
    out = np.zeros_like(a)
    h, w = a.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        a[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    return out


def brute_force_project(volume, kernels):
    """Nested-loop spatial convolution with the centered embedding."""
    nz, ny, nx = volume.shape
    _, h, w = kernels.shape
    cy, cx = ny // 2, nx // 2
    out = np.zeros((h, w))
    for j in range(nz):
        for qy in range(ny):
            for qx in range(nx):
                v = volume[j, qy, qx]
                if v == 0:
                    continue
                sy, sx = qy - cy, qx - cx
                # out[p] += v * H[p - s]
                ys = slice(max(sy, 0), min(h + sy, h))
                xs = slice(max(sx, 0), min(w + sx, w))
                ks = slice(max(-sy, 0), min(h - sy, h))
                kx = slice(max(-sx, 0), min(w - sx, w))
                out[ys, xs] += v * kernels[j, ks, kx]
    return out


@pytest.fixture(scope="module")
def seven_view():
    grid = GridSpec.centered((16, 16, 4), (0.5, 0.5, 1.0))
    cfg = OpticsConfig.hexagonal(spacing=6.0, parallax=0.5, base_sigma=0.6, defocus_slope=0.2)
    return grid, synthesize_psf(cfg, (48, 48), grid)


def test_single_view_centered_spot():
    grid = GridSpec.centered((8, 8, 1), (0.5, 0.5, 1.0))
    cfg = OpticsConfig(base_sigma=1.0)
    psf = synthesize_psf(cfg, (33, 33), grid)
    k = psf.kernels[0]
    assert psf.normalized
    assert abs(k.sum(dtype=np.float64) - 1) < 1e-6
    assert np.unravel_index(np.argmax(k), k.shape) == (16, 16)
    np.testing.assert_allclose(k, k[::-1, ::-1], rtol=1e-6)


def test_symmetric_depths_are_point_reflections():
    grid = GridSpec.centered((8, 8, 3), (0.5, 0.5, 10.0))
    assert list(grid.z_planes) == [-10.0, 0.0, 10.0]
    hexa = OpticsConfig.hexagonal(spacing=6.0)
    # antipodal views share a parallax vector, so negating x maps z to -z
    slopes = [[0.1, 0.05], [0.2, 0.0], [0.0, 0.2], [0.1, -0.1], [0.2, 0.0], [0.0, 0.2], [0.1, -0.1]]
    cfg = OpticsConfig(hexa.view_centers, slopes, base_sigma=0.8, defocus_slope=0.05)
    assert np.allclose(cfg.view_centers[1:4], -cfg.view_centers[4:7])
    psf = synthesize_psf(cfg, (61, 61), grid)
    # odd sensor: the center pixel is the reflection center
    reflected = psf.kernels[2][::-1, ::-1]
    assert np.abs(psf.kernels[0] - reflected).max() <= 1e-6 * reflected.max()
    assert np.abs(psf.kernels[0] - psf.kernels[2]).max() > 1e-3 * reflected.max()


def test_radial_parallax_slices_are_centrosymmetric():
    grid = GridSpec.centered((8, 8, 3), (0.5, 0.5, 10.0))
    cfg = OpticsConfig.hexagonal(spacing=6.0, parallax=0.3, base_sigma=0.8, defocus_slope=0.05)
    psf = synthesize_psf(cfg, (61, 61), grid)
    for k in psf.kernels:
        assert np.abs(k - k[::-1, ::-1]).max() <= 1e-6 * k.max()


def test_zero_defocus_keeps_width():
    cfg = OpticsConfig(base_sigma=0.7, defocus_slope=0.0)
    np.testing.assert_array_equal(spot_sigma(cfg, [-5, 0, 3]), 0.7)
    grid = GridSpec.centered((4, 4, 3), (0.25, 0.25, 2.0))
    psf = synthesize_psf(cfg, (31, 31), grid)
    np.testing.assert_allclose(psf.kernels[0], psf.kernels[1], atol=1e-7)
    np.testing.assert_allclose(psf.kernels[2], psf.kernels[1], atol=1e-7)


def test_synthesis_errors():
    grid = GridSpec.centered((4, 4, 2), (0.5, 0.5, 20.0))
    cfg = OpticsConfig(view_centers=[[0, 0], [5, 0]], parallax_slope=[[0, 0], [1.0, 0]],
                       base_sigma=0.5)
    with pytest.raises(ValueError, match="view 1 at z="):
        synthesize_psf(cfg, (32, 32), grid)
    with pytest.raises(ValueError, match="base_sigma"):
        OpticsConfig(base_sigma=0.0)
    with pytest.raises(ValueError, match="distinct"):
        OpticsConfig(view_centers=[[1, 1], [1, 1]], parallax_slope=[[0, 0], [0, 0]])


def test_psf_file_round_trip(tmp_path, seven_view):
    _, psf = seven_view
    save_psf(psf, tmp_path / "s.psf")
    back, n_clamped = load_psf(tmp_path / "s.psf")
    assert n_clamped == 0
    assert back.normalized
    assert back.kernels.tobytes() == psf.kernels.tobytes()
    np.testing.assert_array_equal(back.z_planes, psf.z_planes)


def test_sifting(seven_view):
    grid, psf = seven_view
    for (x0, y0, j) in [(8, 8, 0), (3, 12, 2), (15, 0, 3)]:
        values = np.zeros(grid.shape)
        values[j, y0, x0] = 1.0
        img = forward_project(VoxelGrid.from_grid(values, grid), psf).values
        shifted = shift_zero_fill(psf.kernels[j].astype(float), y0 - 8, x0 - 8)
        assert np.abs(img - shifted).max() <= 1e-6 * shifted.max()


def test_zero_volume(seven_view):
    grid, psf = seven_view
    img = forward_project(VoxelGrid.zeros(grid), psf)
    assert img.dims == psf.dims
    assert not np.any(img.values)
    assert not np.any(back_project(SensorImage(np.zeros(psf.dims)), psf, grid).values)


def test_linearity_and_brute_force(seven_view):
    grid, psf = seven_view
    rng = np.random.default_rng(3)
    o1, o2 = rng.random(grid.shape), rng.random(grid.shape)
    a, b = 0.7, 2.3
    op = ProjectionOperator(psf, grid.shape)
    lhs = op.apply(a * o1 + b * o2)
    rhs = a * op.apply(o1) + b * op.apply(o2)
    assert np.abs(lhs - rhs).max() <= 1e-6 * np.abs(rhs).max()
    fast = forward_project(VoxelGrid.from_grid(o1, grid), psf).values
    slow = brute_force_project(o1, psf.kernels.astype(np.float64))
    assert np.abs(fast - slow).max() <= 1e-5 * np.abs(slow).max()


def test_adjoint_identity_random(seven_view):
    grid, psf = seven_view
    rng = np.random.default_rng(4)
    op = ProjectionOperator(psf, grid.shape)
    for _ in range(20):
        o = rng.normal(size=grid.shape)
        i = rng.normal(size=psf.dims)
        lhs = np.vdot(op.apply(o), i)
        rhs = np.vdot(o, back_project(SensorImage(i), psf, grid, op).values)
        assert abs(lhs - rhs) / max(abs(lhs), 1e-12) <= 1e-5


def test_back_project_autocorrelation_peak():
    grid = GridSpec.centered((9, 9, 1), (0.5, 0.5, 1.0))
    cfg = OpticsConfig.hexagonal(spacing=4.0, parallax=0.0, base_sigma=0.6)
    psf = synthesize_psf(cfg, (40, 40), grid)
    out = back_project(SensorImage(psf.kernels[0]), psf, grid).values[0]
    assert np.unravel_index(np.argmax(out), out.shape) == (4, 4)


def test_back_project_dim_mismatch(seven_view):
    grid, psf = seven_view
    with pytest.raises(ValueError):
        back_project(SensorImage(np.zeros((10, 10))), psf, grid)


def test_nz_mismatch(seven_view):
    _, psf = seven_view
    with pytest.raises(ValueError, match="z slices"):
        forward_project(VoxelGrid.zeros(GridSpec((4, 4, 3), (0.5, 0.5, 1))), psf)


def test_energy_conservation(seven_view):
    grid, psf = seven_view
    rng = np.random.default_rng(5)
    values = np.zeros(grid.shape)
    values[:, 4:12, 4:12] = rng.random((grid.shape[0], 8, 8))
    img = forward_project(VoxelGrid.from_grid(values, grid), psf).values
    assert abs(img.sum() - values.sum()) <= 1e-4 * values.sum()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 7), st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_adjoint_property(nz, ny, nx, seed):
    rng = np.random.default_rng(seed)
    h, w = ny + rng.integers(0, 6), nx + rng.integers(0, 6)
    psf = PsfStack(rng.random((nz, h, w)), np.arange(nz, dtype=float))
    op = ProjectionOperator(psf, (nz, ny, nx))
    o = rng.normal(size=(nz, ny, nx))
    i = rng.normal(size=(h, w))
    lhs = np.vdot(op.apply(o), i)
    rhs = np.vdot(o, op.adjoint(i))
    assert abs(lhs - rhs) <= 1e-9 * (np.abs(o).sum() * np.abs(i).sum() * psf.kernels.max())
    np.testing.assert_allclose(op.apply(o), brute_force_project(o, psf.kernels), atol=1e-10)
