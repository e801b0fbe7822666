import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gatflfm.core import (FormatError, GridSpec, PsfStack, SensorImage, VoxelGrid, load_image,
                          load_psf, load_volume, normalize_peak, save_image, save_psf, save_volume)


def _grid(dims=(4, 4, 2)):
    return GridSpec(dims, (0.5, 0.5, 1.0), (1.0, -2.0, 3.0))


def test_save_zero_volume_sizes(tmp_path):
    vol = VoxelGrid.zeros(GridSpec((2, 2, 2), (1, 1, 1)))
    path = tmp_path / "zeros.vol"
    save_volume(vol, path)
    assert os.path.getsize(path) == 32
    header = json.loads((tmp_path / "zeros.vol.json").read_text())
    assert header["dims"] == [2, 2, 2]
    assert header["pitch_um"] == [1.0, 1.0, 1.0]
    assert "origin_um" in header


def test_volume_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    grid = GridSpec((8, 8, 4), (0.1, 0.2, 0.5), (-1.0, 0.5, 2.0))
    vol = VoxelGrid.from_grid(rng.normal(size=grid.shape).astype(np.float32), grid)
    save_volume(vol, tmp_path / "v.vol")
    back = load_volume(tmp_path / "v.vol")
    assert back.dims == (8, 8, 4)
    assert back.pitch == vol.pitch and back.origin == vol.origin
    assert np.array_equal(back.values, vol.values)
    assert back.values.tobytes() == vol.values.tobytes()


def test_payload_order_is_x_fastest(tmp_path):
    grid = GridSpec((3, 2, 2), (1, 1, 1))
    values = np.arange(12, dtype=np.float32).reshape(grid.shape)
    save_volume(VoxelGrid.from_grid(values, grid), tmp_path / "o.vol")
    raw = np.fromfile(tmp_path / "o.vol", dtype="<f4")
    # index (ix=1, iy=0, iz=0) is the second value; (0, 1, 0) the fourth
    assert raw[1] == values[0, 0, 1]
    assert raw[3] == values[0, 1, 0]
    assert raw[6] == values[1, 0, 0]


def test_nan_volume_refused(tmp_path):
    values = np.zeros((2, 2, 2))
    values[1, 0, 1] = np.nan
    vol = VoxelGrid(values, (1, 1, 1))
    with pytest.raises(ValueError, match="non-finite"):
        save_volume(vol, tmp_path / "nan.vol")
    assert not (tmp_path / "nan.vol").exists()


def test_load_volume_consistent_header(tmp_path):
    path = tmp_path / "a.vol"
    np.zeros(32, dtype="<f4").tofile(path)
    (tmp_path / "a.vol.json").write_text(json.dumps({"dims": [4, 4, 2], "pitch_um": [1, 1, 1]}))
    assert load_volume(path).dims == (4, 4, 2)


def test_load_volume_length_mismatch(tmp_path):
    path = tmp_path / "a.vol"
    path.write_bytes(b"\0" * 127)
    (tmp_path / "a.vol.json").write_text(json.dumps({"dims": [4, 4, 2], "pitch_um": [1, 1, 1]}))
    with pytest.raises(FormatError, match="expected 128 bytes.*found 127"):
        load_volume(path)


def test_load_volume_missing_sidecar(tmp_path):
    path = tmp_path / "a.vol"
    path.write_bytes(b"\0" * 128)
    with pytest.raises(FileNotFoundError, match="header not found"):
        load_volume(path)


def test_load_volume_malformed_header(tmp_path):
    path = tmp_path / "a.vol"
    path.write_bytes(b"\0" * 128)
    (tmp_path / "a.vol.json").write_text("{dims: oops")
    with pytest.raises(FormatError, match="malformed"):
        load_volume(path)


def test_load_volume_keeps_negatives(tmp_path):
    vol = VoxelGrid(-np.ones((1, 2, 2), dtype=np.float32), (1, 1, 1))
    save_volume(vol, tmp_path / "neg.vol")
    assert load_volume(tmp_path / "neg.vol").values.min() == -1


def test_image_load_clamps_and_reports(tmp_path):
    values = np.ones((3, 5), dtype=np.float32)
    values[1, 2] = -0.5
    values[0, 0] = -2.0
    save_image(SensorImage(values, 0.5), tmp_path / "m.img")
    img = load_image(tmp_path / "m.img")
    assert img.dims == (3, 5)
    assert img.values.min() == 0
    assert img.meta["clamped_pixels"] == 2
    assert img.pixel_pitch == 0.5


def test_psf_load_clamps_single_entry(tmp_path):
    kernels = np.full((2, 4, 4), 1 / 16, dtype=np.float32)
    kernels[1, 2, 2] = -0.001
    path = tmp_path / "k.psf"
    kernels.astype("<f4").tofile(path)
    (tmp_path / "k.psf.json").write_text(json.dumps(
        {"dims": [4, 4, 2], "z_planes_um": [0.0, 1.0], "normalized": False}))
    psf, n_clamped = load_psf(path)
    assert n_clamped == 1
    assert psf.kernels[1, 2, 2] == 0


def test_psf_load_wrong_slice_count(tmp_path):
    path = tmp_path / "k.psf"
    np.zeros((4, 3, 3), dtype="<f4").tofile(path)
    (tmp_path / "k.psf.json").write_text(json.dumps(
        {"dims": [3, 3, 5], "z_planes_um": [0, 1, 2, 3, 4], "normalized": False}))
    with pytest.raises(FormatError, match="expected 180 bytes"):
        load_psf(path)


def test_psf_renormalize_flag(tmp_path):
    kernels = np.full((2, 4, 4), 0.5, dtype=np.float32)
    save_psf(PsfStack(kernels, [0.0, 1.0]), tmp_path / "k.psf")
    psf, _ = load_psf(tmp_path / "k.psf", renormalize=True)
    assert psf.normalized
    np.testing.assert_allclose(psf.kernels.sum(axis=(1, 2)), 1.0, atol=1e-6)


def test_psf_invariants():
    with pytest.raises(ValueError, match="strictly increasing"):
        PsfStack(np.ones((2, 3, 3)), [1.0, 1.0])
    with pytest.raises(ValueError, match="nonnegative"):
        PsfStack(-np.ones((1, 3, 3)), [0.0])
    with pytest.raises(ValueError, match="normalized"):
        PsfStack(np.ones((1, 3, 3)), [0.0], normalized=True)


def test_normalize_peak():
    vol = VoxelGrid(np.array([[[1.0, 5.0], [2.5, 0.0]]]), (1, 1, 1))
    out = normalize_peak(vol)
    np.testing.assert_array_equal(out.values, vol.values / 5)
    np.testing.assert_array_equal(normalize_peak(out).values, out.values)
    with pytest.raises(ValueError):
        normalize_peak(VoxelGrid.zeros(GridSpec((2, 2, 2), (1, 1, 1))))


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec((0, 2, 2), (1, 1, 1))
    with pytest.raises(ValueError):
        GridSpec((2, 2, 2), (1, 0, 1))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(0, 1e6)).filter(lambda a: a.max() > 0),
       st.floats(1e-3, 1e3))
def test_normalize_peak_max_is_one(values, scale):
    out = normalize_peak(VoxelGrid(values * scale, (1, 1, 1)))
    assert out.values.max() == 1.0


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_round_trip_any_finite_volume(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "x.vol"
    vol = VoxelGrid(values, (0.3, 0.3, 1.1), (0.0, 1.0, 2.0))
    save_volume(vol, path)
    assert load_volume(path).values.tobytes() == vol.values.tobytes()


@given(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
       st.tuples(*[st.floats(0.01, 10)] * 3), st.tuples(*[st.floats(-100, 100)] * 3))
def test_coordinate_round_trip(dims, pitch, origin):
    grid = GridSpec(dims, pitch, origin)
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1).reshape(-1, 3)
    back = grid.physical_to_index(grid.index_to_physical(idx))
    assert np.array_equal(np.rint(back).astype(int), idx)
    np.testing.assert_allclose(back, idx, atol=1e-9)
