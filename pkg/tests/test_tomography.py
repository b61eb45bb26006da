"""Projector, adjoint, and FBP tests.

`oracle_project` below re-derives the voxel-driven footprint arithmetic with
plain per-voxel loops, independent of the sparse-stencil implementation, and
serves as the second route for the projector checks.
"""

import math

import numpy as np
import pytest

from amdtomo.tensor_io import HyperTensor
from amdtomo.tomography import (
    ScanGeometry,
    backproject,
    fbp,
    fbp_slice,
    project,
    ramp_filter_response,
    uniform_angles,
)


def oracle_project(vol, angles, n_det_cols, pitch):
    """Brute-force reference projector: loop voxels, bilinear spread."""
    n_s, n_r, n_c = vol.shape
    sino = np.zeros((len(angles), n_s, n_det_cols))
    for vi, th in enumerate(angles):
        for i in range(n_r):
            for j in range(n_c):
                yy = (i - (n_r - 1) / 2.0) * pitch
                xx = (j - (n_c - 1) / 2.0) * pitch
                t = xx * math.cos(th) + yy * math.sin(th)
                u = t / pitch + (n_det_cols - 1) / 2.0
                b0 = math.floor(u)
                f = u - b0
                for b, w in ((b0, 1.0 - f), (b0 + 1, f)):
                    if 0 <= b < n_det_cols:
                        sino[vi, :, b] += pitch * w * vol[:, i, j]
    return sino


def small_geom(pitch=1.0, n_views=5):
    return ScanGeometry(
        angles=uniform_angles(n_views), n_det_rows=4, n_det_cols=8,
        pixel_pitch=pitch, vol_shape=(4, 8, 8),
    )


def test_project_matches_bruteforce_oracle():
    geom = small_geom(pitch=1.7)
    rng = np.random.default_rng(11)
    vol = rng.normal(size=geom.vol_shape)
    got = project(HyperTensor(vol, ("slice", "row", "col")), geom)
    want = oracle_project(vol, geom.angles, geom.n_det_cols, geom.pixel_pitch)
    np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)
    assert got.axis_labels == ("view", "row", "col")


def test_adjoint_identity_20_trials():
    geom = small_geom(pitch=0.8, n_views=7)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.normal(size=geom.vol_shape)
        y = rng.normal(size=(geom.n_views, geom.n_det_rows, geom.n_det_cols))
        ax = project(HyperTensor(x, ("slice", "row", "col")), geom)
        aty = backproject(HyperTensor(y, ("view", "row", "col")), geom)
        lhs = float(np.vdot(ax.data, y))
        rhs = float(np.vdot(x, aty.data))
        denom = max(abs(lhs), abs(rhs), 1e-30)
        assert abs(lhs - rhs) / denom < 1e-6


def test_project_zero_volume():
    geom = small_geom()
    out = project(HyperTensor(np.zeros(geom.vol_shape), ("slice", "row", "col")), geom)
    np.testing.assert_array_equal(out.data, 0.0)


def test_backproject_zero_sinogram():
    geom = small_geom()
    z = np.zeros((geom.n_views, geom.n_det_rows, geom.n_det_cols))
    out = backproject(HyperTensor(z, ("view", "row", "col")), geom)
    np.testing.assert_array_equal(out.data, 0.0)
    assert out.dims == geom.vol_shape


def test_centered_disk_chord():
    # Unit-valued disk, radius 20 voxels: central ray integrates to the
    # physical chord 2*R*pitch.
    pitch = 2.0
    r_vox = 20.0
    n = 64
    geom = ScanGeometry(
        angles=(0.0,), n_det_rows=1, n_det_cols=n,
        pixel_pitch=pitch, vol_shape=(1, n, n),
    )
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    c = (n - 1) / 2.0
    disk = (((ii - c) ** 2 + (jj - c) ** 2) <= r_vox**2).astype(float)
    sino = project(HyperTensor(disk[None], ("slice", "row", "col")), geom)
    center_val = sino.data[0, 0, n // 2 - 1]
    chord = 2.0 * r_vox * pitch
    assert abs(center_val - chord) / chord < 0.01


def test_radial_symmetry_across_views():
    # For a volume that is radially symmetric about the rotation center,
    # views whose angles are related by the lattice symmetries
    # (theta, pi/2 - theta, pi/2 + theta, pi - theta) hit identical voxel
    # configurations, so their sinogram rows must agree to rounding.
    n = 64
    th = 0.37
    orbit = (th, np.pi / 2 - th, np.pi / 2 + th, np.pi - th)
    geom = ScanGeometry(
        angles=orbit, n_det_rows=1, n_det_cols=n,
        pixel_pitch=1.0, vol_shape=(1, n, n),
    )
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    c = (n - 1) / 2.0
    r2 = (ii - c) ** 2 + (jj - c) ** 2
    blob = np.exp(-r2 / (2.0 * 5.0**2)) + (r2 <= 12.0**2)
    sino = project(HyperTensor(blob[None], ("slice", "row", "col")), geom)
    ref = sino.data[0]
    scale = np.abs(ref).max()
    for v in range(1, geom.n_views):
        assert np.abs(sino.data[v] - ref).max() <= 1e-6 * scale


def test_ramp_filter_closed_form():
    # Hand-computed DFT of the length-8 discrete ramp kernel (pitch 1):
    # h = [1/4, -1/pi^2, 0, -1/(9 pi^2), 0, -1/(9 pi^2), 0, -1/pi^2]
    #   H_0 = 1/4 - (20/9)/pi^2, H_2 = 1/4 exactly, H_4 = 1/4 + (20/9)/pi^2.
    resp = ramp_filter_response(4, 1.0)
    assert resp.size == 8 // 2 + 1
    s = (20.0 / 9.0) / np.pi**2
    assert resp[0] == pytest.approx(0.25 - s, abs=1e-12)
    assert resp[2] == pytest.approx(0.25, abs=1e-12)
    assert resp[4] == pytest.approx(0.25 + s, abs=1e-12)
    # Pitch rescales frequency: the response must scale as 1/pitch.
    resp2 = ramp_filter_response(4, 2.0)
    np.testing.assert_allclose(resp2, resp / 2.0, rtol=1e-12)
    # Padding rule: next power of two at or above 2*N.
    assert ramp_filter_response(100, 1.0).size == 256 // 2 + 1


def test_fbp_rejects_single_view():
    geom = ScanGeometry(angles=(0.0,), n_det_rows=1, n_det_cols=8,
                        vol_shape=(1, 8, 8))
    s = HyperTensor(np.ones((1, 1, 8)), ("view", "row", "col"))
    with pytest.raises(ValueError):
        fbp(s, geom)


def test_fbp_zero_sinogram():
    geom = small_geom()
    z = np.zeros((geom.n_views, geom.n_det_rows, geom.n_det_cols))
    out = fbp(HyperTensor(z, ("view", "row", "col")), geom)
    np.testing.assert_array_equal(out.data, 0.0)


def test_fbp_linearity():
    geom = small_geom(n_views=9)
    rng = np.random.default_rng(2)
    shape = (geom.n_views, geom.n_det_rows, geom.n_det_cols)
    s1 = rng.normal(size=shape)
    s2 = rng.normal(size=shape)
    a, b = 1.3, -0.7
    f1 = fbp(HyperTensor(s1, ("view", "row", "col")), geom).data
    f2 = fbp(HyperTensor(s2, ("view", "row", "col")), geom).data
    f12 = fbp(HyperTensor(a * s1 + b * s2, ("view", "row", "col")), geom).data
    scale = max(np.abs(f12).max(), 1.0)
    assert np.abs(f12 - (a * f1 + b * f2)).max() <= 1e-9 * scale


def test_fbp_unit_disk_interior():
    # Dense-view FBP of a noiseless unit disk: interior recovers 1.0.
    n = 64
    r_vox = 20.0
    geom = ScanGeometry(
        angles=uniform_angles(180), n_det_rows=1, n_det_cols=n,
        pixel_pitch=1.0, vol_shape=(1, n, n),
    )
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    c = (n - 1) / 2.0
    r2 = (ii - c) ** 2 + (jj - c) ** 2
    disk = (r2 <= r_vox**2).astype(float)
    sino = project(HyperTensor(disk[None], ("slice", "row", "col")), geom)
    rec = fbp(sino, geom)
    interior = rec.data[0][r2 <= (0.75 * r_vox) ** 2]
    assert abs(interior.mean() - 1.0) < 0.03


def test_fbp_slice_matches_fbp():
    geom = small_geom(pitch=1.2, n_views=6)
    rng = np.random.default_rng(8)
    sino = rng.normal(size=(geom.n_views, geom.n_det_rows, geom.n_det_cols))
    full = fbp(HyperTensor(sino, ("view", "row", "col")), geom)
    one = fbp_slice(sino[:, 2, :], geom)
    np.testing.assert_allclose(one, full.data[2], rtol=0, atol=1e-12)


def test_geometry_validation():
    with pytest.raises(ValueError):
        ScanGeometry(angles=(), n_det_rows=2, n_det_cols=4)
    with pytest.raises(ValueError):
        ScanGeometry(angles=(0.0,), n_det_rows=2, n_det_cols=4, pixel_pitch=0.0)
    with pytest.raises(ValueError):
        ScanGeometry(angles=(0.0,), n_det_rows=2, n_det_cols=4,
                     vol_shape=(3, 4, 4))
    with pytest.raises(ValueError):
        project(HyperTensor(np.zeros((2, 3, 3)), ("slice", "row", "col")),
                small_geom())


def test_projection_label_contract():
    geom = small_geom()
    with pytest.raises(ValueError):
        project(HyperTensor(np.zeros(geom.vol_shape), ("view", "row", "col")), geom)
    with pytest.raises(ValueError):
        backproject(
            HyperTensor(np.zeros((geom.n_views, 4, 8)), ("slice", "row", "col")),
            geom,
        )
