"""Implicit tube blending, voxelization and surface export."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from vesselmend.grid import Volume, VolumeKind, connected_components
from vesselmend.ies import (
    PspsBasis,
    build_tube_model,
    implicit_coords,
    implicit_value,
    merge,
    psps_basis,
    voxelize,
    export_stl,
)
from vesselmend.lumen import Contour, ContourStation, CrossSection
from vesselmend.topometrics import dice


def _circle_contour(r=4.0, n=24):
    angles = 2.0 * np.pi * np.arange(n) / n
    pts = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
    return Contour(points=pts, radii=np.full(n, r), n=n)


def _station(t, x, r=4.0, size=(33, 33), pixel_spacing=1.0):
    cs = CrossSection(
        center=np.array([x, 16.0, 16.0]),
        tangent=np.array([1.0, 0.0, 0.0]),
        normal=np.array([0.0, 1.0, 0.0]),
        binormal=np.array([0.0, 0.0, 1.0]),
        size=size,
        pixel_spacing=pixel_spacing,
        pixels=np.zeros(size),
    )
    return ContourStation(t=t, section=cs, contour=_circle_contour(r))


def _straight_model(xs=(6.0, 12.0, 18.0, 24.0), r=4.0):
    stations = [_station(float(x - xs[0]), x, r=r) for x in xs]
    return build_tube_model(stations, (1.0, 1.0, 1.0))


# -- blending basis -----------------------------------------------------------


def test_psps_partition_of_unity():
    rng = np.random.default_rng(3)
    for trial in range(10):
        m = int(rng.integers(2, 9))
        sts = np.sort(rng.random(m))
        sts = (sts - sts[0]) / max(sts[-1] - sts[0], 1e-9)
        basis = psps_basis(sts)
        t = rng.random(200)
        w = basis.weights(t)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w >= 0.0)


def test_psps_own_station_dominates():
    basis = psps_basis(np.array([0.0, 0.25, 0.5, 0.75, 1.0]))
    w = basis.weights(np.array([0.0, 0.25, 0.5, 0.75, 1.0]))
    assert np.allclose(np.argmax(w, axis=1), np.arange(5))
    # exactly at a station the bump peaks at 1 before normalization
    assert w[2, 2] > 0.6


def test_psps_compact_support():
    basis = PspsBasis(stations=np.array([0.0, 1.0]), support_radius=0.3)
    w = basis.weights(np.array([0.5]))
    # halfway point is beyond both supports: a zero row, not a renormalized one
    assert np.allclose(w, 0.0)


def test_psps_validation():
    with pytest.raises(ValueError):
        PspsBasis(stations=np.array([0.5, 0.2]), support_radius=0.5)
    with pytest.raises(ValueError):
        PspsBasis(stations=np.array([0.0, 1.2]), support_radius=0.5)
    with pytest.raises(ValueError):
        PspsBasis(stations=np.array([]), support_radius=0.5)
    with pytest.raises(ValueError):
        PspsBasis(stations=np.array([0.0, 1.0]), support_radius=0.0)


# -- tube model ---------------------------------------------------------------


def test_build_tube_model_needs_two_stations():
    with pytest.raises(ValueError):
        build_tube_model([_station(0.0, 6.0)], (1, 1, 1))


def test_implicit_value_signs_on_straight_tube():
    model = _straight_model(r=4.0)
    # on-axis mid-tube: deep inside
    assert implicit_value(model, (15.0, 16.0, 16.0)) > 2.0
    # near the wall: small magnitude
    assert abs(implicit_value(model, (15.0, 20.0, 16.0))) < 1.5
    # radially outside
    assert implicit_value(model, (15.0, 26.0, 16.0)) < -3.0
    # axially far past the cap: outside by sentinel
    assert implicit_value(model, (60.0, 16.0, 16.0)) < -100.0


def test_implicit_value_approximates_radial_sdf():
    model = _straight_model(r=4.0)
    for rho in (0.0, 1.0, 2.0, 3.0, 5.0, 7.0):
        got = implicit_value(model, (15.0, 16.0 + rho, 16.0))
        assert got == pytest.approx(4.0 - rho, abs=0.8)


def test_implicit_coords_projection():
    model = _straight_model()
    t, u, v = implicit_coords(model, (15.0, 18.5, 16.0))
    assert t == pytest.approx(9.0)  # arc from first station at x=6
    assert u == pytest.approx(2.5)
    assert v == pytest.approx(0.0)
    assert implicit_coords(model, (80.0, 16.0, 16.0)) is None


def test_voxelize_round_trip_against_analytic_tube():
    model = _straight_model(r=4.0)
    dims = (32, 33, 33)
    got = voxelize(model, dims, (1.0, 1.0, 1.0))
    xx, yy, zz = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    # the tube runs cap_margin past the end stations by design
    cap = model.cap_margin
    inside = (
        ((yy - 16.0) ** 2 + (zz - 16.0) ** 2 <= 4.0**2)
        & (xx >= 6 - cap)
        & (xx <= 24 + cap)
    )
    want = Volume(dims, (1.0, 1.0, 1.0), inside.astype(float), VolumeKind.BINARY_MASK)
    assert dice(got, want) > 0.97
    assert connected_components(got).count == 1


def test_voxelize_iso_shrinks_tube():
    model = _straight_model(r=4.0)
    dims = (32, 33, 33)
    at0 = voxelize(model, dims, (1.0, 1.0, 1.0), iso=0.0)
    at2 = voxelize(model, dims, (1.0, 1.0, 1.0), iso=2.0)
    assert at2.data.sum() < at0.data.sum()
    assert not (at2.foreground() & ~at0.foreground()).any()


def test_voxelize_off_grid_model_is_empty():
    stations = [_station(float(i * 4), 200.0 + i * 4) for i in range(3)]
    model = build_tube_model(stations, (1.0, 1.0, 1.0))
    out = voxelize(model, (32, 33, 33), (1.0, 1.0, 1.0))
    assert not out.foreground().any()


def test_varying_radius_blends_monotonically():
    stations = [
        ContourStation(
            t=float(i * 6),
            section=_station(0.0, 6.0 + i * 6).section,
            contour=_circle_contour(2.0 + 2.0 * i),
        )
        for i in range(3)
    ]
    model = build_tube_model(stations, (1.0, 1.0, 1.0))
    mask = voxelize(model, (32, 33, 33), (1.0, 1.0, 1.0))
    # per-slice area grows with x across the blend
    areas = mask.data.sum(axis=(1, 2))
    assert areas[7] < areas[12] < areas[17]


def test_merge_is_union_and_validates():
    dims = (8, 8, 8)
    a = np.zeros(dims)
    a[:4] = 1.0
    b = np.zeros(dims)
    b[3:] = 1.0
    va = Volume(dims, (1, 1, 1), a, VolumeKind.BINARY_MASK)
    vb = Volume(dims, (1, 1, 1), b, VolumeKind.BINARY_MASK)
    out = merge(va, vb)
    assert out.data.sum() == 8 * 8 * 8
    gray = Volume(dims, (1, 1, 1), np.full(dims, 0.7))
    with pytest.raises(ValueError):
        merge(va, gray)


def test_export_stl_binary_layout(tmp_path):
    model = _straight_model()
    path = export_stl(model, (32, 33, 33), (1.0, 1.0, 1.0), tmp_path / "tube.stl")
    blob = path.read_bytes()
    ntri = struct.unpack("<I", blob[80:84])[0]
    assert ntri > 100
    assert len(blob) == 84 + 50 * ntri
    # unit normals (or zero for degenerate triangles)
    for k in range(0, min(ntri, 50)):
        rec = blob[84 + 50 * k : 84 + 50 * (k + 1)]
        nrm = np.array(struct.unpack("<3f", rec[:12]))
        length = np.linalg.norm(nrm)
        assert length == pytest.approx(1.0, abs=1e-5) or length == 0.0
        tri = np.array(struct.unpack("<9f", rec[12:48])).reshape(3, 3)
        # vertices straddle the tube wall region
        assert np.all(tri[:, 0] >= 0.0) and np.all(tri[:, 0] <= 32.0)
