"""Implicit extrusion surfaces: blended tube solids from contour stations.

A tube model carries a centerline polyline, per-station orthonormal
frames (reused from the cross-section transport), and per-station
implicit 2D section functions (positive inside the lumen) realized as
bilinear interpolation of the signed distance field rasterized from each
fitted contour. A compactly supported blending basis over the normalized
arc parameter combines the sections into one scalar field

    F(q) = sum_i C_i(u, v) * B_i(t)

whose zero level set is the tube surface. Querying a point projects it
onto the centerline (closest point), reads (u, v) in the interpolated
local frame, and blends the section values; points beyond the covered
span plus a small cap margin are outside by definition (large negative
sentinel). Voxelization evaluates F at voxel centers inside the model's
bounding box only, and repaired tubes merge into a mask by voxel union.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np
from scipy import ndimage

from .grid import Volume, VolumeKind
from .lumen import Contour, ContourStation

__all__ = [
    "PspsBasis",
    "SectionField",
    "TubeModel",
    "psps_basis",
    "build_tube_model",
    "implicit_coords",
    "implicit_value",
    "voxelize",
    "merge",
    "export_stl",
]

OUTSIDE_SENTINEL = -1.0e6


def _hermite_bump(s: np.ndarray) -> np.ndarray:
    """C1 compact bump on [-1, 1]: 1 at 0, 0 with zero slope at the edge."""
    a = np.abs(s)
    out = 2.0 * a**3 - 3.0 * a**2 + 1.0
    out[a >= 1.0] = 0.0
    return out


@dataclass
class PspsBasis:
    """Pointwise-normalized compact bumps over station parameters in [0, 1].

    Within the covered span (where at least one bump is positive) the
    weights sum to exactly 1 by construction; each station's own weight
    dominates at its parameter value.
    """

    stations: np.ndarray
    support_radius: float

    def __post_init__(self):
        self.stations = np.asarray(self.stations, dtype=np.float64)
        if self.stations.ndim != 1 or len(self.stations) == 0:
            raise ValueError("stations must be a non-empty 1D sequence")
        if np.any(np.diff(self.stations) < 0):
            raise ValueError("stations must be sorted")
        if self.stations.min() < 0.0 or self.stations.max() > 1.0:
            raise ValueError("stations must lie in [0, 1]")
        if not self.support_radius > 0.0:
            raise ValueError("support_radius must be positive")

    def weights(self, t) -> np.ndarray:
        """(N, m) normalized weights; rows outside the covered span are 0."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        raw = _hermite_bump(
            (t[:, None] - self.stations[None, :]) / self.support_radius
        )
        total = raw.sum(axis=1, keepdims=True)
        out = np.zeros_like(raw)
        np.divide(raw, total, out=out, where=total > 0.0)
        return out


def psps_basis(stations, support_radius: float | None = None) -> PspsBasis:
    """Basis over the given parameters; default support is 1.5x the
    largest station gap so neighbors always overlap."""
    stations = np.asarray(stations, dtype=np.float64)
    if support_radius is None:
        gaps = np.diff(stations)
        largest = float(gaps.max()) if len(gaps) else 1.0
        support_radius = 1.5 * largest if largest > 0.0 else 1.0
    return PspsBasis(stations=stations, support_radius=float(support_radius))


class SectionField:
    """Implicit in-plane lumen function from one fitted contour.

    The contour polygon is rasterized on the section's pixel grid, a
    signed Euclidean distance field (positive inside, mm units) is built,
    and queries interpolate bilinearly. Outside the raster the value
    continues as the clamped border value minus the distance to the
    raster edge, so the field keeps decreasing away from the lumen.
    """

    def __init__(self, contour: Contour, size: tuple[int, int], pixel_spacing: float):
        from matplotlib.path import Path as MplPath

        # odd raster, so the center (and the integer offsets voxel
        # centers map to) falls on grid points rather than between them
        w, h = (s + 1 - s % 2 for s in size)
        self.size = (w, h)
        self.pixel_spacing = float(pixel_spacing)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        poly = contour.points + np.array([cx, cy])
        ii, jj = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
        pts = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
        # tiny positive radius so pixel centers exactly on the polygon
        # count as inside, matching the >= iso voxel rule
        mask = (
            MplPath(poly, closed=True)
            .contains_points(pts, radius=1e-9)
            .reshape(w, h)
        )
        from .lumen import _signed_distance_field

        self.field_mm = _signed_distance_field(mask) * self.pixel_spacing

    def value(self, u_mm: np.ndarray, v_mm: np.ndarray) -> np.ndarray:
        w, h = self.size
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        a = np.asarray(u_mm, dtype=np.float64) / self.pixel_spacing + cx
        b = np.asarray(v_mm, dtype=np.float64) / self.pixel_spacing + cy
        ac = np.clip(a, 0.0, w - 1.0)
        bc = np.clip(b, 0.0, h - 1.0)
        vals = ndimage.map_coordinates(
            self.field_mm, np.stack([ac, bc]), order=1, mode="nearest"
        )
        overshoot = np.hypot(a - ac, b - bc) * self.pixel_spacing
        return vals - overshoot


@dataclass
class TubeModel:
    """Blended implicit tube over >= 2 contour stations.

    Geometry lives in physical (mm) coordinates: ``points_phys`` are the
    station centers, ``arc`` their cumulative arc lengths, and frames
    are the transported (tangent, normal, binormal) triples from the
    cross-section stage. ``cap_margin`` is how far (mm) beyond the end
    stations a projection still counts as inside the covered span.
    """

    points_phys: np.ndarray
    frames: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    sections: list[SectionField]
    basis: PspsBasis
    arc: np.ndarray
    cap_margin: float

    def __post_init__(self):
        m = len(self.points_phys)
        if not (m == len(self.frames) == len(self.sections) == len(self.arc)):
            raise ValueError("station, frame, section, and arc counts differ")
        if m < 2:
            raise ValueError(f"need at least 2 stations, got {m}")

    def length(self) -> float:
        return float(self.arc[-1])

    def max_radius_mm(self) -> float:
        return max(float(s.field_mm.max()) for s in self.sections)


def build_tube_model(
    stations: list[ContourStation],
    spacing: tuple[float, float, float],
    support_scale: float = 1.5,
    cap_margin: float | None = None,
) -> TubeModel:
    """Assemble a tube model from contour-pipeline stations."""
    if len(stations) < 2:
        raise ValueError(f"need at least 2 stations, got {len(stations)}")
    sp = np.asarray(spacing, dtype=np.float64)
    pts = np.array([st.section.center for st in stations], dtype=np.float64) * sp
    arc = np.array([st.t for st in stations], dtype=np.float64)
    if arc[-1] <= arc[0]:
        raise ValueError("stations must advance in arc length")
    t_hat = (arc - arc[0]) / (arc[-1] - arc[0])
    gaps = np.diff(t_hat)
    basis = PspsBasis(t_hat, support_radius=support_scale * float(gaps.max()))
    frames = [
        (st.section.tangent, st.section.normal, st.section.binormal)
        for st in stations
    ]
    sections = [
        SectionField(st.contour, st.section.size, st.section.pixel_spacing)
        for st in stations
    ]
    if cap_margin is None:
        cap_margin = 0.5 * float(np.mean(np.diff(arc)))
    return TubeModel(
        points_phys=pts,
        frames=frames,
        sections=sections,
        basis=basis,
        arc=arc,
        cap_margin=float(cap_margin),
    )


def _project_polyline(
    pts: np.ndarray, q: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closest point of each q on the polyline.

    Returns (segment index, in-segment fraction, squared distance); ties
    resolve to the earliest segment.
    """
    a = pts[:-1]
    d = pts[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd > 0.0, dd, 1.0)
    ap = q[:, None, :] - a[None, :, :]
    frac = np.clip(np.einsum("nij,ij->ni", ap, d) / dd, 0.0, 1.0)
    foot = a[None] + frac[..., None] * d[None]
    dist2 = np.sum((q[:, None, :] - foot) ** 2, axis=2)
    seg = np.argmin(dist2, axis=1)
    n = np.arange(len(q))
    return seg, frac[n, seg], dist2[n, seg]


def implicit_coords(
    model: TubeModel, q
) -> tuple[float, float, float] | None:
    """(arc length t, u, v) of a physical-space point, or None.

    t comes from closest-point projection; (u, v) are the point's signed
    offsets along the frame linearly interpolated between the bracketing
    stations. A projection that clamps to an end station and overshoots
    axially past the cap margin is outside the covered span.
    """
    out = implicit_coords_many(model, np.asarray(q, dtype=np.float64)[None])
    t, u, v, valid = (arr[0] for arr in out)
    if not valid:
        return None
    return float(t), float(u), float(v)


def implicit_coords_many(
    model: TubeModel, q: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    pts = model.points_phys
    seg, frac, _ = _project_polyline(pts, q)
    foot = pts[seg] + frac[:, None] * (pts[seg + 1] - pts[seg])
    t = model.arc[seg] + frac * (model.arc[seg + 1] - model.arc[seg])

    normals = np.array([f[1] for f in model.frames])
    binorms = np.array([f[2] for f in model.frames])
    alpha = frac[:, None]
    n_vec = (1.0 - alpha) * normals[seg] + alpha * normals[seg + 1]
    b_vec = (1.0 - alpha) * binorms[seg] + alpha * binorms[seg + 1]
    n_vec /= np.linalg.norm(n_vec, axis=1, keepdims=True)
    b_vec /= np.linalg.norm(b_vec, axis=1, keepdims=True)

    rel = q - foot
    u = np.einsum("ij,ij->i", rel, n_vec)
    v = np.einsum("ij,ij->i", rel, b_vec)

    # axial overshoot past either end station
    t0_dir = pts[1] - pts[0]
    t0_dir = t0_dir / np.linalg.norm(t0_dir)
    t1_dir = pts[-1] - pts[-2]
    t1_dir = t1_dir / np.linalg.norm(t1_dir)
    under = np.einsum("ij,j->i", pts[0] - q, t0_dir)
    over = np.einsum("ij,j->i", q - pts[-1], t1_dir)
    valid = (under <= model.cap_margin) & (over <= model.cap_margin)
    return t, u, v, valid


def implicit_value(model: TubeModel, q) -> float:
    return float(implicit_value_many(model, np.asarray(q, dtype=np.float64)[None])[0])


def implicit_value_many(model: TubeModel, q: np.ndarray) -> np.ndarray:
    """Blend of per-station section values at each point (mm units)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    t, u, v, valid = implicit_coords_many(model, q)
    out = np.full(len(q), OUTSIDE_SENTINEL)
    if not valid.any():
        return out
    span = model.arc[-1] - model.arc[0]
    t_hat = (t[valid] - model.arc[0]) / span
    w = model.basis.weights(np.clip(t_hat, 0.0, 1.0))
    uu = u[valid]
    vv = v[valid]
    acc = np.zeros(int(valid.sum()))
    for i, section in enumerate(model.sections):
        wi = w[:, i]
        live = wi > 0.0
        if live.any():
            acc[live] += wi[live] * section.value(uu[live], vv[live])
    out[valid] = acc
    return out


def _model_aabb_vox(
    model: TubeModel,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
) -> tuple[np.ndarray, np.ndarray]:
    sp = np.asarray(spacing, dtype=np.float64)
    radius = max(float(s.field_mm.max()) for s in model.sections)
    radius = max(radius, 0.0) + model.cap_margin + float(sp.max())
    lo_phys = model.points_phys.min(axis=0) - radius
    hi_phys = model.points_phys.max(axis=0) + radius
    lo = np.maximum(np.floor(lo_phys / sp).astype(int), 0)
    hi = np.minimum(np.ceil(hi_phys / sp).astype(int) + 1, np.asarray(dims))
    return lo, hi


def voxelize(
    model: TubeModel,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
    iso: float = 0.0,
) -> Volume:
    """Binary mask of F >= iso at voxel centers, restricted to the
    model's bounding box (plus radius, cap, and one-voxel margins)."""
    lo, hi = _model_aabb_vox(model, dims, spacing)
    data = np.zeros(dims, dtype=np.float64)
    if np.any(hi <= lo):
        return Volume(dims, spacing, data, VolumeKind.BINARY_MASK)
    sp = np.asarray(spacing, dtype=np.float64)
    ys = np.arange(lo[1], hi[1])
    zs = np.arange(lo[2], hi[2])
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    for x in range(lo[0], hi[0]):
        pts = np.stack(
            [np.full(yy.size, x), yy.ravel(), zz.ravel()], axis=1
        ).astype(np.float64) * sp
        vals = implicit_value_many(model, pts)
        sl = (vals >= iso).reshape(yy.shape)
        data[x, lo[1]:hi[1], lo[2]:hi[2]] = sl.astype(np.float64)
    return Volume(dims, spacing, data, VolumeKind.BINARY_MASK)


def merge(reconstructed: Volume, refined: Volume) -> Volume:
    """Voxelwise union of two masks on the same grid."""
    reconstructed.same_grid(refined)
    if reconstructed.kind is not VolumeKind.BINARY_MASK or refined.kind is not (
        VolumeKind.BINARY_MASK
    ):
        raise ValueError("merge expects two binary masks")
    data = np.maximum(reconstructed.data, refined.data).astype(np.float64)
    return reconstructed.like(data, VolumeKind.BINARY_MASK)


def export_stl(
    model: TubeModel,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
    path: str | FsPath,
    iso: float = 0.0,
) -> FsPath:
    """Binary STL of the iso-surface over the model's bounding box."""
    from skimage.measure import marching_cubes

    lo, hi = _model_aabb_vox(model, dims, spacing)
    if np.any(hi <= lo):
        raise ValueError("model does not intersect the target grid")
    sp = np.asarray(spacing, dtype=np.float64)
    shape = tuple(int(h - l) for l, h in zip(lo, hi))
    grid = np.empty(shape, dtype=np.float64)
    ys = np.arange(lo[1], hi[1])
    zs = np.arange(lo[2], hi[2])
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    for k, x in enumerate(range(lo[0], hi[0])):
        pts = np.stack(
            [np.full(yy.size, x), yy.ravel(), zz.ravel()], axis=1
        ).astype(np.float64) * sp
        grid[k] = implicit_value_many(model, pts).reshape(yy.shape)
    # clip the sentinel so gradients near the surface stay finite
    grid = np.clip(grid, -1.0e3, None)
    verts, faces, _, _ = marching_cubes(grid, level=iso, spacing=tuple(sp))
    verts = verts + lo * sp
    path = FsPath(path)
    with path.open("wb") as fh:
        fh.write(b"\x00" * 80)
        fh.write(struct.pack("<I", len(faces)))
        for tri in faces:
            a, b, c = (verts[i] for i in tri)
            nrm = np.cross(b - a, c - a)
            norm = float(np.linalg.norm(nrm))
            nrm = nrm / norm if norm > 0 else np.zeros(3)
            fh.write(struct.pack("<3f", *nrm))
            for p in (a, b, c):
                fh.write(struct.pack("<3f", *p))
            fh.write(struct.pack("<H", 0))
    return path
