"""Lumen profiling: cross-sections, SDF oracles, radial contour growth.

Along a (possibly stitched) centerline, perpendicular 2D cross-sections
are resampled from the intensity volume using rotation-minimizing frames
so in-plane axes never flip between stations. A pluggable signed-distance
oracle maps each section to a continuous field (positive inside the
lumen); the default oracle thresholds the section (Otsu), keeps the
component containing the center, and takes a signed Euclidean distance
transform with bilinear interpolation.

Contours grow radially outward from the section center along n rays.
Each ray stops at the first positive-to-negative sign transition of the
field, choosing the straddling sample whose absolute value is smaller;
rays never retreat inside the initial ring, and the search radius is
confined to [SDF_center, 3 * SDF_center], where SDF_center blends the
oracle's center values at the previous, current, and next stations.

The module also carries the training-pair sampler for external SDF
models (center-weighted normal draws plus all lumen-boundary pixels)
and the mean-squared-error supervision criterion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grid import Volume

__all__ = [
    "DegenerateTangentError",
    "CrossSection",
    "SdfOracle",
    "GridSdfOracle",
    "Contour",
    "ContourStation",
    "first_frame",
    "transport_frames",
    "extract_cross_section",
    "sdf_oracle_default",
    "grow_contour",
    "contour_pipeline",
    "sample_training_pairs",
    "mse_supervision",
    "dump_contours",
    "load_contours",
]

DEFAULT_SECTION_SIZE = (64, 64)
RAY_STEP_PX = 0.5
# blend weights for (previous, self, next) center values; renormalized
# at branch ends where a neighbor is missing
CENTER_BLEND = (0.25, 0.5, 0.25)


class DegenerateTangentError(ValueError):
    pass


@dataclass
class CrossSection:
    """One resampled perpendicular plane.

    ``center`` is in fractional voxel coordinates; the frame vectors are
    unit and orthonormal in physical (mm) space. ``pixels[a, b]`` samples
    the volume at center + u_off * normal + v_off * binormal with
    u_off = (a - (w-1)/2) * pixel_spacing (same for b along h).
    """

    center: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    binormal: np.ndarray
    size: tuple[int, int]
    pixel_spacing: float
    pixels: np.ndarray

    def center_px(self) -> tuple[float, float]:
        w, h = self.size
        return ((w - 1) / 2.0, (h - 1) / 2.0)

    def to_normalized(self, px: np.ndarray) -> np.ndarray:
        """Pixel coordinates -> [-1, 1]^2."""
        px = np.asarray(px, dtype=np.float64)
        w, h = self.size
        return np.stack(
            [px[..., 0] / (w - 1) * 2.0 - 1.0, px[..., 1] / (h - 1) * 2.0 - 1.0],
            axis=-1,
        )

    def to_pixels(self, p: np.ndarray) -> np.ndarray:
        """[-1, 1]^2 -> pixel coordinates."""
        p = np.asarray(p, dtype=np.float64)
        w, h = self.size
        return np.stack(
            [(p[..., 0] + 1.0) / 2.0 * (w - 1), (p[..., 1] + 1.0) / 2.0 * (h - 1)],
            axis=-1,
        )


class SdfOracle:
    """Continuous signed distance over a cross-section (positive inside).

    ``query`` takes normalized coordinates in [-1, 1]^2; values are in
    pixel units of the section raster.
    """

    def query(self, cs: CrossSection, p) -> float:
        return float(self.query_many(cs, np.asarray(p, dtype=np.float64)[None])[0])

    def query_many(self, cs: CrossSection, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _signed_distance_field(mask: np.ndarray) -> np.ndarray:
    """Signed EDT in pixel units: positive inside, negative outside."""
    mask = mask.astype(bool)
    if not mask.any():
        return np.full(mask.shape, -float(sum(mask.shape)), dtype=np.float64)
    if mask.all():
        return np.full(mask.shape, float(sum(mask.shape)), dtype=np.float64)
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return inside - outside


def _bilinear(field: np.ndarray, px: np.ndarray) -> np.ndarray:
    coords = np.stack(
        [
            np.clip(px[:, 0], 0.0, field.shape[0] - 1.0),
            np.clip(px[:, 1], 0.0, field.shape[1] - 1.0),
        ]
    )
    return ndimage.map_coordinates(field, coords, order=1, mode="nearest")


class GridSdfOracle(SdfOracle):
    """Otsu threshold + center component + signed EDT, bilinear queries.

    A section whose center pixel is not inside any foreground component
    (including an all-background section) yields an all-negative field.
    """

    def __init__(self, threshold: float | str = "otsu"):
        if isinstance(threshold, str) and threshold != "otsu":
            raise ValueError(f"unknown threshold policy: {threshold!r}")
        self.threshold = threshold
        self._fields: dict[int, tuple[CrossSection, np.ndarray]] = {}

    def field(self, cs: CrossSection) -> np.ndarray:
        cached = self._fields.get(id(cs))
        if cached is not None and cached[0] is cs:
            return cached[1]
        f = self._build_field(cs)
        self._fields[id(cs)] = (cs, f)
        return f

    def _build_field(self, cs: CrossSection) -> np.ndarray:
        img = cs.pixels
        if isinstance(self.threshold, str):
            if float(img.max()) <= float(img.min()):
                return _signed_distance_field(np.zeros(img.shape, bool))
            from skimage.filters import threshold_otsu

            thr = float(threshold_otsu(img))
        else:
            thr = float(self.threshold)
        fg = img > thr
        labels, _ = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
        ci, cj = (int(round(c)) for c in cs.center_px())
        center_label = int(labels[ci, cj])
        if center_label == 0:
            return _signed_distance_field(np.zeros(img.shape, bool))
        return _signed_distance_field(labels == center_label)

    def query_many(self, cs: CrossSection, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
        return _bilinear(self.field(cs), cs.to_pixels(p))


def sdf_oracle_default(threshold: float | str = "otsu") -> SdfOracle:
    return GridSdfOracle(threshold)


@dataclass
class Contour:
    """Closed lumen outline as n ray hits around the section center.

    ``points`` are pixel-unit (u, v) offsets from the center, one per ray
    in angular order; ``radii`` are the matching ray lengths.
    """

    points: np.ndarray
    radii: np.ndarray
    n: int


@dataclass
class ContourStation:
    t: float
    section: CrossSection
    contour: Contour


# -- frames -----------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateTangentError("zero tangent")
    return v / n


def first_frame(tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic in-plane axes for a lone tangent.

    Projects out the world axis least aligned with the tangent, so an
    axis-aligned tangent like (0, 0, 1) yields exactly the x and y axes.
    """
    t = _unit(np.asarray(tangent, dtype=np.float64))
    k = int(np.argmin(np.abs(t)))
    e = np.zeros(3)
    e[k] = 1.0
    u = _unit(e - float(np.dot(e, t)) * t)
    v = np.cross(t, u)
    return u, v


def transport_frames(
    points_vox: np.ndarray, spacing: tuple[float, float, float]
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Rotation-minimizing (tangent, normal, binormal) per station.

    Tangents from central differences in physical space; each normal is
    the previous one projected off the new tangent, which avoids the
    frame flips a fixed reference vector would cause.
    """
    pts = np.asarray(points_vox, dtype=np.float64) * np.asarray(spacing)
    m = len(pts)
    if m == 0:
        return []
    tangents = np.zeros((m, 3))
    if m == 1:
        tangents[0] = (0.0, 0.0, 1.0)
    else:
        tangents[0] = pts[1] - pts[0]
        tangents[-1] = pts[-1] - pts[-2]
        for i in range(1, m - 1):
            tangents[i] = pts[i + 1] - pts[i - 1]
    frames = []
    prev_n: np.ndarray | None = None
    for i in range(m):
        t = _unit(tangents[i])
        if prev_n is None:
            n, b = first_frame(t)
        else:
            proj = prev_n - float(np.dot(prev_n, t)) * t
            if float(np.linalg.norm(proj)) < 1e-9:
                n, b = first_frame(t)
            else:
                n = proj / float(np.linalg.norm(proj))
                b = np.cross(t, n)
        frames.append((t, n, b))
        prev_n = n
    return frames


def extract_cross_section(
    vol: Volume,
    center,
    tangent,
    size: tuple[int, int] = DEFAULT_SECTION_SIZE,
    pixel_spacing: float | None = None,
    frame: tuple[np.ndarray, np.ndarray] | None = None,
) -> CrossSection:
    """Resample one perpendicular plane; linear interpolation, and
    samples outside the volume read as the volume median (a typical
    background value, so padding merges with the background class when
    the section is later thresholded).

    ``tangent`` is in voxel-index direction; the section frame is built
    in physical space. A transported frame can be supplied to keep
    consecutive sections consistent; otherwise the deterministic lone
    rule is used.
    """
    spacing = np.asarray(vol.spacing, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    t_phys = np.asarray(tangent, dtype=np.float64) * spacing
    if float(np.linalg.norm(t_phys)) == 0.0:
        raise DegenerateTangentError("zero tangent")
    t_phys = _unit(t_phys)
    if frame is None:
        u, v = first_frame(t_phys)
    else:
        u, v = (np.asarray(f, dtype=np.float64) for f in frame)
    if pixel_spacing is None:
        pixel_spacing = float(spacing.min())
    w, h = size
    a = (np.arange(w) - (w - 1) / 2.0) * pixel_spacing
    b = (np.arange(h) - (h - 1) / 2.0) * pixel_spacing
    aa, bb = np.meshgrid(a, b, indexing="ij")
    phys = (
        center * spacing
        + aa[..., None] * u
        + bb[..., None] * v
    )
    vox = phys / spacing
    pixels = ndimage.map_coordinates(
        vol.data.astype(np.float64),
        [vox[..., 0], vox[..., 1], vox[..., 2]],
        order=1,
        mode="constant",
        cval=float(np.median(vol.data)),
    )
    return CrossSection(
        center=center,
        tangent=t_phys,
        normal=u,
        binormal=v,
        size=(w, h),
        pixel_spacing=float(pixel_spacing),
        pixels=pixels,
    )


# -- contour growth ---------------------------------------------------


def blended_center_sdf(
    self_value: float, prev_value: float | None, next_value: float | None
) -> float:
    vals = [prev_value, self_value, next_value]
    ws = [w for w, v in zip(CENTER_BLEND, vals) if v is not None]
    vs = [v for v in vals if v is not None]
    return float(np.dot(ws, vs) / np.sum(ws))


def grow_contour(
    cs: CrossSection,
    oracle: SdfOracle,
    n: int = 20,
    center_sdf_neighbors: tuple[float | None, float | None] = (None, None),
) -> Contour:
    """Radial outward growth with transition, floor, and clamp rules.

    ``center_sdf_neighbors`` carries the oracle's center values at the
    previous and next stations (None at branch ends); they blend with
    this section's own center value 1:2:1 into SDF_center. Rays sample
    every half pixel from the initial ring at max(SDF_center, 0.5) up to
    3 * SDF_center, stop at the first positive-to-negative transition
    (taking the straddling sample nearer zero), and pin at the initial
    ring when no transition exists.
    """
    if n < 8:
        raise ValueError(f"need at least 8 rays, got {n}")
    center_self = oracle.query(cs, (0.0, 0.0))
    sdf_center = blended_center_sdf(
        center_self, center_sdf_neighbors[0], center_sdf_neighbors[1]
    )
    r_lo = max(sdf_center, RAY_STEP_PX)
    r_hi = 3.0 * sdf_center
    radii_grid = (
        np.arange(r_lo, r_hi + 1e-9, RAY_STEP_PX)
        if r_hi > r_lo
        else np.array([r_lo])
    )
    cx, cy = cs.center_px()
    angles = 2.0 * np.pi * np.arange(n) / n
    radii = np.empty(n)
    for k, th in enumerate(angles):
        d = np.array([np.cos(th), np.sin(th)])
        px = np.stack([cx + radii_grid * d[0], cy + radii_grid * d[1]], axis=1)
        vals = oracle.query_many(cs, cs.to_normalized(px))
        chosen = r_lo
        for i in range(len(radii_grid) - 1):
            if vals[i] > 0.0 >= vals[i + 1]:
                chosen = (
                    radii_grid[i]
                    if abs(vals[i]) <= abs(vals[i + 1])
                    else radii_grid[i + 1]
                )
                break
        radii[k] = chosen
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    return Contour(points=pts, radii=radii, n=n)


def _resolve_n(policy, sdf_center: float) -> int:
    if isinstance(policy, int):
        return policy
    if isinstance(policy, str) and policy.startswith("adaptive"):
        cap = int(policy[len("adaptive") :] or 16)
        return int(min(max(round(4.0 * sdf_center), 8), cap))
    raise ValueError(f"unknown ray-count policy: {policy!r}")


def contour_pipeline(
    points_vox: np.ndarray,
    vol: Volume,
    oracle: SdfOracle | None = None,
    n_policy: int | str = 20,
    size: tuple[int, int] = DEFAULT_SECTION_SIZE,
    pixel_spacing: float | None = None,
) -> list[ContourStation]:
    """One grown contour per centerline station.

    ``n_policy`` is a fixed ray count or "adaptive16"/"adaptive24"
    (4 * SDF_center clamped to [8, cap]). Station parameter ``t`` is the
    physical arc length from the first point. Center values for the
    blend are collected in a first pass, so growth at each station can
    see its neighbors.
    """
    pts = np.asarray(points_vox, dtype=np.float64).reshape(-1, 3)
    if oracle is None:
        oracle = sdf_oracle_default()
    frames = transport_frames(pts, vol.spacing)
    sections = [
        extract_cross_section(
            vol, pts[i], frames[i][0] / np.asarray(vol.spacing),
            size=size, pixel_spacing=pixel_spacing,
            frame=(frames[i][1], frames[i][2]),
        )
        for i in range(len(pts))
    ]
    centers = [oracle.query(cs, (0.0, 0.0)) for cs in sections]
    phys = pts * np.asarray(vol.spacing)
    t = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(phys, axis=0), axis=1))]
    ) if len(pts) > 1 else np.zeros(1)
    stations = []
    for i, cs in enumerate(sections):
        prev_c = centers[i - 1] if i > 0 else None
        next_c = centers[i + 1] if i + 1 < len(sections) else None
        blended = blended_center_sdf(centers[i], prev_c, next_c)
        contour = grow_contour(
            cs, oracle, n=_resolve_n(n_policy, blended),
            center_sdf_neighbors=(prev_c, next_c),
        )
        stations.append(ContourStation(t=float(t[i]), section=cs, contour=contour))
    return stations


# -- training-pair sampling -------------------------------------------


def sample_training_pairs(
    cs: CrossSection,
    gt_mask_section: np.ndarray,
    seed: int = 0,
    count_policy: int | str = "15x",
    spread_as_std: bool = False,
) -> list[tuple[tuple[float, float], float]]:
    """Supervision pairs (normalized point, signed distance) for one section.

    Normal draws center on the section center with spread
    max(10, 5 * max sdf) in pixel units, read as a variance by default
    (``spread_as_std`` switches to a standard deviation). The draw count
    is 15 * max sdf under the "15x" policy, or a fixed integer. All lumen
    boundary pixels are appended. A lumen with no positive interior
    yields the boundary-only (possibly empty) set.
    """
    gt = np.asarray(gt_mask_section).astype(bool)
    if gt.shape != tuple(cs.size):
        raise ValueError(f"mask shape {gt.shape} != section size {cs.size}")
    field_px = _signed_distance_field(gt)
    max_sdf = float(field_px.max())
    pairs: list[tuple[tuple[float, float], float]] = []
    if max_sdf > 0.0:
        count = (
            int(round(15.0 * max_sdf))
            if count_policy == "15x"
            else int(count_policy)
        )
        spread = max(10.0, 5.0 * max_sdf)
        std = spread if spread_as_std else float(np.sqrt(spread))
        rng = np.random.default_rng(seed)
        cx, cy = cs.center_px()
        draws = rng.normal(loc=(cx, cy), scale=std, size=(count, 2))
        draws[:, 0] = np.clip(draws[:, 0], 0.0, cs.size[0] - 1.0)
        draws[:, 1] = np.clip(draws[:, 1], 0.0, cs.size[1] - 1.0)
        vals = _bilinear(field_px, draws)
        norm = cs.to_normalized(draws)
        pairs.extend(
            ((float(p[0]), float(p[1])), float(v)) for p, v in zip(norm, vals)
        )
    if gt.any():
        boundary = gt & ~ndimage.binary_erosion(gt)
        idx = np.argwhere(boundary)
        norm = cs.to_normalized(idx.astype(np.float64))
        vals = field_px[idx[:, 0], idx[:, 1]]
        pairs.extend(
            ((float(p[0]), float(p[1])), float(v)) for p, v in zip(norm, vals)
        )
    return pairs


def mse_supervision(pairs_pred, pairs_gt) -> float:
    """Mean squared error between matched (point, value) pair lists."""
    if len(pairs_pred) != len(pairs_gt):
        raise ValueError("pair lists differ in length")
    if len(pairs_pred) == 0:
        raise ValueError("no pairs to compare")
    sq = 0.0
    for (pp, vp), (pg, vg) in zip(pairs_pred, pairs_gt):
        if not np.allclose(pp, pg, atol=1e-9):
            raise ValueError(f"mismatched sample points {pp} vs {pg}")
        sq += (float(vp) - float(vg)) ** 2
    return sq / len(pairs_pred)


# -- persistence ------------------------------------------------------


def dump_contours(stations: list[ContourStation], path: str | Path) -> Path:
    """JSON lines {t, center, frame, points (section-local mm)}."""
    path = Path(path)
    with path.open("w") as fh:
        for st in stations:
            rec = {
                "t": float(st.t),
                "center": [float(c) for c in st.section.center],
                "frame": {
                    "tangent": [float(x) for x in st.section.tangent],
                    "normal": [float(x) for x in st.section.normal],
                    "binormal": [float(x) for x in st.section.binormal],
                },
                "pixel_spacing": st.section.pixel_spacing,
                "points": [
                    [float(u * st.section.pixel_spacing),
                     float(v * st.section.pixel_spacing)]
                    for u, v in st.contour.points
                ],
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def load_contours(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
