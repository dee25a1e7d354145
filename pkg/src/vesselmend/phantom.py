"""Deterministic synthetic vascular phantoms with machine-readable truth.

Each phantom is a set of smooth tube axes (splines through control
points) swept with discs onto a voxel grid. A case carries the clean
mask, a broken variant (induced gaps, optional occlusion dimming, decoy
structures that belong to no vessel), the analytic centerlines, and a
record of which fragments a repair is supposed to put back. Everything
is a pure function of the spec, so cases are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .grid import Connectivity, Volume, VolumeKind, connected_components
from .skeleton import (
    CenterlineBranch,
    _branch_tangents,
    dump_branches,
    load_branches,
)
from .volume_io import load_volume, save_volume

__all__ = [
    "SpecInvalidError",
    "BranchSpec",
    "BreakSpec",
    "IntensityModel",
    "PhantomSpec",
    "BreakRecord",
    "PhantomCase",
    "generate",
    "standard_suite",
    "standard_suite_specs",
    "spec_to_dict",
    "spec_from_dict",
    "save_case",
    "load_case",
]

# axis sample spacing along the swept tube, voxel units
_ARC_STEP = 0.25


class SpecInvalidError(ValueError):
    """Raised when a phantom description violates its own invariants."""


@dataclass(frozen=True)
class BranchSpec:
    """One swept tube: spline control points plus a radius profile.

    ``points`` are voxel-index coordinates; radii are physical units
    (same scale as ``spacing``). ``radii`` holds either a single value
    (constant tube) or one value per control point (interpolated along
    the axis). ``closed`` sweeps a periodic spline (a loop).
    """

    points: tuple[tuple[float, float, float], ...]
    radii: tuple[float, ...]
    closed: bool = False


@dataclass(frozen=True)
class BreakSpec:
    """Remove a slab of one branch's tube between two arc fractions.

    ``interval`` is (lo, hi) with 0 <= lo < hi <= 1 of total arc length.
    The cut is perpendicular to the axis: a voxel is removed when the
    nearest axis sample's arc fraction falls inside the interval, unless
    another tube still covers it. By default only the mask is removed
    and the intensity keeps its vessel value; ``occlusion`` also dims
    the removed region to background.
    """

    branch: int
    interval: tuple[float, float]
    occlusion: bool = False


@dataclass(frozen=True)
class IntensityModel:
    """Mean intensities and additive Gaussian noise level."""

    vessel: float = 300.0
    background: float = 0.0
    noise_sd: float = 20.0


@dataclass(frozen=True)
class PhantomSpec:
    """Full description of one synthetic case; the seed fixes the noise."""

    seed: int
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    branches: tuple[BranchSpec, ...] = ()
    breaks: tuple[BreakSpec, ...] = ()
    decoys: tuple[BranchSpec, ...] = ()
    intensity: IntensityModel = field(default_factory=IntensityModel)
    name: str = ""


@dataclass(frozen=True)
class BreakRecord:
    """Truth for one induced gap: the fragment it creates should be
    stitched back (decoys carry no record; they should be removed)."""

    branch: int
    interval: tuple[float, float]
    occlusion: bool
    should_reconnect: bool = True


@dataclass
class PhantomCase:
    """A generated phantom plus all ground truth needed by the tests."""

    spec: PhantomSpec
    volume: Volume
    gt_mask: Volume
    broken_mask: Volume
    gt_centerlines: list[CenterlineBranch]
    break_records: list[BreakRecord]

    @property
    def name(self) -> str:
        return self.spec.name


def _validate(spec: PhantomSpec) -> None:
    if len(spec.dims) != 3 or any(int(d) <= 0 for d in spec.dims):
        raise SpecInvalidError(f"dims must be three positive ints, got {spec.dims}")
    if len(spec.spacing) != 3 or any(s <= 0 for s in spec.spacing):
        raise SpecInvalidError(f"spacing must be positive, got {spec.spacing}")
    if spec.intensity.noise_sd < 0:
        raise SpecInvalidError("noise sd must be nonnegative")
    for bk in spec.breaks:
        if not 0 <= bk.branch < len(spec.branches):
            raise SpecInvalidError(f"break references branch {bk.branch}")
        lo, hi = bk.interval
        if not (0.0 <= lo < hi <= 1.0):
            raise SpecInvalidError(f"break interval {bk.interval} not within [0, 1]")


def _sample_axis(branch: BranchSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense axis samples: positions (n,3), radii (n,), arc fractions (n,)."""
    pts = np.asarray(branch.points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise SpecInvalidError("a tube needs at least two 3d control points")
    radii = np.asarray(branch.radii, dtype=np.float64)
    if radii.size not in (1, len(pts)):
        raise SpecInvalidError("radii must be one value or one per control point")
    if radii.size == 0 or np.any(radii <= 0):
        raise SpecInvalidError("radii must be positive")
    if branch.closed and not np.allclose(pts[0], pts[-1]):
        pts = np.vstack([pts, pts[:1]])
        if radii.size > 1:
            radii = np.append(radii, radii[0])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seg == 0.0):
        raise SpecInvalidError("repeated consecutive control points")
    knots = np.concatenate([[0.0], np.cumsum(seg)])
    bc = "periodic" if branch.closed else "natural"
    spline = CubicSpline(knots, pts, bc_type=bc, axis=0)

    # reparametrize by arc length measured on a fine grid
    fine = np.linspace(0.0, knots[-1], max(int(np.ceil(knots[-1] / 0.05)), 8) + 1)
    fp = spline(fine)
    arc = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(fp, axis=0), axis=1))]
    )
    total = float(arc[-1])
    n = max(int(np.ceil(total / _ARC_STEP)), 2)
    t_arc = np.linspace(0.0, total, n + 1)
    u = np.interp(t_arc, arc, fine)
    samples = spline(u)
    if radii.size == 1:
        rr = np.full(len(samples), float(radii[0]))
    else:
        rr = np.interp(u, knots, radii)
    return samples, rr, t_arc / total


def _sweep_tube(
    samples: np.ndarray,
    radii: np.ndarray,
    tfrac: np.ndarray,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
) -> tuple[np.ndarray, np.ndarray]:
    """Union-of-balls sweep.

    Returns ``q`` (min over samples of squared physical distance minus
    squared radius; tube = q <= 0) and the arc fraction of each voxel's
    nearest sample (earliest sample wins ties), which break cuts use.
    """
    best_q = np.full(dims, np.inf, dtype=np.float64)
    best_t = np.full(dims, -1.0, dtype=np.float64)
    sp = np.asarray(spacing, dtype=np.float64)
    for p, r, t in zip(samples, radii, tfrac):
        lo = [max(0, int(np.floor(p[k] - r / sp[k]))) for k in range(3)]
        hi = [min(dims[k] - 1, int(np.ceil(p[k] + r / sp[k]))) for k in range(3)]
        if any(lo[k] > hi[k] for k in range(3)):
            continue
        ax = [
            ((np.arange(lo[k], hi[k] + 1, dtype=np.float64) - p[k]) * sp[k]) ** 2
            for k in range(3)
        ]
        d2 = ax[0][:, None, None] + ax[1][None, :, None] + ax[2][None, None, :]
        q = d2 - r * r
        sl = (
            slice(lo[0], hi[0] + 1),
            slice(lo[1], hi[1] + 1),
            slice(lo[2], hi[2] + 1),
        )
        view_q = best_q[sl]
        upd = q < view_q
        view_q[upd] = q[upd]
        best_t[sl][upd] = t
    return best_q, best_t


def generate(spec: PhantomSpec) -> PhantomCase:
    """Rasterize a spec into volumes, centerlines, and break records."""
    _validate(spec)
    dims = tuple(int(d) for d in spec.dims)
    spacing = tuple(float(s) for s in spec.spacing)
    gt = np.zeros(dims, dtype=bool)
    broken = np.zeros(dims, dtype=bool)
    occluded = np.zeros(dims, dtype=bool)
    axes: list[np.ndarray] = []

    for bi, br in enumerate(spec.branches):
        samples, radii, tfrac = _sample_axis(br)
        q, tmap = _sweep_tube(samples, radii, tfrac, dims, spacing)
        tube = q <= 0.0
        cut = np.zeros(dims, dtype=bool)
        for bk in spec.breaks:
            if bk.branch != bi:
                continue
            lo, hi = bk.interval
            zone = tube & (tmap >= lo) & (tmap <= hi)
            cut |= zone
            if bk.occlusion:
                occluded |= zone
        gt |= tube
        broken |= tube & ~cut
        axes.append(samples)

    decoy = np.zeros(dims, dtype=bool)
    for de in spec.decoys:
        samples, radii, tfrac = _sample_axis(de)
        q, _ = _sweep_tube(samples, radii, tfrac, dims, spacing)
        decoy |= q <= 0.0
    broken |= decoy
    # a cut voxel still covered by another tube keeps its vessel value
    occluded &= ~broken

    im = spec.intensity
    rng = np.random.default_rng(spec.seed)
    base = np.full(dims, im.background, dtype=np.float64)
    base[gt | decoy] = im.vessel
    base[occluded] = im.background
    data = base + rng.normal(0.0, im.noise_sd, size=dims)

    volume = Volume(dims=dims, spacing=spacing, data=data.astype(np.float32))
    gt_mask = Volume(
        dims=dims,
        spacing=spacing,
        data=gt.astype(np.float32),
        kind=VolumeKind.BINARY_MASK,
        source_dtype="u8",
    )
    broken_mask = Volume(
        dims=dims,
        spacing=spacing,
        data=broken.astype(np.float32),
        kind=VolumeKind.BINARY_MASK,
        source_dtype="u8",
    )

    comps = connected_components(gt_mask, Connectivity.FULL)
    centerlines: list[CenterlineBranch] = []
    for bi, samples in enumerate(axes):
        idx = np.rint(samples).astype(np.int64)
        keep = np.ones(len(idx), dtype=bool)
        keep[1:] = np.any(idx[1:] != idx[:-1], axis=1)
        idx = idx[keep]
        if spec.branches[bi].closed and len(idx) > 1 and (idx[0] == idx[-1]).all():
            idx = idx[:-1]
        if np.any(idx < 0) or np.any(idx >= np.asarray(dims)):
            raise SpecInvalidError(f"branch {bi} axis leaves the volume")
        if not gt[tuple(idx.T)].all():
            raise SpecInvalidError(f"branch {bi} radius too small to cover its axis")
        head, tail = _branch_tangents(idx)
        centerlines.append(
            CenterlineBranch(
                branch_id=bi,
                points=idx,
                component_id=int(comps.labels[tuple(idx[0])]),
                is_connected_tree=True,
                head_tangent=head,
                tail_tangent=tail,
            )
        )

    records = [
        BreakRecord(
            branch=bk.branch,
            interval=tuple(bk.interval),
            occlusion=bk.occlusion,
            should_reconnect=True,
        )
        for bk in spec.breaks
    ]
    return PhantomCase(
        spec=spec,
        volume=volume,
        gt_mask=gt_mask,
        broken_mask=broken_mask,
        gt_centerlines=centerlines,
        break_records=records,
    )


# ---------------------------------------------------------------------------
# standard catalog


def _tube(p0, p1, r: float = 3.0) -> BranchSpec:
    return BranchSpec(points=(tuple(p0), tuple(p1)), radii=(float(r),))


def _interval(arc_center: float, gap: float, total: float) -> tuple[float, float]:
    return ((arc_center - gap / 2.0) / total, (arc_center + gap / 2.0) / total)


def _straight_gap_spec(gap: float, seed: int) -> PhantomSpec:
    return PhantomSpec(
        seed=seed,
        name=f"straight_gap_{int(gap)}",
        dims=(64, 32, 40),
        branches=(
            _tube((8, 16, 13), (56, 16, 13)),
            _tube((4, 16, 35), (60, 16, 35)),
        ),
        breaks=(BreakSpec(branch=0, interval=_interval(28.8, gap, 48.0)),),
    )


def _hairpin_spec(plane: str, gap: float, seed: int) -> PhantomSpec:
    """A vessel that runs out, turns 180 degrees (bend radius 9), and runs
    back, broken across the bend. The straight chord between the two cut
    ends dips into the background pocket inside the hairpin, so a walk
    that ignores image evidence strays outside the dilated truth tube.
    The inbound leg is shorter than the outbound one, which keeps the cut
    ends (not the far leg ends) the closest endpoint pair.
    """
    bend2d = [
        (16, 10), (24, 10), (30, 10),
        (36.36, 12.64), (39, 19), (36.36, 25.36),
        (30, 28), (20, 28), (6, 28),
    ]
    # the far-plane companion is an intact copy of the same hairpin, so
    # the image holds uncut examples of this curvature for self-training
    if plane == "xy":
        pts = tuple((x, y, 13.0) for x, y in bend2d)
        dims = (48, 36, 40)
        companion = BranchSpec(
            points=tuple((x, y, 35.0) for x, y in bend2d), radii=(3.5,)
        )
    else:
        pts = tuple((x, 13.0, y) for x, y in bend2d)
        dims = (48, 40, 36)
        companion = BranchSpec(
            points=tuple((x, 35.0, y) for x, y in bend2d), radii=(3.5,)
        )
    # measured axis arc: total 66.17, bend apex at 27.97; the cut sits
    # 1 past the apex so the two pieces differ in size
    total, centre = 66.17, 28.97
    return PhantomSpec(
        seed=seed,
        name=f"curved_hairpin_{plane}",
        dims=dims,
        branches=(BranchSpec(points=pts, radii=(3.5,)), companion),
        breaks=(BreakSpec(branch=0, interval=_interval(centre, gap, total)),),
    )


def standard_suite_specs() -> tuple[PhantomSpec, ...]:
    """The fixed, fully seeded catalog used by the verification suite."""
    specs = [
        _straight_gap_spec(12, seed=101),
        _straight_gap_spec(13, seed=103),
        _straight_gap_spec(14, seed=105),
        _straight_gap_spec(16, seed=107),
        _straight_gap_spec(18, seed=241),
        _hairpin_spec("xy", gap=23.0, seed=113),
        _hairpin_spec("xz", gap=24.0, seed=127),
        PhantomSpec(
            seed=167,
            name="branch_occurrence",
            dims=(64, 40, 32),
            branches=(
                _tube((8, 12, 16), (56, 12, 16)),
                BranchSpec(
                    points=((32, 12, 16), (40, 23.5, 16), (48, 35, 16), (58, 36.5, 16)),
                    radii=(3.0,),
                ),
                _tube((4, 8, 6), (4, 36, 6)),
            ),
            breaks=(BreakSpec(branch=1, interval=(0.0, 0.45)),),
        ),
        PhantomSpec(
            seed=137,
            name="decoy_removal",
            dims=(112, 32, 40),
            branches=(
                _tube((8, 16, 13), (56, 16, 13)),
                _tube((4, 16, 34), (102, 16, 34)),
            ),
            decoys=(_tube((96, 16, 13), (108, 16, 13), r=2.5),),
        ),
        PhantomSpec(
            seed=139,
            name="long_gap_26",
            dims=(96, 32, 40),
            branches=(
                _tube((8, 16, 13), (88, 16, 13)),
                _tube((4, 16, 35), (92, 16, 35)),
            ),
            breaks=(BreakSpec(branch=0, interval=_interval(44.0, 26.0, 80.0)),),
        ),
        PhantomSpec(
            seed=269,
            name="long_gap_30",
            dims=(96, 32, 40),
            branches=(
                _tube((8, 16, 13), (88, 16, 13)),
                _tube((4, 16, 35), (92, 16, 35)),
            ),
            breaks=(BreakSpec(branch=0, interval=_interval(44.0, 30.0, 80.0)),),
        ),
        PhantomSpec(
            seed=29,
            name="double_break",
            dims=(96, 32, 40),
            branches=(
                _tube((8, 16, 13), (88, 16, 13)),
                _tube((4, 16, 35), (92, 16, 35)),
            ),
            breaks=(
                BreakSpec(branch=0, interval=_interval(28.0, 12.0, 80.0)),
                BreakSpec(branch=0, interval=_interval(56.0, 14.0, 80.0)),
            ),
        ),
        PhantomSpec(
            seed=151,
            name="torus_topology",
            dims=(44, 44, 26),
            branches=(
                BranchSpec(
                    points=tuple(
                        (
                            22.0 + 12.0 * np.cos(a),
                            22.0 + 12.0 * np.sin(a),
                            13.0,
                        )
                        for a in np.linspace(0.0, 2.0 * np.pi, 9)
                    ),
                    radii=(3.0,),
                    closed=True,
                ),
            ),
        ),
        PhantomSpec(
            seed=157,
            name="intact_control",
            dims=(64, 32, 40),
            branches=(
                _tube((8, 16, 13), (56, 16, 13)),
                _tube((4, 16, 35), (60, 16, 35)),
            ),
        ),
    ]
    return tuple(specs)


def standard_suite() -> list[PhantomCase]:
    """Generate every catalog case (>= 12, deterministic)."""
    return [generate(s) for s in standard_suite_specs()]


# ---------------------------------------------------------------------------
# persistence


def spec_to_dict(spec: PhantomSpec) -> dict:
    def _branch(b: BranchSpec) -> dict:
        return {
            "points": [list(map(float, p)) for p in b.points],
            "radii": [float(r) for r in b.radii],
            "closed": b.closed,
        }

    return {
        "seed": int(spec.seed),
        "name": spec.name,
        "dims": [int(d) for d in spec.dims],
        "spacing": [float(s) for s in spec.spacing],
        "branches": [_branch(b) for b in spec.branches],
        "breaks": [
            {
                "branch": int(k.branch),
                "interval": [float(k.interval[0]), float(k.interval[1])],
                "occlusion": k.occlusion,
            }
            for k in spec.breaks
        ],
        "decoys": [_branch(b) for b in spec.decoys],
        "intensity": {
            "vessel": float(spec.intensity.vessel),
            "background": float(spec.intensity.background),
            "noise_sd": float(spec.intensity.noise_sd),
        },
    }


def spec_from_dict(d: dict) -> PhantomSpec:
    def _branch(b: dict) -> BranchSpec:
        return BranchSpec(
            points=tuple(tuple(float(v) for v in p) for p in b["points"]),
            radii=tuple(float(r) for r in b["radii"]),
            closed=bool(b.get("closed", False)),
        )

    known = {"seed", "name", "dims", "spacing", "branches", "breaks", "decoys", "intensity"}
    extra = set(d) - known
    if extra:
        raise SpecInvalidError(f"unknown spec keys: {sorted(extra)}")
    inten = d.get("intensity", {})
    return PhantomSpec(
        seed=int(d["seed"]),
        name=str(d.get("name", "")),
        dims=tuple(int(v) for v in d["dims"]),
        spacing=tuple(float(v) for v in d.get("spacing", (1.0, 1.0, 1.0))),
        branches=tuple(_branch(b) for b in d.get("branches", ())),
        breaks=tuple(
            BreakSpec(
                branch=int(k["branch"]),
                interval=(float(k["interval"][0]), float(k["interval"][1])),
                occlusion=bool(k.get("occlusion", False)),
            )
            for k in d.get("breaks", ())
        ),
        decoys=tuple(_branch(b) for b in d.get("decoys", ())),
        intensity=IntensityModel(
            vessel=float(inten.get("vessel", 300.0)),
            background=float(inten.get("background", 0.0)),
            noise_sd=float(inten.get("noise_sd", 20.0)),
        ),
    )


def save_case(case: PhantomCase, out_dir: str | Path) -> Path:
    """Write volumes, centerlines, and truth records under one directory."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(case.volume, d / "volume.json")
    save_volume(case.gt_mask, d / "gt_mask.json")
    save_volume(case.broken_mask, d / "broken_mask.json")
    dump_branches(case.gt_centerlines, d / "gt_centerlines.jsonl")
    meta = {
        "spec": spec_to_dict(case.spec),
        "break_records": [
            {
                "branch": r.branch,
                "interval": [float(r.interval[0]), float(r.interval[1])],
                "occlusion": r.occlusion,
                "should_reconnect": r.should_reconnect,
            }
            for r in case.break_records
        ],
    }
    (d / "case.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_case(case_dir: str | Path) -> PhantomCase:
    d = Path(case_dir)
    meta = json.loads((d / "case.json").read_text())
    spec = spec_from_dict(meta["spec"])
    records = [
        BreakRecord(
            branch=int(r["branch"]),
            interval=(float(r["interval"][0]), float(r["interval"][1])),
            occlusion=bool(r["occlusion"]),
            should_reconnect=bool(r["should_reconnect"]),
        )
        for r in meta["break_records"]
    ]
    return PhantomCase(
        spec=spec,
        volume=load_volume(d / "volume.json", VolumeKind.INTENSITY),
        gt_mask=load_volume(d / "gt_mask.json", VolumeKind.BINARY_MASK),
        broken_mask=load_volume(d / "broken_mask.json", VolumeKind.BINARY_MASK),
        gt_centerlines=load_branches(d / "gt_centerlines.jsonl"),
        break_records=records,
    )
