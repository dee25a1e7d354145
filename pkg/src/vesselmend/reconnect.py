"""Centerline reconnection: candidate pairing, scored walking, validation.

The pipeline decomposes a broken segmentation into a connected tree (the
two largest components) and disconnected fragments, then tries to stitch
each fragment back in three passes:

1. fragment-to-fragment merges of small vessels,
2. fragment-to-tree joins at free endpoints,
3. fragment-to-tree side joins where a branch should sprout.

Each candidate pair launches a greedy voxel walk from the fragment's open
head. Steps are chosen by a combined score: negative distance to the
target, the normalized vesselness probability of the step (weighted by
``omega``), and direction-cosine smoothness terms against the recent walk
history. A stitch is kept only if the mean vesselness of the walked path
and of the fragment clears an acceptance threshold inflated by unit-root
p-values (stationarity distrust) of the path's probability sequence and
of the grayscale sequence across the junction; rejected fragments are
removed from the mask.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Connectivity, Volume, VolumeKind, connected_components, linear_index
from .oracle import LinearPatchOracle, ProbabilityOracle
from .skeleton import (
    CenterlineBranch,
    Skeleton,
    annotate_openings,
    extract_branches,
    skeletonize_hard,
)
from .stats import ConstantSeriesError, SeriesTooShortError, adf_test
from .topometrics import ReconnectionCounts

__all__ = [
    "ReconnectType",
    "NeighborLevel",
    "CandidateParams",
    "WalkParams",
    "CandidatePair",
    "StepTrace",
    "WalkResult",
    "StitchEvaluation",
    "ReconnectionOutcome",
    "select_candidates",
    "neighbor_offsets",
    "p_normalize",
    "walk",
    "evaluate_reconnection",
    "run_reconnection",
]


class ReconnectType(enum.IntEnum):
    SMALL_VESSEL = 1
    ENDPOINT = 2
    BRANCH_OCCURRENCE = 3


class NeighborLevel(enum.Enum):
    AUTO = "auto"
    FIRST = "first"
    SECOND = "second"


@dataclass(frozen=True)
class CandidateParams:
    """Distance/angle gates for the three candidate passes (voxel units)."""

    dist_small_vessel: float = 60.0
    dist_endpoint: float = 80.0
    dist_branch_short: float = 20.0
    dist_branch_long: float = 80.0
    length_short: float = 10.0
    length_long: float = 50.0
    proximal_angle_max_deg: float = 120.0
    cosine_sum_cap: float = 1.6
    max_candidates: int = 2


@dataclass(frozen=True)
class WalkParams:
    """Scored-walk knobs.

    ``neighbor_level`` AUTO switches from the 26-neighborhood to the
    two-voxel shell (Chebyshev 2, Euclidean <= 3) when the pair's nearest
    distance exceeds ``second_level_distance``. ``max_steps`` defaults to
    ``4 * nearest_distance + 20``.
    """

    omega: float = 5.0
    side: int = 5
    neighbor_level: NeighborLevel = NeighborLevel.AUTO
    second_level_distance: float = 20.0
    max_steps: int | None = None
    accept_threshold: float = 1.0


@dataclass
class CandidatePair:
    disconnected: CenterlineBranch
    candidate: CenterlineBranch
    rtype: ReconnectType
    nearest_distance: float
    proximal_angle_deg: float
    positional_cosines: tuple[float, float]
    source_point: tuple[int, int, int]
    source_end: int
    target_point: tuple[int, int, int] | None
    target_end: int | None


@dataclass(frozen=True)
class StepTrace:
    d: float
    p: float
    p_n: float
    c: float
    dpc: float


@dataclass
class WalkResult:
    path: np.ndarray
    traces: list[StepTrace]
    reached: bool
    stop_reason: str


@dataclass
class StitchEvaluation:
    accepted: bool
    score: float
    penalty_probability: float
    penalty_grayscale: float
    mean_path: float
    mean_fragment: float


@dataclass
class ReconnectionOutcome:
    refined_mask: Volume
    stitched_centerlines: list[np.ndarray]
    report: dict
    counts: ReconnectionCounts | None
    branches: list[CenterlineBranch]


# -- geometry ---------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else np.zeros(len(v))


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _nearest_distance(a: np.ndarray, b: np.ndarray) -> float:
    best = math.inf
    bf = b.astype(np.float64)
    for i in range(0, len(a), 512):
        chunk = a[i : i + 512].astype(np.float64)
        d2 = np.sum((chunk[:, None, :] - bf[None, :, :]) ** 2, axis=2)
        best = min(best, float(d2.min()))
    return math.sqrt(best)


def _pair_geometry(
    disc: CenterlineBranch, d_end: int, cand: CenterlineBranch, c_end: int
) -> tuple[float, tuple[float, float]]:
    """Proximal angle (deg) and the two positional cosines for a pair.

    The proximal angle compares the fragment's inward flow direction at
    its head (minus the outward tangent) with the candidate's outward
    tangent at its tail, so a collinear facing gap measures ~0. Branches
    too short for a tangent contribute zero vectors, which resolve to a
    permissive 0 degrees / cosine 1 by convention.
    """
    h_out = disc.end_tangent(d_end)
    t_out = cand.end_tangent(c_end)
    if np.linalg.norm(h_out) == 0.0 or np.linalg.norm(t_out) == 0.0:
        return 0.0, (1.0, 1.0)
    cosang = _cos(-h_out, t_out)
    proximal = math.degrees(math.acos(max(-1.0, min(1.0, cosang))))
    g = np.asarray(disc.end(d_end), dtype=np.float64) - np.asarray(
        cand.end(c_end), dtype=np.float64
    )
    return proximal, (_cos(g, t_out), _cos(-g, h_out))


def _endpoint_join_angles_ok(
    proximal_deg: float, cos_sum: float, params: CandidateParams
) -> bool:
    if proximal_deg >= params.proximal_angle_max_deg:
        return False
    bound = min(
        params.cosine_sum_cap, 2.0 * math.cos(math.radians(proximal_deg))
    )
    return cos_sum > bound


def _branch_sprout_angles_ok(
    proximal_deg: float, cos_sum: float, params: CandidateParams
) -> bool:
    # settings reversed relative to the endpoint join: a side sprout is
    # exactly the geometry the endpoint gate turns away
    return not _endpoint_join_angles_ok(proximal_deg, cos_sum, params)


def _nearest_ends(
    disc: CenterlineBranch, cand: CenterlineBranch, openings_only: bool
) -> tuple[int, int] | None:
    """Pick (disc_end, cand_end) minimizing endpoint distance.

    The fragment end must be an opening point. The candidate end must be
    one too when ``openings_only``; otherwise any endpoint works.
    """
    d_ends = [
        e for e in (0, -1) if disc.end(e) in disc.opening_points
    ]
    if len(disc) == 1:
        d_ends = [0] if disc.end(0) in disc.opening_points else []
    c_ends = [0, -1] if len(cand) > 1 else [0]
    if openings_only:
        c_ends = [e for e in c_ends if cand.end(e) in cand.opening_points]
    best = None
    best_d = math.inf
    for de in d_ends:
        for ce in c_ends:
            d = float(
                np.linalg.norm(
                    np.asarray(disc.end(de), float) - np.asarray(cand.end(ce), float)
                )
            )
            if d < best_d:
                best_d = d
                best = (de, ce)
    return best


def _make_pair(
    disc: CenterlineBranch,
    cand: CenterlineBranch,
    rtype: ReconnectType,
    params: CandidateParams,
) -> CandidatePair | None:
    near = _nearest_distance(disc.points, cand.points)
    if rtype is ReconnectType.SMALL_VESSEL:
        if near >= params.dist_small_vessel:
            return None
        ends = _nearest_ends(disc, cand, openings_only=True)
        if ends is None:
            return None
        proximal, cosines = _pair_geometry(disc, ends[0], cand, ends[1])
        if proximal >= params.proximal_angle_max_deg:
            return None
    elif rtype is ReconnectType.ENDPOINT:
        if near >= params.dist_endpoint:
            return None
        ends = _nearest_ends(disc, cand, openings_only=True)
        if ends is None:
            return None
        proximal, cosines = _pair_geometry(disc, ends[0], cand, ends[1])
        if not _endpoint_join_angles_ok(proximal, sum(cosines), params):
            return None
    else:
        length = len(disc)
        if length > params.length_long:
            gate = params.dist_branch_long
        elif length > params.length_short:
            gate = params.dist_branch_short
        else:
            return None
        if near > gate:
            return None
        ends = _nearest_ends(disc, cand, openings_only=False)
        if ends is None:
            return None
        proximal, cosines = _pair_geometry(disc, ends[0], cand, ends[1])
        if not _branch_sprout_angles_ok(proximal, sum(cosines), params):
            return None

    target = cand.end(ends[1]) if rtype is not ReconnectType.BRANCH_OCCURRENCE else None
    return CandidatePair(
        disconnected=disc,
        candidate=cand,
        rtype=rtype,
        nearest_distance=near,
        proximal_angle_deg=proximal,
        positional_cosines=cosines,
        source_point=disc.end(ends[0]),
        source_end=ends[0],
        target_point=target,
        target_end=ends[1] if target is not None else None,
    )


def select_candidates(
    branches: list[CenterlineBranch],
    params: CandidateParams = CandidateParams(),
    rtypes: tuple[int, ...] = (1, 2, 3),
) -> list[CandidatePair]:
    """Candidate pairs for each disconnected branch, in filtering order.

    Passes run in type order; within a pass candidates sort by nearest
    distance (branch id breaks ties). At most ``max_candidates`` pairs
    survive per disconnected branch across all passes. Branches must
    carry tangents and opening points (see ``annotate_openings``).
    """
    fragments = [b for b in branches if not b.is_connected_tree and b.opening_points]
    trees = [b for b in branches if b.is_connected_tree]
    out: list[CandidatePair] = []
    for disc in sorted(fragments, key=lambda b: b.branch_id):
        kept: list[CandidatePair] = []
        for rtype in rtypes:
            if len(kept) >= params.max_candidates:
                break
            rtype = ReconnectType(rtype)
            pool = (
                [f for f in fragments if f.branch_id != disc.branch_id]
                if rtype is ReconnectType.SMALL_VESSEL
                else trees
            )
            found = []
            for cand in pool:
                pair = _make_pair(disc, cand, rtype, params)
                if pair is not None:
                    found.append(pair)
            found.sort(key=lambda p: (p.nearest_distance, p.candidate.branch_id))
            for pair in found:
                if len(kept) >= params.max_candidates:
                    break
                kept.append(pair)
        out.extend(kept)
    return out


# -- the walk ---------------------------------------------------------


def _offsets_first() -> np.ndarray:
    offs = [
        (i, j, k)
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
        if (i, j, k) != (0, 0, 0)
    ]
    return np.array(offs, dtype=np.int64)


def _offsets_second(side: int) -> np.ndarray:
    half = side // 2
    offs = []
    rng = range(-half, half + 1)
    for i in rng:
        for j in rng:
            for k in rng:
                cheb = max(abs(i), abs(j), abs(k))
                if cheb == half and i * i + j * j + k * k <= (half + 1) ** 2:
                    offs.append((i, j, k))
    return np.array(offs, dtype=np.int64)


def neighbor_offsets(level: NeighborLevel, side: int = 5) -> np.ndarray:
    """Step offsets: the 26-neighborhood, or the outer shell of the
    ``side``-cube restricted to Euclidean radius ``side//2 + 1``."""
    if side < 3 or side % 2 == 0:
        raise ValueError(f"side must be odd and >= 3, got {side}")
    if level is NeighborLevel.FIRST:
        return _offsets_first()
    if level is NeighborLevel.SECOND:
        return _offsets_second(side)
    raise ValueError("resolve AUTO to FIRST or SECOND before asking for offsets")


def p_normalize(scores: np.ndarray) -> np.ndarray:
    """Max-min normalization over a candidate set; flat input maps to 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    lo = float(scores.min())
    hi = float(scores.max())
    if hi <= lo:
        return np.full(scores.shape, 0.5)
    return (scores - lo) / (hi - lo)


def _resolve_level(params: WalkParams, nearest: float) -> NeighborLevel:
    if params.neighbor_level is not NeighborLevel.AUTO:
        return params.neighbor_level
    return (
        NeighborLevel.SECOND
        if nearest > params.second_level_distance
        else NeighborLevel.FIRST
    )


class _OracleMemo:
    """Per-walk cache; neighbor sets of consecutive steps overlap a lot."""

    def __init__(self, oracle: ProbabilityOracle, vol: Volume):
        self.oracle = oracle
        self.vol = vol
        self.cache: dict[tuple[int, int, int], float] = {}

    def scores(self, coords: np.ndarray) -> np.ndarray:
        keys = [tuple(int(v) for v in c) for c in coords]
        missing = [k for k in keys if k not in self.cache]
        if missing:
            vals = self.oracle.query_many(self.vol, np.array(missing))
            for k, v in zip(missing, vals):
                self.cache[k] = float(v)
        return np.array([self.cache[k] for k in keys], dtype=np.float64)


def walk(
    pair: CandidatePair,
    vol: Volume,
    oracle: ProbabilityOracle,
    params: WalkParams = WalkParams(),
    blocked: frozenset[tuple[int, int, int]] = frozenset(),
) -> WalkResult:
    """Greedy scored walk from the fragment head toward the candidate.

    Per step, in-bounds unvisited neighbors pass direction filters (no
    more than 90 degrees against the connection vector and history for
    endpoint walks; against the recent history only for side sprouts),
    then the best combined score wins; ties go to the smallest linear
    voxel index. The walk ends when it lands within one voxel of the
    target endpoint (or any candidate voxel for side sprouts), when no
    viable step remains, or at the step budget.
    """
    dims = vol.dims
    level = _resolve_level(params, pair.nearest_distance)
    offsets = neighbor_offsets(level, params.side)
    max_steps = params.max_steps
    if max_steps is None:
        max_steps = int(4 * pair.nearest_distance + 20)

    sprout = pair.rtype is ReconnectType.BRANCH_OCCURRENCE
    cand_pts = pair.candidate.points.astype(np.float64)
    if sprout:
        target_set = {tuple(int(v) for v in p) for p in pair.candidate.points}
        target = None
    else:
        target = np.asarray(pair.target_point, dtype=np.float64)

    own = {tuple(int(v) for v in p) for p in pair.disconnected.points}
    memo = _OracleMemo(oracle, vol)

    def _reached(p: np.ndarray) -> bool:
        if sprout:
            for off in np.vstack([[(0, 0, 0)], _offsets_first()]):
                if (int(p[0] + off[0]), int(p[1] + off[1]), int(p[2] + off[2])) in target_set:
                    return True
            return False
        return bool(np.max(np.abs(p - target)) <= 1)

    cur = np.asarray(pair.source_point, dtype=np.int64)
    path = [cur.copy()]
    traces: list[StepTrace] = []
    visited = {tuple(int(v) for v in cur)}
    o1 = pair.disconnected.end_tangent(pair.source_end).astype(np.float64)
    o2: np.ndarray | None = None

    if _reached(cur.astype(np.float64)):
        return WalkResult(np.array(path), traces, True, "reached")

    for _ in range(max_steps):
        cands = cur[None, :] + offsets
        ok = np.all((cands >= 0) & (cands < np.array(dims)), axis=1)
        cands = cands[ok]
        keep = []
        for c in cands:
            key = (int(c[0]), int(c[1]), int(c[2]))
            if key in visited or key in blocked or key in own:
                continue
            o = (c - cur).astype(np.float64)
            if not sprout:
                conn = target - cur
                if float(np.dot(o, conn)) < 0:
                    continue
                if np.linalg.norm(o1) > 0 and float(np.dot(o, o1)) < 0:
                    continue
                if o2 is not None and np.linalg.norm(o2) > 0 and float(np.dot(o, o2)) < 0:
                    continue
            else:
                if np.linalg.norm(o1) > 0 and float(np.dot(o, o1)) < 0:
                    continue
                hist = o1 + (o2 if o2 is not None else 0.0)
                if np.linalg.norm(hist) > 0 and float(np.dot(o, hist)) < 0:
                    continue
            keep.append(c)
        if not keep:
            return WalkResult(np.array(path), traces, False, "no_viable_step")
        cands = np.array(keep)

        p_raw = memo.scores(cands)
        p_n = p_normalize(p_raw)
        if sprout:
            d_vals = np.empty(len(cands))
            for i, c in enumerate(cands):
                d_vals[i] = -math.sqrt(
                    float(np.min(np.sum((cand_pts - c.astype(np.float64)) ** 2, axis=1)))
                )
        else:
            d_vals = -np.linalg.norm(cands.astype(np.float64) - target, axis=1)

        offs = (cands - cur).astype(np.float64)
        c_vals = np.array(
            [
                _cos(o, o1) + (_cos(o, o2) if o2 is not None else 0.0)
                for o in offs
            ]
        )
        straight = o2 is not None and _cos(o1, o2) > 0.5
        dpc = d_vals + params.omega * p_n + (0.0 if straight else 1.0) * c_vals

        best = float(dpc.max())
        tied = np.flatnonzero(dpc >= best - 1e-12)
        lin = linear_index(cands[tied], dims)
        choice = tied[int(np.argmin(lin))]

        traces.append(
            StepTrace(
                d=float(d_vals[choice]),
                p=float(p_raw[choice]),
                p_n=float(p_n[choice]),
                c=float(c_vals[choice]) if not straight else 0.0,
                dpc=float(dpc[choice]),
            )
        )
        step = cands[choice] - cur
        cur = cands[choice]
        path.append(cur.copy())
        visited.add((int(cur[0]), int(cur[1]), int(cur[2])))
        o2 = o1
        o1 = step.astype(np.float64)
        if _reached(cur.astype(np.float64)):
            return WalkResult(np.array(path), traces, True, "reached")

    return WalkResult(np.array(path), traces, False, "max_steps")


# -- evaluation -------------------------------------------------------


def _adf_penalty(series: np.ndarray) -> float:
    """Stationarity distrust of a series.

    Too-short series earn maximum distrust (1.0). A perfectly constant
    series has no unit root and earns 0. Degenerate regressions fall
    back to maximum distrust.
    """
    try:
        return float(adf_test(series).p_value)
    except SeriesTooShortError:
        return 1.0
    except ConstantSeriesError:
        return 0.0
    except ValueError:
        return 1.0


def _oriented(branch: CenterlineBranch, end_first: int) -> np.ndarray:
    pts = branch.points
    return pts if end_first == 0 else pts[::-1]


def _intensities(vol: Volume, pts: np.ndarray) -> np.ndarray:
    p = np.asarray(pts, dtype=np.int64).reshape(-1, 3)
    return vol.data[p[:, 0], p[:, 1], p[:, 2]].astype(np.float64)


def _grayscale_sequence(
    result: WalkResult, pair: CandidatePair, vol: Volume, flank: int = 5
) -> np.ndarray:
    """Intensities along candidate tail -> stitched path -> fragment head."""
    if pair.rtype is ReconnectType.BRANCH_OCCURRENCE:
        tail = result.path[-1].astype(np.float64)
        d2 = np.sum((pair.candidate.points.astype(np.float64) - tail) ** 2, axis=1)
        i = int(np.argmin(d2))
        cand_side = pair.candidate.points[max(0, i - flank + 1) : i + 1]
    else:
        cand_side = _oriented(pair.candidate, pair.target_end)[::-1][-flank:]
    frag = _oriented(pair.disconnected, pair.source_end)[1 : 1 + flank - 1]
    seq = np.concatenate(
        [
            _intensities(vol, cand_side),
            _intensities(vol, result.path[::-1]),
            _intensities(vol, frag),
        ]
    )
    return seq


def evaluate_reconnection(
    result: WalkResult,
    pair: CandidatePair,
    vol: Volume,
    oracle: ProbabilityOracle,
    threshold: float = 1.0,
) -> StitchEvaluation:
    """Accept or reject a completed walk.

    Score is the mean vesselness along the walked path plus the mean
    along the fragment's own centerline; it must exceed the threshold
    plus two distrust penalties (unit-root p-values of the path's
    probability sequence and of the junction grayscale sequence).
    """
    p_path = oracle.query_many(vol, result.path)
    p_frag = oracle.query_many(vol, pair.disconnected.points)
    base = float(p_path.mean() + p_frag.mean())
    pen_p = _adf_penalty(p_path)
    pen_g = _adf_penalty(_grayscale_sequence(result, pair, vol))
    return StitchEvaluation(
        accepted=bool(base > threshold + pen_p + pen_g),
        score=base,
        penalty_probability=pen_p,
        penalty_grayscale=pen_g,
        mean_path=float(p_path.mean()),
        mean_fragment=float(p_frag.mean()),
    )


# -- the runner -------------------------------------------------------


def _densify(path: np.ndarray) -> np.ndarray:
    """Insert midpoints so consecutive points are 26-neighbors."""
    out = [path[0]]
    for q in path[1:]:
        p = out[-1]
        if int(np.max(np.abs(q - p))) > 1:
            out.append((p + q) // 2)
        out.append(q)
    return np.array(out, dtype=np.int64)


def _merge_branches(
    disc: CenterlineBranch,
    pair: CandidatePair,
    path: np.ndarray,
    new_id: int,
    new_component: int,
) -> CenterlineBranch:
    """Fuse two fragments and the walked path into one polyline branch."""
    from .skeleton import _branch_tangents

    cand_part = _oriented(pair.candidate, 0 if pair.target_end == -1 else -1)
    pieces = [cand_part]
    rev = path[::-1]
    if len(rev) and np.array_equal(rev[0], cand_part[-1]):
        rev = rev[1:]
    pieces.append(rev)
    frag_part = _oriented(disc, pair.source_end)
    pieces.append(frag_part[1:])
    pts = np.concatenate([p for p in pieces if len(p)])
    head, tail = _branch_tangents(pts)
    merged = CenterlineBranch(
        branch_id=new_id,
        points=pts,
        component_id=new_component,
        is_connected_tree=False,
        head_tangent=head,
        tail_tangent=tail,
    )
    merged.opening_points = (merged.end(0), merged.end(-1))
    return merged


def run_reconnection(
    mask: Volume,
    vol: Volume,
    oracle: ProbabilityOracle | None = None,
    candidate_params: CandidateParams = CandidateParams(),
    walk_params: WalkParams = WalkParams(),
    enabled_types: tuple[int, ...] = (1, 2, 3),
    opening_patch: int = 11,
    gt_mask: Volume | None = None,
    oracle_seed: int = 0,
) -> ReconnectionOutcome:
    """Run the full reconnect-or-remove pipeline on a broken mask.

    Passes run in type order; a fragment pair merged in pass 1 re-enters
    pass 2 as a single fragment. Fragments with no accepted connection
    are removed from the mask. When ``gt_mask`` is given, per-fragment
    decisions are tallied into :class:`ReconnectionCounts` (a fragment
    "should connect" if at least half its voxels lie in the truth, and a
    stitch is correct when its path stays inside the truth dilated by
    one voxel).

    With no oracle, a :class:`LinearPatchOracle` is fit on the mask's own
    skeleton (self-supervised) with ``oracle_seed``.
    """
    mask.same_grid(vol)
    comps = connected_components(mask, Connectivity.FULL)
    skel = skeletonize_hard(mask)
    branches = extract_branches(skel, comps)
    annotate_openings(branches, skel, opening_patch, comps)

    if oracle is None:
        oracle = LinearPatchOracle().fit(
            vol, mask.foreground(), skel.mask.foreground(), seed=oracle_seed
        )

    frag_comp_ids = {
        b.component_id for b in branches if not b.is_connected_tree
    }
    comp_connected: dict[int, bool] = {cid: False for cid in frag_comp_ids}
    comp_paths: dict[int, list[np.ndarray]] = {cid: [] for cid in frag_comp_ids}
    consumed: set[int] = set()
    merged_members: dict[int, set[int]] = {}
    synthetic = -1

    stitched_global: set[tuple[int, int, int]] = set()
    stitched_centerlines: list[np.ndarray] = []
    pair_reports: list[dict] = []
    pool = list(branches)
    attempts: dict[int, int] = {}

    def _roots(branch: CenterlineBranch) -> set[int]:
        if branch.component_id in merged_members:
            return merged_members[branch.component_id]
        return {branch.component_id}

    for rtype in (1, 2, 3):
        if rtype not in enabled_types:
            continue
        active = [
            b
            for b in pool
            if b.is_connected_tree
            or (
                b.branch_id not in consumed
                and not any(comp_connected.get(c, False) for c in _roots(b))
            )
        ]
        pairs = select_candidates(active, candidate_params, rtypes=(rtype,))
        pairs.sort(
            key=lambda p: (
                int(p.rtype),
                p.nearest_distance,
                p.disconnected.branch_id,
                p.candidate.branch_id,
            )
        )
        for pair in pairs:
            disc = pair.disconnected
            if disc.branch_id in consumed:
                continue
            if any(comp_connected.get(c, False) for c in _roots(disc)):
                continue
            if attempts.get(disc.branch_id, 0) >= candidate_params.max_candidates:
                continue
            if (
                pair.rtype is ReconnectType.SMALL_VESSEL
                and pair.candidate.branch_id in consumed
            ):
                continue
            attempts[disc.branch_id] = attempts.get(disc.branch_id, 0) + 1
            result = walk(pair, vol, oracle, walk_params, frozenset(stitched_global))
            entry = {
                "rtype": int(pair.rtype),
                "disconnected_branch": int(disc.branch_id),
                "candidate_branch": int(pair.candidate.branch_id),
                "nearest_distance": round(pair.nearest_distance, 6),
                "reached": bool(result.reached),
                "score": None,
                "penalties": None,
                "verdict": "rejected",
            }
            if result.reached:
                ev = evaluate_reconnection(
                    result, pair, vol, oracle, walk_params.accept_threshold
                )
                entry["score"] = round(ev.score, 6)
                entry["penalties"] = round(
                    ev.penalty_probability + ev.penalty_grayscale, 6
                )
                if ev.accepted:
                    entry["verdict"] = "accepted"
                    dense = _densify(result.path)
                    stitched_global.update(tuple(int(v) for v in p) for p in dense)
                    if pair.rtype is ReconnectType.SMALL_VESSEL:
                        merged = _merge_branches(
                            disc, pair, dense, new_id=len(pool), new_component=synthetic
                        )
                        merged_members[synthetic] = _roots(disc) | _roots(pair.candidate)
                        synthetic -= 1
                        consumed.add(disc.branch_id)
                        consumed.add(pair.candidate.branch_id)
                        pool.append(merged)
                        for cid in merged_members[merged.component_id]:
                            comp_paths[cid].append(dense)
                    else:
                        full = np.concatenate(
                            [dense[::-1], _oriented(disc, pair.source_end)[1:]]
                        )
                        stitched_centerlines.append(full)
                        for cid in _roots(disc):
                            comp_connected[cid] = True
                            comp_paths[cid].append(dense)
            pair_reports.append(entry)

    removed = sorted(cid for cid, ok in comp_connected.items() if not ok)
    refined = mask.data.copy()
    for cid in removed:
        refined[comps.labels == cid] = 0.0
    refined_mask = mask.like(refined, VolumeKind.BINARY_MASK)

    counts = None
    if gt_mask is not None:
        counts = _tally_counts(mask, gt_mask, comps, comp_connected, comp_paths)

    report = {
        "pairs": pair_reports,
        "removed_components": [int(c) for c in removed],
        "accepted": sum(1 for e in pair_reports if e["verdict"] == "accepted"),
        "fragments": len(frag_comp_ids),
    }
    if counts is not None:
        report["counts"] = {
            "tp_b": counts.tp_b,
            "tp_s": counts.tp_s,
            "tn_b": counts.tn_b,
            "fp_b": counts.fp_b,
            "fp_s": counts.fp_s,
            "fn_b": counts.fn_b,
        }
    return ReconnectionOutcome(
        refined_mask=refined_mask,
        stitched_centerlines=stitched_centerlines,
        report=report,
        counts=counts,
        branches=pool,
    )


def _tally_counts(
    mask: Volume,
    gt_mask: Volume,
    comps,
    comp_connected: dict[int, bool],
    comp_paths: dict[int, list[np.ndarray]],
) -> ReconnectionCounts:
    from scipy import ndimage

    gt = gt_mask.foreground()
    halo = ndimage.binary_dilation(
        gt, structure=ndimage.generate_binary_structure(3, 3)
    )
    counts = ReconnectionCounts()
    for cid, connected in sorted(comp_connected.items()):
        comp = comps.labels == cid
        should = float((comp & gt).sum()) >= 0.5 * float(comp.sum())
        if connected:
            paths = comp_paths.get(cid, [])
            inside = all(
                bool(halo[p[0], p[1], p[2]]) for path in paths for p in path
            )
            if should:
                counts.tp_b += 1
                if inside:
                    counts.tp_s += 1
                else:
                    counts.fp_s += 1
            else:
                counts.fp_b += 1
                counts.fp_s += 1
        else:
            if should:
                counts.fn_b += 1
            else:
                counts.tn_b += 1
    return counts
