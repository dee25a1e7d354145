"""Skeletonization and centerline branch decomposition.

Two skeletonizers live here. :func:`soft_skeletonize` is the differentiable
min/max-pool erosion scheme used by the topology losses; it maps soft
probability fields to soft skeletons and leaves one-voxel-wide binary
curves unchanged. :func:`skeletonize_hard` is classical topology-preserving
thinning used by the reconnection pipeline; its output is decomposed into
:class:`CenterlineBranch` records by :func:`extract_branches`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _sk_skeletonize

from .grid import (
    Connectivity,
    LabeledComponents,
    Volume,
    VolumeKind,
    connected_components,
    linear_index,
    max_pool3,
    min_pool3,
)

__all__ = [
    "Skeleton",
    "CenterlineBranch",
    "soft_skeletonize",
    "skeletonize_hard",
    "extract_branches",
    "detect_opening_points",
    "annotate_openings",
    "dump_branches",
    "load_branches",
]

# 26-neighborhood offsets in a fixed lexicographic order; tracing and
# opening-point checks iterate these so results are deterministic.
_OFFSETS_26 = np.array(
    [
        (i, j, k)
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
        if (i, j, k) != (0, 0, 0)
    ],
    dtype=np.int64,
)


@dataclass
class Skeleton:
    """A skeleton field plus a note about where it came from."""

    mask: Volume
    source: str = ""

    def voxels(self) -> np.ndarray:
        """Integer coordinates of skeleton voxels, shape (n, 3)."""
        return np.argwhere(self.mask.foreground())


@dataclass
class CenterlineBranch:
    """One junction-free run of centerline voxels.

    ``points`` are ordered so consecutive rows are 26-neighbors.
    ``head_tangent``/``tail_tangent`` are unit vectors pointing outward
    (beyond the first/last point), estimated from three consecutive
    points where available and from the endpoint difference otherwise.
    A branch with a single point has zero tangents.
    """

    branch_id: int
    points: np.ndarray
    component_id: int
    is_connected_tree: bool
    head_tangent: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tail_tangent: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opening_points: tuple[tuple[int, int, int], ...] = ()

    def __len__(self) -> int:
        return int(len(self.points))

    def end(self, which: int) -> tuple[int, int, int]:
        """Endpoint voxel; ``which`` is 0 for the head, -1 for the tail."""
        return tuple(int(v) for v in self.points[0 if which == 0 else -1])

    def end_tangent(self, which: int) -> np.ndarray:
        return self.head_tangent if which == 0 else self.tail_tangent


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def soft_skeletonize(prob: Volume, iterations: int = 10) -> Skeleton:
    """Morphological soft skeleton via iterated erosion and opening.

    Accumulates the residues ``relu(img - open(img))`` of successive
    erosions with a soft union, so values stay in [0, 1]. On a binary
    one-voxel-wide curve the result equals the input, which also makes
    the operation idempotent there.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if prob.data.min() < 0.0 or prob.data.max() > 1.0:
        raise ValueError("soft skeletonization expects values in [0, 1]")

    def _open(v: Volume) -> Volume:
        return max_pool3(min_pool3(v))

    img = prob.like(prob.data, VolumeKind.PROBABILITY)
    skel = _relu(img.data - _open(img).data)
    for _ in range(iterations):
        img = min_pool3(img)
        delta = _relu(img.data - _open(img).data)
        skel = skel + _relu(delta - skel * delta)
    return Skeleton(prob.like(skel, VolumeKind.PROBABILITY), source="soft")


def skeletonize_hard(mask: Volume) -> Skeleton:
    """Topology-preserving thinning to a one-voxel-wide centerline.

    Wraps the library thinning with a restore pass: the thinner can erase
    a small component outright, so any input component whose skeleton
    came back empty gets its interior-most voxel (distance-transform
    argmax, ties by smallest linear index) reinserted. This keeps the
    26-component count identical to the input's.
    """
    fg = mask.foreground()
    sk = _sk_skeletonize(fg)
    comps = connected_components(mask, Connectivity.FULL)
    for label in range(1, comps.count + 1):
        comp = comps.labels == label
        if not (sk & comp).any():
            d = ndimage.distance_transform_edt(comp)
            # favor the deepest voxel; flat ties resolve to the smallest
            # linear index because argmax scans x-fastest order
            flat = np.argmax(d.ravel(order="F"))
            idx = np.unravel_index(flat, d.shape, order="F")
            sk[idx] = True
    out = mask.like(sk.astype(np.float32), VolumeKind.BINARY_MASK)
    return Skeleton(out, source="thinning")


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else np.zeros(3)


def _branch_tangents(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = points.astype(np.float64)
    if len(p) >= 3:
        head = _unit(p[0] - p[2])
        tail = _unit(p[-1] - p[-3])
    elif len(p) == 2:
        head = _unit(p[0] - p[1])
        tail = -head
    else:
        head = tail = np.zeros(3)
    return head, tail


def extract_branches(
    skel: Skeleton, components: LabeledComponents
) -> list[CenterlineBranch]:
    """Split a skeleton into junction-free branches.

    Junction voxels (more than two 26-neighbors) terminate traces. Each
    junction voxel is assigned to exactly one incident branch (the
    longest; ties go to the earliest-traced), so the union of all branch
    point lists is a partition of the skeleton voxel set.

    ``components`` supplies per-voxel component labels (computed on the
    segmentation or the skeleton itself; the skeleton must be covered by
    nonzero labels). Branches in one of the two largest components are
    flagged ``is_connected_tree``.
    """
    pts = skel.voxels()
    if len(pts) == 0:
        return []
    dims = skel.mask.dims
    pset = {tuple(p): i for i, p in enumerate(pts)}

    neighbors: list[list[tuple[int, int, int]]] = []
    for p in pts:
        ns = []
        for off in _OFFSETS_26:
            q = (int(p[0] + off[0]), int(p[1] + off[1]), int(p[2] + off[2]))
            if q in pset:
                ns.append(q)
        neighbors.append(ns)
    degree = np.array([len(n) for n in neighbors])

    order = np.argsort(linear_index(pts, dims), kind="stable")
    is_node = degree != 2

    visited_edges: set[tuple[int, int]] = set()
    paths: list[list[tuple[int, int, int]]] = []

    def _edge(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def _trace(start: int, nxt: int) -> list[tuple[int, int, int]]:
        path = [tuple(int(v) for v in pts[start])]
        prev, cur = start, nxt
        while True:
            visited_edges.add(_edge(prev, cur))
            path.append(tuple(int(v) for v in pts[cur]))
            if is_node[cur]:
                return path
            ns = [pset[q] for q in neighbors[cur]]
            ns = [q for q in ns if q != prev]
            if not ns:
                return path
            nxt2 = ns[0]
            if _edge(cur, nxt2) in visited_edges:
                return path
            prev, cur = cur, nxt2

    # branches between endpoint/junction nodes
    for i in order:
        if not is_node[i]:
            continue
        if degree[i] == 0:
            paths.append([tuple(int(v) for v in pts[i])])
            continue
        for q in neighbors[i]:
            j = pset[q]
            if _edge(i, j) in visited_edges:
                continue
            paths.append(_trace(i, j))

    # leftover pure cycles (every voxel degree 2)
    in_path = {p for path in paths for p in path}
    for i in order:
        p0 = tuple(int(v) for v in pts[i])
        if p0 in in_path or degree[i] != 2:
            continue
        cycle = [p0]
        prev, cur = i, pset[neighbors[i][0]]
        while cur != i:
            cycle.append(tuple(int(v) for v in pts[cur]))
            ns = [pset[q] for q in neighbors[cur] if pset[q] != prev]
            prev, cur = cur, ns[0]
        paths.append(cycle)
        in_path.update(cycle)

    # assign each junction voxel to its longest incident branch
    junctions = {tuple(int(v) for v in pts[i]) for i in range(len(pts)) if degree[i] >= 3}
    owner: dict[tuple[int, int, int], int] = {}
    for bid, path in enumerate(paths):
        for end in {path[0], path[-1]} if len(path) > 1 else {path[0]}:
            if end in junctions:
                best = owner.get(end)
                if best is None or len(paths[best]) < len(path):
                    owner[end] = bid

    branches: list[CenterlineBranch] = []
    for bid, path in enumerate(paths):
        trimmed = list(path)
        if trimmed and trimmed[-1] in junctions and owner[trimmed[-1]] != bid:
            trimmed = trimmed[:-1]
        if trimmed and trimmed[0] in junctions and owner[trimmed[0]] != bid:
            trimmed = trimmed[1:]
        if not trimmed:
            continue
        arr = np.array(trimmed, dtype=np.int64)
        comp = int(components.labels[tuple(arr[0])])
        head, tail = _branch_tangents(arr)
        branches.append(
            CenterlineBranch(
                branch_id=len(branches),
                points=arr,
                component_id=comp,
                is_connected_tree=comp in (1, 2) and comp != 0,
                head_tangent=head,
                tail_tangent=tail,
            )
        )
    return branches


def detect_opening_points(
    branch: CenterlineBranch,
    skel: Skeleton,
    patch: int = 11,
    labels: LabeledComponents | None = None,
) -> list[tuple[int, int, int]]:
    """Free branch ends eligible for reconnection.

    An endpoint qualifies when (a) the ``patch``-cube centered on it holds
    no skeleton voxels from a different component and (b) it is a true
    free end, i.e. none of its 26-neighbors belong to the skeleton outside
    this branch. Junction-cut ends fail (b). A single-voxel branch yields
    its voxel at most once.
    """
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch must be odd and >= 1, got {patch}")
    if labels is None:
        labels = connected_components(skel.mask, Connectivity.FULL)
    half = patch // 2
    fg = skel.mask.foreground()
    lab = labels.labels
    dims = skel.mask.dims
    own = {tuple(int(v) for v in p) for p in branch.points}

    out: list[tuple[int, int, int]] = []
    ends = [branch.end(0)] if len(branch) == 1 else [branch.end(0), branch.end(-1)]
    for e in ends:
        my_label = int(lab[e])
        sl = tuple(
            slice(max(0, e[a] - half), min(dims[a], e[a] + half + 1)) for a in range(3)
        )
        window = lab[sl]
        if ((window != 0) & (window != my_label)).any():
            continue
        free = True
        for off in _OFFSETS_26:
            q = (int(e[0] + off[0]), int(e[1] + off[1]), int(e[2] + off[2]))
            if not all(0 <= q[a] < dims[a] for a in range(3)):
                continue
            if fg[q] and q not in own:
                free = False
                break
        if free and e not in out:
            out.append(e)
    return out


def annotate_openings(
    branches: list[CenterlineBranch],
    skel: Skeleton,
    patch: int = 11,
    labels: LabeledComponents | None = None,
) -> list[CenterlineBranch]:
    """Fill ``opening_points`` on every branch in place and return them."""
    if labels is None:
        labels = connected_components(skel.mask, Connectivity.FULL)
    for b in branches:
        b.opening_points = tuple(detect_opening_points(b, skel, patch, labels))
    return branches


def dump_branches(branches: list[CenterlineBranch], path: str | Path) -> Path:
    """Write branches as JSON lines: {id, component, connected, points}."""
    path = Path(path)
    with path.open("w") as fh:
        for b in branches:
            fh.write(
                json.dumps(
                    {
                        "id": int(b.branch_id),
                        "component": int(b.component_id),
                        "connected": bool(b.is_connected_tree),
                        "points": [[int(v) for v in p] for p in b.points],
                    }
                )
                + "\n"
            )
    return path


def load_branches(path: str | Path) -> list[CenterlineBranch]:
    """Read the JSON-lines branch dump written by :func:`dump_branches`."""
    out: list[CenterlineBranch] = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            arr = np.array(rec["points"], dtype=np.int64).reshape(-1, 3)
            head, tail = _branch_tangents(arr)
            out.append(
                CenterlineBranch(
                    branch_id=int(rec["id"]),
                    points=arr,
                    component_id=int(rec["component"]),
                    is_connected_tree=bool(rec["connected"]),
                    head_tangent=head,
                    tail_tangent=tail,
                )
            )
    return out
