"""Dense 3D scalar grids and the voxel-level primitives built on them.

The central type is :class:`Volume`: a scalar field on a regular grid with
per-axis physical spacing in millimetres. Payloads are kept as float32
regardless of the on-disk dtype; loaders record the source dtype so writers
can round-trip files bit-exactly.

Axis convention: ``data[i, j, k]`` indexes (x, y, z) and the serialized
order is x-fastest, i.e. ``data.ravel(order="F")``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "VolumeKind",
    "Connectivity",
    "LabeledComponents",
    "DimMismatchError",
    "EmptyMaskError",
    "EvenKernelError",
    "euclidean_dt",
    "connected_components",
    "max_pool3",
    "min_pool3",
    "linear_index",
]


class VolumeKind(enum.Enum):
    INTENSITY = "intensity"
    BINARY_MASK = "binary_mask"
    PROBABILITY = "probability"
    DISTANCE = "distance"


class Connectivity(enum.IntEnum):
    FACES = 6
    FULL = 26


class DimMismatchError(ValueError):
    """Operands live on different grids."""


class EmptyMaskError(ValueError):
    """A mask that must contain foreground is all background."""


class EvenKernelError(ValueError):
    """Pooling kernels must be odd so the window has a center voxel."""


@dataclass
class Volume:
    """A scalar field on a regular 3D grid.

    Parameters
    ----------
    dims : tuple of int
        Grid shape (nx, ny, nz), each >= 1.
    spacing : tuple of float
        Physical voxel size in mm per axis, each > 0.
    data : ndarray
        Shape ``dims``, cast to float32 on construction.
    kind : VolumeKind
        What the scalars mean. Binary masks must be 0/1, probabilities
        must lie in [0, 1].
    source_dtype : str
        On-disk dtype this volume came from ("u8", "i16" or "f32");
        writers use it to reproduce the original payload bytes.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    kind: VolumeKind = VolumeKind.INTENSITY
    source_dtype: str = "f32"

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != self.dims:
            raise DimMismatchError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        if self.kind is VolumeKind.BINARY_MASK:
            bad = ~np.isin(self.data, (0.0, 1.0))
            if bad.any():
                raise ValueError("binary mask contains values other than 0/1")
        elif self.kind is VolumeKind.PROBABILITY:
            if self.data.min() < 0.0 or self.data.max() > 1.0:
                raise ValueError("probability volume outside [0, 1]")

    # -- convenience -------------------------------------------------

    def foreground(self) -> np.ndarray:
        """Boolean support: >= 0.5 so it works for soft inputs too."""
        return self.data >= 0.5

    def like(self, data: np.ndarray, kind: VolumeKind) -> "Volume":
        """New volume on the same grid."""
        return Volume(self.dims, self.spacing, data, kind, self.source_dtype)

    def same_grid(self, other: "Volume") -> None:
        if self.dims != other.dims:
            raise DimMismatchError(f"grids differ: {self.dims} vs {other.dims}")


@dataclass
class LabeledComponents:
    """Connected-component labeling with a deterministic label order.

    Label 1 is the largest component, label 2 the next, and so on; ties
    are broken by the smallest linear (x-fastest) voxel index within the
    component. ``sizes[i]`` is the voxel count of label ``i + 1``.
    """

    labels: np.ndarray
    sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def count(self) -> int:
        return int(len(self.sizes))


def linear_index(coords: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """x-fastest linear index of integer voxel coordinates."""
    c = np.asarray(coords)
    return c[..., 0] + dims[0] * (c[..., 1] + dims[1] * c[..., 2])


def euclidean_dt(
    mask: Volume,
    to_foreground: bool = True,
    spacing_weighted: bool = False,
) -> Volume:
    """Exact Euclidean distance transform.

    With ``to_foreground`` the result at each voxel is the distance to the
    nearest foreground voxel (0 on the foreground itself); otherwise it is
    the distance to the nearest background voxel. Distances are in voxel
    units unless ``spacing_weighted``, which weighs each axis by the
    volume spacing (mm).

    Raises
    ------
    EmptyMaskError
        If the reference set (foreground or background) is empty.
    """
    fg = mask.foreground()
    ref = fg if to_foreground else ~fg
    if not ref.any():
        raise EmptyMaskError("distance transform reference set is empty")
    sampling = mask.spacing if spacing_weighted else None
    # distance_transform_edt measures distance to the nearest zero voxel
    d = ndimage.distance_transform_edt(~ref, sampling=sampling)
    return mask.like(d, VolumeKind.DISTANCE)


def connected_components(
    mask: Volume, connectivity: Connectivity | int = Connectivity.FULL
) -> LabeledComponents:
    """26- or 6-connected components, relabeled to a deterministic order.

    Components are sorted by size descending; equal sizes are ordered by
    the smallest linear voxel index they contain.
    """
    connectivity = Connectivity(connectivity)
    structure = ndimage.generate_binary_structure(
        3, 3 if connectivity is Connectivity.FULL else 1
    )
    raw, n = ndimage.label(mask.foreground(), structure=structure)
    if n == 0:
        return LabeledComponents(labels=np.zeros(mask.dims, dtype=np.int32))
    sizes = np.bincount(raw.ravel())[1:]
    lin = (
        np.arange(raw.size, dtype=np.int64)
        .reshape(mask.dims, order="F")
    )
    first = ndimage.minimum(lin, labels=raw, index=np.arange(1, n + 1))
    order = sorted(range(n), key=lambda i: (-int(sizes[i]), int(first[i])))
    remap = np.zeros(n + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old + 1] = new
    return LabeledComponents(labels=remap[raw], sizes=sizes[order].astype(np.int64))


def _pool(vol: Volume, kernel: int, op) -> Volume:
    if kernel < 1 or kernel % 2 == 0:
        raise EvenKernelError(f"kernel must be odd and >= 1, got {kernel}")
    out = op(vol.data, size=kernel, mode="nearest")
    return vol.like(out, vol.kind)


def max_pool3(vol: Volume, kernel: int = 3) -> Volume:
    """Sliding-window maximum with edge replication at the borders."""
    return _pool(vol, kernel, ndimage.maximum_filter)


def min_pool3(vol: Volume, kernel: int = 3) -> Volume:
    """Sliding-window minimum with edge replication at the borders."""
    return _pool(vol, kernel, ndimage.minimum_filter)
