"""Volume file IO: a minimal NIfTI-1 subset and a raw+JSON pair format.

NIfTI-1 support is deliberately narrow: uncompressed single-file ``.nii``
with magic ``n+1``, a 348-byte header, uint8/int16/float32 payloads and
spacing taken from ``pixdim[1..3]``. ``vox_offset`` is honored. The affine
and intensity-scaling fields are ignored; voxel values are preserved
bit-exactly (after widening to float32 in memory).

The raw+JSON format stores a ``<name>.json`` sidecar::

    {"dims": [nx, ny, nz], "spacing": [sx, sy, sz],
     "dtype": "u8"|"i16"|"f32", "order": "x-fastest"}

next to a little-endian ``<name>.raw`` payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import Volume, VolumeKind

__all__ = [
    "UnsupportedDatatypeError",
    "HeaderCorruptError",
    "SizeMismatchError",
    "load_volume",
    "save_volume",
]


class UnsupportedDatatypeError(ValueError):
    """Datatype outside the supported uint8/int16/float32 subset."""


class HeaderCorruptError(ValueError):
    """Header fails basic structural validation."""


class SizeMismatchError(ValueError):
    """Declared dims x dtype do not match the available payload bytes."""


_DTYPES = {"u8": np.dtype("u1"), "i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
_NIFTI_CODE = {2: "u8", 4: "i16", 16: "f32"}
_NIFTI_CODE_INV = {"u8": 2, "i16": 4, "f32": 16}
_BITPIX = {"u8": 8, "i16": 16, "f32": 32}
_HDR_SIZE = 348


def _decode_payload(raw: bytes, dims, dtype_key: str, byteorder: str = "<") -> np.ndarray:
    dt = _DTYPES[dtype_key].newbyteorder(byteorder)
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) < need:
        raise SizeMismatchError(
            f"payload has {len(raw)} bytes, dims {tuple(dims)} x {dtype_key} need {need}"
        )
    flat = np.frombuffer(raw[:need], dtype=dt)
    # x-fastest on disk
    return flat.reshape(tuple(dims), order="F")


def _load_rawjson(path: Path) -> Volume:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise HeaderCorruptError(f"{path}: invalid JSON sidecar: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "order"):
        if key not in meta:
            raise HeaderCorruptError(f"{path}: sidecar missing key {key!r}")
    if meta["order"] != "x-fastest":
        raise HeaderCorruptError(f"{path}: unsupported order {meta['order']!r}")
    if meta["dtype"] not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: dtype {meta['dtype']!r}")
    raw = path.with_suffix(".raw").read_bytes()
    data = _decode_payload(raw, meta["dims"], meta["dtype"])
    return Volume(
        dims=tuple(meta["dims"]),
        spacing=tuple(meta["spacing"]),
        data=data,
        source_dtype=meta["dtype"],
    )


def _load_nifti(path: Path) -> Volume:
    blob = path.read_bytes()
    if len(blob) < _HDR_SIZE:
        raise HeaderCorruptError(f"{path}: file shorter than the 348-byte header")
    magic = blob[344:348]
    if magic != b"n+1\x00":
        raise HeaderCorruptError(f"{path}: magic {magic!r} is not a single-file n+1")
    bo = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != _HDR_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != _HDR_SIZE:
            raise HeaderCorruptError(f"{path}: sizeof_hdr {sizeof_hdr} != 348")
        bo = ">"
    dim = struct.unpack_from(bo + "8h", blob, 40)
    if not (1 <= dim[0] <= 7):
        raise HeaderCorruptError(f"{path}: dim[0]={dim[0]} out of range")
    if any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise UnsupportedDatatypeError(f"{path}: only 3D scalar grids are supported")
    nx, ny, nz = (max(1, dim[i]) for i in (1, 2, 3))
    (datatype, _bitpix) = struct.unpack_from(bo + "2h", blob, 70)
    if datatype not in _NIFTI_CODE:
        raise UnsupportedDatatypeError(f"{path}: NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(bo + "8f", blob, 76)
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise HeaderCorruptError(f"{path}: nonpositive pixdim {spacing}")
    (vox_offset,) = struct.unpack_from(bo + "f", blob, 108)
    off = int(vox_offset)
    if off < _HDR_SIZE:
        raise HeaderCorruptError(f"{path}: vox_offset {off} < 348")
    key = _NIFTI_CODE[datatype]
    data = _decode_payload(blob[off:], (nx, ny, nz), key, bo)
    return Volume(dims=(nx, ny, nz), spacing=tuple(float(s) for s in spacing),
                  data=data, source_dtype=key)


def load_volume(path: str | Path, kind: VolumeKind = VolumeKind.INTENSITY) -> Volume:
    """Load a volume, dispatching on extension (.nii or .json)."""
    path = Path(path)
    if path.suffix == ".nii":
        vol = _load_nifti(path)
    elif path.suffix == ".json":
        vol = _load_rawjson(path)
    else:
        raise UnsupportedDatatypeError(f"{path}: unknown volume extension")
    vol.kind = kind
    if kind is VolumeKind.BINARY_MASK:
        bad = ~np.isin(vol.data, (0.0, 1.0))
        if bad.any():
            raise ValueError(f"{path}: expected a 0/1 mask")
    return vol


def _payload_bytes(vol: Volume) -> bytes:
    dt = _DTYPES[vol.source_dtype]
    arr = vol.data.astype(dt, copy=False)
    return arr.ravel(order="F").tobytes()


def _save_rawjson(vol: Volume, path: Path) -> None:
    meta = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "dtype": vol.source_dtype,
        "order": "x-fastest",
    }
    path.write_text(json.dumps(meta, sort_keys=True) + "\n")
    path.with_suffix(".raw").write_bytes(_payload_bytes(vol))


def _save_nifti(vol: Volume, path: Path) -> None:
    key = vol.source_dtype
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, vol.dims[0], vol.dims[1], vol.dims[2], 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_CODE_INV[key], _BITPIX[key])
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    # 4 zero bytes after the header: no extensions
    path.write_bytes(bytes(hdr) + b"\x00\x00\x00\x00" + _payload_bytes(vol))


def save_volume(vol: Volume, path: str | Path) -> Path:
    """Write a volume, dispatching on extension (.nii or .json).

    The payload dtype is ``vol.source_dtype``; values are cast without
    rounding, so keep the field consistent with the data (mask volumes
    loaded from u8 files round-trip bit-exactly).
    """
    path = Path(path)
    if path.suffix == ".nii":
        _save_nifti(vol, path)
    elif path.suffix == ".json":
        _save_rawjson(vol, path)
    else:
        raise UnsupportedDatatypeError(f"{path}: unknown volume extension")
    return path
