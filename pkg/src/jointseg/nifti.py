"""Minimal NIfTI-1 single-file I/O plus a compressed array container.

Covers what this project needs: axis-aligned 3D volumes in ``.nii`` or
``.nii.gz`` with the common scalar datatypes, spacing from ``pixdim`` and
origin from the sform row offsets. Header/image pairs, oblique affines
and extensions are out of scope.
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import FormatError, ShapeError
from .volume import LabelMap, LesionMask, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _open_read(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_all(path) -> bytes:
    try:
        with _open_read(path) as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def load_volume(path) -> tuple[Volume, dict]:
    """Load a 3D NIfTI-1 volume.

    Returns the volume and a metadata dict with the raw datatype code,
    stored dim array and byte order. Byte-swapped files are normalized.
    """
    raw = _read_all(path)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than NIfTI-1 header")
    for order in ("<", ">"):
        (sizeof_hdr,) = struct.unpack_from(order + "i", raw, 0)
        if sizeof_hdr == HEADER_SIZE:
            break
    else:
        raise FormatError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    magic = raw[344:348]
    if magic != MAGIC_SINGLE:
        raise FormatError(f"{path}: unsupported magic {magic!r} (need single-file 'n+1')")

    dim = struct.unpack_from(order + "8h", raw, 40)
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    (bitpix,) = struct.unpack_from(order + "h", raw, 72)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", raw, 112)
    (sform_code,) = struct.unpack_from(order + "h", raw, 254)
    srow = struct.unpack_from(order + "12f", raw, 280)

    nd = dim[0]
    if not 1 <= nd <= 7:
        raise FormatError(f"{path}: dim[0]={nd} out of range")
    shape = tuple(int(d) for d in dim[1 : 1 + nd])
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: non-positive dimension in {shape}")
    # Trailing singleton dims (e.g. a single time point) are squeezed.
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) != 3:
        raise ShapeError(f"{path}: payload is {len(shape)}D, expected 3D")

    if datatype not in _DTYPE_CODES:
        raise FormatError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder(order)
    if bitpix != dtype.itemsize * 8:
        raise FormatError(f"{path}: bitpix {bitpix} inconsistent with datatype")

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F")
    data = np.asarray(data, dtype=dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = (data.astype(np.float32) * slope) + scl_inter

    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        origin = (float(srow[3]), float(srow[7]), float(srow[11]))
    else:
        origin = (0.0, 0.0, 0.0)
    meta = {"datatype": int(datatype), "dim": dim, "byte_order": order}
    return Volume(data=data, spacing=spacing, origin=origin), meta


def save_volume(path, v: Volume, dtype=np.float32) -> None:
    """Write a volume as single-file NIfTI-1; gzip when the path ends .gz."""
    dt = np.dtype(dtype)
    if dt not in _CODE_FOR_DTYPE:
        raise FormatError(f"unsupported save dtype {dt}")
    data = np.asarray(v.data).astype(dt)
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODE_FOR_DTYPE[dt])
    struct.pack_into("<h", hdr, 72, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = MAGIC_SINGLE
    payload = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def save_labelmap(path, y: LabelMap) -> None:
    save_volume(path, Volume(data=y.data.astype(np.uint8), spacing=(1, 1, 1)), dtype=np.uint8)


def load_labelmap(path, class_count: int | None = None) -> LabelMap:
    vol, _ = load_volume(path)
    kwargs = {} if class_count is None else {"class_count": class_count}
    return LabelMap(data=np.rint(vol.data).astype(np.int16), **kwargs)


def save_mask(path, m: LesionMask) -> None:
    save_volume(path, Volume(data=m.data, spacing=(1, 1, 1)), dtype=np.uint8)


def load_mask(path) -> LesionMask:
    vol, _ = load_volume(path)
    return LesionMask(data=np.rint(vol.data).astype(np.uint8))


def save_arrays(path, **arrays) -> None:
    """Compressed container for multi-array records (soft targets, audits)."""
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    np.savez_compressed(path, **arrays)


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path) as npz:
        return {k: npz[k] for k in npz.files}
