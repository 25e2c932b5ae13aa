"""Minimal single-file NIfTI-1 reading and writing.

Covers exactly what the corpus loader needs: uncompressed ``.nii`` and
gzipped ``.nii.gz`` volumes, the common integer/float dtype codes, scale
slope/intercept, and both endiannesses. Volumes are returned in ``(X, Y, Z)``
axis order; axial slices are taken along the last axis.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES_BY_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> np.ndarray:
    """Load a NIfTI-1 volume, applying scale slope/intercept when present."""
    path = Path(path)
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise ValueError(f"{path}: not a NIfTI-1 file (header size {sizeof_hdr})")

    dim = struct.unpack_from(f"{order}8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ValueError(f"{path}: invalid dimension count {ndim}")
    shape = tuple(dim[1 : 1 + ndim])

    (datatype,) = struct.unpack_from(f"{order}h", raw, 70)
    (vox_offset,) = struct.unpack_from(f"{order}f", raw, 108)
    (scl_slope,) = struct.unpack_from(f"{order}f", raw, 112)
    (scl_inter,) = struct.unpack_from(f"{order}f", raw, 116)
    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, b"ni1\x00"):
        raise ValueError(f"{path}: unrecognized NIfTI magic {magic!r}")
    if magic != MAGIC_SINGLE:
        raise ValueError(f"{path}: two-file NIfTI pairs are not supported")

    try:
        dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder(order)
    except KeyError:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}") from None

    offset = int(vox_offset) if vox_offset else HEADER_SIZE + 4
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    volume = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        volume = volume.astype(np.float64) * slope + scl_inter
    return np.ascontiguousarray(volume)


def write_nifti(path, volume: np.ndarray) -> None:
    """Write a volume as a single-file NIfTI-1, gzipped when the name ends in .gz."""
    path = Path(path)
    volume = np.asarray(volume)
    if volume.ndim < 1 or volume.ndim > 7:
        raise ValueError(f"cannot store a {volume.ndim}-dimensional volume")
    try:
        code = _CODES_BY_DTYPE[volume.dtype]
    except KeyError:
        raise ValueError(f"unsupported dtype {volume.dtype} for NIfTI output") from None

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = [volume.ndim] + list(volume.shape) + [1] * (7 - volume.ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, volume.dtype.itemsize * 8)
    pixdim = [1.0] * 8
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    header[344:348] = MAGIC_SINGLE

    with _open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # no extensions
        fh.write(np.asfortranarray(volume).tobytes(order="F"))


def axial_slices(volume: np.ndarray) -> list[np.ndarray]:
    """Split a 3-D (or squeezable higher-D) volume into 2-D axial slices."""
    volume = np.squeeze(volume)
    if volume.ndim == 2:
        return [volume]
    if volume.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D volume, got shape {volume.shape}")
    return [np.ascontiguousarray(volume[:, :, k]) for k in range(volume.shape[2])]
