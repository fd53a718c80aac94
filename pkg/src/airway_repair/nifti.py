"""Minimal NIfTI-1 single-file reader/writer.

Supported subset: uncompressed ``.nii``, magic ``n+1``, little-endian,
three dimensions, datatypes uint8 / int16 / float32.  Masks are stored as
uint8 with values {0, 1}.  Orientation fields (qform/sform) of a file that
was read are carried through a round trip untouched but otherwise ignored.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, GeometryError
from .volume import BinaryMask, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> (numpy dtype, bitpix)
DATATYPES = {
    2: (np.dtype("u1"), 8),
    4: (np.dtype("<i2"), 16),
    16: (np.dtype("<f4"), 32),
}
_CODE_FOR_DTYPE = {dt: code for code, (dt, _) in DATATYPES.items()}


def _parse_header(raw: bytes) -> np.ndarray:
    if raw[:2] == b"\x1f\x8b":
        raise FormatError("compression: gzip-compressed NIfTI is not supported")
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"sizeof_hdr: file is only {len(raw)} bytes, header needs {HEADER_SIZE}")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        swapped = int(np.frombuffer(raw[:4], dtype=">i4")[0])
        if swapped == HEADER_SIZE:
            raise FormatError("sizeof_hdr: big-endian files are not supported")
        raise FormatError(f"sizeof_hdr: expected 348, got {int(hdr['sizeof_hdr'])}")
    magic = bytes(hdr["magic"])
    if magic != b"n+1":
        raise FormatError(f"magic: expected b'n+1', got {magic!r}")
    return hdr


def read_nifti(path, as_mask: bool = False) -> Volume3D | BinaryMask:
    """Read a ``.nii`` file.

    With ``as_mask=True`` the payload must hold only 0/1 values and a
    BinaryMask is returned; otherwise a Volume3D with intensities scaled by
    ``scl_slope``/``scl_inter`` (when the slope is non-zero).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    hdr = _parse_header(raw)

    dim = [int(v) for v in hdr["dim"]]
    if dim[0] != 3:
        raise FormatError(f"dim[0]: expected 3 dimensions, got {dim[0]}")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise GeometryError(f"dim: non-positive extent {dims}")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise FormatError(f"datatype: unsupported code {code} (supported: 2=uint8, 4=int16, 16=float32)")
    dtype, _ = DATATYPES[code]

    pixdim = [float(v) for v in hdr["pixdim"][1:4]]
    if not all(np.isfinite(pixdim)) or min(pixdim) <= 0:
        raise GeometryError(f"pixdim: voxel sizes must be positive, got {tuple(pixdim)}")

    offset = int(hdr["vox_offset"])
    if offset < VOX_OFFSET:
        raise FormatError(f"vox_offset: expected >= {VOX_OFFSET}, got {offset}")
    count = dims[0] * dims[1] * dims[2]
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(f"vox_offset: payload truncated ({len(raw) - offset} of {nbytes} bytes)")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(dims, order="F")

    origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    header = raw[:HEADER_SIZE]

    if as_mask:
        values = np.unique(data)
        if not np.all(np.isin(values, (0, 1))):
            raise FormatError(f"datatype: mask payload must be 0/1, found values {values[:5].tolist()}")
        return BinaryMask(data.astype(bool), pixdim, origin, header)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        data = data.astype(np.float64) * slope + inter
    return Volume3D(np.array(data), pixdim, origin, header)


def write_nifti(vol: Volume3D | BinaryMask, path) -> None:
    """Write a volume or mask as an uncompressed NIfTI-1 file."""
    if isinstance(vol, BinaryMask):
        payload = vol.data.astype(np.uint8)
    else:
        payload = vol.data
        if payload.dtype not in _CODE_FOR_DTYPE:
            if payload.dtype.kind in "uib" and payload.min(initial=0) >= -32768 and payload.max(initial=0) <= 32767:
                payload = payload.astype("<i2")
            else:
                payload = payload.astype("<f4")
    payload = payload.astype(payload.dtype.newbyteorder("<"), copy=False)
    code = _CODE_FOR_DTYPE[payload.dtype]

    if vol.header is not None and len(vol.header) == HEADER_SIZE:
        hdr = np.frombuffer(vol.header, dtype=HEADER_DTYPE)[0].copy()
    else:
        hdr = np.zeros((), dtype=HEADER_DTYPE)
        hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = vol.origin
        hdr["xyzt_units"] = 2  # mm
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = (3, *vol.dims, 1, 1, 1, 1)
    hdr["datatype"] = code
    hdr["bitpix"] = DATATYPES[code][1]
    pixdim = np.array(hdr["pixdim"], dtype=np.float32)
    pixdim[0] = pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0
    pixdim[1:4] = vol.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["magic"] = b"n+1"

    with open(os.fspath(path), "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(np.asarray(payload).tobytes(order="F"))
