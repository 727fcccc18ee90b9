"""Single-file NIfTI-1 (.nii) reading and writing, plus JSON report output.

Only what the pipeline needs: uncompressed ``n+1`` files with uint8, int16
or float32 voxels, 3-D (or 4-D with a singleton fourth axis).  Orientation
(qform/sform) is not interpreted; voxel data stays in stored index order.
"""

import json
import math
import struct

import numpy as np

from .errors import ParseError
from .preprocess import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

# datatype code -> (numpy base type, bitpix)
DATATYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    16: (np.float32, 32),
}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}

# (name, struct format, byte offset) for the fields the reader inspects
_FIELDS = {
    "sizeof_hdr": ("i", 0),
    "dim": ("8h", 40),
    "datatype": ("h", 70),
    "bitpix": ("h", 72),
    "pixdim": ("8f", 76),
    "vox_offset": ("f", 108),
    "scl_slope": ("f", 112),
    "scl_inter": ("f", 116),
    "magic": ("4s", 344),
}


def _get(data, endian, name):
    fmt, off = _FIELDS[name]
    vals = struct.unpack_from(endian + fmt, data, off)
    return vals if len(vals) > 1 else vals[0]


def read_header(data):
    """Decode and validate the NIfTI-1 header; returns a dict plus the endian prefix."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise ParseError("sizeof_hdr", 0, f"file has {len(data)} bytes, header needs 348")
    if struct.unpack_from("<i", data, 0)[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise ParseError("sizeof_hdr", 0, "expected 348 in either byte order")

    hdr = {name: _get(data, endian, name) for name in _FIELDS}
    if hdr["magic"] != b"n+1\x00":
        raise ParseError("magic", 344, f"unsupported magic {hdr['magic']!r}")
    dim = hdr["dim"]
    if dim[0] not in (3, 4):
        raise ParseError("dim", 40, f"dim[0] must be 3 or 4, got {dim[0]}")
    if any(d < 1 for d in dim[1:4]) or (dim[0] == 4 and dim[4] != 1):
        raise ParseError("dim", 40, f"unsupported dimensions {dim[: dim[0] + 1]}")
    code = hdr["datatype"]
    if code not in DATATYPES:
        raise ParseError("datatype", 70, f"unsupported datatype code {code}")
    if hdr["bitpix"] != DATATYPES[code][1]:
        raise ParseError("bitpix", 72, f"bitpix {hdr['bitpix']} does not match datatype {code}")
    vox = hdr["vox_offset"]
    if not math.isfinite(vox) or vox < VOX_OFFSET or vox != int(vox):
        raise ParseError("vox_offset", 108, f"invalid vox_offset {vox}")
    return hdr, endian


def read_nifti(data):
    """Parse a single-file NIfTI-1 byte string into a float64 :class:`Volume`."""
    data = bytes(data)
    hdr, endian = read_header(data)
    nx, ny, nz = hdr["dim"][1:4]
    base, bitpix = DATATYPES[hdr["datatype"]]
    start = int(hdr["vox_offset"])
    nbytes = nx * ny * nz * bitpix // 8
    if len(data) < start + nbytes:
        raise ParseError(
            "vox_offset", 108,
            f"payload truncated: need {nbytes} bytes from offset {start}, have {max(0, len(data) - start)}",
        )
    dtype = np.dtype(base).newbyteorder(endian)
    voxels = np.frombuffer(data, dtype=dtype, count=nx * ny * nz, offset=start)
    arr = voxels.reshape((nx, ny, nz), order="F").astype(np.float64)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and math.isfinite(slope) and (slope != 1 or inter != 0):
        arr = arr * slope + (inter if math.isfinite(inter) else 0.0)
    pixdim = hdr["pixdim"]
    spacing = tuple(float(p) if p > 0 and math.isfinite(p) else 1.0 for p in pixdim[1:4])
    return Volume(np.ascontiguousarray(arr), spacing, "intensity")


def write_nifti(vol, datatype="float32"):
    """Encode ``vol`` as little-endian single-file NIfTI-1 bytes.

    Parameters
    ----------
    datatype : {"uint8", "int16", "float32"}
        Binary masks must use values in {0, 1}; integer types require
        integral, in-range values.
    """
    if datatype not in DATATYPE_CODES:
        raise ValueError(f"unsupported datatype {datatype!r}; use one of {sorted(DATATYPE_CODES)}")
    code = DATATYPE_CODES[datatype]
    base, bitpix = DATATYPES[code]
    arr = np.asarray(vol.data)
    if vol.kind == "binary-mask" and not np.isin(arr, (0, 1)).all():
        raise ValueError("binary mask contains values outside {0, 1}")
    if datatype != "float32":
        info = np.iinfo(base)
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError(f"non-integral values cannot be stored as {datatype}")
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise ValueError(f"values out of range for {datatype}")
    nx, ny, nz = arr.shape

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)
    struct.pack_into("<f", hdr, 116, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")

    payload = np.asarray(arr, dtype=np.dtype(base).newbyteorder("<")).ravel(order="F")
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload.tobytes()


def load_volume(path, kind="intensity"):
    with open(path, "rb") as f:
        vol = read_nifti(f.read())
    vol.kind = kind
    return vol


def save_volume(vol, path, datatype=None):
    if datatype is None:
        datatype = "uint8" if vol.kind == "binary-mask" else "float32"
    with open(path, "wb") as f:
        f.write(write_nifti(vol, datatype))


def write_metrics_json(report, path):
    """Write a metrics report (object with ``to_dict`` or a plain dict) as UTF-8 JSON."""
    payload = report.to_dict() if hasattr(report, "to_dict") else report
    text = json.dumps(payload, indent=2, sort_keys=False)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write metrics report: {exc.strerror}", str(path)) from exc
