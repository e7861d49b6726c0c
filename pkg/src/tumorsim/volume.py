"""Volume and mask containers, raw/NIfTI-1 IO, reductions and slice rendering.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. On disk the payload is
x-fastest (Fortran order), which is also the NIfTI convention, so the IO layer
only has to pick ``order="F"`` when (de)serialising.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError, VolumeFormatError

AXES = ("sagittal", "coronal", "axial")  # slice normal along x, y, z
_NIFTI_DTYPES = {2: ("uint8", np.dtype("u1")), 4: ("int16", np.dtype("i2")), 16: ("float32", np.dtype("f4"))}


def _check_spacing(spacing):
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing components must be finite and > 0, got {sp}")
    return sp


def _first_nonfinite(arr):
    bad = ~np.isfinite(arr)
    if bad.any():
        # report in the canonical x-fastest order
        return int(np.flatnonzero(bad.ravel(order="F"))[0])
    return None


def _frozen(arr):
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar field.

    ``data`` is float32 by default. float64 is accepted as a working precision
    for intermediate results (the texture stages use it); every writer emits
    float32.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"volume data must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeMismatchError(f"volume dims must be >= 1, got {arr.shape}")
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.array(arr, dtype=dtype, copy=True)
        idx = _first_nonfinite(arr)
        if idx is not None:
            raise NonFiniteError(idx)
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    def with_data(self, data):
        return Volume(data, self.spacing)

    def astype(self, dtype):
        return Volume(self.data.astype(dtype), self.spacing)

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing}, dtype={self.data.dtype})"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Dense 3D {0, 1} field, stored as ``bool``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"mask data must be 3D, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _frozen(np.array(arr, dtype=bool, copy=True)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self):
        return int(np.count_nonzero(self.data))

    @classmethod
    def empty(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros(dims, dtype=bool), spacing)

    @classmethod
    def full(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.ones(dims, dtype=bool), spacing)

    def to_volume(self):
        return Volume(self.data.astype(np.float32), self.spacing)

    def __repr__(self):
        return f"BinaryMask(dims={self.dims}, count={self.count})"


def as_mask(obj, threshold=0.5):
    """Coerce a Volume / array to a BinaryMask (values ``>= threshold`` are 1)."""
    if isinstance(obj, BinaryMask):
        return obj
    if isinstance(obj, Volume):
        return BinaryMask(obj.data >= threshold, obj.spacing)
    return BinaryMask(np.asarray(obj) >= threshold)


def check_same_dims(*items):
    dims = {tuple(np.shape(getattr(it, "data", it))) for it in items if it is not None}
    if len(dims) > 1:
        raise ShapeMismatchError(f"dims mismatch: {sorted(dims)}")


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    spacing: tuple
    dtype: str = "float32"
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.dtype not in ("float32", "int16", "uint8"):
            raise VolumeFormatError(f"dtype: unsupported tag {self.dtype!r}")
        if self.scale == 0:
            raise VolumeFormatError("scale: must be non-zero")
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise VolumeFormatError(f"dims: expected 3 positive ints, got {self.dims!r}")


# --------------------------------------------------------------------------
# raw + JSON sidecar
# --------------------------------------------------------------------------

def _parse_sidecar(doc, source):
    if not isinstance(doc, dict):
        raise VolumeFormatError(f"{source}: sidecar must be a JSON object")
    dims = doc.get("dims")
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in dims)):
        raise VolumeFormatError(f"{source}: field 'dims' must be an array of 3 positive ints, got {dims!r}")
    spacing = doc.get("spacing_mm")
    if (not isinstance(spacing, list) or len(spacing) != 3
            or not all(isinstance(s, (int, float)) and not isinstance(s, bool) and s > 0 for s in spacing)):
        raise VolumeFormatError(f"{source}: field 'spacing_mm' must be an array of 3 positive numbers, got {spacing!r}")
    dtype = doc.get("dtype")
    if dtype != "float32":
        raise VolumeFormatError(f"{source}: field 'dtype' must be \"float32\", got {dtype!r}")
    return tuple(dims), tuple(float(s) for s in spacing)


def read_raw(path, sidecar):
    path, sidecar = Path(path), Path(sidecar)
    try:
        doc = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{sidecar}: malformed JSON ({exc})") from exc
    dims, spacing = _parse_sidecar(doc, sidecar)
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload size mismatch, dims {dims} need {expected} bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4")
    idx = _first_nonfinite(flat)
    if idx is not None:
        raise NonFiniteError(idx, where=str(path))
    return Volume(flat.reshape(dims, order="F").astype(np.float32), spacing)


def write_raw(v, path, sidecar_path):
    doc = {"dims": list(v.dims), "spacing_mm": list(v.spacing), "dtype": "float32"}
    Path(path).write_bytes(np.asarray(v.data, dtype="<f4").tobytes(order="F"))
    Path(sidecar_path).write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------
# NIfTI-1 (strict subset: 3D, single file, uint8/int16/float32)
# --------------------------------------------------------------------------

_HDR_SIZE = 348
_VOX_OFFSET = 352


def _unpack_header(raw, source):
    if len(raw) < _HDR_SIZE:
        raise VolumeFormatError(f"{source}: truncated header ({len(raw)} bytes)")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", raw, 0)[0] == _HDR_SIZE:
            break
    else:
        raise VolumeFormatError(f"{source}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{source}: unsupported magic {magic!r} (only single-file 'n+1' is accepted)")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    if dim[0] != 3:
        raise VolumeFormatError(f"{source}: dim[0] must be 3, got {dim[0]}")
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{source}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = struct.unpack_from(endian + "f", raw, 108)[0]
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)
    tag, np_dtype = _NIFTI_DTYPES[datatype]
    if not np.isfinite(slope) or slope == 0:
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    header = VolumeHeader(tuple(int(n) for n in dim[1:4]), spacing, tag, float(slope), float(inter))
    return header, np_dtype.newbyteorder(endian), int(vox_offset)


def read_nifti_header(path):
    raw = _read_maybe_gzip(Path(path))
    return _unpack_header(raw, path)[0]


def _read_maybe_gzip(path):
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path):
    path = Path(path)
    raw = _read_maybe_gzip(path)
    header, np_dtype, offset = _unpack_header(raw, path)
    n = int(np.prod(header.dims))
    need = offset + n * np_dtype.itemsize
    if len(raw) < need:
        raise VolumeFormatError(f"{path}: truncated payload, need {need} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=np_dtype, count=n, offset=offset)
    if header.dtype == "float32":
        idx = _first_nonfinite(flat)
        if idx is not None:
            raise NonFiniteError(idx, where=str(path))
    if header.scale != 1.0 or header.offset != 0.0:
        vals = flat.astype(np.float64) * header.scale + header.offset
    else:
        vals = flat
    return Volume(vals.astype(np.float32).reshape(header.dims, order="F"), header.spacing)


def nifti_header_bytes(dims, spacing):
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)  # datatype float32, bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 0)  # qform/sform unset: spacing-only geometry
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(v, path):
    """Write a float32 single-file NIfTI-1; ``.gz`` suffix selects (mtime-free) gzip."""
    path = Path(path)
    blob = (nifti_header_bytes(v.dims, v.spacing) + b"\x00" * 4
            + np.asarray(v.data, dtype="<f4").tobytes(order="F"))
    if path.suffix == ".gz":
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    path.write_bytes(blob)


def read_volume(path):
    """Dispatch on suffix: ``.nii``/``.nii.gz`` or ``.raw`` with a ``.json`` sidecar."""
    path = Path(path)
    name = path.name
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti(path)
    if name.endswith(".raw"):
        return read_raw(path, path.with_suffix(".json"))
    raise VolumeFormatError(f"{path}: unrecognised volume suffix")


def write_volume(v, path):
    path = Path(path)
    if isinstance(v, BinaryMask):
        v = v.to_volume()
    if path.name.endswith(".raw"):
        write_raw(v, path, path.with_suffix(".json"))
    else:
        write_nifti(v, path)


# --------------------------------------------------------------------------
# reductions, rendering
# --------------------------------------------------------------------------

def mean_intensity(v, region=None):
    """Mean intensity, over ``region`` voxels when a mask is given (64-bit accumulation)."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if region is None:
        vals = data.ravel()
    else:
        rdata = region.data if isinstance(region, BinaryMask) else np.asarray(region, dtype=bool)
        check_same_dims(data, rdata)
        vals = data[rdata]
        if vals.size == 0:
            raise ValueError("mean over an empty region")
    return float(np.sum(vals, dtype=np.float64) / vals.size)


@dataclass(frozen=True, eq=False)
class SliceImage:
    pixels: np.ndarray  # (height, width) uint8
    axis: str
    index: int

    @property
    def width(self):
        return int(self.pixels.shape[1])

    @property
    def height(self):
        return int(self.pixels.shape[0])

    def to_pgm(self):
        head = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return head + np.ascontiguousarray(self.pixels, dtype=np.uint8).tobytes()

    def write_pgm(self, path):
        Path(path).write_bytes(self.to_pgm())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise VolumeFormatError(f"{path}: not a P5 PGM with maxval 255")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def slice_plane(arr, axis, index):
    """2D plane of ``arr`` as an image array (rows = second in-plane axis)."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    ax = AXES.index(axis)
    n = arr.shape[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range [0, {n}) for axis {axis}")
    plane = np.take(arr, index, axis=ax)
    return plane.T


def render_slice(v, axis, index, window):
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise ValueError(f"window requires lo < hi, got ({lo}, {hi})")
    plane = slice_plane(v.data, axis, index).astype(np.float64)
    scaled = np.rint((plane - lo) / (hi - lo) * 255.0)  # rint: round-half-to-even
    pixels = np.clip(scaled, 0, 255).astype(np.uint8)
    return SliceImage(pixels, axis, int(index))
