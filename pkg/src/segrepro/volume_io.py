"""NIfTI-1 label volume reading and writing.

Only single-file NIfTI-1 (``.nii`` / ``.nii.gz``) is handled. Label maps from
other containers (MGZ, NIfTI-2) must be converted first.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_affine, check_spacing

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
MIN_VOX_OFFSET = 352

# datatype code -> numpy dtype character
DATATYPES = {
    2: "u1",  # uint8
    4: "i2",  # int16
    8: "i4",  # int32
    16: "f4",  # float32
    64: "f8",  # float64
    512: "u2",  # uint16
}
_WRITE_LADDER = ((2, np.iinfo(np.uint8).max), (4, np.iinfo(np.int16).max), (8, np.iinfo(np.int32).max))
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64, 512: 16}

INTEGRAL_TOLERANCE = 1e-6


class NiftiError(ValueError):
    """Raised for malformed or unsupported NIfTI-1 input."""


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label grid with its physical geometry.

    ``labels`` is indexed ``[i, j, k]`` (x, y, z). ``affine`` maps voxel
    indices to world millimetres (RAS); its column norms equal ``spacing``.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        labels = np.array(labels, dtype=np.int32, copy=True)
        labels.setflags(write=False)
        spacing = check_spacing(self.spacing)
        affine = check_affine(self.affine, spacing)
        affine.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @classmethod
    def from_array(cls, labels, spacing=(1.0, 1.0, 1.0), affine=None) -> "LabelVolume":
        """Build a volume; ``affine`` defaults to ``diag(spacing)``."""
        if affine is None:
            affine = np.diag([*map(float, spacing), 1.0])
        return cls(np.asarray(labels), tuple(spacing), np.asarray(affine, dtype=float))

    def same_grid(self, other: "LabelVolume", atol: float = 1e-4) -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol, rtol=0)


@dataclass(frozen=True)
class NiftiHeader:
    """Fields of the 348-byte header that matter for label maps."""

    endian: str
    magic: bytes
    datatype: int
    bitpix: int
    dim: tuple[int, ...]
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    qoffset: tuple[float, float, float]
    srow: tuple[tuple[float, ...], ...]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.dim[1:4])

    def qform_affine(self) -> np.ndarray:
        b, c, d = self.quatern
        a2 = 1.0 - (b * b + c * c + d * d)
        if a2 < 1e-7:
            # b,c,d describe a 180 degree rotation; renormalise
            norm = np.sqrt(b * b + c * c + d * d)
            a, b, c, d = 0.0, b / norm, c / norm, d / norm
        else:
            a = np.sqrt(a2)
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ]
        )
        qfac = -1.0 if self.pixdim[0] < 0 else 1.0
        zooms = np.abs(self.pixdim[1:4]) * np.array([1.0, 1.0, qfac])
        aff = np.eye(4)
        aff[:3, :3] = rot * zooms
        aff[:3, 3] = self.qoffset
        return aff

    def sform_affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :] = np.array(self.srow, dtype=float)
        return aff

    def best_affine(self) -> tuple[np.ndarray, str]:
        if self.sform_code > 0:
            return self.sform_affine(), "sform"
        if self.qform_code > 0:
            return self.qform_affine(), "qform"
        return np.diag([*np.abs(self.pixdim[1:4]), 1.0]), "pixdim"


def _open_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def parse_header(raw: bytes) -> NiftiHeader:
    """Parse the fixed NIfTI-1 header from the start of ``raw``."""
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    endian = None
    for candidate in ("<", ">"):
        dim0 = struct.unpack_from(candidate + "h", raw, 40)[0]
        if 1 <= dim0 <= 7:
            endian = candidate
            break
    if endian is None:
        raise NiftiError("malformed header: dim[0] outside 1..7 in both byte orders")
    sizeof_hdr = struct.unpack_from(endian + "i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"malformed header: sizeof_hdr={sizeof_hdr}, expected 348")
    magic = raw[344:348]
    if magic[:3] == b"ni1":
        raise NiftiError("paired NIfTI unsupported (magic 'ni1'); convert to single-file .nii")
    if magic[:3] != b"n+1":
        raise NiftiError(f"not a NIfTI-1 file (magic {magic!r})")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    qform_code, sform_code = struct.unpack_from(endian + "2h", raw, 252)
    quatern = struct.unpack_from(endian + "3f", raw, 256)
    qoffset = struct.unpack_from(endian + "3f", raw, 268)
    srow = tuple(struct.unpack_from(endian + "4f", raw, 280 + 16 * r) for r in range(3))
    return NiftiHeader(
        endian=endian,
        magic=magic,
        datatype=datatype,
        bitpix=bitpix,
        dim=tuple(dim[: dim[0] + 1]),
        pixdim=tuple(pixdim),
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        qform_code=qform_code,
        sform_code=sform_code,
        quatern=quatern,
        qoffset=qoffset,
        srow=srow,
    )


def _check_dims(hdr: NiftiHeader) -> None:
    ndim = hdr.dim[0]
    if ndim not in (3, 4):
        raise NiftiError(f"expected a 3D volume, header has dim[0]={ndim}")
    if ndim == 4 and hdr.dim[4] != 1:
        raise NiftiError(f"4D volume with {hdr.dim[4]} frames; only singleton 4th dimension allowed")
    if any(d < 1 for d in hdr.dim[1:4]):
        raise NiftiError(f"non-positive dimension in {hdr.dim[1:4]}")


def read_header(path) -> NiftiHeader:
    """Parse only the header, without decompressing the voxel data."""
    path = Path(path)
    with open(path, "rb") as fh:
        gz = fh.read(2) == b"\x1f\x8b"
    opener = gzip.open if gz else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
    except (OSError, EOFError) as exc:
        raise NiftiError(f"{path}: unreadable ({exc})") from None
    try:
        return parse_header(raw)
    except NiftiError as exc:
        raise NiftiError(f"{path}: {exc}") from None


def read_label_volume(path) -> LabelVolume:
    """Read a NIfTI-1 label map.

    Float data is accepted when every value (after ``scl_slope`` /
    ``scl_inter``) is within 1e-6 of an integer.

    Raises
    ------
    NiftiError
        On malformed headers, unsupported datatypes, truncated data,
        non-integral or negative labels.
    """
    path = Path(path)
    raw = _open_bytes(path)
    try:
        hdr = parse_header(raw)
    except NiftiError as exc:
        raise NiftiError(f"{path}: {exc}") from None
    _check_dims(hdr)
    if hdr.datatype not in DATATYPES:
        raise NiftiError(f"{path}: unsupported datatype code {hdr.datatype}")
    dtype = np.dtype(hdr.endian + DATATYPES[hdr.datatype])
    offset = int(hdr.vox_offset)
    if offset < MIN_VOX_OFFSET:
        raise NiftiError(f"{path}: vox_offset {hdr.vox_offset} < {MIN_VOX_OFFSET}")
    shape = hdr.shape
    n = int(np.prod(shape))
    end = offset + n * dtype.itemsize
    if len(raw) < end:
        raise NiftiError(f"{path}: truncated data ({len(raw)} bytes, need {end})")
    data = np.frombuffer(raw[offset:end], dtype=dtype).reshape(shape, order="F")

    slope, inter = hdr.scl_slope, hdr.scl_inter
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)
    if scaled or dtype.kind == "f":
        values = data.astype(np.float64)
        if scaled:
            values = values * slope + (inter if np.isfinite(inter) else 0.0)
        if not np.all(np.isfinite(values)):
            raise NiftiError(f"{path}: non-finite label values")
        rounded = np.round(values)
        if np.any(np.abs(values - rounded) > INTEGRAL_TOLERANCE):
            raise NiftiError(f"{path}: non-integral label values")
        labels = rounded
    else:
        labels = data
    if labels.size and labels.min() < 0:
        raise NiftiError(f"{path}: negative labels")
    if labels.size and labels.max() > np.iinfo(np.int32).max:
        raise NiftiError(f"{path}: label values exceed int32 range")

    affine, source = hdr.best_affine()
    spacing = tuple(float(s) for s in np.linalg.norm(affine[:3, :3], axis=0))
    pix = tuple(abs(float(p)) for p in hdr.pixdim[1:4])
    if source != "pixdim" and not np.allclose(spacing, pix, atol=1e-4, rtol=0):
        logger.warning("%s: %s column norms %s differ from pixdim %s; using the affine", path, source, spacing, pix)
    try:
        return LabelVolume(labels.astype(np.int32), spacing, affine)
    except ValueError as exc:
        raise NiftiError(f"{path}: {exc}") from None


def _datatype_for(max_label: int) -> int:
    for code, limit in _WRITE_LADDER:
        if max_label <= limit:
            return code
    raise ValueError(f"label {max_label} does not fit in int32")


def encode_nifti(volume: LabelVolume, datatype: int | None = None, endian: str = "<") -> bytes:
    """Serialise ``volume`` to single-file NIfTI-1 bytes (uncompressed)."""
    if datatype is None:
        datatype = _datatype_for(int(volume.labels.max()))
    dtype = np.dtype(endian + DATATYPES[datatype])
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, 40, 3, *volume.dims, 1, 1, 1, 1)
    struct.pack_into(endian + "2h", hdr, 70, datatype, _BITPIX[datatype])
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into(endian + "3f", hdr, 108, float(MIN_VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into(endian + "2h", hdr, 252, 0, 1)
    for r in range(3):
        struct.pack_into(endian + "4f", hdr, 280 + 16 * r, *volume.affine[r])
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(volume.labels, dtype=dtype).tobytes(order="F")
    return bytes(hdr) + b"\x00" * 4 + body


def write_label_volume(volume: LabelVolume, path) -> None:
    """Write ``volume``; gzip-compressed when ``path`` ends in ``.gz``.

    The on-disk datatype is the smallest of uint8/int16/int32 that holds the
    maximum label. The write goes through a temporary file and an atomic
    rename.
    """
    path = Path(path)
    payload = encode_nifti(volume)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
