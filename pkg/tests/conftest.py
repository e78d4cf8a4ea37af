import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from segrepro.volume_io import LabelVolume, write_label_volume

ACCEPTANCE_RESULTS: dict[str, str] = {}


def raw_nifti(
    data,
    datatype,
    pixdim=(1.0, 1.0, 1.0),
    magic=b"n+1\x00",
    endian="<",
    dim=None,
    slope=0.0,
    inter=0.0,
    sform=None,
    qform=None,
    vox_offset=352,
):
    """Hand-packed NIfTI-1 bytes, independent of segrepro's encoder."""
    dtype = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 512: "u2", 256: "i1"}[datatype]
    arr = np.asarray(data).astype(endian + dtype)
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dims = dim if dim is not None else (3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into(endian + "8h", hdr, 40, *dims)
    struct.pack_into(endian + "2h", hdr, 70, datatype, arr.dtype.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "3f", hdr, 108, float(vox_offset), slope, inter)
    if qform is not None:
        quat, offset = qform
        struct.pack_into(endian + "h", hdr, 252, 1)
        struct.pack_into(endian + "3f", hdr, 256, *quat)
        struct.pack_into(endian + "3f", hdr, 268, *offset)
    if sform is not None:
        struct.pack_into(endian + "h", hdr, 254, 1)
        for r in range(3):
            struct.pack_into(endian + "4f", hdr, 280 + 16 * r, *sform[r])
    hdr[344:348] = magic
    pad = b"\x00" * (vox_offset - 348)
    return bytes(hdr) + pad + arr.tobytes(order="F")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_raw(tmp_path):
    counter = iter(range(10**6))

    def _write(payload: bytes, gz=False):
        path = tmp_path / f"raw{next(counter)}.nii{'.gz' if gz else ''}"
        path.write_bytes(gzip.compress(payload) if gz else payload)
        return path

    return _write


def make_bids(root: Path, sessions, labels_for=None, shape=(6, 6, 6), sidecar=None):
    """Tiny BIDS-like tree; ``sessions`` is a list of (subject, session) pairs."""
    for i, (sub, ses) in enumerate(sessions):
        anat = root / f"sub-{sub}" / f"ses-{ses}" / "anat"
        anat.mkdir(parents=True, exist_ok=True)
        labels = labels_for(sub, ses) if labels_for else np.full(shape, 17, dtype=np.int32)
        stem = f"sub-{sub}_ses-{ses}_dseg"
        write_label_volume(LabelVolume.from_array(labels), anat / f"{stem}.nii.gz")
        if sidecar is not None:
            meta = sidecar(sub, ses, i)
            if meta is not None:
                (anat / f"{stem}.json").write_text(json.dumps(meta))
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[name])
