"""Nearest-neighbour label resampling under a supplied affine transform.

Transforms follow the pull convention: ``matrix`` maps a world point of the
fixed (reference) space to the corresponding world point of the moving
volume, the same direction as ITK/ANTs transform files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_affine, check_dims, check_spacing
from .volume_io import LabelVolume

_LPS = np.diag([-1.0, -1.0, 1.0, 1.0])


class TransformFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AffineTransform:
    matrix: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        m = check_affine(self.matrix)
        if abs(np.linalg.det(m[:3, :3])) <= 1e-12:
            raise ValueError(f"singular transform {self.source_tag!r}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4), "identity")

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix), f"inverse({self.source_tag})")


@dataclass(frozen=True, eq=False)
class ReferenceGrid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        spacing = check_spacing(self.spacing)
        object.__setattr__(self, "dims", check_dims(self.dims))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", check_affine(self.affine, spacing))

    @classmethod
    def from_volume(cls, volume: LabelVolume) -> "ReferenceGrid":
        return cls(volume.dims, volume.spacing, np.array(volume.affine))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def resample_labels(moving: LabelVolume, transform: AffineTransform, reference: ReferenceGrid) -> LabelVolume:
    """Pull each reference voxel's label from the nearest moving voxel.

    Reference voxel centres go to world space, through ``transform``, then
    into moving voxel indices; each index is rounded half away from zero.
    Samples falling outside the moving grid become background 0.
    """
    vox_map = np.linalg.inv(moving.affine) @ transform.matrix @ reference.affine
    src = moving.labels
    nx, ny, nz = reference.dims
    out = np.zeros(reference.dims, dtype=src.dtype)
    ii, jj = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    lin = vox_map[:3, :3]
    for k in range(nz):
        coords = [lin[r, 0] * ii + lin[r, 1] * jj + (lin[r, 2] * k + vox_map[r, 3]) for r in range(3)]
        idx = [_round_half_away(c) for c in coords]
        ok = np.ones((nx, ny), dtype=bool)
        for r in range(3):
            ok &= (idx[r] >= 0) & (idx[r] < src.shape[r])
        out[:, :, k][ok] = src[idx[0][ok], idx[1][ok], idx[2][ok]]
    return LabelVolume(out, reference.spacing, np.array(reference.affine))


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _floats(text: str) -> list[float]:
    return [float(t) for t in re.findall(_NUM, text)]


def read_affine_transform(path, lps_to_ras: bool = False) -> AffineTransform:
    """Read a 4x4 plain-text matrix or an ITK text affine.

    ITK files carry 12 ``Parameters`` (row-major 3x3 then translation) and a
    3-vector ``FixedParameters`` centre; the world mapping is
    ``x -> M (x - c) + c + t``. ITK works in LPS coordinates; pass
    ``lps_to_ras=True`` to re-express the matrix in RAS world space.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise TransformFormatError(f"{path}: cannot read transform ({exc})") from None
    tag = path.name
    if "Parameters:" in text:
        params = fixed = None
        for line in text.splitlines():
            key, _, rest = line.partition(":")
            key = key.strip()
            if key == "Parameters":
                params = _floats(rest)
            elif key == "FixedParameters":
                fixed = _floats(rest)
        if params is None or len(params) != 12:
            raise TransformFormatError(f"{path}: ITK affine needs 12 Parameters")
        if fixed is None:
            fixed = [0.0, 0.0, 0.0]
        if len(fixed) != 3:
            raise TransformFormatError(f"{path}: ITK affine needs 3 FixedParameters")
        lin = np.array(params[:9]).reshape(3, 3)
        trans = np.array(params[9:])
        centre = np.array(fixed)
        matrix = np.eye(4)
        matrix[:3, :3] = lin
        matrix[:3, 3] = trans + centre - lin @ centre
        if lps_to_ras:
            matrix = _LPS @ matrix @ _LPS
    else:
        rows = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(_floats(line))
        if len(rows) != 4 or any(len(r) != 4 for r in rows):
            raise TransformFormatError(f"{path}: expected a 4x4 matrix, got rows of lengths {[len(r) for r in rows]}")
        matrix = np.array(rows)
    try:
        return AffineTransform(matrix, tag)
    except ValueError as exc:
        raise TransformFormatError(f"{path}: {exc}") from None


class LabelResampler(BaseEstimator, TransformerMixin):
    """Resample label volumes onto a fixed reference grid.

    Parameters
    ----------
    reference : ReferenceGrid or LabelVolume, optional
        Target geometry. When omitted, ``fit`` takes the grid of the volume
        it is given (the "first session" reference).
    world_transform : AffineTransform, optional
        Fixed-to-moving world transform applied to every input; identity
        when omitted.
    """

    def __init__(self, reference=None, world_transform=None):
        self.reference = reference
        self.world_transform = world_transform

    def fit(self, X=None, y=None):
        ref = self.reference if self.reference is not None else X
        if ref is None:
            raise ValueError("LabelResampler needs a reference grid or a volume to fit on")
        if isinstance(ref, LabelVolume):
            ref = ReferenceGrid.from_volume(ref)
        if not isinstance(ref, ReferenceGrid):
            raise TypeError(f"reference must be a ReferenceGrid or LabelVolume, got {type(ref).__name__}")
        self.reference_grid_ = ref
        self.transform_ = self.world_transform if self.world_transform is not None else AffineTransform.identity()
        return self

    def transform_one(self, volume: LabelVolume, transform: AffineTransform | None = None) -> LabelVolume:
        check_is_fitted(self, "reference_grid_")
        return resample_labels(volume, transform or self.transform_, self.reference_grid_)

    def transform(self, X):
        if isinstance(X, LabelVolume):
            return self.transform_one(X)
        return [self.transform_one(v) for v in X]
