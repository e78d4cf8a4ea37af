"""Named regions of interest and binary mask extraction."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_spacing


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    BOTH = "both"


class RoiClass(str, enum.Enum):
    CORTICAL = "cortical"
    SUBCORTICAL = "subcortical"


@dataclass(frozen=True)
class RoiSpec:
    name: str
    left_ids: frozenset[int]
    right_ids: frozenset[int]
    roi_class: RoiClass

    def __post_init__(self):
        left = frozenset(int(i) for i in self.left_ids)
        right = frozenset(int(i) for i in self.right_ids)
        if any(i <= 0 for i in left | right):
            raise ValueError(f"{self.name}: label ids must be positive")
        if left & right:
            raise ValueError(f"{self.name}: ids {sorted(left & right)} assigned to both hemispheres")
        object.__setattr__(self, "left_ids", left)
        object.__setattr__(self, "right_ids", right)
        object.__setattr__(self, "roi_class", RoiClass(self.roi_class))

    def ids(self, side: Side | str) -> frozenset[int]:
        side = Side(side)
        if side is Side.LEFT:
            return self.left_ids
        if side is Side.RIGHT:
            return self.right_ids
        return self.left_ids | self.right_ids


@dataclass(frozen=True)
class RoiRegistry:
    entries: tuple[RoiSpec, ...]
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        by_name = {}
        for spec in entries:
            if spec.name in by_name:
                raise ValueError(f"duplicate ROI name {spec.name!r}")
            by_name[spec.name] = spec
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_by_name", by_name)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, name):
        return name in self._by_name

    def lookup(self, name: str) -> RoiSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"ROI {name!r} not found in registry") from None

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def all_ids(self) -> frozenset[int]:
        out = frozenset()
        for e in self.entries:
            out |= e.left_ids | e.right_ids
        return out

    def to_json(self) -> list[dict]:
        return [
            {
                "name": e.name,
                "left_ids": sorted(e.left_ids),
                "right_ids": sorted(e.right_ids),
                "class": e.roi_class.value,
            }
            for e in self.entries
        ]


# Cortical ids follow the DKT/aparc 1000 (left) / 2000 (right) numbering.
_DEFAULT_TABLE = (
    ("Entorhinal Cortex", 1006, 2006, "cortical"),
    ("Caudal Anterior Cingulate Cortex", 1002, 2002, "cortical"),
    ("Inferior Parietal Cortex", 1008, 2008, "cortical"),
    ("Fusiform Gyrus", 1007, 2007, "cortical"),
    ("Medial Orbitofrontal Cortex", 1014, 2014, "cortical"),
    ("Lateral Orbitofrontal Cortex", 1012, 2012, "cortical"),
    ("Superior Temporal Cortex", 1030, 2030, "cortical"),
    ("Insula", 1035, 2035, "cortical"),
    ("Superior Frontal Cortex", 1028, 2028, "cortical"),
    ("Hippocampus", 17, 53, "subcortical"),
    ("Amygdala", 18, 54, "subcortical"),
    ("Thalamus", 10, 49, "subcortical"),
    ("Caudate", 11, 50, "subcortical"),
    ("Putamen", 12, 51, "subcortical"),
    ("Pallidum", 13, 52, "subcortical"),
    ("Accumbens", 26, 58, "subcortical"),
    ("VentralDC", 28, 60, "subcortical"),
)


def default_registry() -> RoiRegistry:
    """The 9 cortical + 8 subcortical bilateral regions, FreeSurfer label ids."""
    return RoiRegistry(
        tuple(RoiSpec(name, frozenset({l}), frozenset({r}), cls) for name, l, r, cls in _DEFAULT_TABLE)
    )


def registry_from_json(entries) -> RoiRegistry:
    specs = []
    for i, item in enumerate(entries):
        try:
            specs.append(
                RoiSpec(
                    name=str(item["name"]),
                    left_ids=frozenset(item["left_ids"]),
                    right_ids=frozenset(item["right_ids"]),
                    roi_class=item["class"],
                )
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"registry entry {i}: missing or malformed field ({exc})") from None
    if not specs:
        raise ValueError("registry is empty")
    return RoiRegistry(tuple(specs))


def load_registry(path) -> RoiRegistry:
    """Load a registry override: a JSON list of ``{name, left_ids, right_ids, class}``."""
    with open(Path(path)) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: registry file must hold a JSON list")
    return registry_from_json(data)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    occupancy: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {occ.shape}")
        if occ.dtype != np.bool_:
            occ = occ.astype(bool)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def is_empty(self) -> bool:
        return not self.occupancy.any()


def extract_mask(volume, spec: RoiSpec, side: Side | str = Side.BOTH) -> BinaryMask:
    """Voxels of ``volume`` whose label belongs to ``spec``'s ids for ``side``."""
    ids = np.fromiter(sorted(spec.ids(side)), dtype=np.int64)
    if ids.size == 1:
        occ = volume.labels == ids[0]
    else:
        occ = np.isin(volume.labels, ids)
    return BinaryMask(occ, volume.spacing)


def mask_volume_cm3(mask: BinaryMask) -> float:
    sx, sy, sz = mask.spacing
    return mask.count * sx * sy * sz / 1000.0
