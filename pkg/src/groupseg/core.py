"""Volumetric data types, grid geometry, resampling and label utilities."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

# Transient IDs never collide with protocol IDs. Blobs use 1001..1009,
# non-brain GMM components 1101..1199.
TRANSIENT_BASE = 1000
BLOB_BASE = 1000
NONBRAIN_BASE = 1100
MAX_LABEL_ID = 2**16 - 1

_AXIS_DIRECTIONS = {
    "R": (0, 1.0), "L": (0, -1.0),
    "A": (1, 1.0), "P": (1, -1.0),
    "S": (2, 1.0), "I": (2, -1.0),
}


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def _check_affine(affine) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if abs(np.linalg.det(affine[:3, :3])) <= 1e-12:
        raise ValueError("affine is not invertible")
    return affine


def spacing_from_affine(affine: np.ndarray) -> tuple[float, float, float]:
    return tuple(float(s) for s in np.linalg.norm(affine[:3, :3], axis=0))


# --------------------------------------------------------------------------
# label protocol
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Label:
    id: int
    name: str
    laterality: str
    partner: int | None = None


class Protocol:
    """Ordered set of K predicted label IDs with names and laterality.

    Class index ``k`` of a network output corresponds to ``protocol.ids[k]``.
    """

    LATERALITIES = ("background", "left", "right", "unilateral")

    def __init__(self, labels: Sequence[Label], name: str = "custom", version: str = "0"):
        self.labels = tuple(labels)
        self.name = name
        self.version = version
        ids = [lab.id for lab in self.labels]
        if len(set(ids)) != len(ids):
            raise ValueError("protocol label IDs must be unique")
        if not ids or ids[0] != 0 or self.labels[0].laterality != "background":
            raise ValueError("protocol must start with background ID 0")
        for lab in self.labels:
            if lab.laterality not in self.LATERALITIES:
                raise ValueError(f"label {lab.id}: bad laterality {lab.laterality!r}")
            if not 0 <= lab.id < TRANSIENT_BASE:
                raise ValueError(f"label {lab.id} outside the protocol ID range")
        self.ids = tuple(ids)
        self._by_id = {lab.id: lab for lab in self.labels}

        # Class lookup; transient and unknown IDs map to background (class 0).
        self._class_lut = np.zeros(MAX_LABEL_ID + 1, dtype=np.int64)
        self._valid = np.zeros(MAX_LABEL_ID + 1, dtype=bool)
        self._valid[TRANSIENT_BASE:] = True
        for k, i in enumerate(self.ids):
            self._class_lut[i] = k
            self._valid[i] = True

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, Protocol) and self.labels == other.labels

    def __hash__(self):
        return hash(self.labels)

    def __getitem__(self, label_id: int) -> Label:
        return self._by_id[label_id]

    def __contains__(self, label_id) -> bool:
        return int(label_id) in self._by_id

    @property
    def brain_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.ids if i != 0)

    def validate_data(self, data: np.ndarray) -> None:
        ok = self._valid[data]
        if not ok.all():
            bad = np.unique(data[~ok])
            raise ValueError(f"label IDs {bad.tolist()} not in protocol {self.name!r}")

    def class_indices(self, data: np.ndarray) -> np.ndarray:
        return self._class_lut[data]

    def flip_table(self) -> np.ndarray:
        """Lookup table swapping each left ID with its right partner."""
        lut = np.arange(MAX_LABEL_ID + 1, dtype=np.uint16)
        for lab in self.labels:
            if lab.laterality in ("left", "right"):
                if lab.partner is None or lab.partner not in self._by_id:
                    raise ValueError(f"label {lab.id} ({lab.name}) lacks a laterality partner")
                if self._by_id[lab.partner].partner != lab.id:
                    raise ValueError(f"label {lab.id} partner is not mutual")
                lut[lab.id] = lab.partner
        return lut

    def to_dict(self) -> dict:
        labels = []
        for lab in self.labels:
            entry = {"id": lab.id, "name": lab.name, "laterality": lab.laterality}
            if lab.partner is not None:
                entry["partner"] = lab.partner
            labels.append(entry)
        return {"schema_version": 1, "name": self.name, "version": self.version, "labels": labels}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Protocol":
        labels = [Label(int(e["id"]), e["name"], e["laterality"], e.get("partner")) for e in doc["labels"]]
        return cls(labels, name=doc.get("name", "custom"), version=str(doc.get("version", "0")))

    @classmethod
    def from_json(cls, path) -> "Protocol":
        with open(path) as f:
            return cls.from_dict(json.load(f))


_DEFAULT_PROTOCOL = None


def default_protocol() -> Protocol:
    """The shipped 22-label protocol: background, 10 bilateral pairs, brain stem."""
    global _DEFAULT_PROTOCOL
    if _DEFAULT_PROTOCOL is None:
        text = resources.files("groupseg.data").joinpath("protocol.json").read_text()
        _DEFAULT_PROTOCOL = Protocol.from_dict(json.loads(text))
    return _DEFAULT_PROTOCOL


# --------------------------------------------------------------------------
# volumes
# --------------------------------------------------------------------------

class Volume:
    """A 3-D float32 grid with a voxel-to-world affine. Immutable."""

    def __init__(self, data, affine=None):
        data = np.array(data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got {data.ndim}-D")
        if min(data.shape) < 1:
            raise ValueError(f"empty volume shape {data.shape}")
        if affine is None:
            affine = np.eye(4)
        self.data = _freeze(data)
        self.affine = _freeze(_check_affine(affine).copy())

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return spacing_from_affine(self.affine)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.affine)

    def same_geometry(self, other, atol: float = 1e-4) -> bool:
        return self.shape == other.shape and np.allclose(self.affine, other.affine, atol=atol)

    def __repr__(self):
        return f"Volume(shape={self.shape}, spacing={tuple(round(s, 4) for s in self.spacing)})"


class LabelMap(Volume):
    """A 3-D grid of unsigned label IDs over a protocol.

    ``protocol=None`` marks a raw source map (e.g. before remapping) whose IDs
    are not checked.
    """

    def __init__(self, data, affine=None, protocol: Protocol | None = None):
        raw = np.asarray(data)
        if raw.dtype.kind == "f":
            if not np.all(raw == np.round(raw)):
                raise ValueError("label data must be integer valued")
        if raw.size and (raw.min() < 0 or raw.max() > MAX_LABEL_ID):
            raise ValueError("label IDs must lie in [0, 65535]")
        data = np.array(raw, dtype=np.uint16)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3-D, got {data.ndim}-D")
        if min(data.shape) < 1:
            raise ValueError(f"empty label shape {data.shape}")
        if affine is None:
            affine = np.eye(4)
        if protocol is not None:
            protocol.validate_data(data)
        self.data = _freeze(data)
        self.affine = _freeze(_check_affine(affine).copy())
        self.protocol = protocol

    def with_data(self, data) -> "LabelMap":
        return LabelMap(data, self.affine, self.protocol)

    def counts(self) -> dict[int, int]:
        ids, n = np.unique(self.data, return_counts=True)
        return dict(zip(ids.tolist(), n.tolist()))

    def strip_transients(self) -> "LabelMap":
        data = self.data.copy()
        data[data >= TRANSIENT_BASE] = 0
        return self.with_data(data)

    def __repr__(self):
        name = self.protocol.name if self.protocol else None
        return f"LabelMap(shape={self.shape}, protocol={name!r})"


# --------------------------------------------------------------------------
# grid geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Target grid: shape, isotropic-or-not spacing, axis orientation and world center."""

    shape: tuple[int, int, int] = (192, 192, 192)
    spacing: tuple[float, float, float] = (0.7, 0.7, 0.7)
    orientation: str = "LIA"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"grid shape must be 3 positive integers, got {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"grid spacing must be 3 positive reals, got {self.spacing}")
        axis_matrix(self.orientation)

    @property
    def affine(self) -> np.ndarray:
        m = axis_matrix(self.orientation) * np.asarray(self.spacing)
        affine = np.eye(4)
        affine[:3, :3] = m
        affine[:3, 3] = np.asarray(self.center) - m @ ((np.asarray(self.shape) - 1) / 2)
        return affine

    def with_center(self, center) -> "GridSpec":
        return GridSpec(self.shape, self.spacing, self.orientation, tuple(center))

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "spacing": list(self.spacing), "orientation": self.orientation}

    @classmethod
    def from_volume(cls, vol: Volume) -> "GridSpec":
        """Grid reproducing ``vol``'s geometry when its affine is axis-aligned."""
        code = orientation_from_affine(vol.affine)
        grid = cls(vol.shape, vol.spacing, code)
        center = vol.affine @ np.append((np.asarray(vol.shape) - 1) / 2, 1.0)
        return grid.with_center(center[:3])


def axis_matrix(code: str) -> np.ndarray:
    """Signed permutation matrix whose columns are the world directions of the voxel axes."""
    code = code.upper()
    if len(code) != 3:
        raise ValueError(f"orientation must have 3 letters, got {code!r}")
    m = np.zeros((3, 3))
    used = set()
    for col, letter in enumerate(code):
        if letter not in _AXIS_DIRECTIONS:
            raise ValueError(f"bad orientation letter {letter!r} in {code!r}")
        row, sign = _AXIS_DIRECTIONS[letter]
        if row in used:
            raise ValueError(f"orientation {code!r} repeats an anatomical axis")
        used.add(row)
        m[row, col] = sign
    return m


def orientation_from_affine(affine: np.ndarray) -> str:
    m = np.asarray(affine)[:3, :3]
    letters = []
    for col in range(3):
        row = int(np.argmax(np.abs(m[:, col])))
        positive = m[row, col] > 0
        letters.append("RAS"[row] if positive else "LPI"[row])
    return "".join(letters)


def voxel_grid(shape) -> np.ndarray:
    """Homogeneous voxel index coordinates, shape (4, N)."""
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1)
    return np.vstack([idx, np.ones((1, idx.shape[1]))])


def sample_at(data: np.ndarray, coords: np.ndarray, interp: str = "trilinear") -> np.ndarray:
    """Sample ``data`` at voxel coordinates ``coords`` of shape (3, ...).

    Points outside the source field of view (voxel edges at -0.5 and n - 0.5)
    return 0. Inside, coordinates are clamped to the outermost voxel centers.
    """
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    out_shape = coords.shape[1:]
    coords = coords.reshape(3, -1).copy()
    nearest_int = np.round(coords)
    snap = np.abs(coords - nearest_int) < 1e-6
    coords[snap] = nearest_int[snap]

    upper = np.asarray(data.shape, dtype=np.float64)[:, None] - 1
    tol = 1e-6
    inside = np.all((coords >= -0.5 - tol) & (coords <= upper + 0.5 + tol), axis=0)
    coords = np.clip(coords, 0, upper)

    if interp == "nearest":
        idx = np.floor(coords + 0.5).astype(np.intp)
        idx = np.minimum(idx, upper.astype(np.intp))
        values = data[idx[0], idx[1], idx[2]]
    else:
        values = ndimage.map_coordinates(data, coords, order=1, mode="nearest", prefilter=False)
    values = np.where(inside, values, 0).astype(data.dtype)
    return values.reshape(out_shape)


def resample(vol: Volume, target: GridSpec, interp: str = "trilinear") -> Volume:
    """Resample ``vol`` onto ``target`` through the composed voxel-to-voxel affine."""
    return resample_to(vol, target.shape, target.affine, interp)


def resample_to(vol: Volume, shape, affine, interp: str = "trilinear") -> Volume:
    """Resample ``vol`` onto an arbitrary grid given by ``shape`` and ``affine``."""
    if isinstance(vol, LabelMap) and interp != "nearest":
        raise ValueError("label maps must be resampled with nearest interpolation")
    shape = tuple(int(s) for s in shape)
    target_affine = _check_affine(affine)
    if vol.shape == shape and np.array_equal(vol.affine, target_affine):
        return vol.with_data(vol.data.copy()) if not isinstance(vol, LabelMap) else vol
    vox2vox = np.linalg.inv(_check_affine(vol.affine)) @ target_affine
    coords = (vox2vox @ voxel_grid(shape))[:3].reshape(3, *shape)
    data = sample_at(vol.data, coords, interp)
    if isinstance(vol, LabelMap):
        return LabelMap(data, target_affine, vol.protocol)
    return Volume(data, target_affine)


# --------------------------------------------------------------------------
# intensities and labels
# --------------------------------------------------------------------------

def rescale_unit(data: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant input maps to zeros."""
    data = np.asarray(data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return np.zeros(data.shape, dtype=np.float32)
    return ((data - lo) / (hi - lo)).astype(np.float32)


def normalize(vol: Volume, lower: float = 1.0, upper: float = 99.0) -> Volume:
    """Clip to the [1st, 99th] percentile range, then min-max rescale to [0, 1]."""
    data = np.asarray(vol.data, dtype=np.float64)
    lo, hi = np.percentile(data, [lower, upper])
    return vol.with_data(rescale_unit(np.clip(data, lo, hi)))


@dataclass(frozen=True)
class LabelMergeTable:
    """Total map from source label IDs to target label IDs."""

    mapping: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        clean = {int(k): int(v) for k, v in dict(self.mapping).items()}
        for k, v in clean.items():
            if not (0 <= k <= MAX_LABEL_ID and 0 <= v <= MAX_LABEL_ID):
                raise ValueError(f"merge entry {k} -> {v} outside the label ID range")
        object.__setattr__(self, "mapping", clean)

    @classmethod
    def identity(cls, ids: Iterable[int]) -> "LabelMergeTable":
        return cls({int(i): int(i) for i in ids})

    @classmethod
    def from_json(cls, path) -> "LabelMergeTable":
        with open(path) as f:
            doc = json.load(f)
        return cls(doc.get("map", doc))

    @classmethod
    def evaluation_merge(cls) -> "LabelMergeTable":
        text = resources.files("groupseg.data").joinpath("eval_merge.json").read_text()
        return cls(json.loads(text)["map"])

    def to_dict(self) -> dict:
        return {"schema_version": 1, "map": {str(k): v for k, v in sorted(self.mapping.items())}}

    def targets(self) -> set[int]:
        return set(self.mapping.values())


def remap_labels(lm: LabelMap, table: LabelMergeTable, protocol: Protocol | None = None) -> LabelMap:
    """Per-voxel lookup through ``table``; every present ID must be mapped."""
    present = np.unique(lm.data)
    missing = [int(i) for i in present if int(i) not in table.mapping]
    if missing:
        raise KeyError(f"label ID {missing[0]} has no entry in the merge table (unmapped: {missing})")
    lut = np.zeros(MAX_LABEL_ID + 1, dtype=np.uint16)
    for k, v in table.mapping.items():
        lut[k] = v
    out = protocol if protocol is not None else lm.protocol
    data = lut[lm.data]
    if out is not None:
        out.validate_data(data)
    return LabelMap(data, lm.affine, out)


def dice_overlap(a: LabelMap, b: LabelMap, labels: Iterable[int]) -> dict[int, float]:
    """Hard Dice 2|A∩B| / (|A| + |B|) per label; 1.0 when both are empty."""
    if not a.same_geometry(b, atol=1e-6):
        raise ValueError(f"geometry mismatch: {a.shape} vs {b.shape}")
    scores = {}
    for k in labels:
        in_a = a.data == k
        in_b = b.data == k
        total = int(in_a.sum()) + int(in_b.sum())
        scores[int(k)] = 1.0 if total == 0 else 2.0 * int(np.sum(in_a & in_b)) / total
    return scores
