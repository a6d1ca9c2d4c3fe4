"""Spatial augmentation applied jointly to a session's images and label map.

Transforms are pull-backs: an output voxel at world position ``p`` takes its
value from the input at ``M @ (p + u(p))``, where ``u`` is the dense warp in
world millimetres and ``M`` the random affine pivoting at the grid center.
Warp and affine compose into one resampling pass per volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BLOB_BASE, LabelMap, Volume, sample_at, voxel_grid
from .noise import draw_seed, gradient_noise, make_rng, smooth_vector_field


@dataclass(frozen=True)
class AffineParams:
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # mm
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # degrees
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)  # factors
    shear: tuple[float, float, float] = (1.0, 1.0, 1.0)  # factors, 1 is no shear

    def __post_init__(self):
        if min(self.scale) <= 0 or min(self.shear) <= 0:
            raise ValueError("scale and shear factors must be strictly positive")

    def to_dict(self) -> dict:
        return {
            "translation": list(self.translation),
            "rotation": list(self.rotation),
            "scaling": list(self.scale),
            "shear": list(self.shear),
        }


@dataclass(frozen=True)
class SpatialTransform:
    affine: np.ndarray  # 4x4 world pull-back
    warp: np.ndarray | None = None  # (3, *shape) world mm, or None

    def is_identity(self) -> bool:
        no_warp = self.warp is None or not np.any(self.warp)
        return no_warp and np.array_equal(self.affine, np.eye(4))


def _triple(values) -> tuple[float, float, float]:
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), (3,))
    return tuple(float(v) for v in values)


def sample_affine(rng, config) -> AffineParams:
    """Draw translation, rotation, scale and shear uniformly from their rows."""
    values = {}
    for name in ("translation", "rotation", "scaling", "shear"):
        row = config[name]
        lo, hi = row.bounds()
        if lo > hi:
            raise ValueError(f"{name}: malformed range [{lo}, {hi}]")
        _, values[name] = row.draw(rng, size=3)
    return AffineParams(
        _triple(values["translation"]),
        _triple(values["rotation"]),
        _triple(values["scaling"]),
        _triple(values["shear"]),
    )


def rotation_matrix(degrees) -> np.ndarray:
    """R = Rx @ Ry @ Rz for angles about the world x, y and z axes."""
    ax, ay, az = np.deg2rad(np.asarray(degrees, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def shear_matrix(factors) -> np.ndarray:
    """Upper-triangular shear; factor 1 gives zero shear on that plane."""
    f = np.asarray(factors, dtype=np.float64) - 1.0
    return np.array([[1.0, f[0], f[1]], [0.0, 1.0, f[2]], [0.0, 0.0, 1.0]])


def affine_matrix(params: AffineParams, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Compose T @ R @ S @ Sh about the world point ``center``."""
    m = np.eye(4)
    m[:3, :3] = rotation_matrix(params.rotation) @ np.diag(params.scale) @ shear_matrix(params.shear)
    m[:3, 3] = params.translation
    c = np.eye(4)
    c[:3, 3] = center
    c_inv = np.eye(4)
    c_inv[:3, 3] = -np.asarray(center, dtype=np.float64)
    return c @ m @ c_inv


def grid_center(vol: Volume) -> np.ndarray:
    mid = np.append((np.asarray(vol.shape) - 1) / 2.0, 1.0)
    return (vol.affine @ mid)[:3]


def sample_warp(rng, shape, config) -> tuple[np.ndarray, dict]:
    """Smooth displacement field with uniform peak magnitude and control points.

    Returns the (3, *shape) field in mm and the sampled parameters. The field
    is generated from a recorded seed so it can be rebuilt with
    :func:`warp_from_params`.
    """
    fired, magnitude = config["warp_displacement"].draw(rng)
    cp = config["warp_control_points"].integer(rng, size=3)
    params = {
        "warp_displacement": float(magnitude),
        "warp_control_points": [int(c) for c in cp],
        "seed": draw_seed(rng),
        "fired": fired,
    }
    return warp_from_params(shape, params), params


def warp_from_params(shape, params: dict) -> np.ndarray:
    return smooth_vector_field(
        make_rng(params["seed"]), shape, params["warp_control_points"], params["warp_displacement"]
    )


def transform_coords(ref: Volume, t: SpatialTransform, order: str = "warp_then_affine") -> np.ndarray:
    """Source voxel coordinates (3, *shape) for every output voxel of ``ref``'s grid."""
    world = (ref.affine @ voxel_grid(ref.shape))[:3]
    if order == "warp_then_affine":
        if t.warp is not None:
            world = world + t.warp.reshape(3, -1)
        world = t.affine[:3, :3] @ world + t.affine[:3, 3:4]
    elif order == "affine_then_warp":
        world = t.affine[:3, :3] @ world + t.affine[:3, 3:4]
        if t.warp is not None:
            world = world + t.warp.reshape(3, -1)
    else:
        raise ValueError(f"unknown transform order {order!r}")
    inv = np.linalg.inv(ref.affine)
    vox = inv[:3, :3] @ world + inv[:3, 3:4]
    return vox.reshape(3, *ref.shape)


def apply_transform(vols, lm: LabelMap, t: SpatialTransform, order: str = "warp_then_affine"):
    """Resample every image (trilinear) and the label map (nearest) through ``t``."""
    vols = list(vols)
    for v in vols:
        if not v.same_geometry(lm):
            raise ValueError("images and label map must share geometry")
    if t.warp is not None and t.warp.shape != (3, *lm.shape):
        raise ValueError(f"warp shape {t.warp.shape} does not match grid {lm.shape}")
    if t.is_identity():
        return vols, lm
    coords = transform_coords(lm, t, order)
    out = [v.with_data(sample_at(v.data, coords, "trilinear")) for v in vols]
    return out, lm.with_data(sample_at(lm.data, coords, "nearest"))


# --------------------------------------------------------------------------
# background blobs
# --------------------------------------------------------------------------

def blob_labels(lm: LabelMap, noise: np.ndarray, threshold: float, n_blobs: int) -> LabelMap:
    """Replace background with ``n_blobs`` rank-partitioned blob labels.

    Noise values with magnitude below ``threshold`` are zeroed. Remaining
    background voxels are sorted by noise value (ties by flat voxel index) and
    split into ``n_blobs`` bins of equal size, labelled BLOB_BASE + 1, ...
    """
    if n_blobs <= 0:
        return lm
    values = np.where(np.abs(noise) < threshold, 0.0, noise).ravel()
    flat = lm.data.ravel()
    candidates = np.flatnonzero((flat == 0) & (values != 0))
    if candidates.size == 0:
        return lm
    order = candidates[np.argsort(values[candidates], kind="stable")]
    data = flat.copy()
    for i, part in enumerate(np.array_split(order, n_blobs)):
        data[part] = BLOB_BASE + 1 + i
    return lm.with_data(data.reshape(lm.shape))


def sample_blobs(rng, config) -> dict:
    """Draw blob parameters; ``n_blobs == 0`` means no blobs."""
    policy = getattr(config, "policy", {}).get("blob_count", "table")
    row = config["blob_label_count"]
    if policy == "text":
        fired, n_blobs = True, int(rng.integers(0, 4))
    else:
        fired = row.fires(rng)
        n_blobs = int(row.integer(rng)) if fired else 0
    params = {"fired": fired, "blob_label_count": n_blobs}
    if n_blobs:
        params["blob_control_points"] = [int(c) for c in config["blob_control_points"].integer(rng, size=3)]
        params["blob_threshold"] = float(config["blob_threshold"].uniform(rng))
        params["seed"] = draw_seed(rng)
    return params


def blobs_from_params(lm: LabelMap, params: dict) -> LabelMap:
    if not params.get("blob_label_count"):
        return lm
    noise = gradient_noise(make_rng(params["seed"]), lm.shape, params["blob_control_points"])
    return blob_labels(lm, noise, params["blob_threshold"], params["blob_label_count"])


def synth_blobs(rng, lm: LabelMap, config) -> LabelMap:
    """Gate, then fill the background with gradient-noise blob labels."""
    return blobs_from_params(lm, sample_blobs(rng, config))


# --------------------------------------------------------------------------
# lateral flipping
# --------------------------------------------------------------------------

def lateral_axis(affine: np.ndarray) -> int:
    """Voxel axis most aligned with the world left-right direction."""
    return int(np.argmax(np.abs(np.asarray(affine)[0, :3])))


def mirror_lateral(vols, lm: LabelMap):
    """Reverse the left-right axis and swap left/right label partners."""
    if lm.protocol is None:
        raise ValueError("flipping needs a protocol with laterality partners")
    lut = lm.protocol.flip_table()
    axis = lateral_axis(lm.affine)
    out = [v.with_data(np.flip(v.data, axis)) for v in vols]
    return out, lm.with_data(lut[np.flip(lm.data, axis)])


def flip_lateral(vols, lm: LabelMap, rng, p: float = 0.5):
    if rng.random() < p:
        return mirror_lateral(vols, lm)
    return list(vols), lm
