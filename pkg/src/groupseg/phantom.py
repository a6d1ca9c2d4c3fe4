"""Procedural head phantom: a small labeled session for demos and the toy overfit run.

The label map holds left/right white matter (2/41), left/right cortex (3/42),
brain stem (16), background and two transient scalp layers (1101/1102). One
"real" scan is rendered from it with fixed tissue intensities, a smooth bias,
blur and noise.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import NONBRAIN_BASE, GridSpec, LabelMap, Volume, default_protocol
from .engine import Session
from .noise import gradient_noise, make_rng

PHANTOM_LABELS = (0, 2, 41, 3, 42, 16)
SCALP_LABELS = (NONBRAIN_BASE + 1, NONBRAIN_BASE + 2)

TISSUE_INTENSITY = {0: 0.05, 2: 0.85, 41: 0.85, 3: 0.5, 42: 0.5, 16: 0.7, 1101: 0.95, 1102: 0.3}


def _world(grid: GridSpec) -> np.ndarray:
    """World RAS coordinates of every voxel center, shape (3, *grid.shape)."""
    idx = np.indices(grid.shape, dtype=np.float64).reshape(3, -1)
    aff = grid.affine
    return (aff[:3, :3] @ idx + aff[:3, 3:]).reshape(3, *grid.shape)


def phantom_labels(
    shape=(64, 64, 64),
    spacing=(2.5, 2.5, 2.5),
    orientation: str = "RAS",
    radii=(46.0, 56.0, 42.0),
    cortex_mm: float = 9.0,
    scalp_mm=(6.0, 16.0),
) -> LabelMap:
    """Ellipsoidal brain with a cortical shell, split at the midline, and a scalp."""
    grid = GridSpec(shape, spacing, orientation)
    x, y, z = _world(grid)
    r = np.asarray(radii, dtype=np.float64)
    # normalized ellipsoid radius; distances are approximated along the mean radius
    rho = np.sqrt((x / r[0]) ** 2 + (y / r[1]) ** 2 + (z / r[2]) ** 2)
    depth = (1.0 - rho) * r.mean()

    data = np.zeros(shape, dtype=np.uint16)
    brain = depth >= 0
    left = x < 0
    data[brain & (depth < cortex_mm) & left] = 3
    data[brain & (depth < cortex_mm) & ~left] = 42
    data[brain & (depth >= cortex_mm) & left] = 2
    data[brain & (depth >= cortex_mm) & ~left] = 41

    stem = (np.hypot(x / 11.0, (y + 12.0) / 13.0) <= 1.0) & (z < -0.25 * r[2]) & (z > -r[2] - 22.0)
    data[stem] = 16

    outside = -depth
    data[(outside > scalp_mm[0]) & (outside <= 0.5 * sum(scalp_mm)) & ~stem] = SCALP_LABELS[0]
    data[(outside > 0.5 * sum(scalp_mm)) & (outside <= scalp_mm[1]) & ~stem] = SCALP_LABELS[1]
    return LabelMap(data, grid.affine, default_protocol())


def render_phantom(lm: LabelMap, seed: int = 0, fwhm_vox: float = 0.8, noise_sd: float = 0.03) -> Volume:
    """Realistic-looking scan of ``lm``: tissue means, bias, partial voluming and noise."""
    rng = make_rng(seed, 7)
    lut = np.zeros(int(lm.data.max()) + 1, dtype=np.float64)
    for k, v in TISSUE_INTENSITY.items():
        if k < lut.size:
            lut[k] = v
    img = lut[lm.data]
    img *= 1.0 + 0.15 * gradient_noise(rng, lm.shape, 3)
    img = ndimage.gaussian_filter(img, fwhm_vox / 2.3548, mode="nearest")
    img += rng.normal(0.0, noise_sd, lm.shape)
    return Volume(np.clip(img, 0, None).astype(np.float32), lm.affine)


def phantom_session(seed: int = 0, **kwargs) -> Session:
    lm = phantom_labels(**kwargs)
    return Session.from_volumes(lm, [render_phantom(lm, seed)], session_id=f"phantom-{seed}")


def toy_grid(size: int = 48, spacing: float = 3.0) -> GridSpec:
    return GridSpec((size,) * 3, (spacing,) * 3, "LIA")
