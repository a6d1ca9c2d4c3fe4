"""Seeded procedural noise: lattice noise volumes, smooth lookups and vector fields.

All randomness flows through :class:`numpy.random.Generator` objects built on
PCG64. Streams are derived from a master seed plus a spawn key, so every
sample (and every channel within it) owns an independent, reproducible stream.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for ``seed`` and an optional spawn key path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def draw_seed(rng) -> int:
    """Draw a 63-bit seed for a derived stream; recorded in traces for replay."""
    return int(rng.integers(0, 2**63 - 1))


def _as_triple(control_points) -> tuple[int, int, int]:
    if np.ndim(control_points) == 0:
        cp = (int(control_points),) * 3
    else:
        cp = tuple(int(c) for c in control_points)
    if len(cp) != 3:
        raise ValueError(f"need 1 or 3 control point counts, got {control_points!r}")
    if min(cp) < 2:
        raise ValueError(f"control points must be >= 2, got {cp}")
    return cp


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights (n_out, n_in) mapping end points onto end points."""
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def upsample_lattice(lattice: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Separable trilinear upsampling of a control lattice to ``shape``."""
    wx, wy, wz = (interp_matrix(n, c) for n, c in zip(shape, lattice.shape))
    out = np.einsum("ia,jb,kc,abc->ijk", wx, wy, wz, lattice, optimize=True)
    return out


def gradient_noise(rng, shape: Sequence[int], control_points) -> np.ndarray:
    """Smooth random field in [-1, 1].

    Control values are drawn uniformly from [-1, 1] on a lattice with
    ``control_points`` nodes per axis (an int or one count per axis) and
    upsampled trilinearly, so the field interpolates the lattice exactly when
    the lattice and the grid have the same extent.
    """
    cp = _as_triple(control_points)
    shape = tuple(int(s) for s in shape)
    if min(shape) < 1:
        raise ValueError(f"shape must be positive, got {shape}")
    lattice = np.asarray(rng.uniform(-1.0, 1.0, size=cp), dtype=np.float64)
    return upsample_lattice(lattice, shape).astype(np.float32)


def lookup_from_controls(controls: Sequence[float]) -> np.ndarray:
    """Place controls evenly over [0, 255] and interpolate linearly to 256 entries."""
    controls = np.asarray(controls, dtype=np.float64)
    pos = np.linspace(0.0, 255.0, len(controls))
    return np.interp(np.arange(256.0), pos, controls)


def smooth_lookup(rng, control_points: int) -> np.ndarray:
    """Random smooth intensity lookup table of 256 entries in [0, 1]."""
    if not 2 <= int(control_points) <= 256:
        raise ValueError(f"lookup control points must lie in [2, 256], got {control_points}")
    return lookup_from_controls(rng.uniform(0.0, 1.0, size=int(control_points)))


def smooth_vector_field(rng, shape: Sequence[int], control_points, max_magnitude_mm: float) -> np.ndarray:
    """Three independent noise components scaled to a maximum vector norm.

    Returns an array of shape (3, *shape) whose largest per-voxel norm equals
    ``max_magnitude_mm`` (or zero for a degenerate all-zero field).
    """
    if max_magnitude_mm < 0:
        raise ValueError(f"max magnitude must be non-negative, got {max_magnitude_mm}")
    field = np.stack([gradient_noise(rng, shape, control_points) for _ in range(3)]).astype(np.float64)
    peak = np.sqrt((field**2).sum(axis=0)).max()
    if max_magnitude_mm == 0 or peak == 0:
        return np.zeros_like(field)
    return field * (max_magnitude_mm / peak)
