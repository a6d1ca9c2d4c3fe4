"""Per-channel corruption chain and simulated skull-stripping.

Each step is split into a sampler, which draws the step's parameters (and a
seed for any random array) into a JSON-ready record, and a deterministic
``apply_*`` function. The ordered list of records is the corruption trace;
replaying it through the ``apply_*`` functions reproduces the channel bitwise.
"""

from __future__ import annotations

import json
import math

import numpy as np
from scipy import ndimage

from .core import TRANSIENT_BASE, LabelMap, Volume, rescale_unit
from .noise import draw_seed, gradient_noise, make_rng

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.3548
STRUCTURE_6 = ndimage.generate_binary_structure(3, 1)

# Row whose probability gates each step.
GATE_ROWS = {
    "bias_field": "bias_field_drop",
    "blur": "image_blurring_fwhm",
    "add_noise": "noise_intensity_sd",
    "fill_slices": "slice_fill_count",
    "downsample_axis": "downsampling_factor",
    "gamma": "gamma_exponent",
    "crop_fov": "fov_cropping",
    "simulate_skullstrip": "skull_stripping",
}


def _clamp(data) -> np.ndarray:
    return np.clip(data, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# bias field
# --------------------------------------------------------------------------

def apply_bias(vol: Volume, field: np.ndarray) -> Volume:
    return vol.with_data(_clamp(vol.data * field))


def bias_multiplier(shape, params: dict, mode: str = "attenuate") -> np.ndarray:
    """Noise field rescaled to [1 - d, 1] (or [1 - d, 1 + d] in symmetric mode)."""
    d = params["bias_field_drop"]
    field = rescale_unit(gradient_noise(make_rng(params["seed"]), shape, params["bias_field_control_points"]))
    if mode == "symmetric":
        return (1.0 - d) + 2.0 * d * field
    return (1.0 - d) + d * field


def sample_bias(rng, config, vol) -> dict:
    fired, drop = config["bias_field_drop"].draw(rng)
    cp = config["bias_field_control_points"].integer(rng, size=3)
    return {
        "fired": fired,
        "bias_field_drop": float(drop),
        "bias_field_control_points": [int(c) for c in cp],
        "seed": draw_seed(rng),
        "mode": config.policy.get("bias_mode", "attenuate"),
    }


def apply_bias_params(vol: Volume, params: dict) -> Volume:
    if params["bias_field_drop"] == 0:
        return vol
    return apply_bias(vol, bias_multiplier(vol.shape, params, params.get("mode", "attenuate")))


def bias_field(vol: Volume, rng, config) -> Volume:
    return apply_bias_params(vol, sample_bias(rng, config, vol))


# --------------------------------------------------------------------------
# blur
# --------------------------------------------------------------------------

def sample_blur(rng, config, vol) -> dict:
    fired, fwhm = config["image_blurring_fwhm"].draw(rng, size=3)
    return {"fired": fired, "image_blurring_fwhm": [float(f) for f in fwhm]}


def gaussian_blur(vol: Volume, fwhm_mm) -> Volume:
    """Separable Gaussian smoothing with per-axis FWHM in mm.

    Axes whose FWHM is below a tenth of the voxel size are left untouched.
    """
    data = vol.data.astype(np.float64)
    changed = False
    for axis, (fwhm, spacing) in enumerate(zip(fwhm_mm, vol.spacing)):
        if fwhm < 0.1 * spacing:
            continue
        sigma = fwhm / (FWHM_PER_SIGMA * spacing)
        data = ndimage.gaussian_filter1d(data, sigma, axis=axis, mode="nearest", truncate=4.0)
        changed = True
    if not changed:
        return vol
    return vol.with_data(data)


def apply_blur_params(vol: Volume, params: dict) -> Volume:
    return gaussian_blur(vol, params["image_blurring_fwhm"])


def blur(vol: Volume, rng, config) -> Volume:
    return apply_blur_params(vol, sample_blur(rng, config, vol))


# --------------------------------------------------------------------------
# additive noise
# --------------------------------------------------------------------------

def sample_noise(rng, config, vol) -> dict:
    fired, sd = config["noise_intensity_sd"].draw(rng)
    return {"fired": fired, "noise_intensity_sd": float(sd), "seed": draw_seed(rng)}


def noise_component(shape, params: dict) -> np.ndarray:
    """The zero-mean Gaussian array added before clamping."""
    return make_rng(params["seed"]).standard_normal(shape) * params["noise_intensity_sd"]


def apply_noise_params(vol: Volume, params: dict) -> Volume:
    if params["noise_intensity_sd"] == 0:
        return vol
    return vol.with_data(_clamp(vol.data + noise_component(vol.shape, params)))


def add_noise(vol: Volume, rng, config) -> Volume:
    return apply_noise_params(vol, sample_noise(rng, config, vol))


# --------------------------------------------------------------------------
# slice fill
# --------------------------------------------------------------------------

def sample_fill(rng, config, vol) -> dict:
    row = config["slice_fill_count"]
    fired = row.fires(rng)
    params = {"fired": fired}
    if fired:
        axis = int(rng.integers(0, 3))
        count = int(row.integer(rng))
        extent = vol.shape[axis]
        idx = rng.choice(extent, size=min(count, extent), replace=False)
        params.update(
            axis=axis,
            slice_fill_count=count,
            indices=sorted(int(i) for i in idx),
            slice_fill_intensity=float(config["slice_fill_intensity"].uniform(rng)),
        )
    return params


def apply_fill_params(vol: Volume, params: dict) -> Volume:
    if not params["fired"]:
        return vol
    data = vol.data.copy()
    index = [slice(None)] * 3
    index[params["axis"]] = params["indices"]
    data[tuple(index)] = params["slice_fill_intensity"]
    return vol.with_data(data)


def fill_slices(vol: Volume, rng, config) -> Volume:
    return apply_fill_params(vol, sample_fill(rng, config, vol))


# --------------------------------------------------------------------------
# thick slices
# --------------------------------------------------------------------------

def thick_slice_matrix(n: int, factor: float) -> np.ndarray:
    """(n, n) operator: box-average over blocks of ``factor`` voxels, then replicate.

    Low-resolution sample j averages the input over the voxel-edge interval
    [j f, (j + 1) f), weighting partially covered voxels by their overlap.
    Output voxel i copies the sample whose block contains its center.
    """
    if factor < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {factor}")
    m = max(1, math.ceil(n / factor - 1e-9))
    down = np.zeros((m, n))
    edges = np.arange(n + 1, dtype=np.float64)
    for j in range(m):
        lo, hi = j * factor, min((j + 1) * factor, n)
        overlap = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
        down[j] = overlap / overlap.sum()
    nearest = np.minimum(np.floor((np.arange(n) + 0.5) / factor).astype(int), m - 1)
    return down[nearest]


def thick_slices(data: np.ndarray, axis: int, factor: float) -> np.ndarray:
    if factor == 1:
        return data
    op = thick_slice_matrix(data.shape[axis], factor)
    moved = np.moveaxis(data.astype(np.float64), axis, 0)
    out = np.tensordot(op, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def sample_downsample(rng, config, vol) -> dict:
    row = config["downsampling_factor"]
    fired = row.fires(rng)
    params = {"fired": fired}
    if fired:
        params["axis"] = int(rng.integers(0, 3))
        params["downsampling_factor"] = float(row.uniform(rng))
    return params


def apply_downsample_params(vol: Volume, params: dict) -> Volume:
    if not params["fired"] or params["downsampling_factor"] == 1:
        return vol
    return vol.with_data(_clamp(thick_slices(vol.data, params["axis"], params["downsampling_factor"])))


def downsample_axis(vol: Volume, rng, config) -> Volume:
    return apply_downsample_params(vol, sample_downsample(rng, config, vol))


# --------------------------------------------------------------------------
# gamma
# --------------------------------------------------------------------------

def sample_gamma(rng, config, vol) -> dict:
    fired, g = config["gamma_exponent"].draw(rng)
    return {"fired": fired, "gamma_exponent": float(g)}


def apply_gamma_params(vol: Volume, params: dict) -> Volume:
    if params["gamma_exponent"] == 1:
        return vol
    return vol.with_data(_clamp(np.power(vol.data.astype(np.float64), params["gamma_exponent"])))


def gamma(vol: Volume, rng, config) -> Volume:
    return apply_gamma_params(vol, sample_gamma(rng, config, vol))


# --------------------------------------------------------------------------
# FOV cropping
# --------------------------------------------------------------------------

def sample_crop(rng, config, vol) -> dict:
    row = config["fov_cropping"]
    fired = row.fires(rng)
    params = {"fired": fired}
    if fired:
        params["fov_cropping"] = [float(f) for f in row.uniform(rng, size=3)]
        params["sides"] = [int(s) for s in rng.integers(0, 2, size=3)]
    return params


def apply_crop_params(vol: Volume, params: dict) -> Volume:
    """Zero a fraction of each axis from the low (side 0) or high (side 1) end."""
    if not params["fired"]:
        return vol
    data = vol.data.copy()
    for axis, (frac, side) in enumerate(zip(params["fov_cropping"], params["sides"])):
        n = vol.shape[axis]
        count = int(math.floor(frac * n))
        if count == 0:
            continue
        index = [slice(None)] * 3
        index[axis] = slice(0, count) if side == 0 else slice(n - count, n)
        data[tuple(index)] = 0
    return vol.with_data(data)


def crop_fov(vol: Volume, rng, config) -> Volume:
    return apply_crop_params(vol, sample_crop(rng, config, vol))


# --------------------------------------------------------------------------
# skull-stripping
# --------------------------------------------------------------------------

def erosion_delta_bounds(n_dilate: int, lo: int = -4, hi: int = 8) -> tuple[int, int]:
    return max(-n_dilate, lo), min(n_dilate, hi)


def sample_erosion_delta(rng, n_dilate: int, lo: int = -4, hi: int = 8) -> int:
    """Uniform integer in [max(-n_dilate, lo), min(n_dilate, hi)]."""
    a, b = erosion_delta_bounds(n_dilate, lo, hi)
    return int(rng.integers(a, b + 1))


def brain_mask(lm: LabelMap) -> np.ndarray:
    if lm.protocol is not None:
        return np.isin(lm.data, lm.protocol.brain_ids)
    return (lm.data > 0) & (lm.data < TRANSIENT_BASE)


def morph_mask(mask: np.ndarray, fill: bool, n_dilate: int, n_erode: int) -> np.ndarray:
    """Optional hole filling, then ``n_dilate`` dilations and ``n_erode`` erosions.

    Uses the 6-connected element. Erosion treats the outside of the grid as
    foreground so dilate-then-erode never removes voxels of the input mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if fill:
        mask = ndimage.binary_fill_holes(mask, structure=STRUCTURE_6)
    if n_dilate > 0:
        mask = ndimage.binary_dilation(mask, STRUCTURE_6, iterations=n_dilate)
    if n_erode > 0:
        mask = ndimage.binary_erosion(mask, STRUCTURE_6, iterations=n_erode, border_value=1)
    return mask


def sample_skullstrip(rng, config, vol) -> dict:
    fired = config["skull_stripping"].fires(rng)
    params = {"fired": fired}
    if fired:
        hole_fired = config["skull_strip_hole_filling"].fires(rng)
        dil_row = config["skull_strip_dilation"]
        n_dilate = int(dil_row.integer(rng)) if dil_row.fires(rng) else 0
        ero_row = config["skull_strip_erosion_delta"]
        lo, hi = (int(round(v)) for v in ero_row.bounds())
        delta = sample_erosion_delta(rng, n_dilate, lo, hi) if ero_row.fires(rng) else 0
        params.update(
            skull_strip_hole_filling=hole_fired,
            skull_strip_dilation=n_dilate,
            skull_strip_erosion_delta=delta,
            n_erode=n_dilate - delta,
        )
    return params


def skullstrip_from_params(vol: Volume, lm: LabelMap, params: dict) -> tuple[Volume, np.ndarray]:
    if not params["fired"]:
        return vol, np.ones(vol.shape, dtype=np.uint8)
    mask = morph_mask(
        brain_mask(lm), params["skull_strip_hole_filling"], params["skull_strip_dilation"], params["n_erode"]
    ).astype(np.uint8)
    return vol.with_data(vol.data * mask), mask


def simulate_skullstrip(vol: Volume, lm: LabelMap, rng, config) -> tuple[Volume, np.ndarray]:
    """Randomly mask ``vol`` with a dilated/eroded brain-label mask."""
    return skullstrip_from_params(vol, lm, sample_skullstrip(rng, config, vol))


def aggregate_mask(masks) -> np.ndarray:
    """Voxel-wise maximum over the channel masks."""
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(f"mask geometry mismatch: {m.shape} vs {shape}")
    return np.maximum.reduce([np.asarray(m, dtype=np.uint8) for m in masks])


def mask_labels(lm: LabelMap, mask: np.ndarray) -> LabelMap:
    if mask.shape != lm.shape:
        raise ValueError(f"mask geometry mismatch: {mask.shape} vs {lm.shape}")
    return lm.with_data(np.where(mask > 0, lm.data, 0))


# --------------------------------------------------------------------------
# chain
# --------------------------------------------------------------------------

SAMPLERS = {
    "bias_field": sample_bias,
    "blur": sample_blur,
    "add_noise": sample_noise,
    "fill_slices": sample_fill,
    "downsample_axis": sample_downsample,
    "gamma": sample_gamma,
    "crop_fov": sample_crop,
    "simulate_skullstrip": sample_skullstrip,
}

APPLIERS = {
    "bias_field": apply_bias_params,
    "blur": apply_blur_params,
    "add_noise": apply_noise_params,
    "fill_slices": apply_fill_params,
    "downsample_axis": apply_downsample_params,
    "gamma": apply_gamma_params,
    "crop_fov": apply_crop_params,
}


def replay_trace(vol: Volume, lm: LabelMap, trace: list[dict]) -> tuple[Volume, np.ndarray]:
    """Re-run a recorded corruption trace; bitwise equal to the original run."""
    mask = np.ones(vol.shape, dtype=np.uint8)
    for record in trace:
        step = record["step"]
        if step == "simulate_skullstrip":
            vol, mask = skullstrip_from_params(vol, lm, record)
        elif step == "renormalize":
            vol = vol.with_data(rescale_unit(vol.data))
        else:
            vol = APPLIERS[step](vol, record)
    return vol, mask


def corrupt_channel(vol: Volume, lm: LabelMap, rng, config) -> tuple[Volume, np.ndarray, list[dict]]:
    """Apply every corruption step in the configured order, then rescale to [0, 1]."""
    trace = []
    mask = np.ones(vol.shape, dtype=np.uint8)
    for step in config.pipeline_order:
        params = SAMPLERS[step](rng, config, vol)
        if step == "simulate_skullstrip":
            vol, mask = skullstrip_from_params(vol, lm, params)
        else:
            vol = APPLIERS[step](vol, params)
        trace.append({"step": step, **params})
    vol = vol.with_data(rescale_unit(vol.data))
    trace.append({"step": "renormalize"})
    return vol, mask, trace


def trace_to_json(trace) -> str:
    return json.dumps(trace, indent=1, default=_jsonable)


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")
