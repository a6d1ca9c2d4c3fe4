"""Artificial contrasts: channel planning, lookup remapping of real scans and
label-map rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelMap, Volume, rescale_unit
from .noise import lookup_from_controls


@dataclass(frozen=True)
class ChannelPlan:
    n: int
    n_real: int
    sources: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"channel count must be >= 1, got {self.n}")
        if not 0 <= self.n_real <= self.n:
            raise ValueError(f"real channel count {self.n_real} outside [0, {self.n}]")
        if len(self.sources) != self.n_real or len(set(self.sources)) != self.n_real:
            raise ValueError("need one distinct source index per real channel")

    @property
    def n_synth(self) -> int:
        return self.n - self.n_real


def plan_channels(rng, available_real: int, config) -> tuple[ChannelPlan, dict]:
    """Draw the channel count and the subset of real scans to retain.

    Returns the plan and a trace record. Under the default ``table`` policy the
    real-channel row gates retention and caps the count at its upper bound.
    """
    if available_real < 0:
        raise ValueError("available_real must be >= 0")
    n = int(config["image_channel_count"].integer(rng))
    row = config["real_channel_count"]
    policy = config.policy.get("real_channels", "table")
    if policy == "text":
        fired = True
        n_real = int(rng.integers(0, min(available_real, n) + 1))
    else:
        fired = row.fires(rng)
        n_real = 0
        if fired and available_real > 0:
            lo, hi = row.bounds()
            hi = min(int(hi), available_real, n)
            n_real = int(rng.integers(int(lo), hi + 1))
    sources = tuple(int(i) for i in rng.choice(available_real, size=n_real, replace=False)) if n_real else ()
    trace = {
        "image_channel_count": n,
        "real_gate": fired,
        "available_real": available_real,
        "real_channel_count": n_real,
        "sources": list(sources),
    }
    return ChannelPlan(n, n_real, sources), trace


def sample_remap(rng, config) -> dict:
    row = config["lookup_control_points"]
    if config.policy.get("lookup", "gate") == "gate":
        fired = row.fires(rng)
    else:
        fired = True
    params = {"fired": fired}
    if fired:
        cp = int(row.integer(rng))
        params["lookup_control_points"] = cp
        params["controls"] = [float(c) for c in rng.uniform(0.0, 1.0, size=cp)]
    return params


def apply_lookup(vol: Volume, table: np.ndarray) -> Volume:
    """Min-max to [0, 255] and map through ``table`` with fractional indices."""
    index = rescale_unit(vol.data).astype(np.float64) * 255.0
    return vol.with_data(np.interp(index, np.arange(256.0), table))


def remap_from_params(vol: Volume, params: dict) -> Volume:
    if not params.get("fired"):
        return vol.with_data(rescale_unit(vol.data))
    return apply_lookup(vol, lookup_from_controls(params["controls"]))


def remap_real(vol: Volume, rng, config) -> Volume:
    """Randomly remap a real scan's intensities through a smooth lookup; output in [0, 1]."""
    return remap_from_params(vol, sample_remap(rng, config))


def render_labels(lm: LabelMap, means: dict[int, float]) -> Volume:
    """Piecewise-constant image: every voxel of label k gets ``means[k]``."""
    lut = np.zeros(int(lm.data.max()) + 1, dtype=np.float32)
    for k, m in means.items():
        if k < lut.size:
            lut[k] = m
    return Volume(lut[lm.data], lm.affine)


def sample_label_means(rng, lm: LabelMap, config=None) -> dict[int, float]:
    lo, hi = config["label_intensity_mean"].bounds() if config is not None else (0.0, 1.0)
    ids = np.unique(lm.data)
    values = rng.uniform(lo, hi, size=ids.size)
    return {int(k): float(v) for k, v in zip(ids, values)}


def synth_from_labels(lm: LabelMap, rng, config=None) -> Volume:
    """Noise-free image with an independent uniform intensity per label ID.

    Left and right partners, blob and non-brain IDs all draw separately.
    """
    return render_labels(lm, sample_label_means(rng, lm, config))
