"""Collect sampled randomization parameters from traces for range auditing."""

from __future__ import annotations

import math
from collections import defaultdict
from numbers import Real

from .config import EngineConfig

# Trace steps whose "fired" flag is decided by a single table row.
GATED_STEPS = {
    "bias_field": "bias_field_drop",
    "blur": "image_blurring_fwhm",
    "add_noise": "noise_intensity_sd",
    "fill_slices": "slice_fill_count",
    "downsample_axis": "downsampling_factor",
    "gamma": "gamma_exponent",
    "crop_fov": "fov_cropping",
    "simulate_skullstrip": "skull_stripping",
}


def _numbers(value):
    if isinstance(value, bool):
        return
    if isinstance(value, Real):
        yield float(value)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _numbers(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _numbers(v)


def trace_parameters(trace: dict, names) -> dict[str, list[float]]:
    """Every numeric value logged under a key in ``names``, at any depth."""
    names = set(names)
    found = defaultdict(list)

    def walk(node):
        if isinstance(node, dict):
            fired = node.get("fired", True)
            for key, value in node.items():
                if key == "real_channel_count" and not (node.get("real_gate") and node.get("available_real")):
                    continue
                if key in names and fired:
                    found[key].extend(_numbers(value))
                else:
                    walk(value)
        elif isinstance(node, list):
            for item in node:
                walk(item)

    walk(trace)
    return dict(found)


def gate_events(trace: dict) -> dict[str, list[bool]]:
    """Fired/not-fired outcomes per gated row found in one sample trace."""
    events = defaultdict(list)
    spatial = trace.get("spatial", {})
    if "blobs" in spatial:
        events["blob_label_count"].append(bool(spatial["blobs"]["fired"]))
    if "warp" in spatial:
        events["warp_displacement"].append(bool(spatial["warp"]["fired"]))
    if "flip" in spatial:
        events["left_right_flipping"].append(bool(spatial["flip"]["fired"]))
    plan = trace.get("plan", {})
    if "real_gate" in plan:
        events["real_channel_count"].append(bool(plan["real_gate"]))
    for ch in trace.get("channels", []):
        if "remap" in ch:
            events["lookup_control_points"].append(bool(ch["remap"]["fired"]))
        for step in ch.get("corruption", []):
            row = GATED_STEPS.get(step["step"])
            if row is not None:
                events[row].append(bool(step["fired"]))
            if step["step"] == "simulate_skullstrip" and step["fired"]:
                events["skull_strip_hole_filling"].append(bool(step["skull_strip_hole_filling"]))
    return dict(events)


def summarize(traces, config: EngineConfig | None = None) -> dict:
    """Per-row count/min/max/mean of sampled values plus bounds and gate rates."""
    config = config or EngineConfig.default()
    rows = {**config.rows, **config.extra}
    values = defaultdict(list)
    gates = defaultdict(list)
    for trace in traces:
        for k, v in trace_parameters(trace, rows).items():
            values[k].extend(v)
        for k, v in gate_events(trace).items():
            gates[k].extend(v)
    report = {}
    for name in sorted(set(values) | set(gates)):
        row = rows[name]
        vals = values.get(name, [])
        entry = {"count": len(vals)}
        if vals:
            entry.update(min=min(vals), max=max(vals), mean=math.fsum(vals) / len(vals))
        if row.has_range:
            lo, hi = row.bounds()
            entry["bounds"] = [lo, hi]
            entry["in_bounds"] = all(lo - 1e-9 <= v <= hi + 1e-9 for v in vals)
        if name in gates:
            g = gates[name]
            entry["gate"] = {"p": row.gate, "trials": len(g), "rate": sum(g) / len(g)}
        report[name] = entry
    return report
