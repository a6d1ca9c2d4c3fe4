"""Engine configuration: randomization ranges, gate probabilities, grid and policies.

Ranges are stored in the units of the published parameter table (mm, degrees,
percent). :meth:`Row.bounds` converts percent rows to fractions for use in
code, and traces log sampled values in those converted units.
"""

from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

from .core import GridSpec

SCHEMA_VERSION = 1

CORRUPTION_ORDER = (
    "bias_field",
    "blur",
    "add_noise",
    "fill_slices",
    "downsample_axis",
    "gamma",
    "crop_fov",
    "simulate_skullstrip",
)

# Rows whose probability gates a corruption step; halved for the overfit check.
CORRUPTION_ROWS = (
    "bias_field_drop",
    "image_blurring_fwhm",
    "noise_intensity_sd",
    "slice_fill_count",
    "downsampling_factor",
    "gamma_exponent",
    "fov_cropping",
    "skull_stripping",
    "skull_strip_dilation",
    "skull_strip_erosion_delta",
    "skull_strip_hole_filling",
)

# Value used when a gated continuous row does not fire.
IDENTITY_VALUES = {
    "translation": 0.0,
    "rotation": 0.0,
    "scaling": 1.0,
    "shear": 1.0,
    "warp_displacement": 0.0,
    "bias_field_drop": 0.0,
    "image_blurring_fwhm": 0.0,
    "noise_intensity_sd": 0.0,
    "gamma_exponent": 1.0,
    "skull_strip_dilation": 0,
    "skull_strip_erosion_delta": 0,
}

INTEGER_ROWS = {
    "warp_control_points",
    "blob_label_count",
    "blob_control_points",
    "image_channel_count",
    "real_channel_count",
    "lookup_control_points",
    "bias_field_control_points",
    "slice_fill_count",
    "skull_strip_dilation",
    "skull_strip_erosion_delta",
}

POLICY_DEFAULTS = {
    # "table": gate real channels at p, count in [a, b]; "text": U{0..min(avail, n)}
    "real_channels": "table",
    # "table": gate at p, then U{a..b}; "text": U{0..3} without gate
    "blob_count": "table",
    # "gate": p on the lookup row gates the remap; otherwise pass-through
    "lookup": "gate",
    # "attenuate": field in [1 - d, 1]; "symmetric": field in [1 - d, 1 + d]
    "bias_mode": "attenuate",
    "transform_order": "warp_then_affine",
    # "sum": loss as printed, perfect = 1 - K; "mean": 1 - mean over classes
    "dice_variant": "sum",
    "keep_transients": False,
    # optional list of per-session sampling weights
    "session_weights": None,
}


class ConfigError(ValueError):
    """Schema violation, with a path-qualified message."""


@dataclass(frozen=True)
class Row:
    """One randomization row: uniform range [a, b] and gate probability p."""

    name: str
    unit: str = "-"
    a: float | None = None
    b: float | None = None
    p: float | None = None

    @property
    def has_range(self) -> bool:
        return self.a is not None

    def bounds(self) -> tuple[float, float]:
        """Range in code units (percent converted to fractions)."""
        if self.a is None:
            raise ConfigError(f"rows.{self.name}: row has no range")
        scale = 0.01 if self.unit == "%" else 1.0
        return self.a * scale, self.b * scale

    @property
    def gate(self) -> float:
        return 1.0 if self.p is None else self.p

    def fires(self, rng) -> bool:
        """Bernoulli gate; always consumes exactly one draw."""
        return bool(rng.random() < self.gate)

    def uniform(self, rng, size=None):
        lo, hi = self.bounds()
        return rng.uniform(lo, hi, size=size)

    def integer(self, rng, size=None):
        lo, hi = self.bounds()
        return rng.integers(int(round(lo)), int(round(hi)) + 1, size=size)

    def draw(self, rng, size=None):
        """Gate, then draw from the range; identity value when the gate fails."""
        fired = self.fires(rng)
        sampler = self.integer if self.name in INTEGER_ROWS else self.uniform
        value = sampler(rng, size=size)
        if not fired:
            ident = IDENTITY_VALUES[self.name]
            value = ident if size is None else [ident] * size
        return fired, value

    def to_dict(self) -> dict:
        return {"unit": self.unit, "a": self.a, "b": self.b, "p": self.p}


def _load_table1() -> dict:
    text = resources.files("groupseg.data").joinpath("table1.json").read_text()
    return json.loads(text)


@dataclass
class EngineConfig:
    rows: dict[str, Row]
    extra: dict[str, Row] = field(default_factory=dict)
    grid: GridSpec = field(default_factory=GridSpec)
    pipeline_order: tuple[str, ...] = CORRUPTION_ORDER
    rng_algorithm: str = "PCG64"
    seed: int = 0
    policy: dict[str, Any] = field(default_factory=lambda: dict(POLICY_DEFAULTS))

    def __getitem__(self, name: str) -> Row:
        if name in self.rows:
            return self.rows[name]
        return self.extra[name]

    @classmethod
    def default(cls) -> "EngineConfig":
        """Configuration reproducing the shipped ``table1.json``."""
        return cls.from_dict(_load_table1())

    # -- derived variants ------------------------------------------------

    def replace_rows(self, **changes: dict) -> "EngineConfig":
        cfg = copy.deepcopy(self)
        for name, upd in changes.items():
            row = cfg[name]
            new = Row(name, upd.get("unit", row.unit), upd.get("a", row.a), upd.get("b", row.b), upd.get("p", row.p))
            if name in cfg.rows:
                cfg.rows[name] = new
            else:
                cfg.extra[name] = new
        return cfg

    def with_grid(self, grid: GridSpec) -> "EngineConfig":
        cfg = copy.deepcopy(self)
        cfg.grid = grid
        return cfg

    def scaled_corruption(self, factor: float) -> "EngineConfig":
        """Copy with every corruption-step probability multiplied by ``factor``."""
        changes = {}
        for name in CORRUPTION_ROWS:
            row = self.rows[name]
            changes[name] = {"p": row.gate * factor}
        return self.replace_rows(**changes)

    def identity(self) -> "EngineConfig":
        """All probabilities 0 and every range collapsed to its identity value."""
        changes = {}
        for name, row in {**self.rows, **self.extra}.items():
            upd = {"p": 0.0}
            if name in IDENTITY_VALUES:
                v = IDENTITY_VALUES[name] * (100.0 if row.unit == "%" else 1.0)
                upd.update(a=v, b=v)
            changes[name] = upd
        return self.replace_rows(**changes)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rows": {k: r.to_dict() for k, r in self.rows.items()},
            "extra": {k: r.to_dict() for k, r in self.extra.items()},
            "grid": self.grid.to_dict(),
            "pipeline_order": list(self.pipeline_order),
            "rng": {"algorithm": self.rng_algorithm, "seed": self.seed},
            "policy": dict(self.policy),
        }

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict, strict: bool = True) -> "EngineConfig":
        known = {"schema_version", "rows", "extra", "grid", "pipeline_order", "rng", "policy", "description"}
        _check_unknown(doc, known, "", strict)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
        if "rows" not in doc:
            raise ConfigError("rows: missing")

        table = _load_table1()
        rows = {}
        for name, spec in doc["rows"].items():
            if name not in table["rows"]:
                msg = f"rows.{name}: unknown row"
                if strict:
                    raise ConfigError(msg)
                warnings.warn(msg)
                continue
            rows[name] = _parse_row(name, spec, f"rows.{name}", strict, table["rows"][name])
        missing = sorted(set(table["rows"]) - set(rows))
        if missing:
            raise ConfigError(f"rows: missing rows {missing}")
        extra = {
            name: _parse_row(name, spec, f"extra.{name}", strict, None)
            for name, spec in doc.get("extra", {}).items()
        }
        for name, spec in table.get("extra", {}).items():
            extra.setdefault(name, _parse_row(name, spec, f"extra.{name}", strict, None))

        grid_doc = doc.get("grid", table["grid"])
        _check_unknown(grid_doc, {"shape", "spacing", "orientation"}, "grid.", strict)
        try:
            grid = GridSpec(tuple(grid_doc["shape"]), tuple(grid_doc["spacing"]), grid_doc.get("orientation", "LIA"))
        except (KeyError, ValueError, TypeError) as err:
            raise ConfigError(f"grid: {err}") from err

        order = tuple(doc.get("pipeline_order", CORRUPTION_ORDER))
        if sorted(order) != sorted(CORRUPTION_ORDER):
            raise ConfigError(f"pipeline_order: must be a permutation of {list(CORRUPTION_ORDER)}")

        rng_doc = doc.get("rng", {})
        _check_unknown(rng_doc, {"algorithm", "seed"}, "rng.", strict)
        algorithm = rng_doc.get("algorithm", "PCG64")
        if algorithm != "PCG64":
            raise ConfigError(f"rng.algorithm: only PCG64 is supported, got {algorithm!r}")

        policy = dict(POLICY_DEFAULTS)
        pol_doc = doc.get("policy", {})
        _check_unknown(pol_doc, set(POLICY_DEFAULTS), "policy.", strict)
        policy.update({k: v for k, v in pol_doc.items() if k in POLICY_DEFAULTS})

        return cls(rows, extra, grid, order, algorithm, int(rng_doc.get("seed", 0)), policy)


def _check_unknown(doc: dict, known: set, prefix: str, strict: bool) -> None:
    for key in doc:
        if key not in known:
            msg = f"{prefix}{key}: unknown field"
            if strict:
                raise ConfigError(msg)
            warnings.warn(msg)


def _parse_row(name: str, spec: dict, path: str, strict: bool, reference: dict | None) -> Row:
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: expected an object")
    _check_unknown(spec, {"unit", "a", "b", "p"}, path + ".", strict)
    ranged = reference is None or reference.get("a") is not None
    a, b = spec.get("a"), spec.get("b")
    if ranged:
        for key, value in (("a", a), ("b", b)):
            if value is None:
                raise ConfigError(f"{path}.{key}: missing range endpoint for row {name!r}")
            if not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.{key}: expected a number")
        if a > b:
            raise ConfigError(f"{path}: range is not ordered ({a} > {b})")
    p = spec.get("p")
    if reference is not None and reference.get("p") is not None and p is None:
        raise ConfigError(f"{path}.p: missing probability for row {name!r}")
    if p is not None and not 0.0 <= p <= 1.0:
        raise ConfigError(f"{path}.p: probability {p} outside [0, 1]")
    return Row(name, spec.get("unit", "-"), a, b, p)


def read_config(path, strict: bool = True) -> EngineConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return EngineConfig.from_dict(doc, strict=strict)


def write_config(cfg: EngineConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")
