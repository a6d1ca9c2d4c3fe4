import pytest

from groupseg.config import ConfigError, EngineConfig, Row

# (unit, a, b, p) per randomization row, as published
TABLE = {
    "translation": ("mm", -45, 45, 1),
    "rotation": ("deg", -30, 30, 1),
    "scaling": ("%", 90, 110, 1),
    "shear": ("%", 90, 110, 1),
    "warp_displacement": ("mm", 0, 18, 1),
    "warp_control_points": ("-", 2, 16, None),
    "left_right_flipping": ("-", None, None, 0.5),
    "blob_label_count": ("-", 1, 3, 0.5),
    "blob_control_points": ("-", 2, 4, None),
    "label_intensity_mean": ("a.u.", 0, 1, None),
    "image_channel_count": ("-", 1, 4, None),
    "real_channel_count": ("-", 1, 2, 0.5),
    "lookup_control_points": ("-", 2, 8, 0.5),
    "bias_field_drop": ("%", 0, 50, 1),
    "bias_field_control_points": ("mm", 2, 4, None),
    "image_blurring_fwhm": ("mm", 0, 3, 1),
    "noise_intensity_sd": ("%", 0, 10, 1),
    "slice_fill_count": ("-", 1, 3, 0.5),
    "slice_fill_intensity": ("a.u.", 0, 1, None),
    "downsampling_factor": ("-", 1, 4, 0.5),
    "gamma_exponent": ("-", 0.5, 1.5, 1),
    "fov_cropping": ("%", 0, 33, 0.5),
    "skull_stripping": ("-", None, None, 0.5),
    "skull_strip_dilation": ("-", 0, 10, 1),
    "skull_strip_erosion_delta": ("-", -4, 8, 1),
    "skull_strip_hole_filling": ("-", None, None, 0.5),
}


def test_default_config_matches_published_table(config):
    assert set(config.rows) == set(TABLE)
    for name, (unit, a, b, p) in TABLE.items():
        row = config.rows[name]
        assert (row.unit, row.a, row.b, row.p) == (unit, a, b, p), name


def test_percent_rows_convert_to_fractions(config):
    assert config["scaling"].bounds() == (0.9, 1.1)
    assert config["fov_cropping"].bounds() == pytest.approx((0.0, 0.33))
    assert config["noise_intensity_sd"].bounds() == pytest.approx((0.0, 0.1))


def test_gate_defaults_to_one_when_absent(config):
    assert config["image_channel_count"].gate == 1.0


def test_identity_config(config):
    ident = config.identity()
    assert all(r.gate == 0 for r in ident.rows.values())
    assert ident["scaling"].bounds() == (1.0, 1.0)
    assert ident["translation"].bounds() == (0.0, 0.0)


def test_scaled_corruption_halves_gates(config):
    half = config.scaled_corruption(0.5)
    assert half["fov_cropping"].gate == 0.25
    assert half["bias_field_drop"].gate == 0.5
    assert half["rotation"].gate == 1.0


def test_validation_errors(config):
    doc = config.to_dict()
    doc["rows"]["rotation"]["a"] = 40
    with pytest.raises(ConfigError, match="rotation"):
        EngineConfig.from_dict(doc)
    doc = config.to_dict()
    doc["rows"]["gamma_exponent"]["p"] = 1.5
    with pytest.raises(ConfigError, match="gamma_exponent"):
        EngineConfig.from_dict(doc)


def test_hash_changes_with_values(config):
    assert config.hash() == EngineConfig.default().hash()
    assert config.hash() != config.scaled_corruption(0.5).hash()


def test_row_draw_consumes_gate_then_value():
    import numpy as np

    row = Row("gamma_exponent", "-", 0.5, 1.5, 0.0)
    rng = np.random.default_rng(0)
    fired, value = row.draw(rng)
    assert not fired and value == 1.0
    ref = np.random.default_rng(0)
    ref.random()
    ref.uniform(0.5, 1.5)
    assert rng.random() == ref.random()
