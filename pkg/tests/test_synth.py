import numpy as np
import pytest
from scipy import stats

from groupseg.core import LabelMap, Volume, default_protocol, rescale_unit
from groupseg.noise import make_rng
from groupseg.synth import (
    ChannelPlan,
    apply_lookup,
    plan_channels,
    remap_from_params,
    render_labels,
    sample_label_means,
    synth_from_labels,
)
from oracles import piecewise_linear


def test_no_real_scans_means_no_real_channels(config):
    rng = make_rng(0)
    for _ in range(500):
        plan, _ = plan_channels(rng, 0, config)
        assert plan.n_real == 0 and plan.n_synth == plan.n


def test_single_channel_gate_on_two_available(config):
    cfg = config.replace_rows(image_channel_count={"a": 1, "b": 1}, real_channel_count={"p": 1.0})
    for seed in range(50):
        plan, trace = plan_channels(make_rng(seed), 2, cfg)
        assert (plan.n, plan.n_real, plan.n_synth) == (1, 1, 0)
        assert trace["real_gate"]


def test_plan_invariants():
    with pytest.raises(ValueError):
        ChannelPlan(2, 3, (0, 1, 2))


def test_plan_distribution_matches_product_law(config):
    """n ~ U{1..4}; gate p=0.5; when on, n_real ~ U{1..min(2, avail, n)}."""
    avail = 2
    draws = 100_000
    rng = make_rng(77)
    counts = {}
    for _ in range(draws):
        plan, _ = plan_channels(rng, avail, config)
        counts[(plan.n, plan.n_real)] = counts.get((plan.n, plan.n_real), 0) + 1
    law = {}
    for n in range(1, 5):
        law[(n, 0)] = law.get((n, 0), 0) + 0.25 * 0.5
        cap = min(2, avail, n)
        for r in range(1, cap + 1):
            law[(n, r)] = law.get((n, r), 0) + 0.25 * 0.5 / cap
    assert set(counts) == set(law)
    keys = sorted(law)
    observed = [counts[k] for k in keys]
    expected = [law[k] * draws for k in keys]
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_sources_are_distinct(config):
    rng = make_rng(3)
    for _ in range(200):
        plan, _ = plan_channels(rng, 2, config)
        assert len(set(plan.sources)) == plan.n_real


# -- remapping --------------------------------------------------------------

def ramp_volume():
    return Volume(make_rng(1).uniform(3, 9, size=(3, 3, 3)))


def test_identity_ramp_lookup():
    vol = ramp_volume()
    out = remap_from_params(vol, {"fired": True, "controls": [0.0, 1.0]})
    np.testing.assert_allclose(out.data, rescale_unit(vol.data), atol=1e-6)


def test_inverted_ramp_lookup():
    vol = ramp_volume()
    out = remap_from_params(vol, {"fired": True, "controls": [1.0, 0.0]})
    np.testing.assert_allclose(out.data, 1 - rescale_unit(vol.data), atol=1e-6)


def test_four_control_lookup_matches_oracle():
    vol = ramp_volume()
    controls = [0.1, 0.8, 0.3, 0.95]
    out = remap_from_params(vol, {"fired": True, "controls": controls})
    lo, hi = vol.data.min(), vol.data.max()
    for idx in np.ndindex(vol.shape):
        x = (float(vol.data[idx]) - lo) / (hi - lo) * 255.0
        assert out.data[idx] == pytest.approx(piecewise_linear(controls, x), abs=1e-5)


def test_constant_input_maps_to_zeros():
    vol = Volume(np.full((2, 2, 2), 4.0))
    assert not np.any(remap_from_params(vol, {"fired": False}).data)
    out = apply_lookup(vol, np.linspace(0, 1, 256))
    assert not np.any(out.data)


# -- rendering --------------------------------------------------------------

def test_single_label_renders_constant(config):
    lm = LabelMap(np.full((3, 3, 3), 2, np.uint16), np.eye(4), default_protocol())
    out = synth_from_labels(lm, make_rng(0), config)
    assert np.unique(out.data).size == 1


def test_two_labels_with_injected_means():
    data = np.zeros((4, 4, 4), np.uint16)
    data[:1] = 2
    lm = LabelMap(data)
    out = render_labels(lm, {0: 0.2, 2: 0.9})
    values, counts = np.unique(out.data, return_counts=True)
    np.testing.assert_allclose(values, [0.2, 0.9])
    assert counts.tolist() == [48, 16]


def test_partner_means_are_independent(config):
    data = np.zeros((2, 2, 2), np.uint16)
    data[0], data[1] = 17, 53
    lm = LabelMap(data)
    rng = make_rng(12)
    pairs = np.array([[m[17], m[53]] for m in (sample_label_means(rng, lm, config) for _ in range(1000))])
    r = np.corrcoef(pairs.T)[0, 1]
    assert abs(r) < 0.05
    assert pairs.min() >= 0 and pairs.max() <= 1
