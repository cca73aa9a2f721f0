import dataclasses

import numpy as np
import pytest

from mesres.errors import ConfigError, ContractViolation
from mesres.events import (
    PRESETS,
    Event,
    EventParams,
    StormModel,
    component_failure_probability,
    event_uniforms,
    failure_probabilities,
    generate_event,
    step_vitality,
)
from mesres.model.degrade import BROKEN, FUNCTIONAL, REPAIRED


def grid(el=0.0, heat=0.0, gas=0.0, cp=0.0):
    return {"el": el, "heat": heat, "gas": gas, "cp": cp}


def test_presets():
    assert PRESETS["high-electricity"] == (3, 0, 0, 0)
    assert PRESETS["high-heating"] == (0, 3, 0, 0)
    assert PRESETS["high-gas"] == (0, 0, 3, 0)
    assert PRESETS["high-cp"] == (0, 0, 0, 3)
    assert PRESETS["low-overall"] == (1, 1, 1, 1)
    assert PRESETS["medium-overall"] == (2, 2, 2, 2)
    p = EventParams.preset("high-heating")
    assert p.p_grid == grid(heat=3.0)


def test_probability_is_a_product(toy_units):
    params = EventParams(p_grid=grid(el=2.0, gas=1.0), p_base=0.01, rho={"line": 1.5})
    assert component_failure_probability(toy_units, "el.line.a", 0, params) == pytest.approx(0.03)
    assert component_failure_probability(toy_units, "el.gen.g", 0, params) == pytest.approx(0.02)
    assert component_failure_probability(toy_units, "gas.pipe.a", 0, params) == pytest.approx(0.01)
    assert component_failure_probability(toy_units, "heat.pipe.a", 0, params) == 0.0


def test_fragility_scales_probability(toy_units):
    el = toy_units.electricity
    line = dataclasses.replace(el.lines[0], fragility=1.4)
    net = toy_units.replace(electricity=dataclasses.replace(el, lines=(line,) + el.lines[1:]))
    params = EventParams(p_grid=grid(el=1.0), p_base=0.01)
    assert component_failure_probability(net, "el.line.a", 0, params) == pytest.approx(0.014)


def test_probability_clamped(toy_units):
    p = failure_probabilities(toy_units, 0, EventParams(p_grid=grid(3, 3, 3, 3), p_base=0.5))
    assert p.max() == 1.0
    assert p.min() >= 0.0


def test_storm_raises_probability_near_centre(toy_units):
    storm = StormModel(start=(0.0, 0.0), velocity=(0.0, 0.0), radius=0.6, peak=5.0, background=1.0)
    params = EventParams(p_grid=grid(el=1.0), p_base=0.01, storm=storm)
    # line a runs from (0,0) to (1,0) with midpoint (0.5,0); line b midpoint (1,0.5)
    assert component_failure_probability(toy_units, "el.line.a", 0, params) == pytest.approx(0.05)
    assert component_failure_probability(toy_units, "el.line.b", 0, params) == pytest.approx(0.01)


def test_transitions():
    prev = np.array([FUNCTIONAL, FUNCTIONAL, BROKEN, BROKEN, BROKEN, REPAIRED, REPAIRED])
    p_fail = np.array([0.5, 0.5, 0.1, 0.1, 0.1, 0.5, 0.5])
    r = np.array([0.4, 0.6, 0.2, 0.9, 0.05, 0.6, 0.3])
    out = step_vitality(prev, p_fail, 0.25, r)
    # fail, stay, repaired, stay broken, fresh failure wins, functional again, fail again
    np.testing.assert_array_equal(out, [BROKEN, FUNCTIONAL, REPAIRED, BROKEN, BROKEN, FUNCTIONAL, BROKEN])
    with pytest.raises(ContractViolation):
        step_vitality(prev, p_fail[:-1], 0.25, r)


def test_empirical_failure_rate():
    r = np.random.default_rng(5).random(100_000)
    out = step_vitality(np.full(r.size, FUNCTIONAL), np.full(r.size, 0.3), 0.25, r)
    assert abs((out == BROKEN).mean() - 0.3) < 0.01


def test_zero_probability_never_fails(toy_units):
    ev = generate_event(toy_units, EventParams(p_grid=grid()), seed=(0, 1))
    assert (ev.states == FUNCTIONAL).all()
    assert ev.broken_steps() == {}


def test_events_are_deterministic(toy_units):
    params = EventParams(p_grid=grid(3, 3, 3, 3), p_base=0.05)
    a = generate_event(toy_units, params, seed=(4, 2))
    b = generate_event(toy_units, params, seed=(4, 2))
    c = generate_event(toy_units, params, seed=(4, 3))
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)
    assert a.states.shape == (24, len(toy_units.component_ids))


def test_streams_are_per_component(toy, toy_units):
    # a component sees the same draws whatever other components exist
    r1 = event_uniforms(toy.component_ids, 24, (0, 5))
    r2 = event_uniforms(toy_units.component_ids, 24, (0, 5))
    for j, cid in enumerate(toy.component_ids):
        np.testing.assert_array_equal(r1[:, j], r2[:, toy_units.component_ids.index(cid)])


def test_record_roundtrip(toy_units):
    ev = generate_event(toy_units, EventParams(p_grid=grid(3, 3, 3, 3), p_base=0.05), seed=(1, 1))
    again = Event.from_record(ev.to_record(), toy_units.component_ids)
    np.testing.assert_array_equal(again.states, ev.states)
    assert again.failed_sets() == ev.failed_sets()


def test_low_vs_medium_doubles_failure_rate(mes1):
    low = EventParams.preset("low-overall", p_base=0.002)
    med = EventParams.preset("medium-overall", p_base=0.002)
    n_low = sum((generate_event(mes1, low, (0, i)).states == BROKEN).any(axis=0).sum() for i in range(150))
    n_med = sum((generate_event(mes1, med, (0, i)).states == BROKEN).any(axis=0).sum() for i in range(150))
    assert 1.6 < n_med / n_low < 2.4


def test_params_validation():
    with pytest.raises(ConfigError):
        EventParams.preset("hurricane")
    with pytest.raises(ConfigError):
        EventParams(p_grid=grid(el=-1.0))
    with pytest.raises(ConfigError):
        EventParams(p_repair=1.5)
    with pytest.raises(ConfigError):
        EventParams(n_steps=0)
    with pytest.raises(ConfigError):
        EventParams(rho={"transformer": 1.0})
