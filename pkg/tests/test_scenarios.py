import numpy as np
import pytest

from drainsurrogate.graph import DrainageGraph, EdgeSpec, NodeSpec
from drainsurrogate.scenarios import EventConfig, RainEvent, RunoffParams, build_event_set, double_triangle, runoff, sample_rain_event


def one_node(area):
    nodes = [NodeSpec("a", "junction", 1.0, 1.0, 1.0, area), NodeSpec("o", "outfall", 0.0, 1.0, 1.0, 0.0)]
    return DrainageGraph(nodes, [EdgeSpec("e", "a", "o", 10.0, 1.0, 1.0)])


def test_double_triangle_shape():
    h = double_triangle(120, 1.0, 40, 0.6, 15.0)
    assert h[40] == pytest.approx(1.0)
    assert h[0] == 0.0 and h[-1] == 0.0
    assert np.all(np.diff(h[:41]) >= -1e-12) and np.all(np.diff(h[40:]) <= 1e-12)
    # piecewise linear: second differences vanish away from the kinks
    kinks = {0, 25, 40, 55, 119}
    d2 = np.abs(np.diff(h, 2))
    assert all(d2[t - 1] < 1e-12 for t in range(1, 119) if t not in kinks)


def test_zero_peak_and_determinism():
    cfg = EventConfig(min_peak=0.0, max_peak=0.0)
    assert np.all(sample_rain_event(3, cfg).intensity == 0)
    a, b = sample_rain_event(5), sample_rain_event(5)
    assert np.array_equal(a.intensity, b.intensity)
    assert 120 <= a.duration <= 360 and np.all(a.intensity >= 0)


def test_invalid_config():
    with pytest.raises(ValueError):
        sample_rain_event(0, EventConfig(min_duration=10, max_duration=5))
    with pytest.raises(ValueError):
        runoff(one_node(1.0), np.ones(3), RunoffParams(reservoir_k=0.0))


def test_zero_rain_zero_runoff():
    assert np.all(runoff(one_node(500.0), np.zeros(50)) == 0)


def test_impulse_decays_geometrically():
    i = np.zeros(30)
    i[0] = 1.0
    r = runoff(one_node(1000.0), i, RunoffParams(coeff=0.001, reservoir_k=10.0))[:, 0]
    ratios = r[2:] / r[1:-1]
    np.testing.assert_allclose(ratios, np.exp(-0.1), rtol=1e-12)


def test_volume_bound_and_linearity():
    g = one_node(1000.0)
    rain = sample_rain_event(11).intensity
    r = runoff(g, rain, tail=200)[:, 0]
    bound = 0.001 * 1000.0 * rain.sum()
    assert r.sum() <= bound + 1e-12
    assert r.sum() == pytest.approx(bound, rel=1e-6)  # long tail drains the reservoir
    params = RunoffParams(base_flow=0.2)
    r1 = runoff(g, rain, params)[:, 0]
    r2 = runoff(g, 2 * rain, params)[:, 0]
    np.testing.assert_allclose(r2 - 0.2, 2 * (r1 - 0.2), atol=1e-12)


def test_event_set():
    es = build_event_set(4, (20, 5, 3))
    ids = [e.id for evs in es.splits().values() for e in evs]
    assert len(ids) == len(set(ids)) == 28
    again = build_event_set(4, (20, 5, 3))
    assert all(np.array_equal(a.intensity, b.intensity) for a, b in zip(es.train, again.train))
    assert es.manifest()["splits"]["test"] == [e.id for e in es.test]
    with pytest.raises(ValueError):
        build_event_set(0, (0, 1, 1))


def test_event_set_write(tmp_path):
    es = build_event_set(1, (2, 1, 1))
    es.write(tmp_path)
    assert (tmp_path / "events.json").is_file()
    lines = (tmp_path / f"{es.train[0].id}.csv").read_text().splitlines()
    assert lines[0] == "t,intensity" and len(lines) == es.train[0].duration + 1


def test_large_split_counts():
    es = build_event_set(0, (118, 27, 3), EventConfig(min_duration=30, max_duration=40))
    assert (len(es.train), len(es.val), len(es.test)) == (118, 27, 3)
