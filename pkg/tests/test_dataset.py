import numpy as np
import pytest

from drainsurrogate.dataset import (
    DatasetError,
    Normalizer,
    fit_normalizer,
    read_dataset,
    stack,
    window,
    window_anchors,
    write_dataset,
)
from drainsurrogate.oracle import simulate_runoff
from drainsurrogate.pipeline import build_splits, read_trajectories, simulate_event, write_trajectories
from drainsurrogate.scenarios import RainEvent, build_event_set
from drainsurrogate.tensorio import ChecksumError, read_tensors, write_tensors


@pytest.fixture(scope="module")
def traj(toy):
    rain = RainEvent("ev", np.concatenate([np.linspace(0, 1.4, 40), np.linspace(1.4, 0, 40), np.zeros(40)]))
    return simulate_event(toy, rain, tail=0)


def test_anchor_counting():
    assert len(window_anchors(10, 3, 2, 1)) == 6
    assert len(window_anchors(5, 3, 2, 1)) == 1
    assert list(window_anchors(20, 3, 2, 5)) == [2, 7, 12, 17]
    with pytest.raises(DatasetError):
        window_anchors(4, 3, 2, 1)


def test_window_blocks(traj):
    samples = window(traj, 6, 4, stride=7, event_id="ev")
    s = samples[1]
    t = s.anchor
    assert s.m == 6 and s.n == 4
    np.testing.assert_array_equal(s.past_node[:, :, 0], traj.h_v[t - 5 : t + 1].astype(np.float32))
    np.testing.assert_array_equal(s.past_edge[:, :, 2], traj.a[t - 5 : t + 1].astype(np.float32))
    np.testing.assert_array_equal(s.target_node[:, :, 3], traj.q_w[t + 1 : t + 5].astype(np.float32))
    np.testing.assert_array_equal(s.future_node[:, :, 0], traj.r[t + 1 : t + 5].astype(np.float32))
    for smp in samples:
        assert np.array_equal(smp.flood_labels == 1, smp.target_node[..., 3] > 0)


def test_normalizer_rules():
    nz = Normalizer({"h_v": (0.0, 10.0), "q": (2.0, 2.0)})
    assert nz.scale("h_v", np.array(5.0)) == 0.5
    assert np.all(nz.scale("q", np.array([1.0, 2.0, 3.0])) == 0.0)
    assert nz.scale("h_v", np.array([-1.0, 11.0])).tolist() == [0.0, 1.0]
    x = np.linspace(0, 10, 7)
    np.testing.assert_allclose(nz.unscale("h_v", nz.scale("h_v", x)), x, atol=1e-9)
    with pytest.raises(DatasetError):
        fit_normalizer([])


def test_fit_roundtrip_and_clamp(traj):
    batch = stack(window(traj, 5, 5, stride=3))
    nz = fit_normalizer(batch)
    norm = nz.normalize(batch)
    for name in ("past_node", "target_node", "target_edge"):
        arr = getattr(norm, name)
        assert arr.min() >= 0 and arr.max() <= 1
    back = nz.denormalize(norm)
    np.testing.assert_allclose(back.target_node, batch.target_node, atol=1e-9)
    np.testing.assert_array_equal(norm.past_edge[..., 2], batch.past_edge[..., 2])  # control untouched
    hot = stack(window(traj, 5, 5, stride=3))
    hot.target_node[..., 0] += 100.0
    assert nz.normalize(hot).target_node[..., 0].max() == 1.0


def test_spill_bounds_start_at_zero(traj):
    batch = stack(window(traj, 5, 5, stride=3))
    batch.target_node[..., 3] += 2.0  # every window floods
    nz = fit_normalizer(batch)
    assert nz.bounds["q_w"][0] == 0.0
    assert nz.unscale("q_w", nz.scale("q_w", np.zeros(3))).tolist() == [0.0, 0.0, 0.0]


def test_no_leakage(toy):
    es = build_event_set(2, (3, 2, 2))
    a = build_splits(toy, es, 10, 10, stride=20, substeps=6)
    es.val, es.test = es.test, es.val
    b = build_splits(toy, es, 10, 10, stride=20, substeps=6)
    assert a.normalizer == b.normalizer


@pytest.mark.parametrize("count", [1, 100])
def test_dataset_roundtrip(tmp_path, traj, count):
    samples = (window(traj, 3, 2, stride=1) * 2)[:count]
    nz = fit_normalizer(samples)
    write_dataset(samples, tmp_path / "d", nz, {"network_hash": "x", "stride": 1})
    ds = read_dataset(tmp_path / "d")
    assert len(ds) == count and ds.normalizer == nz
    assert ds.meta["m"] == 3 and ds.meta["n"] == 2 and ds.meta["stride"] == 1
    orig = stack(samples)
    for name in ("past_node", "past_edge", "future_node", "future_edge", "target_node", "target_edge", "flood_labels"):
        assert np.array_equal(getattr(ds.samples, name), getattr(orig, name))
    assert list(ds.samples.anchor) == list(orig.anchor)


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(DatasetError):
        write_dataset([], tmp_path / "d", Normalizer.identity())


def test_tensor_container_checksum(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(4, dtype=np.float32)}
    index = write_tensors(tmp_path / "x.bin", arrays)
    back = read_tensors(tmp_path / "x.bin", index)
    assert all(np.array_equal(back[k], v) for k, v in arrays.items())
    raw = bytearray((tmp_path / "x.bin").read_bytes())
    raw[0] ^= 1
    (tmp_path / "x.bin").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_tensors(tmp_path / "x.bin", index)


def test_trajectory_roundtrip(tmp_path, toy, traj):
    write_trajectories([traj], tmp_path / "t")
    (back,) = read_trajectories(tmp_path / "t", toy)
    assert back.meta["event_id"] == "ev"
    for k in ("h_v", "q_in", "q_out", "q_w", "h_e", "q", "r", "a"):
        assert np.array_equal(getattr(back, k), getattr(traj, k))
