import csv
import json

import numpy as np
import pytest
import torch

from drainsurrogate.dataset import Dataset
from drainsurrogate.model import DivergenceError, ModelConfig, load_checkpoint
from drainsurrogate.trainer import CURVE_FIELDS, AdamMoments, TrainConfig, TrainingCurve, CurveRecord, adam_update, train

SMALL = ModelConfig(m=4, n=4, hidden_channels=8, spatial_layers=1, temporal_dilations=(1, 2), flood_method="classification")


def test_adam_hand_trace():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    grads = [torch.tensor([0.5, -0.1], dtype=torch.float64), torch.tensor([-0.2, 0.3], dtype=torch.float64)]
    mom = AdamMoments.zeros_like(p)
    w, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    for t, g in enumerate(grads, start=1):
        p, mom = adam_update(p, {"w": g}, mom, t, lr=0.01)
        gn = g.numpy()
        m = 0.9 * m + 0.1 * gn
        v = 0.999 * v + 0.001 * gn * gn
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"].numpy(), w, rtol=0, atol=1e-15)
    # first step moves each coordinate by almost exactly lr against the gradient sign
    q, _ = adam_update({"w": torch.zeros(3)}, {"w": torch.tensor([3.0, -1e-3, 7.0])}, AdamMoments.zeros_like({"w": torch.zeros(3)}), 1, lr=0.1)
    assert torch.allclose(q["w"], torch.tensor([-0.1, 0.1, -0.1]), atol=1e-5)


def test_adam_fixed_point_and_purity():
    p = {"w": torch.tensor([0.3, 0.4])}
    mom = AdamMoments.zeros_like(p)
    new, mom2 = adam_update(p, {"w": torch.zeros(2)}, mom, 1)
    assert torch.equal(new["w"], p["w"]) and torch.equal(mom.first["w"], torch.zeros(2))
    with pytest.raises(ValueError):
        adam_update(p, {"w": torch.zeros(3)}, mom, 1)
    with pytest.raises(ValueError):
        adam_update(p, {"w": torch.zeros(2)}, mom, 0)
    with pytest.raises(DivergenceError):
        adam_update(p, {"w": torch.tensor([float("nan"), 0.0])}, mom, 1)


def test_adam_minimizes_quadratic():
    p = {"w": torch.tensor([5.0, -3.0], dtype=torch.float64)}
    mom = AdamMoments.zeros_like(p)
    for t in range(1, 3001):
        p, mom = adam_update(p, {"w": 2 * (p["w"] - torch.tensor([1.0, 2.0], dtype=torch.float64))}, mom, t, lr=0.05)
    assert torch.allclose(p["w"], torch.tensor([1.0, 2.0], dtype=torch.float64), atol=1e-3)


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1.0), dict(learning_rate=float("nan")), dict(beta1=1.0), dict(eps=0.0), dict(validation_interval=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()


def test_curve_moving_average_and_order():
    c = TrainingCurve()
    for e, v in enumerate([4.0, 2.0, 0.0], start=1):
        c.append(CurveRecord(e, 0.0, v, v, 0, 0, 0))
    assert [r.val_loss_ma for r in c.records] == [4.0, 3.0, 2.0]
    with pytest.raises(ValueError):
        c.append(CurveRecord(3, 0.0, 0, 0, 0, 0, 0))


def dataset(splits):
    return Dataset(splits.samples["train"], splits.normalizer, {})


def test_training_lowers_loss_and_writes_artifacts(tiny, tiny_splits, tmp_path):
    res = train(SMALL, TrainConfig(epochs=30, batch_size=4, learning_rate=3e-3), dataset(tiny_splits), tiny, tiny_splits.samples["val"], tmp_path)
    assert res.curve.records[-1].train_loss < 0.7 * res.curve.records[0].train_loss
    assert res.steps == 30 * -(-len(tiny_splits.samples["train"]) // 4)
    with open(tmp_path / "curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CURVE_FIELDS and len(rows) == 31
    model, side = load_checkpoint(tmp_path / "model", tiny)
    assert side["training_step"] == res.steps and len(side["loss_history"]) == 30
    best, side_b = load_checkpoint(tmp_path / "best", tiny)
    assert side_b["best_epoch"] == res.best_epoch
    assert min(r.val_loss for r in res.curve.records) == pytest.approx(res.best_val_loss)


def test_zero_learning_rate_keeps_parameters(tiny, tiny_splits):
    from drainsurrogate.model import Surrogate

    res = train(SMALL, TrainConfig(epochs=2, learning_rate=0.0), dataset(tiny_splits), tiny)
    fresh = Surrogate(SMALL, tiny, tiny_splits.normalizer)
    for (k, a), (_, b) in zip(res.model.named_parameters(), fresh.named_parameters()):
        assert torch.equal(a, b), k


def test_training_is_deterministic(tiny, tiny_splits, tmp_path):
    tc = TrainConfig(epochs=3, batch_size=5, seed=11)
    a = train(SMALL, tc, dataset(tiny_splits), tiny, tiny_splits.samples["val"], tmp_path / "a")
    b = train(SMALL, tc, dataset(tiny_splits), tiny, tiny_splits.samples["val"], tmp_path / "b")
    assert (tmp_path / "a/model.bin").read_bytes() == (tmp_path / "b/model.bin").read_bytes()
    assert (tmp_path / "a/model.json").read_text() == (tmp_path / "b/model.json").read_text()
    assert a.curve.history() == b.curve.history()
    c = train(SMALL, TrainConfig(epochs=3, batch_size=5, seed=12), dataset(tiny_splits), tiny)
    assert c.curve.history() != a.curve.history()


def test_nan_data_raises_and_saves_last_good(tiny, tiny_splits, tmp_path):
    samples = tiny_splits.samples["train"]
    bad = samples.select(range(len(samples)))
    bad.past_node[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(SMALL, TrainConfig(epochs=2, batch_size=len(bad)), Dataset(bad, tiny_splits.normalizer, {}), tiny, out_dir=tmp_path)
    assert "diverged" in json.loads((tmp_path / "last_good.json").read_text())
