import math

import numpy as np
import pytest
import torch

from drainsurrogate.dataset import SCALED_KINDS, Normalizer
from drainsurrogate.graph import incidence_matrix
from drainsurrogate.model import (
    DivergenceError,
    ModelConfig,
    ModelConfigError,
    ModelInputs,
    Surrogate,
    flood_balance,
    gradcheck,
    load_checkpoint,
    loss_terms,
    persistence_prediction,
    random_inputs,
    save_checkpoint,
)
from drainsurrogate.networks import synthetic_network, tiny_network

D = torch.float64
SMALL = dict(m=4, n=4, hidden_channels=8, spatial_layers=2, temporal_dilations=(1, 2))


SEED_NEAR_KINK = 943554507  # a ReLU input lands within 1e-5 of zero for the GAT variant


def cfg(**kw):
    return ModelConfig(**{**SMALL, **kw})


def random_normalizer(seed):
    rng = np.random.default_rng(seed)
    lows = rng.uniform(-1, 0, 7)
    lows[SCALED_KINDS.index("q_w")] = 0.0
    return Normalizer({k: (float(lo), float(lo + span)) for k, lo, span in zip(SCALED_KINDS, lows, rng.uniform(0.5, 20, 7))})


def jittered(model, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def test_flood_balance_spot_values():
    t = lambda v: torch.tensor(float(v), dtype=D)  # noqa: E731
    assert flood_balance(t(5), t(1), t(4)).item() == 2.0
    assert flood_balance(t(5), t(1), t(7)).item() == 0.0


@pytest.mark.parametrize(
    "kw",
    [dict(m=0), dict(n=0), dict(spatial_kind="cnn"), dict(fusion="both"), dict(flood_method="x"), dict(hidden_channels=7), dict(delta=-1.0), dict(m=40)],
)
def test_config_validation(kw):
    with pytest.raises(ModelConfigError):
        cfg(**kw).validate()


def test_config_json_roundtrip_and_names():
    c = cfg(spatial_kind="fully_connected", fusion="individual")
    assert ModelConfig.from_json(c.to_json()) == c
    assert c.variant == "NN-individual" and cfg().variant == "GNN-fusion"
    assert cfg().receptive_field == 1 + 2 * (1 + 2)


@pytest.mark.parametrize("kind", ["gat", "fully_connected"])
@pytest.mark.parametrize("method", ["balance", "classification"])
def test_constraint_exactness(kind, method):
    g = tiny_network()
    inc = incidence_matrix(g)
    into, out_of = torch.from_numpy((inc < 0).astype(float)), torch.from_numpy((inc > 0).astype(float))
    junction = torch.from_numpy(~g.outfall_mask)
    worst = 0.0
    for draw in range(25):
        norm = random_normalizer(draw)
        model = jittered(Surrogate(cfg(spatial_kind=kind, flood_method=method, seed=draw), g, norm, dtype=D, zero_heads=False), draw)
        inp = random_inputs(g, 4, 4, batch=2, seed=draw)
        with torch.no_grad():
            pred = model(inp)
        un = lambda k, x: torch.from_numpy(norm.unscale(k, x.numpy()))  # noqa: E731
        q = un("q", pred.edge[..., 1])
        q_in, q_out = un("q_in", pred.node[..., 1]), un("q_out", pred.node[..., 2])
        worst = max(worst, (q_in - q @ into.T).abs().max().item(), (q_out - q @ out_of.T).abs().max().item())
        q_w = un("q_w", pred.q_w)
        assert (q_w >= 0).all()
        assert torch.all(q_w[..., ~junction] == 0)
        expect = torch.relu(q_in + un("r", inp.future_node[..., 0]) - q_out) * junction
        assert torch.allclose(un("q_w", pred.q_w_balance), expect, atol=1e-12)
        if method == "classification":
            closed = pred.flood_prob <= 0.5
            assert torch.all(q_w[closed] == 0)
            assert torch.allclose(q_w[~closed], expect[~closed], atol=1e-12)
    assert worst < 1e-12


def test_individual_variant_does_not_tie_node_flows():
    g = tiny_network()
    model = jittered(Surrogate(cfg(fusion="individual"), g, dtype=D, zero_heads=False), 0)
    with torch.no_grad():
        pred = model(random_inputs(g, 4, 4))
    inflow = pred.edge[..., 1] @ torch.from_numpy((incidence_matrix(g) < 0).astype(float)).T
    assert (pred.node[..., 1] - inflow).abs().max() > 1e-3


@pytest.mark.parametrize("kind", ["gat", "fully_connected"])
@pytest.mark.parametrize("method", ["balance", "classification"])
@pytest.mark.parametrize("fusion", ["fusion", "individual"])
def test_zero_heads_equal_persistence(kind, method, fusion):
    g = synthetic_network(7, 8, seed=3)
    norm = random_normalizer(5)
    model = Surrogate(cfg(spatial_kind=kind, flood_method=method, fusion=fusion), g, norm, dtype=D)
    inp = random_inputs(g, 4, 4, batch=3, seed=1)
    with torch.no_grad():
        a, b = model(inp), persistence_prediction(inp, norm, g, method)
    assert torch.allclose(a.edge, b.edge, atol=1e-12)
    assert torch.allclose(a.node[..., 0], b.node[..., 0], atol=1e-12)
    if fusion == "fusion":
        return  # node flows are edge sums, which random inputs do not satisfy
    assert torch.allclose(a.node, b.node, atol=1e-12) and torch.allclose(a.q_w_balance, b.q_w_balance, atol=1e-12)
    assert loss_terms(a, inp).total.item() == pytest.approx(loss_terms(b, inp).total.item(), abs=1e-12)
    if method == "classification":
        assert loss_terms(a, inp).bce_flood.item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("kind", ["gat", "fully_connected"])
def test_future_forcing_is_causal(kind):
    g = tiny_network()
    model = jittered(Surrogate(cfg(spatial_kind=kind, flood_method="classification"), g, dtype=D, zero_heads=False), 4)
    inp = random_inputs(g, 4, 4)
    changed = ModelInputs(**{**inp.__dict__, "future_node": inp.future_node.clone()})
    changed.future_node[:, 2:] += 1.0
    with torch.no_grad():
        a, b = model(inp), model(changed)
    assert torch.equal(a.node[:, :2], b.node[:, :2]) and torch.equal(a.flood_logit[:, :2], b.flood_logit[:, :2])
    assert not torch.equal(a.node[:, 2:], b.node[:, 2:])


def test_loss_hand_value():
    g = tiny_network()
    inp = random_inputs(g, 4, 2, batch=1)
    pred = persistence_prediction(inp, Normalizer.identity(), g, "classification")
    node_hat = torch.cat([pred.node, pred.q_w_balance[..., None]], -1)
    expect = ((node_hat - inp.target_node) ** 2).sum() / 8 + ((pred.edge - inp.target_edge) ** 2).sum() / 6 + math.log(2)
    assert loss_terms(pred, inp).total.item() == pytest.approx(expect.item(), rel=1e-14)


def test_nan_input_raises_named_error():
    g = tiny_network()
    model = Surrogate(cfg(), g, dtype=D)
    inp = random_inputs(g, 4, 4)
    inp.past_node[0, 0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError, match="past_spatial"):
        model(inp)


def test_gradcheck_dense_variants_and_corruption():
    g = tiny_network()
    for fusion in ("fusion", "individual"):
        res = gradcheck(cfg(spatial_kind="fully_connected", fusion=fusion, flood_method="classification"), g)
        assert res.passed, res.line()
    bad = gradcheck(cfg(spatial_kind="fully_connected", flood_method="classification"), g, corrupt="edge_head.weight")
    assert not bad.passed and bad.worst_param == "edge_head.weight"
    with pytest.raises(KeyError):
        gradcheck(cfg(spatial_kind="fully_connected"), g, corrupt="nope")


def test_gradcheck_rechecks_kinks_inside_the_stencil():
    # at this point a ReLU input sits within 1e-5 of zero, so the plain central difference is off by ~10%
    near_kink = ModelConfig(
        m=4, n=4, spatial_kind="gat", fusion="fusion", flood_method="classification", hidden_channels=8,
        attention_heads=2, spatial_layers=2, temporal_dilations=(1, 2), seed=SEED_NEAR_KINK,
    )
    res = gradcheck(near_kink, tiny_network())
    assert res.passed and res.kinks > 0, res.line()
    bad = gradcheck(near_kink, tiny_network(), corrupt="future_node_tcn.biases.1")
    assert not bad.passed


def test_checkpoint_roundtrip(tmp_path):
    g = tiny_network()
    norm = random_normalizer(1)
    model = jittered(Surrogate(cfg(flood_method="classification"), g, norm, zero_heads=False), 2, scale=0.1)
    path = save_checkpoint(model, tmp_path / "ck", {"training_step": 7})
    again, side = load_checkpoint(tmp_path / "ck", g)
    assert side["training_step"] == 7 and again.normalizer == norm
    inp = random_inputs(g, 4, 4, dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(model(inp).node, again(inp).node)
    save_checkpoint(again, tmp_path / "ck2", {"training_step": 7})
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "ck2.bin").read_bytes()
    assert path.read_text().replace("ck.bin", "ck2.bin") == (tmp_path / "ck2.json").read_text()
    with pytest.raises(ValueError, match="different network"):
        load_checkpoint(tmp_path / "ck", synthetic_network(5, 5, seed=0))
