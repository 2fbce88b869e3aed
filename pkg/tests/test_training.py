import math

import numpy as np
import pytest
import torch

from vesseldiff.data import generate_phantom, prepare_case
from vesseldiff.diffusion import denoising_loss, forward_sample, make_linear_schedule
from vesseldiff.graph import build_graph
from vesseldiff.graph_attention import graph_loss, make_graph_batch
from vesseldiff.model import ModelConfig, ModelOutput, VesselDiffusionModel
from vesseldiff.training import (
    BlockDataset,
    DivergenceMonitor,
    TrainConfig,
    TrainingDiverged,
    block_dataset,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    train,
)


def tiny_model_cfg(tier="ABC", size=16):
    return ModelConfig(tier=tier, image_size=size, base_width=4, cond_width=4, temb_dim=8,
                       node_grid=(3, 2, 2), node_dim=4, attn_dim=4)


def tiny_data(size=16, n=6, seed=0):
    rng = np.random.default_rng(seed)
    masks = np.zeros((n, 3, size, size), bool)
    for k in range(n):
        masks[k, :, rng.integers(2, size - 4):, rng.integers(0, 4)] = True
        masks[k, :, 5, :] |= rng.random() < 0.5
    cond = (masks * 0.6 + rng.normal(0, 0.05, masks.shape)).astype(np.float32)
    graphs = [build_graph(m, (3, 2, 2)) for m in masks]
    return BlockDataset(cond, masks[:, 1], graphs, [("c", k) for k in range(n)])


def batch_inputs(data, model, idx, sched, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.from_numpy(data.target[idx]).to(dtype)[:, None] * 2 - 1
    cond = torch.from_numpy(data.cond[idx]).to(dtype)
    t = torch.randint(1, sched.T + 1, (len(idx),), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=dtype)
    graphs = make_graph_batch([data.graphs[i] for i in idx], model.cfg.bottleneck_hw)
    return x0, cond, t, eps, graphs


def test_tier_a_total_is_denoising_loss():
    data = tiny_data()
    model = VesselDiffusionModel(tiny_model_cfg("A"))
    sched = make_linear_schedule(100)
    x0, cond, t, eps, _ = batch_inputs(data, model, [0, 1, 2], sched)
    terms = total_loss(model, x0, cond, t, eps, sched)
    assert terms.total is terms.den and float(terms.graph) == 0.0


def test_perfect_predictors_give_zero_loss():
    data = tiny_data()
    sched = make_linear_schedule(100)
    cfg = tiny_model_cfg()
    x0, cond, t, eps, graphs = batch_inputs(data, VesselDiffusionModel(cfg), [0, 1], sched)

    class Oracle:
        def __call__(self, x_t, c, tt, g):
            return ModelOutput(eps.clone(), node_probs=g.labels.clone())

    terms = total_loss(Oracle(), x0, cond, t, eps, sched, graphs)
    assert float(terms.total) <= 1e-6


def test_loss_additivity_matches_separate_terms():
    data = tiny_data()
    model = VesselDiffusionModel(tiny_model_cfg()).double()
    sched = make_linear_schedule(100)
    x0, cond, t, eps, graphs = batch_inputs(data, model, [0, 3, 4], sched, torch.float64)
    terms = total_loss(model, x0, cond, t, eps, sched, graphs)
    out = model(forward_sample(x0, t, eps, sched).x_t, cond, t, graphs)
    den = float(((out.eps - eps) ** 2).mean().detach())
    probs = out.node_probs.detach().numpy().clip(1e-7, 1 - 1e-7)
    labels = graphs.labels.numpy()
    bce = -(labels * np.log(probs) + (1 - labels) * np.log(1 - probs))
    assert abs(float(terms.total.detach()) - (den + bce.mean(axis=1).sum())) <= 1e-10


def test_total_loss_gradient_matches_finite_differences():
    torch.manual_seed(2)
    data = tiny_data(size=8)
    model = VesselDiffusionModel(tiny_model_cfg(size=8)).double()
    sched = make_linear_schedule(50)
    x0, cond, t, eps, graphs = batch_inputs(data, model, [0, 1], sched, torch.float64)

    def loss():
        return total_loss(model, x0, cond, t, eps, sched, graphs).total

    loss().backward()
    probes = [
        (model.denoiser.out.weight, (0, 2, 0, 0)),
        (model.graph.head.conv.weight, (0, 3)),
        (model.graph.lfi[1].proj.weight, (2, 1)),
        (model.encoder.merge["0"].weight, (1, 0, 0, 0)),
    ]
    h = 1e-6
    for param, idx in probes:
        analytic = float(param.grad[idx])
        with torch.no_grad():
            param[idx] += h
            up = float(loss())
            param[idx] -= 2 * h
            down = float(loss())
            param[idx] += h
        fd = (up - down) / (2 * h)
        assert abs(fd - analytic) <= 1e-4 * max(abs(analytic), 1e-7), (idx, fd, analytic)


def _quick_cfg(tier="ABC", **kw):
    base = dict(iterations=6, batch_size=3, T=50, model=tiny_model_cfg(tier))
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_reproducible(tmp_path):
    data = tiny_data()
    a = train(_quick_cfg(), data, tmp_path / "a")
    b = train(_quick_cfg(), data, tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a" / "checkpoint.pt").read_bytes() == (tmp_path / "b" / "checkpoint.pt").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_text() == (tmp_path / "b" / "loss.csv").read_text()
    c = train(_quick_cfg(seed=1), data)
    assert c.losses != a.losses


def test_checkpoint_roundtrip_and_schedule_check(tmp_path):
    model = VesselDiffusionModel(tiny_model_cfg())
    sched = make_linear_schedule(40, 1e-4, 0.03)
    save_checkpoint(tmp_path / "m.pt", model, sched)
    back, s2, archive = load_checkpoint(tmp_path / "m.pt")
    assert s2.as_dict() == sched.as_dict()
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.pt", make_linear_schedule(1000))


def test_nan_batch_is_skipped(caplog):
    data = tiny_data(n=3)
    data.cond[1] = np.nan
    res = train(_quick_cfg("A", batch_size=1, iterations=6), data)
    assert res.skipped and len(res.skipped) >= 1
    assert all(np.isfinite(p.detach().numpy()).all() for p in res.model.parameters())
    assert "skipped" in caplog.text


def test_divergence_monitor():
    m = DivergenceMonitor(10.0, 3)
    assert not m.update(1.0)
    assert not m.update(11.0) and not m.update(12.0)
    assert not m.update(5.0)  # streak broken
    assert not m.update(20.0) and not m.update(20.0)
    assert m.update(20.0)


def test_divergence_halts_training(monkeypatch):
    import vesseldiff.training as tr

    calls = {"n": 0}
    real = tr.total_loss

    def inflated(*args, **kw):
        terms = real(*args, **kw)
        calls["n"] += 1
        scale = 1.0 if calls["n"] == 1 else 100.0
        return tr.LossTerms(terms.total * scale, terms.den, terms.graph)

    monkeypatch.setattr(tr, "total_loss", inflated)
    with pytest.raises(TrainingDiverged):
        train(_quick_cfg("A", iterations=20, divergence_patience=5), tiny_data())


def test_optional_schedule_and_weight_average():
    res = train(_quick_cfg("AB", lr_schedule="cosine", ema_decay=0.9), tiny_data())
    assert res.losses[-1]["lr"] < res.losses[0]["lr"]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=-1)
    with pytest.raises(ValueError):
        ModelConfig(tier="B")
    with pytest.raises(ValueError):
        train(_quick_cfg("ABC"), BlockDataset(tiny_data().cond, tiny_data().target))


def test_overfits_single_phantom_slice():
    p = generate_phantom(0)
    case = prepare_case(p.ct, p.liver, p.mask, size=64)
    z = int(np.argmax(case.mask.sum(axis=(1, 2))))
    case.annotated = [z]
    data = block_dataset([case])
    cfg = TrainConfig(iterations=2000, batch_size=4, T=1000, log_every=1,
                      model=ModelConfig(tier="A", image_size=64, base_width=8, temb_dim=32, node_grid=(3, 8, 8)))
    data = BlockDataset(np.repeat(data.cond, 4, 0), np.repeat(data.target, 4, 0))
    res = train(cfg, data)
    den = np.array([r["loss_den"] for r in res.losses])
    early = den[:10].mean()
    late = den[-100:].mean()
    assert early / late >= 10, (early, late)
