import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from oracles import flood_fill_components, random_blobs
from vesseldiff.data import Volume, generate_phantom, prepare_case
from vesseldiff.diffusion import make_linear_schedule, mask_to_signed
from vesseldiff.graph import empty_graph
from vesseldiff.inference import (
    SegmentationResult,
    combine,
    ensemble,
    remove_small_components,
    rescale,
    run_chain,
    sample,
    segment_case,
    vote,
)
from vesseldiff.model import ModelConfig, VesselDiffusionModel


def tiny_model(tier="ABC"):
    torch.manual_seed(0)
    cfg = ModelConfig(tier=tier, image_size=16, base_width=4, cond_width=4, temb_dim=8,
                      node_grid=(3, 2, 2), node_dim=4, attn_dim=4)
    return VesselDiffusionModel(cfg)


def test_oracle_chain_recovers_mask():
    rng = np.random.default_rng(0)
    mask = rng.random((16, 16)) < 0.3
    x0 = mask_to_signed(torch.from_numpy(mask).double())[None, None]
    sched = make_linear_schedule(1000)
    abar = torch.as_tensor(sched.alpha_bar)

    def oracle(x_t, t):
        a = abar[t - 1].reshape(-1, 1, 1, 1)
        return (x_t - a.sqrt() * x0) / (1 - a).sqrt()

    x = run_chain(oracle, (1, 1, 16, 16), sched, torch.Generator().manual_seed(3), torch.float64)
    assert np.array_equal(x[0, 0].numpy() > 0, mask)


def test_sampler_seeds():
    model = tiny_model()
    sched = make_linear_schedule(20)
    cond = np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)
    a = sample(model, cond, sched, seed=1)
    b = sample(model, cond, sched, seed=1)
    c = sample(model, cond, sched, seed=2)
    assert np.array_equal(a.prob, b.prob) and np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.prob, c.prob)
    assert a.mask.shape == (2, 16, 16) and a.steps == 20
    single = sample(model, cond[0], sched, seed=1)
    assert single.mask.shape == (16, 16)
    with pytest.raises(ValueError):
        sample(model, cond, sched, seed=1, steps=1000)


def test_one_seed_ensemble_equals_sample():
    model = tiny_model("A")
    sched = make_linear_schedule(10)
    cond = np.random.default_rng(1).random((3, 16, 16)).astype(np.float32)
    one = ensemble(model, cond, sched, [4])
    ref = sample(model, cond, sched, 4)
    assert np.array_equal(one.mask, ref.mask) and np.array_equal(one.prob, ref.prob)
    five = ensemble(model, cond, sched, [0, 1, 2, 3, 4])
    assert five.ensemble_size == 5 and five.seeds == (0, 1, 2, 3, 4)
    with pytest.raises(ValueError):
        ensemble(model, cond, sched, [])


def test_vote_rules():
    m = np.array([True, False, True, False])
    assert np.array_equal(vote([m] * 5), m)
    votes = [np.array([1, 1, 0, 0]), np.array([1, 1, 0, 1]), np.array([1, 0, 1, 1]),
             np.array([0, 0, 1, 1]), np.array([0, 0, 0, 0])]
    np.testing.assert_array_equal(vote(votes), [True, False, False, True])
    # ties go to foreground
    np.testing.assert_array_equal(vote([np.array([1, 0]), np.array([0, 0])]), [True, False])


def test_average_mode_thresholds_mean():
    r1 = SegmentationResult(np.array([0.5, -0.2]), np.array([True, False]), (0,), 10)
    r2 = SegmentationResult(np.array([-0.1, -0.3]), np.array([False, False]), (1,), 10)
    out = combine([r1, r2], "average")
    np.testing.assert_array_equal(out.mask, [True, False])
    np.testing.assert_allclose(out.prob, [0.2, -0.25])
    with pytest.raises(ValueError):
        combine([r1], "median")


def test_rescale_contracts():
    m = np.zeros((4, 4), bool)
    m[1, 2] = True
    assert np.array_equal(rescale(m, (4, 4)), m)
    up = rescale(m, (8, 8))
    assert up.sum() == 4 and up[2:4, 4:6].all()
    with pytest.raises(ValueError):
        rescale(m, (0, 8))
    with pytest.raises(ValueError):
        rescale(m, (8, 8), kind="cubic")


def test_probability_round_trip_within_five_percent():
    p = generate_phantom(1, size=(16, 128, 128), n_branches=5)
    prob = ndimage.gaussian_filter(p.mask.data[8].astype(np.float64), 3.0)
    back = rescale(rescale(prob, (64, 64), "prob"), (128, 128), "prob")
    assert np.abs(back - prob).sum() / np.abs(prob).sum() <= 0.05


def test_remove_small_components_examples():
    single = random_blobs(np.random.default_rng(0), (12, 12, 12), 1, 3.0)
    assert np.array_equal(remove_small_components(single), single)
    m = np.zeros((30, 30, 30), bool)
    m[:10, :10, :10] = True  # 1000 voxels
    m[20:21, 20:25, 20] = True  # 5 voxels
    out = remove_small_components(m, 0.01)
    assert out.sum() == 1000 and not out[20, 20:25, 20].any()
    empty = np.zeros((4, 4, 4), bool)
    assert not remove_small_components(empty).any()


def test_remove_small_components_matches_flood_fill():
    rng = np.random.default_rng(5)
    for frac in (0.01, 0.2, 0.5):
        for _ in range(5):
            mask = random_blobs(rng, (16, 20, 20), 10, 3.0) | (rng.random((16, 20, 20)) < 0.01)
            comps = flood_fill_components(mask)
            largest = max(len(c) for c in comps)
            expected = np.zeros_like(mask)
            for c in comps:
                if len(c) >= frac * largest:
                    for v in c:
                        expected[v] = True
            assert np.array_equal(remove_small_components(mask, frac), expected)


@given(arrays(bool, (6, 6, 6)))
@settings(max_examples=40, deadline=None)
def test_remove_small_components_idempotent_and_shrinking(mask):
    once = remove_small_components(mask, 0.3)
    assert np.array_equal(remove_small_components(once, 0.3), once)
    assert once.sum() <= mask.sum()
    assert not (once & ~mask).any()


def test_segment_case_volume():
    model = tiny_model()
    ph = generate_phantom(0, size=(4, 16, 16), n_branches=2, radius_range=(1.0, 2.0))
    case = prepare_case(ph.ct, ph.liver, ph.mask, size=16, annotated=[1, 2])
    sched = make_linear_schedule(5)
    vol, res = segment_case(model, case, sched, seeds=(0,), postprocess=False)
    assert vol.shape == (4, 16, 16) and not vol[[0, 3]].any()
    assert np.array_equal(vol[[1, 2]], res.mask)
    vol_e, _ = segment_case(model, case, sched, seeds=(0,), postprocess=False,
                            graph=empty_graph((3, 2, 2), (3, 16, 16)))
    assert vol_e.shape == vol.shape
