import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesseldiff.data import (
    Volume,
    generate_phantom,
    load_volume,
    normalize_hu,
    prepare_case,
    preprocess,
    save_volume,
    split_dataset,
)
from vesseldiff.metrics import cl_dice, connectivity, count_components


def test_hu_clip_and_scale():
    out = normalize_hu(np.array([1000.0, -100.0, 200.0, 400.0, 0.0]))
    np.testing.assert_array_equal(out, np.float32([1.0, 0.0, 0.5, 1.0, 0.0]))


def _square_case(letterbox):
    shape = (5, 40, 40)
    ct = np.zeros(shape, np.float32)
    liver = np.zeros(shape, np.uint8)
    liver[:, 4:36, 12:28] = 1  # 32 x 16 crop
    mask = np.zeros(shape, bool)
    mask[:, 12:20, 16:24] = True  # 8 x 8 square inside the crop
    ct[mask] = 400
    case = prepare_case(Volume(ct), Volume(liver), Volume(mask), size=64, letterbox=letterbox)
    return case, mask


def test_crop_resize_stretches_without_letterbox():
    case, mask = _square_case(False)
    rows = np.flatnonzero(case.mask[2].any(axis=1))
    cols = np.flatnonzero(case.mask[2].any(axis=0))
    assert (len(rows), len(cols)) == (16, 32)  # 2x along 32 rows, 4x along 16 cols
    assert case.spacing == (1.0, 0.5, 0.25)
    np.testing.assert_array_equal(case.restore(case.mask), mask)
    assert case.ct.max() == 1.0


def test_crop_resize_keeps_aspect_with_letterbox():
    case, mask = _square_case(True)
    rows = np.flatnonzero(case.mask[2].any(axis=1))
    cols = np.flatnonzero(case.mask[2].any(axis=0))
    assert len(rows) == len(cols) == 16
    np.testing.assert_array_equal(case.restore(case.mask), mask)


def test_preprocess_errors_and_blocks():
    ct = Volume(np.zeros((4, 8, 8), np.float32))
    with pytest.raises(ValueError):
        list(preprocess(ct, Volume(np.zeros((4, 8, 8), np.uint8)), size=8))
    thin = np.zeros((4, 8, 8), np.uint8)
    thin[1:3] = 1
    with pytest.raises(ValueError):
        list(preprocess(ct, Volume(thin), size=8))
    blocks = list(preprocess(ct, Volume(np.ones((4, 8, 8), np.uint8)), size=8, annotated=[0, 3]))
    assert [b.center_index for b in blocks] == [0, 3]
    assert all(b.slices.shape == (3, 8, 8) for b in blocks)


def test_edge_blocks_repeat_boundary_slice():
    ct = np.arange(4, dtype=np.float32)[:, None, None] * 100 * np.ones((4, 8, 8), np.float32)
    case = prepare_case(Volume(ct), Volume(np.ones((4, 8, 8), np.uint8)), size=8)
    np.testing.assert_allclose(case.block(0).slices[:, 0, 0], [0, 0, 0.25])
    np.testing.assert_allclose(case.block(3).slices[:, 0, 0], [0.5, 0.75, 0.75])


def test_nifti_roundtrip(tmp_path):
    data = np.random.default_rng(0).normal(size=(4, 6, 5)).astype(np.float32)
    vol = Volume(data, (2.5, 0.7, 0.8))
    save_volume(vol, tmp_path / "v.nii.gz")
    back = load_volume(tmp_path / "v.nii.gz")
    np.testing.assert_array_equal(back.data, data)
    np.testing.assert_allclose(back.spacing, vol.spacing, rtol=1e-6)


def test_single_branch_is_one_straight_tube():
    p = generate_phantom(3, n_branches=1)
    assert len(p.tree) == 1
    assert count_components(p.mask.data, min_volume=0) == 1


def test_phantom_deterministic_and_self_consistent():
    a, b = generate_phantom(5), generate_phantom(5)
    assert np.array_equal(a.ct.data, b.ct.data) and np.array_equal(a.mask.data, b.mask.data)
    m = a.mask.data
    assert connectivity(m, m)[0] == 1.0
    assert cl_dice(m, m) == 1.0
    assert not np.array_equal(generate_phantom(6).mask.data, m)


@pytest.mark.parametrize("seed", range(5))
def test_phantom_tree_contract(seed):
    p = generate_phantom(seed, noise_sigma=0.0)
    for k, br in enumerate(p.tree):
        if br.parent >= 0:
            assert br.parent < k  # parents precede children, so no cycles
            assert br.radius < p.tree[br.parent].radius
            np.testing.assert_allclose(br.start, p.tree[br.parent].end)
    # mask is exactly the rendered high-intensity region
    ct = p.ct.data
    assert np.all(ct[p.mask.data] == 250)
    assert ct[~p.mask.data].max() < 200
    assert count_components(p.mask.data, min_volume=0) == 1


def test_phantom_rejects_degenerate_radii():
    with pytest.raises(ValueError):
        generate_phantom(0, radius_range=(2.0, 2.0))


def test_split_leave_one_out_and_errors():
    folds = split_dataset(list("abcde"), 5)
    assert sorted(t[0] for _, t in folds) == list("abcde")
    assert all(len(t) == 1 and len(tr) == 4 for tr, t in folds)
    with pytest.raises(ValueError):
        split_dataset(list("abc"), 0)
    with pytest.raises(ValueError):
        split_dataset(list("abc"), 4)


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_split_disjoint_cover_and_seeded(n, k, seed):
    if k > n:
        return
    cases = list(range(n))
    folds = split_dataset(cases, k, seed)
    tests = [x for _, t in folds for x in t]
    assert sorted(tests) == cases
    for train, test in folds:
        assert not set(train) & set(test)
        assert sorted(train + test) == cases
    assert folds == split_dataset(cases, k, seed)
