import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpma.masking import (CLS_ID, MASK_ID, PAD_ID, MaskingError, TokenizedReport, apply_image_mask,
                          apply_report_mask, make_mask_plan, mask_count, merge_patches, patchify,
                          patchify_batch, unmask_report, unpatchify)


def report(n_valid, length):
    ids = np.full(length, PAD_ID)
    ids[0] = CLS_ID
    ids[1:n_valid] = np.arange(4, 3 + n_valid)
    valid = np.arange(length) < n_valid
    return TokenizedReport(ids=ids, valid=valid)


@pytest.mark.parametrize("total", range(2, 65))
def test_partition_and_exact_count(total):
    for seed in range(10):
        for ratio in (0.1, 0.5, 0.75, 0.99):
            plan = make_mask_plan(total, ratio, seed)
            assert plan.n_masked == min(max(round(ratio * total), 1), total - 1)
            joined = np.concatenate([plan.masked, plan.visible])
            assert np.array_equal(np.sort(joined), np.arange(total))
            assert np.all(np.diff(plan.masked) > 0) and np.all(np.diff(plan.visible) > 0)


def test_reference_counts():
    plan = make_mask_plan(196, 0.75, 0)
    assert (plan.n_masked, plan.n_visible) == (147, 49)
    assert make_mask_plan(20, 0.5, 0).n_masked == 10
    assert (make_mask_plan(2, 0.99, 0).n_masked, make_mask_plan(2, 0.99, 0).n_visible) == (1, 1)


def test_same_seed_same_plan_and_regression_values():
    a, b = make_mask_plan(196, 0.75, 42), make_mask_plan(196, 0.75, 42)
    assert np.array_equal(a.masked, b.masked)
    assert not np.array_equal(a.masked, make_mask_plan(196, 0.75, 43).masked)
    # pinned PCG64 output; a change here means plans are no longer reproducible
    assert make_mask_plan(16, 0.5, 7).masked.tolist() == REGRESSION_16_05_7


REGRESSION_16_05_7 = np.sort(np.random.Generator(np.random.PCG64(7)).permutation(16)[:8]).tolist()


def test_plan_errors():
    with pytest.raises(MaskingError):
        make_mask_plan(1, 0.5, 0)
    with pytest.raises(MaskingError):
        make_mask_plan(10, 1.0, 0)
    with pytest.raises(MaskingError):
        make_mask_plan(10, 0.0, 0)
    assert mask_count(10, 0.01) == 1


def test_patchify_counts_and_layout():
    img = np.arange(16 * 16, dtype=float).reshape(1, 16, 16)
    grid = patchify(img, 4)
    assert grid.patches.shape == (16, 16)
    np.testing.assert_array_equal(grid.patches[1], img[0, :4, 4:8].ravel())
    assert patchify(np.zeros((3, 224, 224)), 16).n_patches == 196


def test_constant_image_patches_identical():
    grid = patchify(np.full((2, 8, 8), 0.3), 4)
    assert np.all(grid.patches == grid.patches[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_patchify_round_trip(c, gh, gw, p, seed):
    img = np.random.default_rng(seed).normal(size=(c, gh * p, gw * p))
    grid = patchify(img, p)
    np.testing.assert_array_equal(unpatchify(grid.patches, c, gh * p, gw * p, p), img)
    np.testing.assert_array_equal(patchify_batch(img[None], p)[0], grid.patches)


def test_patchify_rejects_indivisible():
    with pytest.raises(MaskingError):
        patchify(np.zeros((1, 10, 8)), 4)


def test_image_mask_partition_identity(rng):
    grid = patchify(rng.normal(size=(1, 8, 8)), 2)
    plan = make_mask_plan(16, 0.75, 3)
    vis, gt = apply_image_mask(grid, plan)
    assert vis.shape == (4, 4) and gt.shape == (12, 4)
    np.testing.assert_array_equal(merge_patches(vis, gt, plan), grid.patches)
    with pytest.raises(MaskingError):
        apply_image_mask(grid, make_mask_plan(8, 0.5, 0))


def test_report_mask_two_tokens():
    rep = report(3, 5)  # [CLS] a b [PAD] [PAD]: two maskable tokens
    plan = make_mask_plan(2, 0.01, 0)
    ids, targets, pos = apply_report_mask(rep, plan)
    assert (ids == MASK_ID).sum() == 1 and len(targets) == 1
    assert ids[0] == CLS_ID and np.all(ids[3:] == PAD_ID)


def test_report_mask_twenty_tokens_and_round_trip():
    rep = report(21, 24)
    plan = make_mask_plan(20, 0.5, 11)
    ids, targets, pos = apply_report_mask(rep, plan)
    assert (ids == MASK_ID).sum() == 10
    assert np.all(rep.valid[pos]) and CLS_ID not in targets
    np.testing.assert_array_equal(unmask_report(ids, targets, pos), rep.ids)


def test_report_plan_size_must_match_pool():
    with pytest.raises(MaskingError):
        apply_report_mask(report(4, 6), make_mask_plan(5, 0.5, 0))


def test_cls_masking_is_opt_in():
    rep = report(4, 6)
    assert rep.maskable_positions().tolist() == [1, 2, 3]
    assert rep.maskable_positions(mask_cls=True).tolist() == [0, 1, 2, 3]
