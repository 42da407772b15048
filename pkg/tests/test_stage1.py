import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from triplane_ssc.config import desk_preset
from triplane_ssc.cvae import weighted_cross_entropy
from triplane_ssc.geometry import pixel_to_point, world_to_voxel
from triplane_ssc.numerics import Tensor
from triplane_ssc.stage1 import (
    OccupancyMap,
    QuerySet,
    Stage1Model,
    depth_to_raw_occupancy,
    evaluate_stage1,
    noisy_depth,
    occupancy_to_queries,
    pool_any,
    stage1_example,
    stage1_forward,
    train_stage1,
)


@pytest.fixture(scope="module")
def toy(desk_cfg, desk_scenes):
    return stage1_example(desk_scenes[0], desk_cfg)


def test_zero_depth_gives_empty_occupancy(desk_cfg):
    occ, q = depth_to_raw_occupancy(np.zeros((64, 64)), desk_cfg.intrinsics, desk_cfg.pose, desk_cfg.stage1_grid, 24)
    assert not occ.any() and len(q) == 0 and q.features.shape == (0, 24)


def test_single_pixel_lands_in_known_cell(desk_cfg):
    # pixel center (32.5, 32.5) at depth 10 -> camera (0.125, 0.125, 10) -> world (10, -0.125, 1.075)
    # stage-1 voxels are 3.2 x 3.2 x 1.6 m from (0, -25.6, -2): cell (3, 7, 1)
    depth = np.zeros((64, 64))
    depth[32, 32] = 10.0
    occ, q = depth_to_raw_occupancy(depth, desk_cfg.intrinsics, desk_cfg.pose, desk_cfg.stage1_grid, 24)
    assert np.argwhere(occ).tolist() == [[3, 7, 1]]
    assert q.indices.tolist() == [[3, 7, 1]]


def test_two_pixels_same_voxel(desk_cfg):
    depth = np.zeros((64, 64))
    depth[32, 32] = depth[32, 33] = 10.0
    occ = depth_to_raw_occupancy(depth, desk_cfg.intrinsics, desk_cfg.pose, desk_cfg.stage1_grid)
    assert occ.sum() == 1


def test_raw_occupancy_matches_shuffled_pixel_loop(desk_cfg, desk_scenes):
    """Per-pixel oracle in a random enumeration order gives the same voxel set."""
    cam, pose, spec = desk_cfg.intrinsics, desk_cfg.pose, desk_cfg.stage1_grid
    depth = desk_scenes[0].depth
    occ = depth_to_raw_occupancy(depth, cam, pose, spec)
    cells = set()
    for flat in np.random.default_rng(0).permutation(depth.size):
        i, j = divmod(int(flat), depth.shape[1])
        if depth[i, j] > 0:
            p = pose.cam_to_world(pixel_to_point(j + 0.5, i + 0.5, depth[i, j], cam))
            idx, ok = world_to_voxel(p, spec)
            if ok:
                cells.add(tuple(int(v) for v in idx))
    assert cells == {tuple(v) for v in np.argwhere(occ).tolist()}


def test_raw_occupancy_covers_visible_surface(desk_cfg, desk_scenes):
    scene = desk_scenes[0]
    occ = depth_to_raw_occupancy(scene.depth, desk_cfg.intrinsics, desk_cfg.pose, desk_cfg.stage1_grid)
    gt = pool_any(scene.gt_occupancy)
    assert occ.any() and np.all(gt[occ])


def test_query_set_features_are_embeddings():
    q = QuerySet.from_indices([[0, 0, 0], [1, 2, 3]], (4, 4, 4), 12)
    assert q.features.shape == (2, 12)
    assert np.allclose(np.sum(q.features**2, axis=1), 6)


def test_pool_any():
    g = np.zeros((4, 4, 2), bool)
    g[3, 0, 1] = True
    p = pool_any(g)
    assert p.shape == (2, 2, 1) and p.sum() == 1 and p[1, 0, 0]
    with pytest.raises(ValueError):
        pool_any(np.zeros((3, 4, 2)))


def test_noisy_depth_keeps_invalid_pixels():
    d = np.array([[0.0, 5.0], [10.0, 0.0]])
    out = noisy_depth(d, 0.1, np.random.default_rng(0))
    assert out[0, 0] == 0 and out[1, 1] == 0 and np.all(out[d > 0] > 0)
    assert out[0, 1] != 5.0
    assert noisy_depth(d, 0.0, None) is d


def test_forward_shape(desk_cfg, toy):
    m_o = stage1_forward(Stage1Model(desk_cfg), toy.image, toy.queries)
    assert m_o.logits.shape == (16, 16, 4, 2)
    assert m_o.labels.dtype == np.uint8


def test_zero_decoder_predicts_free(desk_cfg, toy):
    model = Stage1Model(desk_cfg)
    model.triplane.l_o.weight.data[:] = 0
    model.triplane.l_o.bias.data[:] = 0
    m_o = stage1_forward(model, toy.image, toy.queries)
    assert np.all(m_o.logits.data == 0) and not m_o.labels.any()


def test_forward_deterministic(desk_cfg, toy):
    a = stage1_forward(Stage1Model(desk_cfg), toy.image, toy.queries).logits.data
    b = stage1_forward(Stage1Model(desk_cfg), toy.image, toy.queries).logits.data
    assert np.array_equal(a, b)


def test_loss_examples():
    labels = np.array([0, 1, 1, 0])
    perfect = np.where(np.eye(2)[labels] > 0, 50.0, -50.0)
    assert weighted_cross_entropy(Tensor(perfect), labels).item() < 1e-12
    assert weighted_cross_entropy(Tensor(np.zeros((4, 2))), labels).item() == pytest.approx(np.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        weighted_cross_entropy(Tensor(np.zeros((4, 2))), labels, mask=np.zeros(4, bool))


def test_occupancy_to_queries_examples(caplog):
    logits = np.zeros((4, 4, 2, 2))
    with caplog.at_level(logging.WARNING):
        q = occupancy_to_queries(OccupancyMap(Tensor(logits), None), 12)
    assert len(q) == 0 and "no occupied" in caplog.text
    logits[1, 2, 0, 1] = logits[3, 0, 1, 1] = 2.0
    q = occupancy_to_queries(logits, 12)
    assert q.indices.tolist() == [[1, 2, 0], [3, 0, 1]]


@given(st.integers(0, 2**31 - 1))
def test_half_threshold_equals_argmax(seed):
    logits = np.random.default_rng(seed).normal(size=(4, 3, 2, 2))
    a = occupancy_to_queries(logits, 6)
    b = occupancy_to_queries(logits, 6, threshold=0.5)
    assert np.array_equal(a.indices, b.indices)


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_queries_distinct_and_in_range(seed, tau):
    logits = np.random.default_rng(seed).normal(size=(5, 4, 3, 2))
    q = occupancy_to_queries(logits, 6, threshold=tau)
    assert len({tuple(i) for i in q.indices}) == len(q)
    assert np.all(q.indices >= 0) and np.all(q.indices < np.array([5, 4, 3]))


def test_smoke_loss_decreases(desk_cfg, toy):
    losses = train_stage1(Stage1Model(desk_cfg), [toy], 100)
    drops = np.sum(np.diff(losses) < 0)
    assert drops >= 0.9 * 99
    assert losses[-1] < 0.5 * losses[0]


def test_training_reproducible(desk_cfg, toy):
    a = train_stage1(Stage1Model(desk_cfg), [toy], 5)
    b = train_stage1(Stage1Model(desk_cfg), [toy], 5)
    assert a == b


def test_evaluate_returns_iou_recall(desk_cfg, toy):
    iou, rec = evaluate_stage1(Stage1Model(desk_cfg), [toy])
    assert 0 <= iou <= 1 and 0 <= rec <= 1


def test_noise_config_changes_queries(desk_scenes):
    clean = stage1_example(desk_scenes[0], desk_preset())
    noisy = stage1_example(desk_scenes[0], desk_preset().updated(depth_noise=0.3))
    assert not np.array_equal(clean.queries.indices, noisy.queries.indices)
