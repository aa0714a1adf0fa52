import numpy as np
import pytest

from ldmlplus.dataset import (
    FeatureView,
    MultiViewPairSet,
    PairIndex,
    PairPolicy,
    ScaleParams,
    build_pairs,
    compute_betas,
    mean_pair_sq_distance,
)
from ldmlplus.errors import ContractError, DegeneratePrivilegedError, InputError


def test_build_pairs_enumeration():
    pairs = build_pairs([0, 0, 1])
    assert list(zip(pairs.index_a, pairs.index_b, pairs.labels)) == [
        (0, 1, 1.0), (0, 2, -1.0), (1, 2, -1.0)
    ]
    np.testing.assert_allclose(pairs.weights, [1.0, 0.5, 0.5])


def test_weights_sum_to_two():
    pairs = build_pairs(np.repeat(np.arange(5), 3))
    assert np.isclose(pairs.weights.sum(), 2.0)
    assert pairs.n_similar == 15
    assert pairs.n_dissimilar == 105 - 15


def test_cross_camera_filter(toy_ids):
    ids, cams = toy_ids
    pairs = build_pairs(ids, cameras=cams)
    assert pairs.n_similar == 4
    assert np.all(cams[pairs.index_a] != cams[pairs.index_b])
    assert pairs.n_dissimilar == 12


def test_subsample_is_seeded():
    ids = np.repeat(np.arange(10), 2)
    pol = PairPolicy(mode="subsample", neg_ratio=2, seed=7)
    a, b = build_pairs(ids, pol), build_pairs(ids, pol)
    np.testing.assert_array_equal(a.index_a, b.index_a)
    assert a.n_dissimilar == 2 * a.n_similar
    c = build_pairs(ids, PairPolicy(mode="subsample", neg_ratio=2, seed=8))
    assert not np.array_equal(a.index_b, c.index_b)
    capped = build_pairs(ids, PairPolicy(mode="subsample", max_negatives=3))
    assert capped.n_dissimilar == 3


def test_iteration_yields_labeled_pairs():
    first = next(iter(build_pairs([0, 0, 1])))
    assert (first.index_a, first.index_b, first.label, first.weight) == (0, 1, 1, 1.0)


@pytest.mark.parametrize("ids", [[0, 1, 2], [0, 0, 0]])
def test_missing_class_rejected(ids):
    with pytest.raises(InputError):
        build_pairs(ids)


def test_pair_index_validation():
    with pytest.raises(InputError):
        PairIndex([0], [0], [1])
    with pytest.raises(InputError):
        PairIndex([0, 1], [1, 2], [1, 2])
    with pytest.raises(InputError):
        PairIndex([0, 1], [1, 2], [-1, -1])


def test_feature_view_checks():
    with pytest.raises(InputError):
        FeatureView("v", np.array([[np.inf, 1.0]]))
    with pytest.raises(InputError):
        FeatureView("v", np.ones(3))
    v = FeatureView("v", np.ones((2, 3)))
    assert (v.n_samples, v.dim) == (2, 3)


def test_pair_set_diffs(toy_ids):
    ids, cams = toy_ids
    x = np.arange(16.0).reshape(8, 2)
    ps = MultiViewPairSet((FeatureView("a", x),), FeatureView("p", x[:, :1]), build_pairs(ids, cameras=cams))
    i = 0
    a, b = ps.pairs.index_a[i], ps.pairs.index_b[i]
    np.testing.assert_array_equal(ps.view_diffs(0)[i], x[a] - x[b])
    assert ps.view_dims() == [2]
    with pytest.raises(ContractError):
        MultiViewPairSet((FeatureView("a", x),), FeatureView("p", x[:3]), ps.pairs)


def test_from_diffs_is_exact(rng):
    d = rng.standard_normal((3, 2))
    ps = MultiViewPairSet.from_diffs([d], d[:, :1], [1, -1, -1])
    np.testing.assert_array_equal(ps.view_diffs(0), d)
    np.testing.assert_array_equal(ps.privileged_diffs(), d[:, :1])


def test_betas_over_pairs_and_all():
    # view distances are 4x the privileged ones
    x = np.array([[0.0], [1.0], [3.0], [4.0]])
    ps = MultiViewPairSet((FeatureView("v", 2 * x),), FeatureView("p", x), build_pairs([0, 0, 1, 1]))
    assert compute_betas(ps).betas == (4.0,)
    assert compute_betas(ps, over="all").betas == (4.0,)
    assert mean_pair_sq_distance(ps) == np.mean([4.0, 36.0, 64.0, 16.0, 36.0, 4.0])


def test_betas_degenerate():
    x = np.array([[0.0], [1.0], [3.0], [4.0]])
    ps = MultiViewPairSet((FeatureView("v", x),), FeatureView("p", np.ones((4, 2))), build_pairs([0, 0, 1, 1]))
    with pytest.raises(DegeneratePrivilegedError):
        compute_betas(ps)


def test_scale_params_positive():
    with pytest.raises(InputError):
        ScaleParams((0.0,))
