import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from fedhelp import data as D
from fedhelp.losses import WeightMapParams, weight_map
from fedhelp.rng import Rng


def octile(dy, dx):
    """Chamfer (1, sqrt 2) distance between grid points, closed form."""
    dy, dx = abs(dy), abs(dx)
    return max(dy, dx) - min(dy, dx) + math.sqrt(2.0) * min(dy, dx)


def brute_force_transforms(mask):
    """All-pairs oracle: sorted per-component border distances for every pixel."""
    h, w = mask.shape
    labels, n = ndimage.label(mask)
    per = []
    for k in range(1, n + 1):
        comp = labels == k
        pad = np.pad(comp, 1, constant_values=True)  # the image edge is not a border
        inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
        border = np.argwhere(comp & ~inner)
        grid = np.array([[min(octile(i - a, j - b) for a, b in border) for j in range(w)] for i in range(h)])
        per.append(grid)
    far = np.full((h, w), float(h + w))
    while len(per) < 2:
        per.append(far)
    per = np.sort(np.stack(per), axis=0)
    return per[0], per[1]


# -- classification -----------------------------------------------------------

def test_make_classification_is_byte_deterministic():
    a, b = D.make_classification(4, N=500), D.make_classification(4, N=500)
    assert a.features.tobytes() == b.features.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert D.make_classification(5, N=500).features.tobytes() != a.features.tobytes()


def test_make_classification_contract():
    ds = D.make_classification(0, C=5, d=7, N=103)
    assert ds.features.shape == (103, 7)
    assert ds.labels.max() < 5 and np.unique(ds.ids).size == 103
    with pytest.raises(ValueError):
        D.make_classification(0, C=4, N=3)
    with pytest.raises(ValueError):
        D.make_classification(0, C=1, N=10)


def test_zero_spread_is_separable_by_nearest_mean():
    ds = D.make_classification(1, C=4, d=8, N=400, cluster_spread=0.0)
    # every datum sits exactly on one of its class's cluster centres
    centres = {}
    for x, y in zip(ds.features, ds.labels):
        centres.setdefault(x.tobytes(), set()).add(int(y))
    assert all(len(v) == 1 for v in centres.values())


def test_dataset_invariants_enforced():
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((2, 1)), [0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((2, 1)), [0, 1], [5, 5], 3)


# -- partitioning -------------------------------------------------------------

def _ids(shards):
    return [np.concatenate([tr.ids, te.ids]) for tr, te in shards]


def test_partition_shards_are_disjoint_and_sized():
    ds = D.make_classification(0, N=6000)
    plan = D.isic19_plan(3400, min_test=20)
    shards = D.partition(ds, plan, seed=3)
    ids = _ids(shards)
    allids = np.concatenate(ids)
    assert np.unique(allids).size == allids.size
    for (tr, te), (a, b) in zip(shards, plan.sizes):
        assert len(tr) == a and len(te) == b
        assert not set(tr.ids) & set(te.ids)


def test_isic19_sizes_follow_reference_proportions():
    plan = D.isic19_plan(3400)
    train = np.array([a for a, _ in plan.sizes])
    ref = np.array([9930, 3163, 2690, 655, 351, 180])
    assert train.sum() == 3400
    assert np.all(np.abs(train - ref / ref.sum() * 3400) < 1.0)


def test_iid_limit_matches_global_histogram():
    ds = D.make_classification(2, N=20000)
    plan = D.PartitionPlan(((3000, 0), (3000, 0), (3000, 0)))
    shards = D.partition(ds, plan, dirichlet_alpha=np.inf, seed=0)
    prior = ds.histogram() / len(ds)
    for tr, _ in shards:
        assert np.all(np.abs(tr.histogram() / len(tr) - prior) <= 0.02)


def test_small_alpha_gives_skew():
    ds = D.make_classification(2, N=20000)
    shards = D.partition(ds, D.PartitionPlan(((2000, 0),) * 4), dirichlet_alpha=0.1, seed=0)
    assert max((tr.histogram() / len(tr)).max() for tr, _ in shards) > 0.4


def test_partition_is_seeded():
    ds = D.make_classification(0, N=3000)
    plan = D.PartitionPlan(((500, 50), (200, 20)))
    a = _ids(D.partition(ds, plan, seed=1))
    b = _ids(D.partition(ds, plan, seed=1))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_infeasible_plan_rejected():
    ds = D.make_classification(0, N=100)
    with pytest.raises(ValueError):
        D.partition(ds, D.PartitionPlan(((90, 20),)))
    with pytest.raises(ValueError):
        D.PartitionPlan(((0, 5),))


def test_full_partition_uses_every_datum_once():
    ds = D.make_classification(0, N=800)
    shards = D.partition(ds, D.PartitionPlan(((300, 100), (250, 150))), seed=0)
    assert sorted(np.concatenate(_ids(shards)).tolist()) == list(range(800))


# -- public set ----------------------------------------------------------------

def test_public_control_condition_matches_private_world():
    priv = D.make_classification(0, C=8, N=20000)

    def gaps(shift):
        pub = D.make_public_set(0, C_pub=8, P=20000, shift=shift, C=8)
        return np.array([np.linalg.norm(pub.features[pub.labels == k].mean(0) - priv.features[priv.labels == k].mean(0))
                         for k in range(8)])

    # same world, independent samples: only sampling noise separates the class means
    assert gaps(0.0).max() < 0.5
    assert gaps(0.3).min() > 1.0


def test_public_shift_moves_means_and_ids_are_disjoint():
    base = D.make_public_set(0, C_pub=10, P=2000, shift=0.0)
    shifted = D.make_public_set(0, C_pub=10, P=2000, shift=0.3)
    assert shifted.num_classes == 10 and shifted.labels.max() == 9
    gap = np.linalg.norm(base.features[base.labels == 0].mean(0) - shifted.features[shifted.labels == 0].mean(0))
    assert gap > 0.5
    priv = D.make_classification(0, N=20000)
    assert not set(priv.ids) & set(shifted.ids)
    hold = D.make_public_set(0, P=100, stream="holdout")
    assert not set(hold.ids) & set(shifted.ids)


def test_public_set_requires_data():
    with pytest.raises(ValueError):
        D.make_public_set(0, P=0)


# -- segmentation ----------------------------------------------------------------

def test_segmentation_generator_bounds_over_1000_samples():
    seg = D.make_segmentation(0, 1000)
    frac = seg.masks.reshape(1000, -1).mean(axis=1)
    assert frac.min() >= 0.05 and frac.max() <= 0.6
    ncomp = [ndimage.label(m)[1] for m in seg.masks]
    assert min(ncomp) >= 1 and max(ncomp) <= 3
    assert np.all(seg.d1 <= seg.d2)
    assert np.all(np.isfinite(seg.weights)) and np.all(seg.weights > 0)


def test_segmentation_is_deterministic_and_capped():
    a, b = D.make_segmentation(3, 5), D.make_segmentation(3, 5)
    assert a.masks.tobytes() == b.masks.tobytes() and a.images.tobytes() == b.images.tobytes()
    with pytest.raises(ValueError):
        D.make_segmentation(0, 1, H=65)


def test_border_pixels_have_zero_d1():
    mask = np.zeros((9, 9), dtype=int)
    mask[2:6, 3:7] = 1
    d1, _ = D.distance_transforms(mask)
    assert d1[2, 3] == 0 and d1[5, 6] == 0 and d1[3, 4] > 0


def test_two_components_four_apart_midpoint():
    mask = np.zeros((7, 11), dtype=int)
    mask[:, :3] = 1
    mask[:, 6:] = 1
    d1, d2 = D.distance_transforms(mask)
    assert d1[3, 4] == 2.0 and d2[3, 4] == 2.0
    o1, o2 = brute_force_transforms(mask)
    assert o1[3, 4] == 2.0 and o2[3, 4] == 2.0


def test_single_component_saturates_the_seam_term():
    mask = np.zeros((64, 64), dtype=int)
    mask[20:30, 25:41] = 1
    d1, d2 = D.distance_transforms(mask)
    assert np.all(d2 == 128.0)
    assert np.exp(-((d1 + d2) ** 2).min() / (2 * 25.0)) < 1e-40
    beta = weight_map(mask, d1, d2, WeightMapParams())
    assert np.allclose(beta, weight_map(mask, d1, d2, WeightMapParams(beta0=0.0)), rtol=0, atol=1e-30)


def test_empty_mask_and_non_binary():
    d1, d2 = D.distance_transforms(np.zeros((4, 5), dtype=int))
    assert np.all(d1 == 9.0) and np.all(d2 == 9.0)
    with pytest.raises(ValueError):
        D.distance_transforms(np.array([[0, 2]]))


masks = st.integers(0, 2 ** 30).map(lambda s: (Rng("mask", s).random((9, 10)) > 0.7).astype(int))


@settings(max_examples=60, deadline=None)
@given(masks)
def test_chamfer_matches_brute_force_oracle(mask):
    d1, d2 = D.distance_transforms(mask)
    o1, o2 = brute_force_transforms(mask)
    assert np.allclose(d1, o1, rtol=0, atol=1e-12)
    assert np.allclose(d2, o2, rtol=0, atol=1e-12)
    assert np.all(d1 <= d2)
    if ndimage.label(mask)[1] >= 2:
        assert np.all(d2 > 0)


def test_chamfer_on_generated_masks():
    seg = D.make_segmentation(9, 4)
    for m, d1, d2 in zip(seg.masks, seg.d1, seg.d2):
        o1, o2 = brute_force_transforms(m)
        assert np.allclose(d1, o1, atol=1e-12) and np.allclose(d2, o2, atol=1e-12)


def test_segmentation_partition_disjoint():
    seg = D.make_segmentation(0, 40)
    shards = D.partition_segmentation(seg, D.PartitionPlan(((10, 2), (10, 2), (5, 1))), seed=0)
    ids = np.concatenate(_ids(shards))
    assert np.unique(ids).size == ids.size == 30


# -- dump / load ------------------------------------------------------------------

def test_classification_dump_round_trip(tmp_path):
    ds = D.make_classification(0, C=3, d=4, N=50)
    path = tmp_path / "c.bin"
    D.save_dataset(path, ds, seed=0)
    back = D.load_dataset(path)
    assert back.features.tobytes() == ds.features.tobytes()
    assert back.labels.tolist() == ds.labels.tolist() and back.ids.tolist() == ds.ids.tolist()
    assert back.num_classes == 3


def test_segmentation_dump_round_trip(tmp_path):
    seg = D.make_segmentation(1, 3)
    path = tmp_path / "s.bin"
    D.save_dataset(path, seg, seed=1)
    back = D.load_dataset(path)
    for name in ("images", "d1", "d2", "weights"):
        assert getattr(back, name).tobytes() == getattr(seg, name).tobytes()
    assert np.array_equal(back.masks, seg.masks) and np.array_equal(back.ids, seg.ids)


def test_dump_rejects_truncation(tmp_path):
    path = tmp_path / "c.bin"
    D.save_dataset(path, D.make_classification(0, C=2, d=2, N=4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        D.load_dataset(path)
