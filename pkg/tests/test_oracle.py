import numpy as np
import pytest

from fedhelp import data as D
from fedhelp.oracle import (CacheError, CacheMiss, OracleCache, load_cache, save_cache,
                            train_classification_oracle, train_segmentation_oracle, warm_up)


@pytest.fixture(scope="module")
def small_world():
    holdout = D.make_public_set(0, C_pub=4, P=200, C=4, d=6, stream="holdout")
    public = D.make_public_set(0, C_pub=4, P=30, C=4, d=6)
    oracles = [train_classification_oracle(f"o{k}", holdout, 0, hidden=(16,), epochs=2) for k in range(2)]
    return public, oracles


def test_warm_up_queries_each_pair_once(small_world, tmp_path):
    public, oracles = small_world
    before = [o.evaluations for o in oracles]
    cache = warm_up(oracles, public, tmp_path / "c.fhoc", batch_size=7)
    assert [o.evaluations - b for o, b in zip(oracles, before)] == [30, 30]
    assert cache.query_counter == {"o0": 30, "o1": 30}
    assert len(cache) == 60
    d = cache.get_distributions(public.ids[:5])
    assert d.shape == (5, 2, 4)
    assert np.allclose(d.sum(axis=-1), 1.0, atol=1e-12)


def test_reads_do_not_query(small_world):
    public, oracles = small_world
    cache = warm_up(oracles, public)
    before = [o.evaluations for o in oracles]
    for _ in range(5):
        cache.get_distributions(public.ids)
    assert [o.evaluations for o in oracles] == before


def test_cache_hit_equals_fresh_evaluation(small_world):
    public, oracles = small_world
    cache = warm_up(oracles, public)
    fresh = oracles[1].evaluate(public.features[3:4])[0]
    assert cache.entry(public.ids[3], "o1").tobytes() == fresh.tobytes()


def test_reload_adds_zero_evaluations(small_world, tmp_path):
    public, oracles = small_world
    path = tmp_path / "c.fhoc"
    first = warm_up(oracles, public, path)
    before = [o.evaluations for o in oracles]
    again = warm_up(oracles, public, path)
    assert [o.evaluations for o in oracles] == before
    assert again.dists.tobytes() == first.dists.tobytes()
    assert again.query_counter == first.query_counter


def test_cache_round_trip_is_bit_exact(small_world, tmp_path):
    public, oracles = small_world
    cache = warm_up(oracles, public)
    path = tmp_path / "x.fhoc"
    save_cache(cache, path)
    assert path.read_bytes()[:4] == b"FHOC"
    back = load_cache(path)
    assert back.dists.tobytes() == cache.dists.tobytes()
    assert back.datum_ids.tolist() == cache.datum_ids.tolist() and back.oracle_ids == cache.oracle_ids


def test_cache_miss_and_corruption(small_world, tmp_path):
    public, oracles = small_world
    cache = warm_up(oracles, public)
    with pytest.raises(CacheMiss):
        cache.get_distributions([12345])
    blob = cache.to_bytes()
    with pytest.raises(CacheError, match="magic"):
        OracleCache.from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(CacheError, match="truncated"):
        OracleCache.from_bytes(blob[: len(blob) // 2])


def test_stale_cache_is_rejected(small_world, tmp_path):
    public, oracles = small_world
    path = tmp_path / "c.fhoc"
    warm_up(oracles, public, path)
    with pytest.raises(CacheError):
        warm_up(oracles[:1], public, path)


def test_oracles_are_frozen(small_world):
    _, oracles = small_world
    p = oracles[0].model.parameters()[0]
    assert not p.requires_grad
    with pytest.raises(ValueError):
        p.data[0] = 1.0


def test_class_count_mismatch(small_world):
    public, oracles = small_world
    other = D.make_public_set(0, C_pub=5, P=10, C=4, d=6)
    with pytest.raises(CacheError):
        warm_up(oracles, other)


def test_segmentation_cache_has_item_shape(tmp_path):
    holdout = D.make_segmentation(0, 12, 8, 8, "public", stream="holdout")
    public = D.make_segmentation(0, 5, 8, 8, "public", stream="public")
    oracle = train_segmentation_oracle("seg", holdout, 0, hidden=(4,), epochs=1)
    cache = warm_up([oracle], public, tmp_path / "s.fhoc")
    assert cache.item_shape == (8, 8)
    assert cache.get_distributions(public.ids[:2]).shape == (2, 1, 8, 8, 2)
    back = load_cache(tmp_path / "s.fhoc")
    assert back.dists.tobytes() == cache.dists.tobytes()
