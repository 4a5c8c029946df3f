from collections import Counter

import numpy as np
import pytest
from scipy.stats import spearmanr

from forec.analysis import cosine_similarity, item_count_vector
from forec.synthgen import SynthConfig, generate_pair, generate_records, market_directions


def _raw_counts(records, n_items):
    c = Counter(int(r.item_id[1:]) for r in records)
    return np.array([c.get(i, 0) for i in range(n_items)])


def _spearman(rho, seed):
    cfg = SynthConfig(correlation=rho, seed=seed)
    src, tgt = generate_records(cfg)
    return spearmanr(_raw_counts(src, cfg.n_items), _raw_counts(tgt, cfg.n_items)).statistic


@pytest.mark.parametrize("rho", [0.0, 0.3, 0.9, 1.0, -0.5])
def test_market_directions_have_exact_cosine(rho):
    g_s, g_t = market_directions(np.random.default_rng(1), 8, rho)
    assert np.isclose(np.linalg.norm(g_s), 1) and np.isclose(np.linalg.norm(g_t), 1)
    assert abs(g_s @ g_t - rho) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_identical_preferences_give_correlated_popularity(seed):
    assert _spearman(1.0, seed) > 0.8


@pytest.mark.parametrize("seed", range(3))
def test_unrelated_preferences_give_uncorrelated_popularity(seed):
    assert abs(_spearman(0.0, seed)) <= 0.15


def test_same_seed_is_byte_identical():
    a = generate_pair(SynthConfig(seed=3))
    b = generate_pair(SynthConfig(seed=3))
    for x, y in zip(a, b):
        assert x.users.tobytes() == y.users.tobytes()
        assert x.items.tobytes() == y.items.tobytes()
        assert x.timestamps.tobytes() == y.timestamps.tobytes()
        assert x.user_index == y.user_index
    assert generate_pair(SynthConfig(seed=4))[1].items.tobytes() != a[1].items.tobytes()


def test_generated_markets_satisfy_dataset_invariants():
    src, tgt = generate_pair(SynthConfig(seed=0))
    for m in (src, tgt):
        assert np.bincount(m.users - m.user_offset).min() >= 5
        item_counts = np.bincount(m.items)
        assert item_counts[item_counts > 0].min() >= 5
        assert m.n_items == 500
    assert set(src.users.tolist()).isdisjoint(tgt.users.tolist())
    assert src.item_index == tgt.item_index
    assert src.n_users > tgt.n_users


def test_popularity_similarity_monotone_in_rho():
    avg = []
    for rho in (0.0, 0.5, 1.0):
        sims = [cosine_similarity(*(item_count_vector(m) for m in generate_pair(SynthConfig(correlation=rho, seed=s))))
                for s in range(5)]
        avg.append(np.mean(sims))
    assert avg[0] <= avg[1] <= avg[2]


@pytest.mark.parametrize("kw", [
    dict(n_items=50), dict(interactions_per_user=(3, 8)), dict(interactions_per_user=(9, 8)),
    dict(correlation=1.5), dict(n_users_target=0),
])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        generate_records(SynthConfig(**kw))


def test_empty_market_after_filtering_raises():
    with pytest.raises(ValueError):
        generate_pair(SynthConfig(n_users_target=2, seed=0))


def test_config_dict_round_trip():
    cfg = SynthConfig(correlation=0.4, interactions_per_user=(6, 9))
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
