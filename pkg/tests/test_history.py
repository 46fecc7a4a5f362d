import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contilora.errors import DimensionError, UndefinedInputError
from contilora.history import (
    compress_svd,
    merge_sum,
    reconstruction_similarity,
    reconstruction_similarity_per_task,
    strategy_random,
    strategy_summation,
)
from contilora.lora import LoraAdapter


def _adapter(rng, shape=(4, 4), r=2, task_id=0):
    return LoraAdapter(rng.standard_normal((shape[0], r)), rng.standard_normal((r, shape[1])), task_id, trainable=False)


def _stack(rng, n, shape=(6, 5), r=2):
    return [_adapter(rng, shape, r, k) for k in range(n)]


def test_merge_sum_examples():
    rng = np.random.default_rng(0)
    ad = _adapter(rng)
    assert np.array_equal(merge_sum([ad]), ad.b @ ad.a)
    neg = LoraAdapter(-ad.b, ad.a, 1)
    assert np.allclose(merge_sum([ad, neg]), 0.0, atol=1e-15)
    rank1 = _stack(rng, 3, (4, 4), 1)
    expect = np.zeros((4, 4))
    for ad in rank1:
        for i in range(4):
            for j in range(4):
                expect[i, j] += ad.b[i, 0] * ad.a[0, j]
    assert np.allclose(merge_sum(rank1), expect, atol=1e-14)


def test_merge_sum_validation():
    with pytest.raises(UndefinedInputError):
        merge_sum([])
    rng = np.random.default_rng(1)
    with pytest.raises(DimensionError):
        merge_sum([_adapter(rng, (3, 3)), _adapter(rng, (3, 4))])


def test_compress_lossless_single():
    ad = _adapter(np.random.default_rng(2), (5, 4), 2)
    h = compress_svd([ad], 3)
    assert np.linalg.norm(h.delta() - ad.delta()) <= 1e-9 * np.linalg.norm(ad.delta())
    assert h.retained_energy == pytest.approx(1.0, abs=1e-12)
    assert h.source_task_count == 1


def test_compress_diagonal():
    ads = [LoraAdapter(np.diag([3.0, 0.0, 1.0, 0.0]), np.eye(4), 0), LoraAdapter(np.diag([0.0, 2.0, 0.0, 0.0]), np.eye(4), 1)]
    h = compress_svd(ads, 2)
    assert np.allclose(h.delta(), np.diag([3.0, 2.0, 0.0, 0.0]), atol=1e-12)
    assert h.retained_energy == pytest.approx(13 / 14)


def test_compress_eckart_young():
    ads = _stack(np.random.default_rng(3), 3, (8, 7), 2)
    merged = merge_sum(ads)
    s = np.linalg.svd(merged, compute_uv=False)
    h = compress_svd(ads, 4)
    assert np.linalg.norm(merged - h.delta()) ** 2 == pytest.approx(np.sum(s[4:] ** 2), rel=1e-9)


def test_compress_all_zero():
    ad = LoraAdapter(np.zeros((3, 1)), np.ones((1, 3)), 0)
    h = compress_svd([ad], 1)
    assert np.array_equal(h.delta(), np.zeros((3, 3))) and h.retained_energy == 1.0


def test_random_strategy():
    rng = np.random.default_rng(4)
    ads = _stack(rng, 4)
    assert strategy_random(ads[:1], rng) is ads[0]
    ids = {id(ad): k for k, ad in enumerate(ads)}
    draws = [ids[id(strategy_random(ads, rng))] for _ in range(10_000)]
    counts = np.bincount(draws, minlength=4)
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma)
    g1, g2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [id(strategy_random(ads, g1)) for _ in range(20)] == [id(strategy_random(ads, g2)) for _ in range(20)]


def test_summation_strategy():
    rng = np.random.default_rng(5)
    ad = _adapter(rng)
    single = strategy_summation([ad])
    assert np.array_equal(single.b_his, ad.b) and np.array_equal(single.a_his, ad.a)
    a1, a2 = _adapter(rng, task_id=0), _adapter(rng, task_id=1)
    prod = strategy_summation([a1, a2]).delta()
    cross = a1.b @ a2.a + a2.b @ a1.a
    assert np.allclose(prod, merge_sum([a1, a2]) + cross, atol=1e-12)
    # a shared A leaves only a scale error: (sum b_i)(n a) = n * sum b_i a
    shared = [LoraAdapter(rng.standard_normal((4, 2)), a1.a, k) for k in range(3)]
    assert np.allclose(strategy_summation(shared).delta(), 3 * merge_sum(shared), atol=1e-12)
    with pytest.raises(DimensionError):
        strategy_summation([_adapter(rng, r=1), _adapter(rng, r=2)])


def test_reconstruction_similarity_examples():
    rng = np.random.default_rng(6)
    assert reconstruction_similarity([_adapter(rng, (5, 5), 2)], 2) == pytest.approx(1.0, abs=1e-9)
    d = [LoraAdapter(np.diag([3.0, 2.0, 1.0]), np.eye(3), 0)]
    assert reconstruction_similarity(d, 2) == pytest.approx(13 / (np.sqrt(14) * np.sqrt(13)), abs=1e-12)
    ads = _stack(rng, 3, (6, 6), 2)
    sims = [reconstruction_similarity(ads, r) for r in range(1, 7)]
    assert all(b >= a - 1e-12 for a, b in zip(sims, sims[1:]))
    per_task = reconstruction_similarity_per_task(ads, 6)
    assert len(per_task) == 3 and all(-1 <= v <= 1 for v in per_task)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_rank_invariance(seed, n_tasks):
    ads = _stack(np.random.default_rng(seed), n_tasks, (10, 9), 2)
    h = compress_svd(ads, 3)
    assert h.b_his.shape == (10, 3) and h.a_his.shape == (3, 9)
    s = np.linalg.svd(h.delta(), compute_uv=False)
    assert np.all(s[3:] <= 1e-9 * max(s[0], 1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_svd_beats_summation(seed, n_tasks):
    ads = _stack(np.random.default_rng(seed), n_tasks, (7, 6), 2)
    merged = merge_sum(ads)
    svd_err = np.linalg.norm(merged - compress_svd(ads, 2).delta())
    sum_err = np.linalg.norm(merged - strategy_summation(ads).delta())
    assert svd_err <= sum_err + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_retained_energy_monotone(seed, n_tasks):
    ads = _stack(np.random.default_rng(seed), n_tasks, (5, 6), 2)
    energies = [compress_svd(ads, r).retained_energy for r in range(1, 6)]
    assert all(b >= a - 1e-12 for a, b in zip(energies, energies[1:]))
    assert energies[-1] == pytest.approx(1.0, abs=1e-12)
