import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contilora.errors import DimensionError, UndefinedInputError
from contilora.lora import (
    AdapterMode,
    AdapterStack,
    HistoryFactors,
    LoraAdapter,
    effective_weight,
    freeze_current,
    init_adapter,
)


def _diag_adapter(values, task_id):
    d = np.diag(values)
    return LoraAdapter(d.copy(), np.eye(len(values)), task_id, trainable=False)


def test_fresh_adapter_contributes_nothing():
    ad = init_adapter(5, 3, 2, 0, np.random.default_rng(0))
    assert np.array_equal(ad.delta(), np.zeros((5, 3)))
    assert ad.rank == 2 and ad.shape == (5, 3)


def test_init_is_seeded():
    a1 = init_adapter(4, 4, 2, 0, np.random.default_rng(3)).a
    a2 = init_adapter(4, 4, 2, 0, np.random.default_rng(3)).a
    assert np.array_equal(a1, a2)


def test_init_variance():
    r = 4
    a = init_adapter(1, 2500, r, 0, np.random.default_rng(1)).a
    assert a.size == 10_000
    assert abs(a.var() - 1 / r) <= 0.1 / r


def test_init_rejects_bad_dims():
    with pytest.raises(DimensionError):
        init_adapter(3, 3, 0, 0, np.random.default_rng(0))


def test_effective_weight_empty_stack():
    base = np.random.default_rng(0).standard_normal((3, 3))
    for mode in AdapterMode:
        assert np.array_equal(effective_weight(base, AdapterStack(), mode), base)
        assert np.array_equal(effective_weight(base, None, mode), base)


def test_zero_b_frozen_adapter_leaves_base():
    base = np.random.default_rng(0).standard_normal((3, 2))
    ad = LoraAdapter(np.zeros((3, 1)), np.ones((1, 2)), 0, trainable=False)
    stack = AdapterStack((ad,))
    for mode in (AdapterMode.BASE_ONLY, AdapterMode.HISTORY_ONLY, AdapterMode.HISTORY_PLUS_CURRENT):
        assert np.array_equal(effective_weight(base, stack, mode), base)


def test_history_sum_example():
    stack = AdapterStack((_diag_adapter([1.0, 1.0], 0), _diag_adapter([2.0, 2.0], 1)))
    assert np.array_equal(effective_weight(np.zeros((2, 2)), stack, "history_only"), np.diag([3.0, 3.0]))


def test_modes_compose():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((3, 4))
    old = LoraAdapter(rng.standard_normal((3, 2)), rng.standard_normal((2, 4)), 0, trainable=False)
    cur = LoraAdapter(rng.standard_normal((3, 2)), rng.standard_normal((2, 4)), 1)
    stack = AdapterStack((old,), cur)
    assert np.allclose(effective_weight(base, stack, "history_only"), base + old.delta())
    assert np.allclose(effective_weight(base, stack, "current_only"), base + cur.delta())
    assert np.allclose(effective_weight(base, stack, "history_plus_current"), base + old.delta() + cur.delta())


def test_compressed_history_replaces_frozen_sum():
    rng = np.random.default_rng(3)
    old = LoraAdapter(rng.standard_normal((3, 2)), rng.standard_normal((2, 3)), 0, trainable=False)
    hist = HistoryFactors(rng.standard_normal((3, 2)), rng.standard_normal((2, 3)))
    stack = AdapterStack((old,), compressed=hist, use_compressed=True)
    assert np.allclose(effective_weight(np.zeros((3, 3)), stack, "history_only"), hist.delta())
    with pytest.raises(UndefinedInputError):
        AdapterStack(use_compressed=True)


def test_current_only_without_current():
    stack = AdapterStack((_diag_adapter([1.0], 0),))
    with pytest.raises(UndefinedInputError):
        effective_weight(np.zeros((1, 1)), stack, "current_only")
    assert effective_weight(np.zeros((1, 1)), stack, "history_plus_current")[0, 0] == 1.0


def test_shape_mismatch():
    stack = AdapterStack(current=LoraAdapter(np.ones((2, 1)), np.ones((1, 3)), 0))
    with pytest.raises(DimensionError):
        effective_weight(np.zeros((3, 3)), stack, "current_only")
    with pytest.raises(DimensionError):
        LoraAdapter(np.ones((2, 2)), np.ones((3, 3)), 0)


def test_freeze_lifecycle():
    rng = np.random.default_rng(4)
    stack = AdapterStack()
    for k in range(3):
        cur = init_adapter(2, 2, 1, k, rng)
        cur.b[:] = rng.standard_normal(cur.b.shape)
        stack = freeze_current(AdapterStack(stack.frozen, cur))
        assert len(stack.frozen) == k + 1
        assert np.allclose(effective_weight(np.zeros((2, 2)), stack, "history_only"),
                           sum(ad.delta() for ad in stack.frozen))
    with pytest.raises(UndefinedInputError):
        freeze_current(stack)


def test_frozen_arrays_are_read_only():
    ad = LoraAdapter(np.ones((2, 1)), np.ones((1, 2)), 0).frozen()
    with pytest.raises(ValueError):
        ad.b[0, 0] = 2.0


def test_frozen_ids_must_increase():
    with pytest.raises(ValueError):
        AdapterStack((_diag_adapter([1.0], 1), _diag_adapter([1.0], 0)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5, allow_nan=False))
def test_linear_in_b(seed, c):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((3, 4))
    b, a = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
    one = effective_weight(base, AdapterStack(current=LoraAdapter(b, a, 0)), "current_only") - base
    scaled = effective_weight(base, AdapterStack(current=LoraAdapter(c * b, a, 0)), "current_only") - base
    assert np.allclose(scaled, c * one, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fresh_adapter_never_changes_weights(seed):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((4, 3))
    old = LoraAdapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 3)), 0, trainable=False)
    before = effective_weight(base, AdapterStack((old,)), "history_plus_current")
    after = effective_weight(base, AdapterStack((old,), init_adapter(4, 3, 2, 1, rng)), "history_plus_current")
    assert np.array_equal(before, after)
