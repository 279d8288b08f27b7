"""Multiply-accumulate counting: analytic, labeled, backend-independent."""

import numpy as np
import pytest

from civicbench import numkit as nk
from civicbench.numkit import counters


def test_matmul_macs_are_product_of_dims():
    with counters.counting() as c:
        nk.matmul(np.ones((3, 4)), np.ones((4, 5)))
    assert c.total() == 3 * 4 * 5


def test_counts_accumulate_under_label():
    with counters.counting() as c:
        with counters.region("proj"):
            nk.matmul(np.ones((2, 2)), np.ones((2, 2)))
            nk.matmul(np.ones((2, 2)), np.ones((2, 2)))
    assert c.get("proj") == 16
    assert c.get("absent") == 0


def test_unlabeled_macs_collect_under_default_label():
    with counters.counting() as c:
        nk.matmul(np.ones((2, 3)), np.ones((3, 2)))
    assert c.counts == {counters.UNLABELED: 12}


def test_region_may_repeat_sequentially_but_not_nest_itself():
    with counters.counting() as c:
        for _ in range(3):
            with counters.region("layer"):
                c.add(5)
        assert c.get("layer") == 15
        with counters.region("layer"):
            with pytest.raises(ValueError, match="already open"):
                with counters.region("layer"):
                    pass


def test_distinct_regions_nest():
    with counters.counting() as c:
        with counters.region("outer"):
            c.add(1)
            with counters.region("inner"):
                c.add(10)
            c.add(2)
    assert c.counts == {"outer": 3, "inner": 10}


def test_no_active_counter_is_a_noop():
    assert counters.active() is None
    counters.add_macs(7)  # must not raise
    with counters.region("anything"):
        pass
    assert counters.active() is None


def test_counting_restores_previous_counter():
    with counters.counting() as outer:
        with counters.counting() as inner:
            counters.add_macs(3)
        counters.add_macs(2)
    assert inner.total() == 3
    assert outer.total() == 2
    assert counters.active() is None


def test_negative_increment_rejected():
    with counters.counting() as c:
        with pytest.raises(ValueError, match="nonnegative"):
            c.add(-1)


def test_decode_attention_macs():
    q = np.ones((1, 6))
    k = np.ones((4, 6))
    with counters.counting() as c:
        nk.dec_attend_one(q, k, k.copy(), 2, 1.0)
    assert c.total() == 2 * 4 * 6  # scores plus value mix over the cache


def test_counts_identical_across_backends(backend):
    shapes = [((3, 5), (5, 2)), ((4, 4), (4, 4))]
    with counters.counting() as c:
        for (a, b) in shapes:
            nk.matmul(np.ones(a), np.ones(b))
    assert c.total() == sum(m * k * n for (m, k), (_, n) in shapes)
