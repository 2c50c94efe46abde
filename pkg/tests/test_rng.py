import numpy as np
from hypothesis import given, strategies as st

from microdarts.rng import SplitMix64


def test_reference_stream():
    r = SplitMix64(0)
    assert r.next_u64() == 0xE220A8397B1DCDAF
    assert r.next_u64() == 0x6E789E6AA1B965F4


def test_vectorized_matches_scalar():
    a, b = SplitMix64(123), SplitMix64(123)
    block = a.uint64s(17)
    assert [int(v) for v in block] == [b.next_u64() for _ in range(17)]
    assert a.next_u64() == b.next_u64()


def test_fork_is_pure_and_label_dependent():
    r = SplitMix64(5)
    x = r.fork("a").uint64s(4)
    y = r.fork("a").uint64s(4)
    z = r.fork("b").uint64s(4)
    assert np.array_equal(x, y)
    assert not np.array_equal(x, z)
    assert r.next_u64() == SplitMix64(5).next_u64()


@given(st.integers(0, 2**64 - 1), st.integers(1, 200))
def test_permutation_is_a_permutation(seed, n):
    p = SplitMix64(seed).permutation(n)
    assert sorted(p.tolist()) == list(range(n))


@given(st.integers(0, 2**64 - 1))
def test_uniform_range(seed):
    u = SplitMix64(seed).uniform(64, -2.0, 3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
