import numpy as np
import pytest

from itemlab.rng import SEED_MAX, RngStreams, check_seed, stream


def test_streams_are_reproducible():
    a = stream(7, "mixup").random(5)
    b = stream(7, "mixup").random(5)
    assert np.array_equal(a, b)


def test_streams_differ_by_name_and_seed():
    assert not np.array_equal(stream(7, "mixup").random(5), stream(7, "noise").random(5))
    assert not np.array_equal(stream(7, "mixup").random(5), stream(8, "mixup").random(5))


def test_high_seed_bits_matter():
    lo = stream(1, "init").random(3)
    hi = stream(1 + 2**32, "init").random(3)
    assert not np.array_equal(lo, hi)


def test_cache_returns_same_generator():
    s = RngStreams(3)
    assert s["head_draw"] is s["head_draw"]


@pytest.mark.parametrize("bad", [-1, SEED_MAX + 1])
def test_seed_range(bad):
    with pytest.raises(ValueError):
        check_seed(bad)


def test_max_seed_accepted():
    assert check_seed(SEED_MAX) == SEED_MAX
    stream(SEED_MAX, "init").random()
