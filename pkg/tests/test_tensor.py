import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ventriseg.tensor import (Rng, as_tensor4, flat_index, from_bytes, load_tensor, percentile,
                              rng_normal, save_tensor, to_bytes, unflat_index)

# frozen from one run of rng_normal(Rng(7, ("a",)), (1, 1, 1000, 1000))
GOLDEN_MEAN_1E6 = 0.00011933543276828201


@pytest.mark.parametrize("values,p,expected", [
    ([5], 50, 5.0),
    ([0, 1, 2, 3, 4], 50, 2.0),
    ([0, 10], 25, 2.5),
])
def test_percentile_examples(values, p, expected):
    assert percentile(values, p) == expected


def test_percentile_errors():
    with pytest.raises(ValueError, match="empty sample"):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile([1.0], 101)


def test_percentile_matches_numpy_linear():
    v = np.random.default_rng(0).normal(size=101)
    for p in (0, 1, 12.5, 50, 99, 100):
        assert percentile(v, p) == pytest.approx(np.percentile(v, p, method="linear"), abs=1e-14)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
       st.floats(0, 100), st.floats(0, 100))
def test_percentile_monotone_and_bounded(values, p, q):
    lo, hi = sorted((p, q))
    a, b = percentile(values, lo), percentile(values, hi)
    assert a <= b + 1e-9 * max(1.0, abs(b))
    assert min(values) <= a and b <= max(values)


def test_rng_normal_determinism_and_independence():
    a1 = rng_normal(Rng(7, ("a",)), (1, 1, 2, 2))
    a2 = rng_normal(Rng(7).child("a"), (1, 1, 2, 2))
    b = rng_normal(Rng(7, ("b",)), (1, 1, 2, 2))
    assert np.array_equal(a1, a2)
    assert a1.tobytes() == a2.tobytes()
    assert not np.array_equal(a1, b)


def test_rng_normal_mean_golden():
    x = rng_normal(Rng(7, ("a",)), (1, 1, 1000, 1000))
    assert abs(x.mean()) < 0.01
    assert float(x.mean()) == GOLDEN_MEAN_1E6


def test_rng_normal_rejects_bad_shape():
    with pytest.raises(ValueError):
        rng_normal(Rng(0), (1, 0, 2, 2))
    with pytest.raises(ValueError):
        rng_normal(Rng(0), (2, 2))


def test_rng_seed_range():
    with pytest.raises(ValueError):
        Rng(-1)
    Rng(2**64 - 1).random()


@given(st.tuples(*[st.integers(1, 5)] * 4), st.data())
def test_flat_index_round_trip(shape, data):
    idx = data.draw(st.integers(0, int(np.prod(shape)) - 1))
    b, c, y, x = unflat_index(shape, idx)
    assert flat_index(shape, b, c, y, x) == idx
    assert np.ravel_multi_index((b, c, y, x), shape) == idx


def test_blob_round_trip(tmp_path):
    t = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
    blob = to_bytes(t)
    assert blob[:4] == b"VT4\0"
    assert len(blob) == 4 + 32 + 8 * t.size
    assert np.frombuffer(blob[4:36], dtype="<u8").tolist() == [2, 3, 4, 5]
    assert np.array_equal(from_bytes(blob), t)
    save_tensor(tmp_path / "t.vt4", t)
    assert np.array_equal(load_tensor(tmp_path / "t.vt4"), t)


def test_blob_rejects_corruption():
    blob = to_bytes(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="magic"):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        from_bytes(blob[:-8])
    with pytest.raises(ValueError):
        from_bytes(blob[:10])


def test_as_tensor4_validates():
    assert as_tensor4(np.ones((1, 1, 2, 2), dtype=np.float32)).dtype == np.float64
    with pytest.raises(ValueError):
        as_tensor4(np.ones((2, 2)))
    with pytest.raises(ValueError):
        as_tensor4(np.ones((1, 0, 2, 2)))
