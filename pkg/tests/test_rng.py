import numpy as np

from cdlora.rng import RandomStream, stream_key, substream


def test_streams_reproducible():
    a = substream(42, "noise").normal(100)
    b = substream(42, "noise").normal(100)
    np.testing.assert_array_equal(a, b)


def test_streams_independent_of_draw_order():
    # drawing from one stream never disturbs another
    s1 = substream(42, "a")
    s2 = substream(42, "b")
    s2.uniform(1000)
    first = s1.uniform(10)
    fresh = substream(42, "a").uniform(10)
    np.testing.assert_array_equal(first, fresh)


def test_distinct_tags_and_indices_decorrelate():
    keys = {stream_key(1, "x", i) for i in range(100)}
    keys |= {stream_key(1, f"tag{i}") for i in range(100)}
    keys |= {stream_key(s, "y") for s in range(100)}
    assert len(keys) == 300


def test_uniform_range_and_moments():
    u = substream(3, "u").uniform(200_000)
    assert np.all(u >= 0.0) and np.all(u < 1.0)
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1.0 / 12.0) < 0.002


def test_normal_moments():
    z = substream(5, "z").normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.02
    # Box-Muller on consecutive pairs: odd-count draws are a prefix of even-count draws
    s1 = substream(5, "z").normal(7)
    s2 = substream(5, "z").normal(8)
    np.testing.assert_array_equal(s1, s2[:7])


def test_normal_shapes():
    z = substream(9, "shape").normal((4, 3))
    assert z.shape == (4, 3)


def test_integers_inclusive_range():
    draws = substream(7, "ints").integers(50_000, 1, 45)
    assert draws.min() == 1 and draws.max() == 45
    counts = np.bincount(draws, minlength=46)[1:]
    expected = 50_000 / 45
    sigma = np.sqrt(50_000 * (1 / 45) * (44 / 45))
    assert np.all(np.abs(counts - expected) < 5 * sigma)


def test_sequential_draws_continue_counter():
    s = substream(13, "seq")
    first = s.uniform(5)
    second = s.uniform(5)
    both = substream(13, "seq").uniform(10)
    np.testing.assert_array_equal(np.concatenate([first, second]), both)
