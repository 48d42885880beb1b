import numpy as np

from qtw.rng import GOLDEN, MASK64, SplitMix64, mix64


def splitmix_reference(seed, n):
    """Textbook sequential SplitMix64 in Python integers."""
    out, state = [], seed
    for _ in range(n):
        state = (state + GOLDEN) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def test_stream_matches_sequential_reference():
    for seed in (0, 1, 45, 2**63 + 5):
        assert SplitMix64(seed).next_u64(50).tolist() == splitmix_reference(seed, 50)


def test_known_first_output_of_seed_zero():
    assert SplitMix64(0).next_u64(1)[0] == 0xE220A8397B1DCDAF


def test_stream_is_chunk_invariant():
    a = SplitMix64(7).next_u64(100)
    s = SplitMix64(7)
    b = np.concatenate([s.next_u64(13), s.next_u64(40), s.next_u64(47)])
    assert np.array_equal(a, b)


def test_mix64_is_first_output_of_offset_stream():
    for base, i in [(0, 0), (45, 3), (9999, 1000)]:
        assert mix64(base, i) == splitmix_reference((base + i * GOLDEN) & MASK64, 1)[0]


def test_uniform_open_interval_and_moments():
    u = SplitMix64(3).uniform(200_000)
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1 / 12) < 0.002


def test_normal_moments():
    z = SplitMix64(11).normal(200_001)
    assert z.size == 200_001
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01
    assert abs(np.mean(z**4) - 3) < 0.1


def test_integers_inclusive_range():
    x = SplitMix64(5).integers(3, 6, 10_000)
    assert set(np.unique(x).tolist()) == {3, 4, 5, 6}


def test_distinct_streams_differ():
    assert not np.array_equal(SplitMix64(mix64(1, 0)).uniform(10), SplitMix64(mix64(1, 1)).uniform(10))
