import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mwqsim.netmodel import (
    ArrivalModel,
    ChannelModel,
    ModelIntegrityError,
    RngStreams,
    Topology,
    arrivals_step,
    channel_gain_path,
    channel_step,
    default_topology,
    queue_step,
    stationary_gain_samples,
)


def test_default_topology_shape():
    topo = default_topology()
    assert topo.L == 6 and topo.node_count == 5
    assert topo.rev_map == {3: (0, 1, 4), 4: (2, 3, 5)}
    assert topo.tx_map == {1: (0, 2), 2: (1, 3), 5: (4, 5)}
    ptr, flat = topo.groups()
    assert list(ptr) == [0, 3, 6] and list(flat) == [0, 1, 4, 2, 3, 5]


@pytest.mark.parametrize(
    "nodes, links",
    [
        (3, [(0, 1, 2), (2, 1, 3)]),  # id gap
        (3, [(0, 1, 1)]),  # self loop
        (2, [(0, 1, 3)]),  # node out of range
    ],
)
def test_topology_rejects_bad_links(nodes, links):
    with pytest.raises(ValueError):
        Topology(nodes, links)


def test_pure_drift_step():
    model = ChannelModel(np.array([0.5]), h0=0.05, tau=0.01)
    out = channel_step(np.array([1 + 0j]), model, np.zeros(1))
    assert out.h[0] == pytest.approx(0.9975 + 0j, abs=1e-15)


def test_zero_rate_freezes_channel(rng):
    model = ChannelModel(np.zeros(3), h0=0.05, tau=0.3)
    h = np.array([0.3 + 0.4j, -1.0, 2j])
    out = channel_step(h, model, rng.standard_normal(3) + 1j * rng.standard_normal(3))
    np.testing.assert_array_equal(out.h, h)


def test_reflection_to_floor():
    # drift-free step landing at 0.05 is pushed radially to h0 = 0.1
    model = ChannelModel(np.array([0.0]), h0=0.1, tau=1.0)
    out = channel_step(np.array([0.05 + 0j]), model, np.zeros(1))
    assert out.h[0] == pytest.approx(0.1 + 0j)


def test_reflection_of_origin_is_on_floor():
    model = ChannelModel(np.array([0.0]), h0=0.2, tau=1.0)
    assert abs(channel_step(np.zeros(1, complex), model, np.zeros(1)).h[0]) == pytest.approx(0.2)


@pytest.mark.parametrize("bad", ["state", "noise"])
def test_non_finite_input_rejected(bad):
    model = ChannelModel(np.ones(2))
    h = np.ones(2, complex)
    noise = np.zeros(2, complex)
    if bad == "state":
        h[1] = np.nan
    else:
        noise[0] = np.inf
    with pytest.raises(ModelIntegrityError):
        channel_step(h, model, noise)


@given(
    st.lists(st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False), min_size=1, max_size=6),
    st.floats(0, 1000),
    st.floats(0.001, 1.0),
    st.integers(0, 2**31),
)
def test_amplitude_floor_holds(h, a, h0, seed):
    h = np.array(h, dtype=complex)
    noise = RngStreams(seed, len(h)).channel_noise(1)[0]
    out = channel_step(h, ChannelModel(np.full(len(h), a), h0, 1e-3), noise)
    assert np.all(np.abs(out.h) >= h0 * (1 - 1e-12))


def test_compiled_path_matches_stepping():
    model = ChannelModel(np.array([5.0, 200.0, 0.0]), 0.3, 1e-3)
    noise = RngStreams(3, 3).channel_noise(500)
    h = np.array([1.0, 0.1j, -0.5], dtype=complex)
    gains = channel_gain_path(h, model, noise)
    for n in noise:
        h = channel_step(h, model, n).h
    np.testing.assert_allclose(gains[-1], np.abs(h) ** 2, rtol=1e-12)


def test_stationary_samples_respect_floor(rng):
    H = stationary_gain_samples(ChannelModel(np.ones(3), 0.4), 3, 500, rng)
    assert H.shape == (500, 3)
    assert np.all(np.abs(H) >= 0.4 - 1e-12)
    # unit average gain is preserved up to the small floor correction
    assert np.mean(np.abs(H) ** 2) == pytest.approx(1.0, abs=0.15)


def test_zero_rate_gives_no_arrivals(rng):
    assert np.all(arrivals_step(ArrivalModel(np.zeros(4)), 1e-3, rng) == 0)


def test_arrival_moments(rng):
    lam, tau, n = 20.0, 1e-3, 10**6
    x = rng.poisson(lam * tau, n)  # same call arrivals_step makes per slot
    assert abs(x.mean() - lam * tau) < 3 * np.sqrt(lam * tau / n)
    assert x.var() == pytest.approx(lam * tau, rel=0.02)


def test_per_link_generators_are_used():
    streams = RngStreams(9, 3)
    counts = arrivals_step(ArrivalModel(np.array([0.0, 1e6, 5.0])), 1.0, streams.arrivals)
    assert counts[0] == 0 and counts[1] > 0 and counts.dtype == np.int64


def test_streams_reproducible():
    a = RngStreams(42, 4)
    b = RngStreams(42, 4)
    np.testing.assert_array_equal(a.channel_noise(100), b.channel_noise(100))
    np.testing.assert_array_equal(a.arrival_counts(np.full(4, 20.0), 1e-3, 100), b.arrival_counts(np.full(4, 20.0), 1e-3, 100))


def test_noise_has_unit_complex_variance():
    z = RngStreams(1, 2).channel_noise(200_000)
    assert np.var(z.real) == pytest.approx(0.5, rel=0.02)
    assert np.var(z.imag) == pytest.approx(0.5, rel=0.02)


@pytest.mark.parametrize(
    "q, mu, tau, arrivals, expected",
    [(5.0, 2.0, 1.0, 1, 4.0), (0.001, 10.0, 1.0, 0, 0.0), (0.0, 0.0, 1.0, 3, 3.0)],
)
def test_queue_step_examples(q, mu, tau, arrivals, expected):
    out = queue_step(np.array([q]), np.array([mu]), tau, np.array([arrivals]))
    assert out.q[0] == pytest.approx(expected)


@given(
    st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.integers(0, 10)), min_size=1, max_size=8),
    st.floats(1e-4, 1.0),
)
def test_queue_step_nonnegative_and_conserving(entries, tau):
    q, mu, arr = (np.array(x, dtype=float) for x in zip(*entries))
    out = queue_step(q, mu, tau, arr).q
    assert np.all(out >= 0)
    assert np.all(out <= q + arr + 1e-12)
    assert np.all(out >= q - mu * tau + arr - 1e-9)
