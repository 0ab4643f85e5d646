"""Network model: topology, reflected fading channel, Poisson arrivals, queues.

The channel of each link follows a complex Ornstein-Uhlenbeck process kept
above an amplitude floor ``h0``.  One step of length ``tau`` is

    h' = reflect(h (1 - a tau / 2) + sqrt(a tau) n),

with ``n`` a unit complex normal draw (variance 1/2 per component) and
``reflect`` the radial projection onto ``|h| >= h0``.  Without the floor the
stationary law is CN(0, 1), i.e. unit average gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K


class ModelIntegrityError(ValueError):
    """Raised when a state or a random draw is not finite."""


@dataclass(frozen=True)
class Topology:
    """Single-hop links grouped by receiving node.

    Parameters
    ----------
    node_count : int
        Number of nodes ``N``.
    links : sequence of (link_id, tx_node, rx_node)
        Link ids must be ``0..L-1``.
    """

    node_count: int
    links: tuple

    def __post_init__(self):
        links = tuple(tuple(int(v) for v in lk) for lk in self.links)
        object.__setattr__(self, "links", links)
        ids = sorted(lk[0] for lk in links)
        if ids != list(range(len(links))):
            raise ValueError("link ids must be 0..L-1 without gaps or repeats")
        if self.node_count <= 0:
            raise ValueError("node_count must be positive")
        for _, tx, rx in links:
            for node in (tx, rx):
                if node < 1 or node > self.node_count:
                    raise ValueError(f"node {node} outside 1..{self.node_count}")
            if tx == rx:
                raise ValueError("a link needs distinct endpoints")

    @classmethod
    def from_pairs(cls, node_count, pairs):
        """Build from ``[(tx, rx), ...]``; link ids follow list order."""
        return cls(node_count, tuple((i, tx, rx) for i, (tx, rx) in enumerate(pairs)))

    @property
    def L(self):
        return len(self.links)

    @property
    def rev_map(self):
        """Receiver node -> ascending tuple of incoming link ids."""
        out = {}
        for lid, _, rx in sorted(self.links):
            out.setdefault(rx, []).append(lid)
        return {rx: tuple(v) for rx, v in sorted(out.items())}

    @property
    def tx_map(self):
        """Transmitting node -> ascending tuple of outgoing link ids."""
        out = {}
        for lid, tx, _ in sorted(self.links):
            out.setdefault(tx, []).append(lid)
        return {tx: tuple(v) for tx, v in sorted(out.items())}

    def groups(self):
        """CSR encoding of ``rev_map`` used by the compiled kernels."""
        rev = self.rev_map
        ptr = np.zeros(len(rev) + 1, dtype=np.int64)
        flat = []
        for i, members in enumerate(rev.values()):
            flat.extend(members)
            ptr[i + 1] = len(flat)
        return ptr, np.asarray(flat, dtype=np.int64)


def default_topology():
    """Five nodes, six links; nodes 3 and 4 each receive three links.

    Transmitters are nodes 1, 2 and 5, each sending one link to node 3 and
    one to node 4.  Link ids are zero-based (link 1 is id 0): receiver 3
    gets {0, 1, 4} and receiver 4 gets {2, 3, 5}.
    """
    return Topology.from_pairs(5, [(1, 3), (2, 3), (1, 4), (2, 4), (5, 3), (5, 4)])


@dataclass(frozen=True)
class ChannelModel:
    a: np.ndarray
    h0: float = 0.05
    tau: float = 1e-3

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        object.__setattr__(self, "a", a)
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("fading rates must be finite and nonnegative")
        if not self.h0 > 0:
            raise ValueError("h0 must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass
class ChannelState:
    h: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=complex)

    @property
    def gain(self):
        return self.h.real**2 + self.h.imag**2


@dataclass(frozen=True)
class ArrivalModel:
    lam: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "lam", lam)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("arrival intensities must be finite and nonnegative")


@dataclass
class QueueState:
    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)


@dataclass
class RngStreams:
    """Independent per-link generators for channel noise and arrivals.

    Both families are spawned from one ``SeedSequence`` so equal master
    seeds give bit-identical draws, whatever the order of consumption
    across links.
    """

    master_seed: int
    n_links: int
    channel: list = field(init=False, repr=False)
    arrivals: list = field(init=False, repr=False)

    def __post_init__(self):
        children = np.random.SeedSequence(int(self.master_seed)).spawn(2 * self.n_links)
        self.channel = [np.random.default_rng(s) for s in children[: self.n_links]]
        self.arrivals = [np.random.default_rng(s) for s in children[self.n_links :]]

    def channel_noise(self, n_steps):
        """``(n_steps, L)`` unit complex normal draws."""
        out = np.empty((n_steps, self.n_links), dtype=complex)
        for l, rng in enumerate(self.channel):
            z = rng.standard_normal((n_steps, 2)) * np.sqrt(0.5)
            out[:, l] = z[:, 0] + 1j * z[:, 1]
        return out

    def arrival_counts(self, lam, tau, n_steps):
        out = np.empty((n_steps, self.n_links))
        for l, rng in enumerate(self.arrivals):
            out[:, l] = rng.poisson(lam[l] * tau, n_steps)
        return out


def channel_step(state, model, noise):
    """Advance every link's fading gain by one step of length ``model.tau``."""
    h = np.asarray(getattr(state, "h", state), dtype=complex)
    noise = np.asarray(noise, dtype=complex)
    if not np.all(np.isfinite(h)):
        raise ModelIntegrityError("channel state contains non-finite values")
    if not np.all(np.isfinite(noise)):
        raise ModelIntegrityError("channel noise contains non-finite values")
    a = np.broadcast_to(model.a, h.shape)
    z = h * (1.0 - 0.5 * a * model.tau) + np.sqrt(a * model.tau) * noise
    return ChannelState(np.array([K.reflect(complex(v), model.h0) for v in z]))


def channel_gain_path(state, model, noise):
    """Gains ``|h|^2`` along ``len(noise)`` consecutive :func:`channel_step` calls.

    Same arithmetic as repeated ``channel_step``, compiled; ``noise`` has
    shape ``(n_steps, L)``.
    """
    h = np.asarray(getattr(state, "h", state), dtype=complex)
    noise = np.asarray(noise, dtype=complex)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(noise))):
        raise ModelIntegrityError("channel state or noise contains non-finite values")
    a = np.ascontiguousarray(np.broadcast_to(model.a, h.shape), dtype=float)
    return K.channel_path(h.copy(), noise, a, float(model.tau), float(model.h0))


def arrivals_step(model, tau, rng):
    """Poisson packet counts for one slot.

    ``rng`` is either one generator or a list with one generator per link.
    """
    mean = model.lam * tau
    if isinstance(rng, (list, tuple)):
        return np.array([r.poisson(m) for r, m in zip(rng, mean)], dtype=np.int64)
    return rng.poisson(mean).astype(np.int64)


def queue_step(q, mu, tau, arrivals):
    """Serve ``mu * tau`` from each queue, then add the new arrivals."""
    q = np.asarray(getattr(q, "q", q), dtype=float)
    mu = np.asarray(getattr(mu, "mu", mu), dtype=float)
    return QueueState(np.maximum(q - mu * tau, 0.0) + np.asarray(arrivals, dtype=float))


def stationary_gain_samples(model, n_links, n_samples, rng, burn_in=None):
    """Draw approximately stationary channel vectors.

    Chains start from the unreflected stationary law CN(0, 1) and are run
    for ``burn_in`` steps (default: five correlation times 2/(a tau), capped at
    2000 steps) so the floor reflection settles in.
    """
    z = (rng.standard_normal((n_samples, n_links)) + 1j * rng.standard_normal((n_samples, n_links))) * np.sqrt(0.5)
    a = np.broadcast_to(model.a, (n_links,))
    if burn_in is None:
        at = float(np.min(a)) * model.tau
        burn_in = 2000 if at <= 0 else int(min(2000, np.ceil(10.0 / at)))
    h = _reflect_array(z, model.h0)
    decay = 1.0 - 0.5 * a * model.tau
    scale = np.sqrt(a * model.tau)
    for _ in range(burn_in):
        n = (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)) * np.sqrt(0.5)
        h = _reflect_array(h * decay + scale * n, model.h0)
    return h


def _reflect_array(z, h0):
    r = np.abs(z)
    out = z.copy()
    low = r < h0
    nz = low & (r > 0)
    out[nz] = z[nz] * (h0 / r[nz])
    out[low & (r == 0)] = h0
    return out
