"""SIC rate allocation and the max-weight objective on the power box.

Per receiver, links are decoded in order of decreasing queue weight (ties
go to the lower link id).  Link ``pi(k)`` then gets the increment

    mu_pi(k) = ln(1 + S_k) - ln(1 + S_{k-1}),   S_k = sum_{i<=k} g_pi(i) p_pi(i),

which is the polymatroid vertex maximizing ``sum_l q_l mu_l``.  The
objective ``sum_l w_l mu_l - V sum_l p_l`` uses weights ``w = rate_scale * q``;
``rate_scale`` converts nats to packets and defaults to 1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

MAX_GROUP_FOR_ENUMERATION = 20


class CapabilityError(RuntimeError):
    """The requested check is too large to enumerate."""


@dataclass
class RateAllocation:
    mu: np.ndarray
    order: dict  # receiver node -> link ids by decreasing weight


def _gain(h):
    h = np.asarray(getattr(h, "h", h))
    if np.iscomplexobj(h):
        return h.real**2 + h.imag**2
    return np.abs(h.astype(float)) ** 2


def _vec(x, attr):
    return np.asarray(getattr(x, attr, x), dtype=float)


def _setup(h, q, topo, rate_scale):
    g = _gain(h)
    w = rate_scale * _vec(q, "q")
    ptr, flat = topo.groups()
    perm = K.decoding_order(w, ptr, flat)
    return g, w, ptr, perm


def rate_allocation(p, h, q, topo, rate_scale=1.0):
    """Optimal SIC vertex of each receiver's capacity region."""
    p = _vec(p, "p")
    g, w, ptr, perm = _setup(h, q, topo, rate_scale)
    mu = K.rates(p, g, perm, ptr)
    order = {rx: tuple(int(l) for l in perm[ptr[i] : ptr[i + 1]]) for i, rx in enumerate(topo.rev_map)}
    return RateAllocation(mu, order)


def capacity_member(mu, p, h, topo, tol=1e-9):
    """True iff every subset sum at every receiver is within capacity + tol."""
    mu = _vec(mu, "mu")
    p = _vec(p, "p")
    g = _gain(h)
    for rx, members in topo.rev_map.items():
        if len(members) > MAX_GROUP_FOR_ENUMERATION:
            raise CapabilityError(
                f"receiver {rx} has {len(members)} links; subset enumeration is limited "
                f"to {MAX_GROUP_FOR_ENUMERATION}"
            )
        if np.any(mu[list(members)] < -tol):
            return False
        for r in range(1, len(members) + 1):
            for sub in itertools.combinations(members, r):
                sub = list(sub)
                if mu[sub].sum() > np.log1p(np.dot(g[sub], p[sub])) + tol:
                    return False
    return True


def lagrangian(p, h, q, topo, V, rate_scale=1.0):
    p = _vec(p, "p")
    g, w, ptr, perm = _setup(h, q, topo, rate_scale)
    return float(K.lagrangian(p, g, w, float(V), perm, ptr))


def grad_lagrangian(p, h, q, topo, V, rate_scale=1.0):
    """Analytic gradient in ``p`` with the decoding order frozen at ``q``."""
    p = _vec(p, "p")
    g, w, ptr, perm = _setup(h, q, topo, rate_scale)
    return K.gradient(p, g, w, float(V), perm, ptr)


def hessian_lagrangian(p, h, q, topo, V=None, rate_scale=1.0):
    """Analytic Hessian in ``p`` (``V`` does not enter; kept for symmetry)."""
    p = _vec(p, "p")
    g, w, ptr, perm = _setup(h, q, topo, rate_scale)
    return K.hessian(p, g, w, perm, ptr)


def project_box(p_raw, p_max):
    return K.project_box(np.asarray(p_raw, dtype=float), float(p_max))
