"""Per-slot power control policies.

* ``mwq_gradient_step``: one projected gradient step on the max-weight
  objective (the conventional iteration).
* ``mwq_compensated_step``: the same step plus a first-order estimate of
  how far the optimum moved since the previous slot, obtained from the
  implicit function theorem applied to the KKT system.
* ``equilibrium_oracle``: the exact per-slot optimum.
* ``constant_power_policy`` and ``tdm_policy``: simple baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .rates import RateAllocation, _gain, _vec

log = logging.getLogger(__name__)


class OracleConvergenceError(RuntimeError):
    """The equilibrium solver hit its iteration cap.

    Attributes
    ----------
    best : ndarray
        Last iterate.
    residual : float
        Its KKT residual.
    """

    def __init__(self, best, residual, iterations):
        super().__init__(f"equilibrium solver stopped after {iterations} iterations, KKT residual {residual:.3e}")
        self.best = best
        self.residual = residual
        self.iterations = iterations


class SensitivityUnavailable(RuntimeError):
    """The reduced KKT Jacobian is too ill-conditioned to invert."""


@dataclass(frozen=True)
class PolicyConfig:
    """Parameters shared by all policies.

    ``rate_scale`` multiplies queue lengths to form the max-weight weights
    and multiplies the nats-per-second rates when queues are drained, i.e.
    it is a bandwidth in packets per nat.
    """

    kappa: float = 500.0
    V: float = 1.0
    iterations_per_slot: int = 1
    ridge: float = 1e-9
    oracle_tol: float = 1e-9
    oracle_max_iters: int = 200
    max_cond: float = 1e12
    p_max: float = np.inf
    rate_scale: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.V > 0:
            raise ValueError("V must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if not self.oracle_tol > 0:
            raise ValueError("oracle_tol must be positive")
        if self.iterations_per_slot < 1:
            raise ValueError("iterations_per_slot must be at least 1")
        if not self.p_max > 0:
            raise ValueError("p_max must be positive")


@dataclass
class PolicyState:
    p: np.ndarray
    p_star: np.ndarray | None = None
    multipliers: np.ndarray | None = None
    prev_h: np.ndarray | None = None
    prev_q: np.ndarray | None = None
    fallbacks: int = 0

    @property
    def p_e(self):
        if self.p_star is None:
            return None
        return self.p - self.p_star


def _problem(h, q, topo, cfg):
    g = _gain(h)
    w = cfg.rate_scale * _vec(q, "q")
    ptr, flat = topo.groups()
    perm = K.decoding_order(w, ptr, flat)
    return g, w, ptr, perm


def _advance(state, p, h, q, fallbacks=None):
    return replace(
        state,
        p=p,
        prev_h=np.array(getattr(h, "h", h), dtype=complex),
        prev_q=_vec(q, "q").copy(),
        fallbacks=state.fallbacks if fallbacks is None else fallbacks,
    )


def mwq_gradient_step(state, h, q, topo, cfg, tau):
    """``p <- clip(p + kappa tau grad L(p; h, q))``, repeated per slot."""
    g, w, ptr, perm = _problem(h, q, topo, cfg)
    p = np.asarray(state.p, dtype=float)
    step = cfg.kappa * tau
    for _ in range(cfg.iterations_per_slot):
        p = K.project_box(p + step * K.gradient(p, g, w, cfg.V, perm, ptr), cfg.p_max)
    return _advance(state, p, h, q)


def equilibrium_oracle(h, q, topo, cfg, p0=None):
    """Per-slot optimum and its box multipliers.

    Returns
    -------
    p_star : ndarray
    multipliers : ndarray
        ``2L`` entries, lower bounds first.
    """
    g, w, ptr, perm = _problem(h, q, topo, cfg)
    start = np.zeros(len(g)) if p0 is None else np.asarray(p0, dtype=float)
    p, res, iters, status = K.solve_equilibrium(
        start, g, w, cfg.V, cfg.p_max, perm, ptr, cfg.oracle_tol, cfg.oracle_max_iters, cfg.ridge
    )
    if status != K.OK:
        raise OracleConvergenceError(p, res, iters)
    return p, K.multipliers(p, K.gradient(p, g, w, cfg.V, perm, ptr), cfg.p_max)


def _sensitivity_blocks(p, pinned, h, q, topo, cfg):
    g, w, ptr, perm = _problem(h, q, topo, cfg)
    dp_dw, dp_dg, status = K.sensitivities_masked(
        np.asarray(p, dtype=float), g, w, pinned, perm, ptr, cfg.ridge, cfg.max_cond
    )
    if status != K.OK:
        raise SensitivityUnavailable("reduced KKT Jacobian is ill-conditioned")
    hc = np.asarray(getattr(h, "h", h), dtype=complex)
    phi_q = cfg.rate_scale * dp_dw
    # dg_m = 2 Re[conj(h_m) dh_m], so Re[phi_h dh] = dp/dg . dg
    phi_h = 2.0 * dp_dg * np.conj(hc)[None, :]
    return phi_q, phi_h


def kkt_sensitivities(p_star, multipliers, h, q, topo, cfg):
    """First-order response of the optimum to queue and channel changes.

    Returns ``(phi_q, phi_h)`` with ``dp* ~ phi_q dq + Re[phi_h dh]``.
    Coordinates on a bound with a strictly positive multiplier are held
    fixed (zero rows).
    """
    p = np.asarray(p_star, dtype=float)
    lam = np.asarray(multipliers, dtype=float)
    pinned = K.pinned_mask(p, lam, cfg.p_max)
    return _sensitivity_blocks(p, pinned, h, q, topo, cfg)


def mwq_compensated_step(state, h, q, topo, cfg, tau):
    """Gradient step plus the estimated drift of the optimum.

    The sensitivities are evaluated at the current iterate (the optimum is
    not known on-line) and linearized around the previous slot's channel
    and queues, the parameters the iterate was tracking; the active set is
    read off the gradient there.  Without a previous slot, or when the
    sensitivities are unavailable, this is the plain gradient step.
    """
    if state.prev_h is None or state.prev_q is None:
        return mwq_gradient_step(state, h, q, topo, cfg, tau)
    g, w, ptr, perm = _problem(h, q, topo, cfg)
    p = np.asarray(state.p, dtype=float)
    hc = np.asarray(getattr(h, "h", h), dtype=complex)
    qv = _vec(q, "q")
    dq = qv - state.prev_q
    dh = hc - state.prev_h
    comp = np.zeros_like(p)
    fallbacks = state.fallbacks
    if np.any(dq != 0) or np.any(dh != 0):
        g0, w0, _, perm0 = _problem(state.prev_h, state.prev_q, topo, cfg)
        lam = K.multipliers(p, K.gradient(p, g0, w0, cfg.V, perm0, ptr), cfg.p_max)
        try:
            pinned = K.pinned_mask(p, lam, cfg.p_max)
            phi_q, phi_h = _sensitivity_blocks(p, pinned, state.prev_h, state.prev_q, topo, cfg)
            comp = phi_q @ dq + (phi_h @ dh).real
            if not np.all(np.isfinite(comp)):
                raise SensitivityUnavailable("non-finite compensation")
        except SensitivityUnavailable as exc:
            log.debug("compensation skipped: %s", exc)
            comp = np.zeros_like(p)
            fallbacks += 1
    step = cfg.kappa * tau
    for it in range(cfg.iterations_per_slot):
        extra = comp if it == 0 else 0.0
        p = K.project_box(p + step * K.gradient(p, g, w, cfg.V, perm, ptr) + extra, cfg.p_max)
    return _advance(state, p, h, q, fallbacks)


def constant_power_policy(cfg, n_links, P_const):
    if not 0 <= P_const <= cfg.p_max:
        raise ValueError("constant power must lie in [0, p_max]")
    return np.full(n_links, float(P_const))


def tdm_policy(h, q, topo, cfg):
    """Activate only the link with the best single-link utility.

    Returns ``(p, rates, selected_link)``.
    """
    g = _gain(h)
    w = cfg.rate_scale * _vec(q, "q")
    p, sel = K.tdm_allocation(g, w, cfg.V, cfg.p_max)
    mu = np.zeros_like(p)
    mu[sel] = np.log1p(g[sel] * p[sel])
    rx = next(r for r, members in topo.rev_map.items() if sel in members)
    return p, RateAllocation(mu, {rx: (int(sel),)}), int(sel)


def tracking_error(state):
    """Sup-norm distance between the iterate and the optimum."""
    if state.p_star is None:
        raise ValueError("tracking error needs the optimum p_star")
    return float(np.max(np.abs(np.asarray(state.p) - np.asarray(state.p_star)), initial=0.0))
