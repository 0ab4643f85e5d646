"""Self-check suite behind ``mwqsim validate``.

Each check draws its own random instances from a fixed seed, measures a
worst-case discrepancy and compares it with a tolerance.  The report is a
plain dict so the CLI can serialize it as canonical JSON.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import replace

import numpy as np

from . import rates as R
from .netmodel import ChannelModel, RngStreams, Topology, channel_step
from .policy import OracleConvergenceError, PolicyConfig, SensitivityUnavailable, equilibrium_oracle, kkt_sensitivities
from .sim import SimConfig, run_episode
from .stability import StabilityConstants, estimate_alpha, estimate_beta, queue_bound

log = logging.getLogger(__name__)


def random_topology(rng, max_links=6):
    """Random single-hop topology with 1..``max_links`` links."""
    L = int(rng.integers(1, max_links + 1))
    n_rx = int(rng.integers(1, L + 1))
    n_nodes = n_rx + int(rng.integers(1, L + 1))
    pairs = [(int(rng.integers(n_rx + 1, n_nodes + 1)), int(rng.integers(1, n_rx + 1))) for _ in range(L)]
    return Topology.from_pairs(n_nodes, pairs)


def random_channel(rng, L, h0=0.05):
    h = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) * np.sqrt(0.5)
    small = np.abs(h) < h0
    h[small] = h0 * np.exp(1j * np.angle(h[small]))
    return h


def _check(name, measured, tolerance, passed=None, **detail):
    ok = bool(measured <= tolerance) if passed is None else bool(passed)
    return {"name": name, "passed": ok, "measured": float(measured), "tolerance": float(tolerance), "detail": detail}


def check_capacity_region(rng, n=300):
    worst = 0.0
    for _ in range(n):
        topo = random_topology(rng)
        h = random_channel(rng, topo.L)
        p = rng.uniform(0, 10, topo.L)
        q = rng.integers(0, 5, topo.L).astype(float)
        mu = R.rate_allocation(p, h, q, topo).mu
        g = np.abs(h) ** 2
        for members in topo.rev_map.values():
            m = list(members)
            for r in range(1, len(m) + 1):
                for sub in itertools.combinations(m, r):
                    sub = list(sub)
                    worst = max(worst, mu[sub].sum() - np.log1p(g[sub] @ p[sub]))
    return _check("capacity_region_membership", max(worst, 0.0), 1e-9, instances=n)


def check_telescoping(rng, n=300):
    worst = 0.0
    for _ in range(n):
        topo = random_topology(rng)
        h = random_channel(rng, topo.L)
        p = rng.uniform(0, 10, topo.L)
        q = rng.uniform(0, 5, topo.L)
        mu = R.rate_allocation(p, h, q, topo).mu
        g = np.abs(h) ** 2
        for members in topo.rev_map.values():
            m = list(members)
            worst = max(worst, abs(mu[m].sum() - np.log1p(g[m] @ p[m])))
    return _check("sum_rate_telescoping", worst, 1e-12, instances=n)


def check_gradient(rng, n=60, grad_fn=None):
    grad_fn = grad_fn or R.grad_lagrangian
    worst = 0.0
    for _ in range(n):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L, 0.3)
        q = rng.uniform(1, 10, topo.L)
        V = rng.uniform(0.5, 5)
        p = rng.uniform(0.5, 5, topo.L)
        grad = grad_fn(p, h, q, topo, V)
        fd = np.empty(topo.L)
        for l in range(topo.L):
            e = np.zeros(topo.L)
            e[l] = 1e-6
            fd[l] = (R.lagrangian(p + e, h, q, topo, V) - R.lagrangian(p - e, h, q, topo, V)) / 2e-6
        worst = max(worst, float(np.max(np.abs(grad - fd)) / max(1.0, np.max(np.abs(fd)))))
    return _check("gradient_vs_finite_difference", worst, 1e-6, instances=n)


def check_hessian(rng, n=60):
    worst = 0.0
    for _ in range(n):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L, 0.3)
        q = rng.uniform(1, 10, topo.L)
        p = rng.uniform(0.5, 5, topo.L)
        H = R.hessian_lagrangian(p, h, q, topo)
        fd = np.empty_like(H)
        for l in range(topo.L):
            e = np.zeros(topo.L)
            e[l] = 1e-6
            fd[:, l] = (R.grad_lagrangian(p + e, h, q, topo, 1.0) - R.grad_lagrangian(p - e, h, q, topo, 1.0)) / 2e-6
        worst = max(worst, float(np.max(np.abs(H - fd)) / max(1.0, np.max(np.abs(fd)))))
    return _check("hessian_vs_finite_difference", worst, 1e-5, instances=n)


def check_concavity(rng, n=200):
    worst = -math.inf
    for _ in range(n):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L)
        q = rng.uniform(1, 10, topo.L)
        p = rng.uniform(0, 10, topo.L)
        worst = max(worst, float(np.linalg.eigvalsh(R.hessian_lagrangian(p, h, q, topo))[-1]))
    return _check("hessian_negative_semidefinite", worst, 1e-9, instances=n)


def check_single_link_optimum(rng, n=100):
    topo = Topology.from_pairs(2, [(1, 2)])
    worst = 0.0
    for _ in range(n):
        q = rng.uniform(0.1, 50)
        V = rng.uniform(0.1, 10)
        g = rng.uniform(0.01, 5)
        cfg = PolicyConfig(V=V, p_max=100.0)
        p, _ = equilibrium_oracle(np.array([np.sqrt(g)]), np.array([q]), topo, cfg)
        exact = min(max(q / V - 1.0 / g, 0.0), 100.0)
        worst = max(worst, abs(p[0] - exact))
    return _check("single_link_closed_form", worst, 1e-8, instances=n)


def check_oracle_kkt(rng, n=100):
    worst = 0.0
    for _ in range(n):
        topo = random_topology(rng)
        h = random_channel(rng, topo.L)
        q = rng.uniform(0, 20, topo.L)
        cfg = PolicyConfig(V=rng.uniform(0.5, 5), p_max=rng.choice([5.0, 50.0, np.inf]))
        p, lam = equilibrium_oracle(h, q, topo, cfg)
        grad = R.grad_lagrangian(p, h, q, topo, cfg.V)
        L = topo.L
        # grad + lam_low - lam_up = 0, complementary slackness, bounds
        resid = np.abs(grad + lam[:L] - lam[L:])
        resid = np.maximum(resid, np.abs(lam[:L] * p))
        if np.isfinite(cfg.p_max):
            resid = np.maximum(resid, np.abs(lam[L:] * (cfg.p_max - p)))
        worst = max(worst, float(np.max(resid)) / max(1.0, float(np.max(np.abs(q)))))
    return _check("equilibrium_kkt_residual", worst, 1e-7, instances=n)


def check_sensitivities(rng, n=20):
    worst = 0.0
    used = 0
    while used < n:
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L, 0.3)
        q = rng.uniform(2, 20, topo.L)
        if len(set(np.round(q, 6))) < topo.L:
            continue
        cfg = PolicyConfig(V=1.0)
        try:
            p, lam = equilibrium_oracle(h, q, topo, cfg)
            if np.any(p < 1e-3):
                continue
            phi_q, _ = kkt_sensitivities(p, lam, h, q, topo, cfg)
        except (OracleConvergenceError, SensitivityUnavailable):
            continue
        fd = np.empty((topo.L, topo.L))
        for m in range(topo.L):
            d = 1e-5 * q[m]
            e = np.zeros(topo.L)
            e[m] = d
            fd[:, m] = (equilibrium_oracle(h, q + e, topo, cfg)[0] - equilibrium_oracle(h, q - e, topo, cfg)[0]) / (2 * d)
        worst = max(worst, float(np.max(np.abs(phi_q - fd)) / max(1e-3, float(np.max(np.abs(fd))))))
        used += 1
    return _check("sensitivity_vs_finite_difference", worst, 1e-3, instances=n)


def check_contraction(rng, n=100, grad_fn=None):
    grad_fn = grad_fn or R.grad_lagrangian
    worst = -math.inf
    for _ in range(n):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L)
        q = rng.uniform(1, 10, topo.L)
        cfg = PolicyConfig(kappa=500.0, V=1.0, p_max=10.0)
        alpha = estimate_alpha(h, q, topo, cfg, 64, rng)
        p_star, _ = equilibrium_oracle(h, q, topo, cfg)
        p = rng.uniform(0, cfg.p_max, topo.L)
        pe = p - p_star
        lhs = cfg.kappa * pe @ grad_fn(p, h, q, topo, cfg.V)
        worst = max(worst, lhs + cfg.kappa * alpha * (pe @ pe))
    return _check("contraction_inequality", worst, 1e-6, instances=n)


def check_rate_lipschitz(rng, n=100):
    worst = -math.inf
    for _ in range(n):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L)
        q = rng.uniform(0, 10, topo.L)
        cfg = PolicyConfig(V=1.0, p_max=10.0)
        beta = estimate_beta(h, topo, cfg, 64, rng)
        p_star, _ = equilibrium_oracle(h, q, topo, cfg)
        p = rng.uniform(0, cfg.p_max, topo.L)
        mu = R.rate_allocation(p, h, q, topo).mu
        mu_star = R.rate_allocation(p_star, h, q, topo).mu
        gap = abs(np.max(np.abs(mu)) - np.max(np.abs(mu_star)))
        worst = max(worst, gap - np.log1p(beta * np.max(np.abs(p - p_star))))
    return _check("rate_gap_sandwich", worst, 1e-6, instances=n)


def check_channel_stationarity(seed, steps=200_000):
    model = ChannelModel(np.ones(4), 0.05, 1e-3)
    streams = RngStreams(seed, 4)
    noise = streams.channel_noise(steps)
    h = np.ones(4, dtype=complex)
    acc = np.zeros(4)
    floor = np.inf
    for n in noise:
        h = channel_step(h, model, n).h
        g = np.abs(h) ** 2
        acc += g
        floor = min(floor, float(np.min(np.abs(h))))
    mean = float(np.mean(acc / steps))
    # correlation time 2/(a tau) = 2000 steps leaves ~400 effective samples
    return _check("channel_mean_gain", abs(mean - 1.0), 0.15, floor_ok=floor >= 0.05 - 1e-15, mean_gain=mean,
                  passed=abs(mean - 1.0) <= 0.15 and floor >= 0.05 - 1e-15)  # fmt: skip


def check_arrivals(seed, steps=200_000):
    lam, tau = 20.0, 1e-3
    counts = RngStreams(seed, 1).arrival_counts(np.array([lam]), tau, steps)[:, 0]
    mean = counts.mean()
    tol = 4.0 * math.sqrt(lam * tau / steps)
    return _check("poisson_arrival_mean", abs(mean - lam * tau), tol, mean=float(mean))


def check_bound_arithmetic():
    c = StabilityConstants(a_A=1.0, lambda_max=1.0, gamma_q=0.0, gamma_h=0.0, alpha_bar0=0.0, gamma_bar0=0.125,
                           sigma_bar=1.0, g_bar=0.0, V=1.0, kappa=500.0)  # fmt: skip
    b = queue_bound(c, 4)
    return _check("queue_bound_arithmetic", abs(b - 20.125), 0.0, value=b)


def check_zero_arrivals(cfg):
    s, _ = run_episode(replace(cfg, lam=0.0, horizon=0.5, track_equilibrium=False))
    return _check("zero_arrivals_zero_queues", float(np.max(s.avg_queue)), 0.0)


def check_pure_birth(cfg):
    c = replace(cfg, policy="constant", const_power=0.0, horizon=5.0, warmup=0.0, track_equilibrium=False)
    _, ts = run_episode(c, timeseries_every=1)
    total = ts.q.sum(axis=1)
    rate = float(total[-1] - total[0]) / float(ts.t[-1] - ts.t[0])
    expected = float(np.sum(c.lam))
    se = math.sqrt(expected / float(ts.t[-1] - ts.t[0]))
    return _check("pure_birth_growth_rate", abs(rate - expected), 4.0 * se, rate=rate, expected=expected)


def check_determinism(cfg):
    c = replace(cfg, policy="compensated", horizon=1.0)
    a, _ = run_episode(c)
    b, _ = run_episode(c)
    same = repr(a.to_dict()) == repr(b.to_dict())  # repr treats nan as equal to nan
    return _check("seed_reproducibility", 0.0 if same else 1.0, 0.0)


def check_littles_law(cfg):
    c = replace(cfg, policy="oracle", horizon=20.0, track_equilibrium=False)
    s, _ = run_episode(c, tag_packets=True)
    rel = np.abs(s.mean_sojourn - s.avg_delay) / s.avg_delay
    return _check("littles_law", float(np.max(rel)), 0.05)


def run_checks(cfg=None, seed=0, grad_fn=None):
    """Run every check; returns ``{"passed": bool, "checks": [...]}``.

    ``grad_fn`` replaces :func:`mwqsim.rates.grad_lagrangian` in the
    gradient-dependent checks (used to confirm that a broken gradient is
    caught).
    """
    cfg = cfg or SimConfig()
    rng = np.random.default_rng(seed)
    suite = [
        ("capacity_region_membership", lambda: check_capacity_region(rng)),
        ("sum_rate_telescoping", lambda: check_telescoping(rng)),
        ("gradient_vs_finite_difference", lambda: check_gradient(rng, grad_fn=grad_fn)),
        ("hessian_vs_finite_difference", lambda: check_hessian(rng)),
        ("hessian_negative_semidefinite", lambda: check_concavity(rng)),
        ("single_link_closed_form", lambda: check_single_link_optimum(rng)),
        ("equilibrium_kkt_residual", lambda: check_oracle_kkt(rng)),
        ("sensitivity_vs_finite_difference", lambda: check_sensitivities(rng)),
        ("contraction_inequality", lambda: check_contraction(rng, grad_fn=grad_fn)),
        ("rate_gap_sandwich", lambda: check_rate_lipschitz(rng)),
        ("channel_mean_gain", lambda: check_channel_stationarity(seed)),
        ("poisson_arrival_mean", lambda: check_arrivals(seed)),
        ("queue_bound_arithmetic", check_bound_arithmetic),
        ("zero_arrivals_zero_queues", lambda: check_zero_arrivals(cfg)),
        ("pure_birth_growth_rate", lambda: check_pure_birth(cfg)),
        ("seed_reproducibility", lambda: check_determinism(cfg)),
        ("littles_law", lambda: check_littles_law(cfg)),
    ]
    checks = []
    for name, fn in suite:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed report
            res = {"name": name, "passed": False, "measured": math.nan,
                   "tolerance": math.nan, "detail": {"error": f"{type(exc).__name__}: {exc}"}}  # fmt: skip
        res["seconds"] = round(time.perf_counter() - t0, 3)
        log.info("%s: %s", res["name"], "pass" if res["passed"] else "FAIL")
        checks.append(res)
    return {"passed": all(c["passed"] for c in checks), "checks": checks}
