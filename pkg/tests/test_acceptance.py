"""Acceptance tests, one per criterion.

Each test prints a single ``[acceptance NN] ... PASS/FAIL`` line (outside
pytest's capture) before asserting, so a full run doubles as a report.
Tolerances, instance counts and runtime limits are the pinned values.
"""

import csv
import itertools
import math
import os
import time

import numpy as np
import pytest
from scipy import stats

from mwqsim import cli
from mwqsim import rates as R
from mwqsim.config import BOUND_A_GRID, GAMMA_SCENARIOS
from mwqsim.netmodel import ChannelModel, RngStreams, Topology, channel_gain_path, stationary_gain_samples
from mwqsim.policy import OracleConvergenceError, PolicyConfig, SensitivityUnavailable, equilibrium_oracle, kkt_sensitivities
from mwqsim.stability import (
    StabilityConstants,
    bound_sweep,
    estimate_alpha,
    estimate_beta,
    gamma_bar0_samples,
    independent_links,
    queue_bound,
)
from mwqsim.validate import random_channel, random_topology

SEED = 20240601


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {number:02d}] {title}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


# --- 1: capacity region ------------------------------------------------------


def test_rates_lie_in_capacity_region(capsys):
    rng = np.random.default_rng(SEED + 1)
    t0 = time.perf_counter()
    worst_subset = 0.0
    worst_sum = 0.0
    for _ in range(1000):
        topo = random_topology(rng, 6)
        h = random_channel(rng, topo.L)
        p = rng.uniform(0, 10, topo.L)
        q = rng.integers(0, 5, topo.L).astype(float)  # integer queues exercise ties
        mu = R.rate_allocation(p, h, q, topo).mu
        g = np.abs(h) ** 2
        for members in topo.rev_map.values():
            m = list(members)
            for r in range(1, len(m) + 1):
                for sub in itertools.combinations(m, r):
                    sub = list(sub)
                    worst_subset = max(worst_subset, mu[sub].sum() - math.log1p(g[sub] @ p[sub]))
            worst_sum = max(worst_sum, abs(mu[m].sum() - math.log1p(g[m] @ p[m])))
    elapsed = time.perf_counter() - t0
    ok = worst_subset <= 1e-9 and worst_sum <= 1e-12 and elapsed < 5
    report(capsys, 1, "capacity region membership", ok,
           f"subset excess {worst_subset:.2e}, telescoping {worst_sum:.2e}, {elapsed:.1f} s")  # fmt: skip


# --- 2: gradient and Hessian -------------------------------------------------


def test_gradient_and_hessian(capsys):
    rng = np.random.default_rng(SEED + 2)
    t0 = time.perf_counter()
    worst_rel = 0.0
    worst_eig = -math.inf
    for _ in range(100):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L, 0.2)
        q = rng.uniform(1, 10, topo.L)
        V = rng.uniform(0.5, 5)
        p = rng.uniform(0.2, 5, topo.L)
        grad = R.grad_lagrangian(p, h, q, topo, V)
        fd = np.empty(topo.L)
        for l in range(topo.L):
            e = np.zeros(topo.L)
            e[l] = 1e-6
            fd[l] = (R.lagrangian(p + e, h, q, topo, V) - R.lagrangian(p - e, h, q, topo, V)) / 2e-6
        worst_rel = max(worst_rel, float(np.max(np.abs(grad - fd)) / np.max(np.abs(fd))))
        p_any = rng.uniform(0, 10, topo.L)
        worst_eig = max(worst_eig, float(np.linalg.eigvalsh(R.hessian_lagrangian(p_any, h, q, topo))[-1]))
    elapsed = time.perf_counter() - t0
    ok = worst_rel < 1e-6 and worst_eig <= 1e-9 and elapsed < 10
    report(capsys, 2, "gradient and Hessian", ok,
           f"gradient rel err {worst_rel:.2e}, largest Hessian eigenvalue {worst_eig:.2e}, {elapsed:.1f} s")  # fmt: skip


# --- 3: single-link closed form ----------------------------------------------


def test_single_link_closed_form(capsys):
    rng = np.random.default_rng(SEED + 3)
    topo = Topology.from_pairs(2, [(1, 2)])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        q = rng.uniform(0.1, 50)
        V = rng.uniform(0.1, 10)
        g = rng.uniform(0.01, 5)
        p_max = 100.0
        p, _ = equilibrium_oracle(np.array([math.sqrt(g) + 0j]), np.array([q]), topo, PolicyConfig(V=V, p_max=p_max))
        worst = max(worst, abs(p[0] - min(max(q / V - 1 / g, 0.0), p_max)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5
    report(capsys, 3, "single-link closed form", ok, f"max abs err {worst:.2e}, {elapsed:.1f} s")


# --- 4: brute-force grid -----------------------------------------------------


def _two_link_objective(P1, P2, g, q, V):
    # one receiver; the larger queue is decoded last and sees no interference
    hi = 0 if q[0] >= q[1] else 1
    P = (P1, P2)
    mu_hi = np.log1p(g[hi] * P[hi])
    mu_lo = np.log1p(g[1 - hi] * P[1 - hi] / (1 + g[hi] * P[hi]))
    return q[hi] * mu_hi + q[1 - hi] * mu_lo - V * (P1 + P2)


def test_oracle_beats_brute_force_grid(capsys):
    rng = np.random.default_rng(SEED + 4)
    topo = Topology.from_pairs(3, [(1, 3), (2, 3)])
    p_max = 10.0
    axis = np.linspace(0, p_max, 400)
    P1, P2 = np.meshgrid(axis, axis, indexing="ij")
    t0 = time.perf_counter()
    worst = -math.inf
    for _ in range(50):
        h = random_channel(rng, 2, 0.1)
        g = np.abs(h) ** 2
        q = rng.uniform(0, 20, 2)
        V = rng.uniform(0.2, 5)
        grid = _two_link_objective(P1, P2, g, q, V)
        # the vectorized grid agrees with the library objective
        i, j = np.unravel_index(np.argmax(grid), grid.shape)
        ref = R.lagrangian(np.array([axis[i], axis[j]]), h, q, topo, V)
        assert abs(ref - grid[i, j]) <= 1e-9 * max(1.0, abs(ref))
        p, _ = equilibrium_oracle(h, q, topo, PolicyConfig(V=V, p_max=p_max))
        worst = max(worst, float(grid.max()) - R.lagrangian(p, h, q, topo, V))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    report(capsys, 4, "oracle versus 400x400 grid", ok, f"largest grid excess {worst:.2e}, {elapsed:.1f} s")


# --- 5: sensitivities --------------------------------------------------------


def test_sensitivities_match_finite_differences(capsys):
    rng = np.random.default_rng(SEED + 5)
    t0 = time.perf_counter()
    worst_q = worst_h = 0.0
    interior = pinned_instances = pinned_rows = 0
    pinned_nonzero = 0
    attempts = 0
    while (interior < 30 or pinned_instances < 10) and attempts < 2000:
        attempts += 1
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L, 0.1)
        q = rng.uniform(1, 20, topo.L)
        if len(set(np.round(q, 6))) < topo.L:
            continue
        cfg = PolicyConfig(V=1.0, p_max=5.0)
        try:
            p, lam = equilibrium_oracle(h, q, topo, cfg)
            phi_q, phi_h = kkt_sensitivities(p, lam, h, q, topo, cfg)
        except (OracleConvergenceError, SensitivityUnavailable):
            continue
        L = topo.L
        at_bound = (lam[:L] > 1e-6) & (p == 0.0) | (lam[L:] > 1e-6) & (p == cfg.p_max)
        if at_bound.any():
            pinned_instances += 1
            pinned_rows += int(at_bound.sum())
            pinned_nonzero += int(np.count_nonzero(phi_q[at_bound]) + np.count_nonzero(phi_h[at_bound]))
            continue
        if interior >= 30 or np.any(p < 1e-3) or np.any(p > cfg.p_max - 1e-3):
            continue
        fd_q = np.empty((L, L))
        fd_re = np.empty((L, L))
        fd_im = np.empty((L, L))
        for m in range(L):
            e = np.zeros(L)
            e[m] = d = 1e-5 * q[m]
            fd_q[:, m] = (equilibrium_oracle(h, q + e, topo, cfg)[0] - equilibrium_oracle(h, q - e, topo, cfg)[0]) / (2 * d)
            d = 1e-5 * abs(h[m])
            for fd, direction in ((fd_re, 1.0), (fd_im, 1j)):
                eh = np.zeros(L, dtype=complex)
                eh[m] = d * direction
                fd[:, m] = (equilibrium_oracle(h + eh, q, topo, cfg)[0] - equilibrium_oracle(h - eh, q, topo, cfg)[0]) / (2 * d)
        # dp = Re[phi_h dh]: a real step reads Re phi_h, an imaginary one -Im phi_h
        err_h = max(np.max(np.abs(np.real(phi_h) - fd_re)), np.max(np.abs(-np.imag(phi_h) - fd_im)))
        worst_q = max(worst_q, float(np.max(np.abs(phi_q - fd_q)) / np.max(np.abs(fd_q))))
        worst_h = max(worst_h, float(err_h / max(np.max(np.abs(fd_re)), np.max(np.abs(fd_im)))))
        interior += 1
    elapsed = time.perf_counter() - t0
    ok = (interior == 30 and pinned_instances >= 10 and worst_q < 1e-3 and worst_h < 1e-3
          and pinned_nonzero == 0 and elapsed < 60)  # fmt: skip
    report(capsys, 5, "KKT sensitivities", ok,
           f"{interior} interior: phi_q rel err {worst_q:.2e}, phi_h rel err {worst_h:.2e}; "
           f"{pinned_rows} pinned rows in {pinned_instances} instances, {pinned_nonzero} nonzero entries; {elapsed:.1f} s")  # fmt: skip


# --- 6: contraction ----------------------------------------------------------


def test_contraction_inequality(capsys):
    rng = np.random.default_rng(SEED + 6)
    cfg = PolicyConfig(kappa=500.0, V=1.0, p_max=10.0)
    t0 = time.perf_counter()
    worst = -math.inf
    for _ in range(500):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L)
        q = rng.uniform(1, 10, topo.L)
        alpha = estimate_alpha(h, q, topo, cfg, 64, rng)
        p_star, _ = equilibrium_oracle(h, q, topo, cfg)
        pe = rng.uniform(0, cfg.p_max, topo.L) - p_star
        lhs = pe @ (cfg.kappa * R.grad_lagrangian(p_star + pe, h, q, topo, cfg.V))
        worst = max(worst, lhs + cfg.kappa * alpha * (pe @ pe))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30
    report(capsys, 6, "contraction inequality", ok, f"largest violation {worst:.2e}, {elapsed:.1f} s")


# --- 7: rate sandwich --------------------------------------------------------


def test_rate_gap_sandwich(capsys):
    rng = np.random.default_rng(SEED + 7)
    cfg = PolicyConfig(V=1.0, p_max=10.0)
    t0 = time.perf_counter()
    worst = -math.inf
    for _ in range(500):
        topo = random_topology(rng, 4)
        h = random_channel(rng, topo.L)
        q = rng.uniform(0, 10, topo.L)
        beta = estimate_beta(h, topo, cfg, 64, rng)
        p_star, _ = equilibrium_oracle(h, q, topo, cfg)
        p = rng.uniform(0, cfg.p_max, topo.L)
        mu = R.rate_allocation(p, h, q, topo).mu
        mu_star = R.rate_allocation(p_star, h, q, topo).mu
        gap = abs(np.max(np.abs(mu)) - np.max(np.abs(mu_star)))
        worst = max(worst, gap - math.log1p(beta * np.max(np.abs(p - p_star))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30
    report(capsys, 7, "rate gap sandwich", ok, f"largest violation {worst:.2e}, {elapsed:.1f} s")


# --- 8: channel and arrival statistics ---------------------------------------


def test_channel_and_arrival_statistics(capsys):
    t0 = time.perf_counter()
    L, steps, batches = 4, 10**6, 50
    model = ChannelModel(np.ones(L), 0.05, 1e-3)
    rng = np.random.default_rng(SEED + 8)
    h_init = stationary_gain_samples(model, L, 1, rng)[0]
    noise = RngStreams(SEED + 8, L).channel_noise(steps)
    gains = channel_gain_path(h_init, model, noise)
    # batch means: 20 000-step batches span ~20 correlation times at a = 1
    means = gains.reshape(batches, steps // batches, L).mean(axis=(1, 2))
    half = stats.t.ppf(0.995, batches - 1) * means.std(ddof=1) / math.sqrt(batches)
    gain_ok = abs(means.mean() - 1.0) <= half and gains.min() >= 0.05**2 * (1 - 1e-12)

    lam, tau = 20.0, 1e-3
    counts = RngStreams(SEED + 8, 1).arrival_counts(np.array([lam]), tau, steps)[:, 0].astype(float)
    z = stats.norm.ppf(0.995)
    mean, var = counts.mean(), counts.var(ddof=1)
    m4 = np.mean((counts - mean) ** 4)
    mean_half = z * math.sqrt(var / steps)
    var_half = z * math.sqrt((m4 - var**2) / steps)
    arrivals_ok = abs(mean - lam * tau) <= mean_half and abs(var - lam * tau) <= var_half
    elapsed = time.perf_counter() - t0
    ok = gain_ok and arrivals_ok and elapsed < 30
    report(capsys, 8, "channel and arrival statistics", ok,
           f"E|h|^2 {means.mean():.4f} +- {half:.4f}; arrivals mean {mean:.5f} +- {mean_half:.5f}, "
           f"var {var:.5f} +- {var_half:.5f} vs {lam * tau}; {elapsed:.1f} s")  # fmt: skip


# --- 9: queue bound ----------------------------------------------------------


def test_queue_bound_values_and_shape(capsys):
    t0 = time.perf_counter()
    gamma_bar0 = float(gamma_bar0_samples(np.array([1.0]), 0.0, 500.0, 1.0)[0])
    c = StabilityConstants(a_A=1.0, lambda_max=1.0, gamma_q=0.0, gamma_h=0.0, alpha_bar0=0.0, gamma_bar0=gamma_bar0,
                           sigma_bar=1.0, g_bar=0.0, kappa=500.0, V=1.0)  # fmt: skip
    direct = queue_bound(c, 4)
    cfg = PolicyConfig(kappa=500.0, V=1.0, p_max=1.0)
    topo = independent_links(4)
    pinned = bound_sweep([1.0], [(0.0, 0.0)], topo, 1.0, cfg, 0.3, fixed={"sigma_bar": 1.0, "g_bar": 0.0})[0]["bound"]
    exact_ok = direct == 20.125 and pinned == 20.125

    rows = bound_sweep(BOUND_A_GRID, GAMMA_SCENARIOS, topo, 1.0, cfg, 0.3, sample_count=200, seed=SEED)
    b = {(r["a_A"], r["gamma_h"], r["gamma_q"]): r["bound"] for r in rows}
    monotone = all(
        b[(a, 0.0, 0.0)] < b[(a, 0.05, 0.0)] < b[(a, 0.1, 0.0)] and b[(a, 0.0, 0.0)] < b[(a, 0.0, 0.05)] < b[(a, 0.0, 0.1)]
        for a in BOUND_A_GRID
    )
    valley = True
    for gh, gq in GAMMA_SCENARIOS:
        curve = np.array([b[(a, gh, gq)] for a in BOUND_A_GRID])
        k = int(np.argmin(curve))
        valley &= 0 < k < len(curve) - 1
        valley &= bool(np.all(np.diff(curve[: k + 1]) < 0) and np.all(np.diff(curve[k:]) > 0))
    elapsed = time.perf_counter() - t0
    ok = exact_ok and monotone and valley and elapsed < 120
    base = [b[(a, 0.0, 0.0)] for a in BOUND_A_GRID]
    report(capsys, 9, "queue bound", ok,
           f"hand value {direct!r}/{pinned!r}; monotone in gammas {monotone}; valley in a_A {valley} "
           f"(min {min(base):.1f} at a_A={BOUND_A_GRID[int(np.argmin(base))]}); {elapsed:.1f} s")  # fmt: skip


# --- 10-12: simulation sweeps through the command line -----------------------

FADING_CONFIG = """\
[run]
horizon = 60
n_seeds = 10
a_grid = 50, 100, 200, 400
policies = mwq, compensated, oracle
"""

TRADEOFF_CONFIG = """\
[channel]
a = 200

[run]
horizon = 60
n_seeds = 10
v_grid = 10, 20, 40, 80, 160, 320, 640, 1280, 2560
target_delay = 2
policies = mwq, compensated, oracle
"""


def _cli_run(workdir, command, config_text):
    """Run one command with a relative output directory so reruns compare byte for byte."""
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "experiment.ini").write_text(config_text)
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        t0 = time.perf_counter()
        code = cli.main([command, "--config", "experiment.ini", "--out", "results"])
        elapsed = time.perf_counter() - t0
    finally:
        os.chdir(cwd)
    return code, workdir / "results", elapsed


def _read(path):
    with open(path) as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def fading_run(tmp_path_factory):
    return _cli_run(tmp_path_factory.mktemp("fading") / "first", "sweep-fading", FADING_CONFIG)


@pytest.fixture(scope="module")
def tradeoff_run(tmp_path_factory):
    return _cli_run(tmp_path_factory.mktemp("tradeoff") / "first", "sweep-tradeoff", TRADEOFF_CONFIG)


def test_fading_sweep_properties(capsys, fading_run):
    code, out, elapsed = fading_run
    summary = _read(out / "fading_summary.csv")
    err = {(r["policy"], float(r["a_A"])): float(r["tracking_error"]) for r in summary}
    grid = (50.0, 100.0, 200.0, 400.0)
    conv = [err[("mwq", a)] for a in grid]
    comp = [err[("compensated", a)] for a in grid]
    oracle_cells = [float(r["tracking_error"]) for r in _read(out / "fading.csv") if r["policy"] == "oracle"]
    a_ok = all(x < y for x, y in zip(conv, conv[1:]))
    b_ok = all(c < 0.7 * m for c, m in zip(comp, conv))
    c_ok = len(oracle_cells) == 40 and all(e == 0.0 for e in oracle_cells)
    ok = a_ok and b_ok and c_ok and elapsed < 600
    report(capsys, 10, "tracking error versus fading rate", ok,
           f"(a) conventional increasing {a_ok}: {[round(x, 3) for x in conv]}; "
           f"(b) compensated < 0.7x conventional {b_ok}: {[float(f'{x:.3g}') for x in comp]}; "
           f"(c) oracle zero {c_ok}; exit {code}; {elapsed:.0f} s")  # fmt: skip


def test_power_delay_tradeoff_properties(capsys, tradeoff_run):
    code, out, elapsed = tradeoff_run
    matched = {r["policy"]: r for r in _read(out / "matched_delay.csv")}
    power = {k: float(v["power_db"]) for k, v in matched.items()}
    order_ok = power["oracle"] <= power["compensated"] <= power["mwq"]
    gap_conv = power["mwq"] - power["oracle"]
    gap_comp = power["compensated"] - power["oracle"]
    ok = order_ok and gap_conv >= 1.0 and gap_comp <= 1.5 and elapsed < 900
    delays = {k: v["nearest_delay"] for k, v in matched.items()}
    report(capsys, 11, "power at matched delay", ok,
           f"power dB oracle {power['oracle']:.2f}, compensated {power['compensated']:.2f}, conventional {power['mwq']:.2f}; "
           f"ordering {order_ok}; conventional gap {gap_conv:.2f} dB (>= 1.0); compensated gap {gap_comp:.2f} dB (<= 1.5); "
           f"nearest grid delays {delays}; exit {code}; {elapsed:.0f} s")  # fmt: skip


def test_sweeps_are_byte_identical_on_rerun(capsys, tmp_path, fading_run, tradeoff_run):
    mismatched = []
    compared = 0
    for (_, first, _), command, text in (
        (fading_run, "sweep-fading", FADING_CONFIG),
        (tradeoff_run, "sweep-tradeoff", TRADEOFF_CONFIG),
    ):
        _, second, _ = _cli_run(tmp_path / command, command, text)
        names = sorted(p.name for p in first.iterdir())
        if names != sorted(p.name for p in second.iterdir()):
            mismatched.append(f"{command}: file sets differ")
        for name in names:
            compared += 1
            if (first / name).read_bytes() != (second / name).read_bytes():
                mismatched.append(f"{command}/{name}")
    ok = not mismatched and compared > 0
    report(capsys, 12, "deterministic reruns", ok, f"{compared} files compared, mismatches: {mismatched or 'none'}")
