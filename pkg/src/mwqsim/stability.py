"""Constants of the Lyapunov stability analysis and the average queue bound.

Everything defined in the analysis as a sup or inf over a continuous set
(concavity modulus, Lipschitz constant, equilibrium sensitivities, the
auxiliary function ``g``) is estimated numerically here: sampling followed
by a local refinement.  Expectations over the stationary channel are Monte
Carlo means reported with 95% normal confidence half-widths.

Norms are sup-norms unless stated otherwise.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from . import _kernels as K
from .netmodel import ChannelModel, Topology, stationary_gain_samples
from .policy import OracleConvergenceError, SensitivityUnavailable, equilibrium_oracle, kkt_sensitivities
from .rates import _gain, _vec

Z95 = 1.959963984540054


class NotApplicable(ValueError):
    """The estimate's hypothesis does not hold at this input."""


class MissingConstantsError(ValueError):
    def __init__(self, missing):
        super().__init__("missing stability constants: " + ", ".join(missing))
        self.missing = tuple(missing)


@dataclass
class MonteCarloMean:
    mean: float
    half_width: float
    n: int

    @classmethod
    def of(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.size
        if n == 0:
            return cls(math.nan, math.nan, 0)
        if not np.all(np.isfinite(x)):
            return cls(math.inf, math.inf, n)
        # compensated summation keeps the mean independent of sample order
        mean = math.fsum(x.tolist()) / n
        sd = float(np.std(x, ddof=1)) if n > 1 else math.inf
        return cls(mean, Z95 * sd / math.sqrt(n), n)


@dataclass
class StabilityConstants:
    """Inputs of the average queue bound.

    Fields left as ``None`` are reported by :func:`queue_bound`.
    """

    a_A: float | None = None
    lambda_max: float | None = None
    gamma_q: float | None = None
    gamma_h: float | None = None
    alpha_bar0: float | None = None
    gamma_bar0: float | None = None
    sigma_bar: float | None = None
    g_bar: float | None = None
    V: float | None = None
    kappa: float | None = None
    alpha: float | None = None
    beta: float | None = None


def _box_samples(n_links, p_max, sample_count, rng):
    if not np.isfinite(p_max):
        raise ValueError("sampling over the power box needs a finite p_max")
    m = 2 ** max(1, math.ceil(math.log2(max(sample_count, 2))))
    sob = qmc.Sobol(n_links, scramble=True, seed=rng).random(m) * p_max
    if n_links <= 12:
        verts = np.array(list(itertools.product((0.0, p_max), repeat=n_links)))
        sob = np.vstack([verts, sob])
    return sob


def estimate_alpha(h, q, topo, cfg, sample_count=256, rng=None):
    """Uniform concavity modulus of the objective over the power box.

    ``alpha = min_p (-largest eigenvalue of the Hessian)``, evaluated on a
    scrambled Sobol set plus all box vertices, then refined locally.
    Requires every queue to be at least one packet.
    """
    qv = _vec(q, "q")
    if np.any(qv < 1):
        raise NotApplicable("concavity modulus needs every queue >= 1")
    rng = np.random.default_rng(rng)
    g = _gain(h)
    w = cfg.rate_scale * qv
    ptr, flat = topo.groups()
    perm = K.decoding_order(w, ptr, flat)

    def modulus(p):
        H = K.hessian(np.clip(p, 0.0, cfg.p_max), g, w, perm, ptr)
        return -np.linalg.eigvalsh(H)[-1]

    pts = _box_samples(topo.L, cfg.p_max, sample_count, rng)
    vals = np.array([modulus(p) for p in pts])
    best = int(np.argmin(vals))
    res = optimize.minimize(
        modulus, pts[best], method="L-BFGS-B", bounds=[(0.0, cfg.p_max)] * topo.L, options={"maxiter": 50}
    )
    return float(min(vals[best], res.fun))


def estimate_beta(h, topo, cfg, sample_count=256, rng=None):
    """Lipschitz constant (sup-norm in ``p``) of the SIC stage ratios.

    Stage ``k`` of a receiver has ratio ``rho_k = (1 + S_k) / (1 + S_{k-1})``
    for some decoding order.  The estimate is the largest of (a) difference
    quotients over sampled pairs and (b) the 1-norm of the analytic gradient
    at sampled points, over every decoding order (sampled when a receiver
    has more than seven links).
    """
    rng = np.random.default_rng(rng)
    g = _gain(h)
    pts = _box_samples(topo.L, cfg.p_max, sample_count, rng)
    best = 0.0
    for members in topo.rev_map.values():
        members = list(members)
        if len(members) <= 7:
            orders = itertools.permutations(members)
        else:
            orders = (tuple(rng.permutation(members)) for _ in range(5040))
        for order in orders:
            order = list(order)
            gs = g[order]
            P = pts[:, order]
            S = np.cumsum(gs * P, axis=1)
            Sprev = np.hstack([np.zeros((len(P), 1)), S[:, :-1]])
            rho = (1.0 + S) / (1.0 + Sprev)
            # analytic gradient 1-norm of each stage
            grad_own = gs[None, :] / (1.0 + Sprev)
            cum_g = np.hstack([np.zeros(1), np.cumsum(gs)[:-1]])
            grad_prev = gs[None, :] * P * cum_g[None, :] / (1.0 + Sprev) ** 2
            best = max(best, float(np.max(grad_own + grad_prev)))
            # difference quotients between consecutive samples
            dp = np.max(np.abs(np.diff(P, axis=0)), axis=1)
            ok = dp > 0
            if np.any(ok):
                quot = np.abs(np.diff(rho, axis=0))[ok] / dp[ok][:, None]
                best = max(best, float(np.max(quot)))
    return best


def estimate_gammas(topo, cfg, sample_count, rng, channel=None, q_range=(0.0, 20.0), rel_step=1e-6):
    """Empirical sup of the equilibrium sensitivities.

    Samples ``h`` from the stationary channel and ``q`` uniformly in
    ``q_range``; differentiates the equilibrium by central differences.

    Returns
    -------
    gamma_q, gamma_h : float
    skipped : int
        Samples dropped because the solver did not converge.
    """
    rng = np.random.default_rng(rng)
    L = topo.L
    channel = channel or ChannelModel(np.ones(L))
    H = stationary_gain_samples(channel, L, sample_count, rng)
    Q = rng.uniform(q_range[0], q_range[1], size=(sample_count, L))
    gq = 0.0
    gh = 0.0
    skipped = 0
    for h, q in zip(H, Q):
        try:
            Jq = np.empty((L, L))
            Jre = np.empty((L, L))
            Jim = np.empty((L, L))
            for m in range(L):
                d = rel_step * max(1.0, q[m])
                e = np.zeros(L)
                e[m] = d
                Jq[:, m] = (_opt(h, q + e, topo, cfg) - _opt(h, np.maximum(q - e, 0), topo, cfg)) / (
                    d + min(d, q[m])
                )
                dh = rel_step * max(1.0, abs(h[m]))
                e = np.zeros(L, dtype=complex)
                e[m] = dh
                Jre[:, m] = (_opt(h + e, q, topo, cfg) - _opt(h - e, q, topo, cfg)) / (2 * dh)
                Jim[:, m] = (_opt(h + 1j * e, q, topo, cfg) - _opt(h - 1j * e, q, topo, cfg)) / (2 * dh)
        except OracleConvergenceError:
            skipped += 1
            continue
        gq = max(gq, float(np.max(np.sum(np.abs(Jq), axis=1))))
        # dp = Re[phi dh] with phi = Jre - i Jim
        gh = max(gh, float(np.max(np.sum(np.abs(Jre - 1j * Jim), axis=1))))
    return gq, gh, skipped


def _opt(h, q, topo, cfg):
    return equilibrium_oracle(h, q, topo, cfg)[0]


def _psi(h, q, topo, cfg):
    """Sensitivity matrices at the optimum, zero where they do not exist."""
    p_star, lam = equilibrium_oracle(h, q, topo, cfg)
    try:
        phi_q, phi_h = kkt_sensitivities(p_star, lam, h, q, topo, cfg)
    except SensitivityUnavailable:
        phi_q = np.zeros((topo.L, topo.L))
        phi_h = np.zeros((topo.L, topo.L), dtype=complex)
    return p_star, phi_q, phi_h


def drift_constant(L, a_A, gamma_h, gamma_q, lambda_max):
    """``L (2 a_A (1 + gamma_h^2) + gamma_q^2 + lambda_max)``."""
    return L * (2.0 * a_A * (1.0 + gamma_h**2) + gamma_q**2 + lambda_max)


def lyapunov_drift_bound(p_e, h, q, constants, topo, cfg, channel, lam):
    """Upper bound on the generator of ``|p_e|^2 + |h|^2 + |q|^2``.

    Evaluates the bound term by term at the given state with the actual
    sensitivities at the optimum; the trace of the diffusion terms is
    replaced by its worst case under the ``gamma`` bounds.
    """
    hc = np.asarray(getattr(h, "h", h), dtype=complex)
    qv = _vec(q, "q")
    pe = np.asarray(p_e, dtype=float)
    lam = np.asarray(lam, dtype=float)
    a = np.broadcast_to(channel.a, (topo.L,)).astype(float)
    p_star, psi_q, psi_h = _psi(hc, qv, topo, cfg)
    p = p_star + pe
    g = _gain(hc)
    w = cfg.rate_scale * qv
    ptr, flat = topo.groups()
    perm = K.decoding_order(w, ptr, flat)
    f = cfg.kappa * K.gradient(p, g, w, cfg.V, perm, ptr)
    mu = cfg.rate_scale * K.rates(np.maximum(p, 0.0), g, perm, ptr)
    c = drift_constant(topo.L, float(a.max()), constants.gamma_h, constants.gamma_q, float(lam.max(initial=0.0)))
    out = 2.0 * pe @ f
    out -= 2.0 * pe @ (psi_q @ mu)
    out += float(np.real(pe @ (psi_h @ (a * hc))))
    out -= float(np.real(np.vdot(hc, a * hc)))
    out -= 2.0 * pe @ (psi_q @ lam)
    out -= 2.0 * float(qv @ (mu - lam))
    return float(out + c)


_REQUIRED = ("a_A", "lambda_max", "gamma_q", "gamma_h", "alpha_bar0", "gamma_bar0", "sigma_bar", "g_bar", "kappa")


def queue_bound(constants, L, V=None):
    """Bound on the long-run average of the worst queue."""
    V = constants.V if V is None else V
    missing = [n for n in _REQUIRED if getattr(constants, n) is None]
    if V is None:
        missing.append("V")
    if missing:
        raise MissingConstantsError(missing)
    c = constants
    if c.a_A <= 0:
        return math.inf
    term_alpha = 0.0 if c.gamma_q == 0 else c.alpha_bar0 * c.gamma_q**2 * c.lambda_max**2 / c.kappa
    return (
        drift_constant(L, c.a_A, c.gamma_h, c.gamma_q, c.lambda_max)
        + c.gamma_bar0 / c.a_A
        + term_alpha
        + V * 2.0 ** (L * c.lambda_max - 1) * c.sigma_bar
        + c.g_bar
    )


def _min_rate_term(y, s_min, V, L, lambda_max, h0):
    """``min(ln(S_min y / V), L lambda_max ln 2 + ln(S_min / h0^2))``."""
    with np.errstate(divide="ignore"):
        first = np.log(s_min * y / V)
    return np.minimum(first, L * lambda_max * math.log(2.0) + math.log(s_min / h0**2))


def _g1_surface(x, y, s_min, s_max, alpha, beta, gq, kappa, V, L, lambda_max, h0):
    lb = np.log1p(beta * x)
    with np.errstate(divide="ignore", invalid="ignore"):
        lmax = np.where(x > 0, 2.0 * gq * x * np.log(s_max * y / V), 0.0)
        lmin = np.where(y > 0, y * _min_rate_term(y, s_min, V, L, lambda_max, h0), 0.0)
    val = (
        -kappa * alpha * x**2
        + lmax
        + 2.0 * gq * x * lb
        + L * lambda_max * y
        + 2.0 * L * y * lb
        - lmin
        + x
        + y
    )
    return np.where(np.isnan(val), -np.inf, val)


def _g2_curve(x, s_min, s_max, alpha, beta, gq, kappa, V):
    lb = np.log1p(beta * x)
    return -kappa * alpha * x**2 + 2.0 * gq * x * math.log(s_max * s_min) + 2.0 * gq * x * lb + V / s_min * lb + x


def g_function(s_min, s_max, alpha, beta, gamma_q, kappa, V, L, lambda_max, h0, p_max, grid=64):
    """Auxiliary bounded function of the extreme channel gains.

    Maximum of the two residual expressions over ``(|p_e|, |q|)`` in
    ``[0, 4 p_max] x [0, 4 V / S_min]``: a ``grid x grid`` search followed by
    a bounded Nelder-Mead refinement from the best grid point.
    """
    xs = np.linspace(0.0, 4.0 * p_max, grid)
    ys = np.linspace(0.0, 4.0 * V / s_min, grid)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    args = (s_min, s_max, alpha, beta, gamma_q, kappa, V, L, lambda_max, h0)
    S = _g1_surface(X, Y, *args)
    i, j = np.unravel_index(int(np.argmax(S)), S.shape)
    g1 = float(S[i, j])
    lo = np.array([0.0, 0.0])
    hi = np.array([xs[-1], ys[-1]])

    def neg(z):
        z = np.clip(z, lo, hi)
        v = float(_g1_surface(np.array(z[0]), np.array(z[1]), *args))
        return -v if np.isfinite(v) else 1e300

    res = optimize.minimize(neg, [X[i, j], Y[i, j]], method="Nelder-Mead", options={"xatol": 1e-9, "fatol": 1e-12})
    g1 = max(g1, -float(res.fun))
    c2 = _g2_curve(xs, s_min, s_max, alpha, beta, gamma_q, kappa, V)
    k = int(np.argmax(c2))
    res2 = optimize.minimize_scalar(
        lambda x: -_g2_curve(x, s_min, s_max, alpha, beta, gamma_q, kappa, V),
        bounds=(xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]),
        method="bounded",
    )
    g2 = max(float(c2[k]), -float(res2.fun))
    return max(g1, g2)


@dataclass
class StationarySamples:
    """Per-sample quantities that do not depend on the fading rate."""

    s_min: np.ndarray
    s_max: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def sample_channel_statistics(model, topo, cfg, sample_count, rng, alpha_samples=32):
    """Stationary channel draws reduced to ``S_min``, ``S_max``, alpha, beta.

    alpha is evaluated at unit queues, the smallest backlog allowed by the
    concavity hypothesis.
    """
    rng = np.random.default_rng(rng)
    H = stationary_gain_samples(model, topo.L, sample_count, rng)
    G = H.real**2 + H.imag**2
    q1 = np.ones(topo.L)
    alpha = np.empty(sample_count)
    beta = np.empty(sample_count)
    for i, h in enumerate(H):
        alpha[i] = estimate_alpha(h, q1, topo, cfg, alpha_samples, rng)
        beta[i] = estimate_beta(h, topo, cfg, alpha_samples, rng)
    return StationarySamples(G.min(axis=1), G.max(axis=1), alpha, beta)


def gamma_bar0_samples(alpha, gamma_h, a_A, kappa):
    """Per-sample ``1 / (8 (1 - gamma_h^2 a_A / (kappa alpha)))``.

    Infinite where the step-size condition ``kappa alpha > gamma_h^2 a_A``
    fails.
    """
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore"):
        ratio = np.where(alpha > 0, gamma_h**2 * a_A / (kappa * alpha), np.where(gamma_h == 0, 0.0, np.inf))
    with np.errstate(divide="ignore"):
        return np.where(ratio < 1.0, 1.0 / (8.0 * (1.0 - ratio)), np.inf)


def estimate_stationary_expectations(
    model, topo, cfg, sample_count, rng, gamma_q=0.0, gamma_h=0.0, lambda_max=None, samples=None
):
    """Monte Carlo means of ``1/S_min``, ``g``, ``1/alpha`` and the alpha-dependent factor.

    Returns
    -------
    dict
        ``sigma_bar``, ``g_bar``, ``alpha_bar0``, ``gamma_bar0`` as
        :class:`MonteCarloMean`.
    """
    if samples is None:
        samples = sample_channel_statistics(model, topo, cfg, sample_count, rng)
    lambda_max = 0.0 if lambda_max is None else lambda_max
    return {
        name: _expectation(name, samples, model, topo, cfg, gamma_q, gamma_h, lambda_max)
        for name in ("sigma_bar", "g_bar", "alpha_bar0", "gamma_bar0")
    }


def _expectation(name, samples, model, topo, cfg, gamma_q, gamma_h, lambda_max):
    if name == "sigma_bar":
        return MonteCarloMean.of(1.0 / samples.s_min)
    if name == "alpha_bar0":
        with np.errstate(divide="ignore"):
            return MonteCarloMean.of(np.where(samples.alpha > 0, 1.0 / samples.alpha, np.inf))
    if name == "gamma_bar0":
        return MonteCarloMean.of(gamma_bar0_samples(samples.alpha, gamma_h, float(np.max(model.a)), cfg.kappa))
    g_vals = [
        g_function(smin, smax, al, be, gamma_q, cfg.kappa, cfg.V, topo.L, lambda_max, model.h0, cfg.p_max)
        for smin, smax, al, be in zip(samples.s_min, samples.s_max, samples.alpha, samples.beta)
    ]
    return MonteCarloMean.of(g_vals)


def bound_sweep(
    a_A_grid, gamma_scenarios, topo, lambda_max, cfg, h0, tau=1e-3, sample_count=200, seed=0, fixed=None
):
    """Average queue bound over fading rates and sensitivity scenarios.

    The stationary law of the channel does not depend on the fading rate
    (changing ``a`` only rescales time), so one set of stationary samples,
    drawn at unit rate, serves every row: differences between rows reflect
    the parameters rather than sampling noise.  ``fixed`` may pin any of
    ``sigma_bar``, ``g_bar``, ``alpha_bar0``, ``gamma_bar0`` instead of
    estimating it; channel sampling is skipped when nothing remains to
    estimate (``alpha_bar0`` is not needed when ``gamma_q = 0`` and
    ``gamma_bar0 = 1/8`` exactly when ``gamma_h = 0``).

    Returns
    -------
    list of dict
        Keys ``a_A, gamma_h, gamma_q, bound`` plus the four expectations and
        their confidence half-widths (zero for pinned or exact values).
    """
    if len(a_A_grid) == 0 or len(gamma_scenarios) == 0:
        raise ValueError("bound_sweep needs nonempty grids")
    fixed = dict(fixed or {})
    reference = ChannelModel(np.ones(topo.L), h0, tau)
    samples = None
    memo = {}
    rows = []
    for a_A in a_A_grid:
        model = ChannelModel(np.full(topo.L, float(a_A)), h0, tau)
        for gamma_h, gamma_q in gamma_scenarios:
            need = {"sigma_bar", "g_bar"} - set(fixed)
            if gamma_q != 0 and "alpha_bar0" not in fixed:
                need.add("alpha_bar0")
            if gamma_h != 0 and "gamma_bar0" not in fixed:
                need.add("gamma_bar0")
            est = {name: MonteCarloMean(float(v), 0.0, 0) for name, v in fixed.items()}
            if gamma_h == 0 and "gamma_bar0" not in fixed:
                est["gamma_bar0"] = MonteCarloMean(0.125, 0.0, 0)
            if gamma_q == 0 and "alpha_bar0" not in fixed:
                est["alpha_bar0"] = MonteCarloMean(0.0, 0.0, 0)  # multiplied by gamma_q^2 = 0
            if need:
                if samples is None:
                    samples = sample_channel_statistics(reference, topo, cfg, sample_count, np.random.default_rng(seed))
                for name in sorted(need):
                    key = (name, gamma_q if name == "g_bar" else None, gamma_h if name == "gamma_bar0" else None)
                    if name == "gamma_bar0":
                        key += (float(a_A),)
                    if key not in memo:
                        memo[key] = _expectation(name, samples, model, topo, cfg, gamma_q, gamma_h, lambda_max)
                    est[name] = memo[key]
            consts = StabilityConstants(
                a_A=float(a_A),
                lambda_max=float(lambda_max),
                gamma_q=float(gamma_q),
                gamma_h=float(gamma_h),
                alpha_bar0=est["alpha_bar0"].mean,
                gamma_bar0=est["gamma_bar0"].mean,
                sigma_bar=est["sigma_bar"].mean,
                g_bar=est["g_bar"].mean,
                V=cfg.V,
                kappa=cfg.kappa,
            )
            row = {"a_A": float(a_A), "gamma_h": float(gamma_h), "gamma_q": float(gamma_q)}
            row["bound"] = queue_bound(consts, topo.L)
            for name in ("alpha_bar0", "gamma_bar0", "sigma_bar", "g_bar"):
                row[name] = est[name].mean
                row[name + "_ci"] = est[name].half_width
            row["samples"] = sample_count if samples is not None else 0
            rows.append(row)
    return rows


def independent_links(n_links):
    """``n_links`` links, each with its own receiver (no SIC coupling)."""
    return Topology.from_pairs(2 * n_links, [(2 * i + 1, 2 * i + 2) for i in range(n_links)])
