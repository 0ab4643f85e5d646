"""Slotted co-simulation of fading channels, queues and a power policy.

Each slot of length ``tau`` runs, in order:

1. channel update,
2. arrival draws,
3. the policy, using the channel and queues seen at the start of the slot,
4. SIC rates for the resulting powers,
5. queue update (service first, then arrivals),
6. optionally, the exact optimum of the slot for tracking-error bookkeeping.

The heavy loop lives in :mod:`mwqsim._kernels`; this module handles
configuration, random streams (pre-drawn per chunk so every policy sees the
same channel and arrival realizations for a given seed), bookkeeping and
parameter sweeps.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .netmodel import RngStreams, Topology, default_topology
from .policy import PolicyConfig

log = logging.getLogger(__name__)

POLICIES = {
    "mwq": K.POLICY_MWQ,
    "compensated": K.POLICY_COMPENSATED,
    "oracle": K.POLICY_ORACLE,
    "constant": K.POLICY_CONSTANT,
    "tdm": K.POLICY_TDM,
}

CHUNK = 10_000
Z95 = 1.959963984540054


def default_p_max(n_links, lambda_max, h0):
    """``2^(L lambda_max) / h0^2``, saturating to ``inf`` on overflow."""
    try:
        return 2.0 ** (n_links * lambda_max) / h0**2
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to reproduce one run.

    ``a`` and ``lam`` accept a scalar (same for all links) or one value per
    link.  ``p_max=None`` selects :func:`default_p_max`.  ``warmup=None``
    excludes the first tenth of the horizon from the averages.
    """

    topology: Topology = field(default_factory=default_topology)
    a: object = 200.0
    h0: float = 0.05
    tau: float = 1e-3
    lam: object = 20.0
    policy: str = "mwq"
    kappa: float = 500.0
    V: float = 20.0
    rate_scale: float = 20.0
    p_max: float | None = None
    iterations_per_slot: int = 1
    ridge: float = 1e-9
    oracle_tol: float = 1e-9
    oracle_max_iters: int = 200
    const_power: float | None = None
    horizon: float = 60.0
    warmup: float | None = None
    seed: int = 0
    track_equilibrium: bool = True

    def __post_init__(self):
        L = self.topology.L
        for name in ("a", "lam"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (L,))
            object.__setattr__(self, name, tuple(float(x) for x in v))
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {sorted(POLICIES)}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.h0 > 0:
            raise ValueError("h0 must be positive")
        if any(x < 0 for x in self.a) or any(x < 0 for x in self.lam):
            raise ValueError("fading rates and arrival rates must be nonnegative")
        if self.horizon < 0 or (self.warmup is not None and self.warmup < 0):
            raise ValueError("horizon and warmup must be nonnegative")
        if self.horizon > 0 and self.warmup_seconds >= self.horizon:
            raise ValueError("warmup must be shorter than the horizon")
        if not self.rate_scale > 0:
            raise ValueError("rate_scale must be positive")
        self.policy_config()  # validates the policy parameters

    @property
    def L(self):
        return self.topology.L

    @property
    def warmup_seconds(self):
        return 0.1 * self.horizon if self.warmup is None else self.warmup

    @property
    def resolved_p_max(self):
        if self.p_max is not None:
            return float(self.p_max)
        return default_p_max(self.L, max(self.lam), self.h0)

    def policy_config(self):
        return PolicyConfig(
            kappa=self.kappa,
            V=self.V,
            iterations_per_slot=self.iterations_per_slot,
            ridge=self.ridge,
            oracle_tol=self.oracle_tol,
            oracle_max_iters=self.oracle_max_iters,
            p_max=self.resolved_p_max,
            rate_scale=self.rate_scale,
        )


@dataclass
class RunSummary:
    avg_queue: np.ndarray
    avg_delay: np.ndarray
    avg_power: np.ndarray
    node_power: dict
    avg_tracking_error: float
    slot_count: int
    fallback_count: int
    oracle_failures: int
    mean_sojourn: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def worst_avg_queue(self):
        return float(np.max(self.avg_queue))

    @property
    def mean_delay(self):
        """Average of the per-link delays over links with traffic."""
        d = self.avg_delay[np.isfinite(self.avg_delay)]
        return float(np.mean(d)) if d.size else math.nan

    @property
    def node_power_mean(self):
        """Per-node power averaged over transmitting nodes (linear)."""
        return float(np.mean(list(self.node_power.values())))

    @property
    def node_power_db(self):
        return _db(self.node_power_mean)

    def to_dict(self):
        """Flat, JSON-friendly view with one column per link and node."""
        out = {
            "worst_avg_queue": self.worst_avg_queue,
            "mean_delay": self.mean_delay,
            "avg_power": self.node_power_mean,
            "avg_power_db": self.node_power_db,
            "avg_tracking_error": self.avg_tracking_error,
            "slot_count": self.slot_count,
            "fallback_count": self.fallback_count,
            "oracle_failures": self.oracle_failures,
        }
        for l, v in enumerate(self.avg_queue):
            out[f"avg_queue_{l + 1}"] = float(v)
        for l, v in enumerate(self.avg_delay):
            out[f"avg_delay_{l + 1}"] = float(v)
        for l, v in enumerate(self.avg_power):
            out[f"avg_power_{l + 1}"] = float(v)
        for node, v in self.node_power.items():
            out[f"node_power_{node}"] = float(v)
            out[f"node_power_db_{node}"] = _db(v)
        for k, v in self.metadata.items():
            out[k] = v
        return out


@dataclass
class TimeSeries:
    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    pstar: np.ndarray
    err: np.ndarray

    def columns(self):
        L = self.q.shape[1]
        return (
            ["t"]
            + [f"q_{l + 1}" for l in range(L)]
            + [f"p_{l + 1}" for l in range(L)]
            + [f"pstar_{l + 1}" for l in range(L)]
            + ["err"]
        )

    def rows(self):
        return np.column_stack([self.t, self.q, self.p, self.pstar, self.err])


def _db(x):
    return 10.0 * math.log10(x) if x > 0 else -math.inf


class SimulationError(RuntimeError):
    def __init__(self, slot, cause):
        super().__init__(f"simulation failed at slot {slot}: {cause}")
        self.slot = slot


def run_episode(cfg, timeseries_every=0, tag_packets=False):
    """Simulate one configuration.

    Parameters
    ----------
    cfg : SimConfig
    timeseries_every : int
        Record every k-th slot (0 disables the time series).
    tag_packets : bool
        Also measure per-packet FIFO sojourn times (debug aid for checking
        Little's law; keeps one float per link and slot in memory).

    Returns
    -------
    (RunSummary, TimeSeries or None)
    """
    metadata = {}
    const_p = 0.0
    if cfg.policy == "constant":
        if cfg.const_power is None:
            ref, _ = run_episode(replace(cfg, policy="oracle", track_equilibrium=False))
            const_p = float(np.mean(ref.avg_power))
            metadata["const_power_source"] = "oracle_average"
        else:
            const_p = float(cfg.const_power)
            metadata["const_power_source"] = "configured"
        metadata["const_power"] = const_p
    pcfg = cfg.policy_config()
    topo = cfg.topology
    L = topo.L
    ptr, flat = topo.groups()
    a = np.asarray(cfg.a)
    lam = np.asarray(cfg.lam)
    n_slots = int(round(cfg.horizon / cfg.tau))
    warm = int(round(cfg.warmup_seconds / cfg.tau))
    streams = RngStreams(cfg.seed, L)
    track = cfg.track_equilibrium or cfg.policy == "oracle"

    h = np.ones(L, dtype=complex)
    q = np.zeros(L)
    p = np.zeros(L)
    pstar = np.zeros(L)
    prev_h = h.copy()
    prev_q = q.copy()
    flags = np.zeros(2, dtype=np.int64)
    acc_q = np.zeros(L)
    acc_p = np.zeros(L)
    acc_err = np.zeros(1)
    counters = np.zeros(4, dtype=np.int64)

    ts_parts = []
    arrivals_log = []
    departures_log = []
    slot = 0
    while slot < n_slots:
        n = min(CHUNK, n_slots - slot)
        noise = streams.channel_noise(n)
        arrivals = streams.arrival_counts(lam, cfg.tau, n)
        if timeseries_every > 0:
            n_rows = len(range(-slot % timeseries_every, n, timeseries_every))
        else:
            n_rows = 0
        ts_out = np.full((n_rows, 3 * L + 1), np.nan)
        ts_t = np.zeros(n_rows)
        dep = np.zeros((n if tag_packets else 0, L))
        try:
            rows = K.run_chunk(
                h, q, p, pstar, prev_h, prev_q, flags,
                noise, arrivals, a, cfg.tau, cfg.h0, pcfg.rate_scale, pcfg.V, pcfg.kappa, pcfg.p_max,
                POLICIES[cfg.policy], pcfg.iterations_per_slot, const_p, ptr, flat,
                track, pcfg.oracle_tol, pcfg.oracle_max_iters, pcfg.ridge, pcfg.max_cond,
                slot, warm, acc_q, acc_p, acc_err, counters,
                timeseries_every, ts_out, ts_t, 0, dep,
            )  # fmt: skip
        except Exception as exc:  # pragma: no cover - numba errors are rare
            raise SimulationError(slot, exc) from exc
        if n_rows:
            ts_parts.append((ts_t[:rows], ts_out[:rows]))
        if tag_packets:
            arrivals_log.append(arrivals)
            departures_log.append(dep)
        slot += n

    measured = int(counters[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_q = acc_q / measured if measured else np.zeros(L)
        avg_p = acc_p / measured if measured else np.zeros(L)
        delay = np.where(lam > 0, avg_q / np.where(lam > 0, lam, 1.0), np.nan)
    node_power = {node: float(np.mean(avg_p[list(links)])) for node, links in topo.tx_map.items()}
    err = float(acc_err[0] / measured) if (track and measured) else math.nan
    if int(counters[2]):
        log.warning("equilibrium solver missed its tolerance in %d slots", int(counters[2]))
    sojourn = None
    if tag_packets:
        sojourn = _fifo_sojourn(
            np.vstack(arrivals_log) if arrivals_log else np.zeros((0, L)),
            np.vstack(departures_log) if departures_log else np.zeros((0, L)),
            warm,
            cfg.tau,
        )
    summary = RunSummary(
        avg_queue=avg_q,
        avg_delay=delay,
        avg_power=avg_p,
        node_power=node_power,
        avg_tracking_error=err,
        slot_count=measured,
        fallback_count=int(counters[1]),
        oracle_failures=int(counters[2]),
        mean_sojourn=sojourn,
        metadata=metadata,
    )
    series = None
    if timeseries_every > 0:
        if ts_parts:
            t = np.concatenate([x[0] for x in ts_parts])
            m = np.vstack([x[1] for x in ts_parts])
        else:
            t = np.zeros(0)
            m = np.zeros((0, 3 * L + 1))
        series = TimeSeries(t, m[:, :L], m[:, L : 2 * L], m[:, 2 * L : 3 * L], m[:, 3 * L])
    return summary, series


def _fifo_sojourn(arrivals, departures, warm, tau):
    """Mean FIFO sojourn per link from per-slot arrival counts and service.

    Packet ``k`` of a link occupies the fluid interval ``[k-1, k]``; it
    arrives at the end of its slot and counts as departed once the
    cumulative fluid served passes its midpoint ``k - 1/2``, which makes the
    packet average agree with the fluid time average.  Only packets arriving after
    the warm-up and leaving before the horizon are counted.
    """
    n, L = arrivals.shape
    out = np.full(L, np.nan)
    for l in range(L):
        cum_a = np.cumsum(arrivals[:, l])
        cum_d = np.cumsum(departures[:, l])
        total = int(cum_a[-1]) if n else 0
        if total == 0:
            continue
        k = np.arange(1, total + 1)
        slot_in = np.searchsorted(cum_a, k, side="left")
        slot_out = np.searchsorted(cum_d, k - 0.5, side="left")
        keep = (slot_in >= warm) & (slot_out < n)
        if np.any(keep):
            out[l] = float(np.mean(slot_out[keep] - slot_in[keep])) * tau
    return out


# --------------------------------------------------------------------------
# sweeps


def _threads():
    env = os.environ.get("MWQ_SIM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _cell(args):
    cfg, label = args
    try:
        summary, _ = run_episode(cfg)
        return summary, None
    except Exception as exc:  # annotated, not fatal for the sweep
        log.error("sweep cell %s failed: %s", label, exc)
        return None, f"{type(exc).__name__}: {exc}"


def _run_cells(cells):
    workers = min(_threads(), len(cells))
    if workers <= 1:
        return [_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_cell, cells))


def _row(base, summary, error):
    row = dict(base)
    if summary is None:
        row.update(tracking_error=math.nan, avg_delay=math.nan, worst_avg_queue=math.nan,
                   avg_power=math.nan, avg_power_db=math.nan, fallback_count=-1, error=error)  # fmt: skip
        return row
    row.update(
        tracking_error=summary.avg_tracking_error,
        avg_delay=summary.mean_delay,
        worst_avg_queue=summary.worst_avg_queue,
        avg_power=summary.node_power_mean,
        avg_power_db=summary.node_power_db,
        fallback_count=summary.fallback_count,
        error="",
    )
    return row


def sweep_fading(cfg, a_grid, policies, seeds):
    """Tracking error, delay and power versus the fading rate.

    Rows are ordered by (policy, grid index, seed).  The equilibrium is
    always tracked.
    """
    cells, bases = [], []
    for pol in policies:
        for i, a_A in enumerate(a_grid):
            for s in seeds:
                c = replace(cfg, policy=pol, a=float(a_A), seed=int(s), track_equilibrium=True)
                cells.append((c, f"{pol}/a={a_A}/seed={s}"))
                bases.append({"policy": pol, "a_A": float(a_A), "seed": int(s)})
    return [_row(b, *r) for b, r in zip(bases, _run_cells(cells))]


def sweep_tradeoff(cfg, V_grid, policies, seeds):
    """Average delay and per-node power versus ``V``; rows ordered as above."""
    if any(not v > 0 for v in V_grid):
        raise ValueError("V grid must be positive")
    cells, bases = [], []
    for pol in policies:
        for i, V in enumerate(V_grid):
            for s in seeds:
                c = replace(cfg, policy=pol, V=float(V), seed=int(s), track_equilibrium=False)
                cells.append((c, f"{pol}/V={V}/seed={s}"))
                bases.append({"policy": pol, "V": float(V), "seed": int(s)})
    return [_row(b, *r) for b, r in zip(bases, _run_cells(cells))]


def aggregate(rows, by, metrics):
    """Mean, standard error and 95% normal half-width of ``metrics`` per group.

    Groups keep first-appearance order; failed cells are skipped and
    counted.  Power in dB is recomputed from the mean linear power.
    """
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in by), []).append(r)
    out = []
    for key, members in groups.items():
        ok = [m for m in members if not m.get("error")]
        agg = dict(zip(by, key))
        agg["n"] = len(ok)
        agg["failed"] = len(members) - len(ok)
        for name in metrics:
            vals = np.array([m[name] for m in ok], dtype=float)
            agg[name] = float(np.mean(vals)) if vals.size else math.nan
            agg[name + "_se"] = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
            agg[name + "_ci95"] = Z95 * agg[name + "_se"]
        if "avg_power" in metrics:
            agg["avg_power_db"] = _db(agg["avg_power"]) if ok else math.nan
        out.append(agg)
    return out


def power_at_delay(rows, policy, target=2.0):
    """Per-node power (dB) of one policy's trade-off curve at a target delay.

    The curve is the seed-averaged (delay, linear power) per ``V``; the
    power is interpolated linearly in dB between the two grid points whose
    delays bracket ``target``.  Outside the covered range the nearest point
    is used and ``extrapolated`` is set.
    """
    agg = aggregate([r for r in rows if r["policy"] == policy], ["V"], ["avg_delay", "avg_power"])
    agg = [r for r in agg if r["n"] > 0 and np.isfinite(r["avg_delay"])]
    if not agg:
        raise ValueError(f"no usable rows for policy {policy!r}")
    agg.sort(key=lambda r: r["avg_delay"])
    d = np.array([r["avg_delay"] for r in agg])
    pdb = np.array([r["avg_power_db"] for r in agg])
    inside = d[0] <= target <= d[-1]
    value = float(np.interp(target, d, pdb))
    nearest = agg[int(np.argmin(np.abs(d - target)))]
    return {
        "policy": policy,
        "power_db": value,
        "target_delay": target,
        "nearest_V": nearest["V"],
        "nearest_delay": nearest["avg_delay"],
        "extrapolated": not inside,
    }


def summary_record(cfg, summary):
    """Configuration echo plus summary, for serialization."""
    rec = {"policy": cfg.policy, "seed": cfg.seed, "V": cfg.V, "a_A": max(cfg.a), "horizon": cfg.horizon}
    rec.update(summary.to_dict())
    return rec


__all__ = [
    "SimConfig",
    "RunSummary",
    "TimeSeries",
    "run_episode",
    "sweep_fading",
    "sweep_tradeoff",
    "aggregate",
    "power_at_delay",
    "default_p_max",
]
