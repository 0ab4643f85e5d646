"""INI-style experiment configuration.

Sections and keys (every key optional; defaults reproduce the reference
setting of five nodes, six links, 1 ms slots, 20 packets/s, kappa = 500,
h0 = 0.05 and a = 200)::

    [topology]   nodes, links            links as "1>3, 2>3, ..."
    [channel]    a, h0, tau              a: one value or one per link
    [arrivals]   lambda                  one value or one per link
    [policy]     name, kappa, V, rate_scale, p_max, iterations_per_slot,
                 ridge, oracle_tol, oracle_max_iters, const_power
    [run]        horizon, warmup, seed, track_equilibrium, decimate,
                 n_seeds, policies, a_grid, v_grid, target_delay,
                 gamma_scenarios, bound_a_grid, bound_links,
                 bound_lambda_max, bound_h0, bound_p_max, bound_V,
                 bound_samples, sigma_bar, g_bar, format, out

``auto`` is accepted where a value can be derived (``p_max``,
``const_power``, ``warmup``, ``sigma_bar``, ``g_bar``).  Gamma scenarios
are written ``gamma_h:gamma_q`` pairs separated by commas.

Parsing uses :mod:`configparser`; every error message carries the line
number of the offending entry.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .netmodel import Topology, default_topology
from .sim import POLICIES, SimConfig


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based or ``None``."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


FADING_A_GRID = (50.0, 100.0, 200.0, 400.0)
TRADEOFF_V_GRID = (10.0, 20.0, 40.0, 80.0, 160.0, 320.0, 640.0, 1280.0, 2560.0)
BOUND_A_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
GAMMA_SCENARIOS = ((0.0, 0.0), (0.05, 0.0), (0.1, 0.0), (0.0, 0.05), (0.0, 0.1))


@dataclass(frozen=True)
class ExperimentSpec:
    """A simulation configuration plus the grids used by the sweep commands."""

    sim: SimConfig = field(default_factory=SimConfig)
    decimate: int = 0
    n_seeds: int = 10
    policies: tuple = ("mwq", "compensated", "oracle")
    a_grid: tuple = FADING_A_GRID
    v_grid: tuple = TRADEOFF_V_GRID
    target_delay: float = 2.0
    gamma_scenarios: tuple = GAMMA_SCENARIOS
    bound_a_grid: tuple = BOUND_A_GRID
    bound_links: int = 4
    bound_lambda_max: float = 1.0
    bound_h0: float = 0.3
    bound_p_max: float = 1.0
    bound_V: float = 1.0
    bound_samples: int = 200
    sigma_bar: float | None = None
    g_bar: float | None = None
    format: str = "csv"
    out: str = "results"

    @property
    def seeds(self):
        return tuple(range(self.sim.seed, self.sim.seed + self.n_seeds))

    @property
    def fixed_expectations(self):
        return {k: v for k, v in (("sigma_bar", self.sigma_bar), ("g_bar", self.g_bar)) if v is not None}


# --- value parsers -----------------------------------------------------------


def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if not v.is_integer():
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _auto(parse):
    def inner(s):
        return None if s.strip().lower() == "auto" else parse(s)

    return inner


def _list(parse):
    def inner(s):
        items = [x.strip() for x in s.split(",")]
        if not items or any(not x for x in items):
            raise ValueError("empty list entry")
        return tuple(parse(x) for x in items)

    return inner


def _links(s):
    out = []
    for item in s.split(","):
        m = re.fullmatch(r"\s*(\d+)\s*>\s*(\d+)\s*", item)
        if not m:
            raise ValueError(f"link {item.strip()!r} is not of the form tx>rx")
        out.append((int(m.group(1)), int(m.group(2))))
    return tuple(out)


def _pair(s):
    m = re.fullmatch(r"\s*([^:\s]+)\s*:\s*([^:\s]+)\s*", s)
    if not m:
        raise ValueError(f"{s!r} is not of the form gamma_h:gamma_q")
    return (float(m.group(1)), float(m.group(2)))


def _word(choices):
    def inner(s):
        v = s.strip()
        if v not in choices:
            raise ValueError(f"{v!r} is not one of {', '.join(sorted(choices))}")
        return v

    return inner


def _positive(v):
    return v is None or v > 0


def _nonneg(v):
    return v is None or v >= 0


def _all(pred):
    return lambda vs: len(vs) > 0 and all(pred(v) for v in vs)


# (section, key) -> (parser, validity check, description of the check)
_KEYS = {
    ("topology", "nodes"): (_int, lambda v: v > 0, "positive"),
    ("topology", "links"): (_links, lambda v: len(v) > 0, "nonempty"),
    ("channel", "a"): (_list(_float), _all(lambda x: 0 <= x < math.inf), "finite and nonnegative"),
    ("channel", "h0"): (_float, _positive, "positive"),
    ("channel", "tau"): (_float, _positive, "positive"),
    ("arrivals", "lambda"): (_list(_float), _all(lambda x: 0 <= x < math.inf), "finite and nonnegative"),
    ("policy", "name"): (_word(set(POLICIES)), None, ""),
    ("policy", "kappa"): (_float, _positive, "positive"),
    ("policy", "V"): (_float, _positive, "positive"),
    ("policy", "rate_scale"): (_float, _positive, "positive"),
    ("policy", "p_max"): (_auto(_float), _positive, "positive"),
    ("policy", "iterations_per_slot"): (_int, lambda v: v >= 1, "at least 1"),
    ("policy", "ridge"): (_float, _nonneg, "nonnegative"),
    ("policy", "oracle_tol"): (_float, _positive, "positive"),
    ("policy", "oracle_max_iters"): (_int, lambda v: v >= 1, "at least 1"),
    ("policy", "const_power"): (_auto(_float), _nonneg, "nonnegative"),
    ("run", "horizon"): (_float, _nonneg, "nonnegative"),
    ("run", "warmup"): (_auto(_float), _nonneg, "nonnegative"),
    ("run", "seed"): (_int, lambda v: v >= 0, "nonnegative"),
    ("run", "track_equilibrium"): (_bool, None, ""),
    ("run", "decimate"): (_int, lambda v: v >= 0, "nonnegative"),
    ("run", "n_seeds"): (_int, lambda v: v >= 1, "at least 1"),
    ("run", "policies"): (_list(_word(set(POLICIES))), None, ""),
    ("run", "a_grid"): (_list(_float), _all(lambda x: x >= 0), "nonnegative"),
    ("run", "v_grid"): (_list(_float), _all(lambda x: x > 0), "positive"),
    ("run", "target_delay"): (_float, _positive, "positive"),
    ("run", "gamma_scenarios"): (_list(_pair), _all(lambda x: min(x) >= 0), "nonnegative"),
    ("run", "bound_a_grid"): (_list(_float), _all(lambda x: x > 0), "positive"),
    ("run", "bound_links"): (_int, lambda v: v >= 1, "at least 1"),
    ("run", "bound_lambda_max"): (_float, _nonneg, "nonnegative"),
    ("run", "bound_h0"): (_float, _positive, "positive"),
    ("run", "bound_p_max"): (_float, _positive, "positive"),
    ("run", "bound_V"): (_float, _positive, "positive"),
    ("run", "bound_samples"): (_int, lambda v: v >= 2, "at least 2"),
    ("run", "sigma_bar"): (_auto(_float), _nonneg, "nonnegative"),
    ("run", "g_bar"): (_auto(_float), None, ""),
    ("run", "format"): (_word({"csv", "json"}), None, ""),
    ("run", "out"): (str.strip, lambda v: len(v) > 0, "nonempty"),
}
SECTIONS = ("topology", "channel", "arrivals", "policy", "run")

# config key -> SimConfig field
_SIM_FIELDS = {
    ("channel", "a"): "a",
    ("channel", "h0"): "h0",
    ("channel", "tau"): "tau",
    ("arrivals", "lambda"): "lam",
    ("policy", "name"): "policy",
    ("policy", "kappa"): "kappa",
    ("policy", "V"): "V",
    ("policy", "rate_scale"): "rate_scale",
    ("policy", "p_max"): "p_max",
    ("policy", "iterations_per_slot"): "iterations_per_slot",
    ("policy", "ridge"): "ridge",
    ("policy", "oracle_tol"): "oracle_tol",
    ("policy", "oracle_max_iters"): "oracle_max_iters",
    ("policy", "const_power"): "const_power",
    ("run", "horizon"): "horizon",
    ("run", "warmup"): "warmup",
    ("run", "seed"): "seed",
    ("run", "track_equilibrium"): "track_equilibrium",
}


def _line_index(text):
    """``(section, key) -> line`` and ``section -> header line``."""
    keys, headers = {}, {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            headers.setdefault(section, n)
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None and not raw[:1].isspace():
            keys.setdefault((section, m.group(1).strip()), n)
    return keys, headers


def parse_config_text(text, path=None):
    """Parse configuration text into an :class:`ExperimentSpec`."""
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, default_section="\x00", inline_comment_prefixes=("#", ";")
    )
    parser.optionxform = str  # keys are case sensitive ("V")
    try:
        parser.read_string(text, source=str(path) if path else "<config>")
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("entry before the first [section] header", exc.lineno, path) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"malformed line {line}", lineno, path) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, path) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, path) from None

    lines, headers = _line_index(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", headers.get(section), path)
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            spec = _KEYS.get((section, key))
            if spec is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, path)
            parse, check, what = spec
            try:
                value = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: type mismatch: {exc}", line, path) from None
            if check is not None and not check(value):
                raise ConfigError(f"{section}.{key} must be {what} (got {raw.strip()!r})", line, path)
            values[(section, key)] = (value, line)
    return _build(values, path)


def _build(values, path):
    def get(section, key, default):
        return values[(section, key)][0] if (section, key) in values else default

    topo = default_topology()
    if ("topology", "links") in values:
        pairs = get("topology", "links", None)
        nodes = get("topology", "nodes", max(max(p) for p in pairs))
        try:
            topo = Topology.from_pairs(nodes, pairs)
        except ValueError as exc:
            raise ConfigError(f"topology.links: {exc}", values[("topology", "links")][1], path) from None
    elif ("topology", "nodes") in values and get("topology", "nodes", 5) != topo.node_count:
        raise ConfigError("topology.nodes given without topology.links", values[("topology", "nodes")][1], path)

    kwargs = {"topology": topo}
    for ck, name in _SIM_FIELDS.items():
        if ck in values:
            v = values[ck][0]
            if name in ("a", "lam"):
                if len(v) not in (1, topo.L):
                    raise ConfigError(
                        f"{ck[0]}.{ck[1]} needs 1 or {topo.L} values, got {len(v)}", values[ck][1], path
                    )
                v = v[0] if len(v) == 1 else v
            kwargs[name] = v
    try:
        sim = SimConfig(**kwargs)
    except ValueError as exc:
        # point at the first configured key the message mentions
        line = next((ln for (_, key), (_, ln) in values.items() if re.search(rf"\b{key}\b", str(exc))), None)
        raise ConfigError(f"invalid simulation settings: {exc}", line, path) from None

    spec_kwargs = {"sim": sim}
    for f in fields(ExperimentSpec):
        if ("run", f.name) in values:
            spec_kwargs[f.name] = values[("run", f.name)][0]
    return ExperimentSpec(**spec_kwargs)


def parse_config(path):
    """Read and parse a configuration file."""
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError("configuration file not found", None, p) from None
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", None, p) from None
    return parse_config_text(text, p)


def _fmt(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def emit_config(spec):
    """Effective configuration as text; ``parse_config_text`` inverts it."""
    sim = spec.sim
    topo = sim.topology
    out = [
        "[topology]",
        f"nodes = {topo.node_count}",
        "links = " + ", ".join(f"{tx}>{rx}" for _, tx, rx in sorted(topo.links)),
        "",
        "[channel]",
        f"a = {_fmt(sim.a)}",
        f"h0 = {_fmt(sim.h0)}",
        f"tau = {_fmt(sim.tau)}",
        "",
        "[arrivals]",
        f"lambda = {_fmt(sim.lam)}",
        "",
        "[policy]",
    ]
    for (section, key), name in _SIM_FIELDS.items():
        if section == "policy":
            out.append(f"{key} = {_fmt(getattr(sim, name))}")
    out += ["", "[run]"]
    for (section, key), name in _SIM_FIELDS.items():
        if section == "run":
            out.append(f"{key} = {_fmt(getattr(sim, name))}")
    for f in fields(ExperimentSpec):
        if f.name == "sim":
            continue
        v = getattr(spec, f.name)
        if f.name == "gamma_scenarios":
            out.append(f"{f.name} = " + ", ".join(f"{_fmt(gh)}:{_fmt(gq)}" for gh, gq in v))
        else:
            out.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(out) + "\n"


def with_overrides(spec, seed=None, fmt=None, decimate=None, out=None):
    """Apply command-line overrides."""
    if seed is not None:
        spec = replace(spec, sim=replace(spec.sim, seed=int(seed)))
    if fmt is not None:
        spec = replace(spec, format=fmt)
    if decimate is not None:
        spec = replace(spec, decimate=int(decimate))
    if out is not None:
        spec = replace(spec, out=str(out))
    return spec
