"""Max-weight power control under time-varying channels and queues."""

from .netmodel import (
    ArrivalModel,
    ChannelModel,
    ChannelState,
    ModelIntegrityError,
    QueueState,
    RngStreams,
    Topology,
    arrivals_step,
    channel_gain_path,
    channel_step,
    default_topology,
    queue_step,
)
from .policy import (
    OracleConvergenceError,
    PolicyConfig,
    PolicyState,
    SensitivityUnavailable,
    constant_power_policy,
    equilibrium_oracle,
    kkt_sensitivities,
    mwq_compensated_step,
    mwq_gradient_step,
    tdm_policy,
    tracking_error,
)
from .rates import (
    CapabilityError,
    RateAllocation,
    capacity_member,
    grad_lagrangian,
    hessian_lagrangian,
    lagrangian,
    project_box,
    rate_allocation,
)
from .sim import RunSummary, SimConfig, TimeSeries, aggregate, power_at_delay, run_episode, sweep_fading, sweep_tradeoff
from .stability import (
    MissingConstantsError,
    NotApplicable,
    StabilityConstants,
    bound_sweep,
    estimate_alpha,
    estimate_beta,
    estimate_gammas,
    estimate_stationary_expectations,
    independent_links,
    lyapunov_drift_bound,
    queue_bound,
)
from .config import ConfigError, ExperimentSpec, emit_config, parse_config, parse_config_text

__version__ = "0.1.0"
