"""Energy-efficient MPC trajectories in unsteady 2-D flows, with FTLE analysis."""

from .flowfield import DoubleGyre, DoubleGyreParams, FlowField, LinearSaddle, TimeReversed, Uniform
from .advect import GridSpec, IntegratorConfig, advect_point, flow_map
from .ftle import FtleField, extract_ridges, ftle_at, ftle_field
from .mpc import MpcConfig, SolverConfig, run_mpc, solve_horizon

__version__ = "0.1.0"
