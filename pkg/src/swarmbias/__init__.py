"""Estimate a static GPS bias field with a drone swarm: relative-delta bias
solving, GP mapping and variance-driven path planning."""

from .config import ScenarioConfig, load_config, preset
from .field import Bounds, Constant, GaussianRadial, GridInterp, Sum, eval_bias, make_eval_grid
from .gpr import GpModel, Hyperparams, fit
from .harness import run_comparison, run_noise_sweep, run_scenario
from .sbe import build_graph, solve_biases

__version__ = "0.1.0"
