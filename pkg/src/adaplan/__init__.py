"""Diffusion planning with uncertainty-gated replanning on a small lane-driving simulator."""

from .diffuser import DiffusionPlanner, build_schedule, load_denoiser, sample_plan, train_diffuser
from .dynalanes import EnvConfig, reset, step
from .invdyn import Ensemble, load_ensemble, train_ensemble
from .planner import PlannerConfig, run_episode, saved_nfe

__version__ = "0.1.0"
