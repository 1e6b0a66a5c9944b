"""Synthesise a control that steers a saddle's stable or unstable manifold onto a target family."""

from .bounds import BoundConstants, BoundProfile, bound_limits, error_bound_report, estimate_constants, par_error_bound, perp_error_bound
from .config import ScenarioConfig, load_config, parse_config, preset_config
from .control import ControlField, eval_control, synthesize_control
from .errors import (
    ConfigError,
    CoverageError,
    ManifoldControlError,
    MappabilityError,
    NoSaddleError,
    NotASaddleError,
    ValidationFailure,
)
from .ftle import ScalarFieldGrid, compute_ftle, extract_ridge, measure_manifold_error
from .integrate import IntegratorConfig, flow_map, integrate_batch, integrate_ode
from .manifold import DesiredManifold, UnperturbedManifold, compute_manifold, desired_from_offset, mappability_window, validate_desired
from .vectorfield import Rect, SaddleData, TaylorGreenParams, VectorField2D, expression_field, find_saddle, linear_field, taylor_green

__version__ = "0.1.0"
