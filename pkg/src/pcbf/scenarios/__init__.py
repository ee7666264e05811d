"""Ready-made closed-loop setups: rover teleoperation, adaptive cruise
control, and a triple integrator with an adaptive quadratic bound."""

from .acc import acc_front_profile, acc_hopcbf, acc_uref, make_acc
from .base import Scenario, load_scenario, make_baseline_controller, \
    make_controller
from .linear import InitFailed, flatten_param, linear_init, \
    linear_rho_constraints, lqr_gain, lyap_solve, make_clf_greedy, \
    make_linear, triple_integrator, unflatten_param
from .rover import SamplingFailed, make_aggressive_uref, make_rover, \
    pack_rover_param, rover_fallback_input, rover_h, rover_rho, \
    rover_rho_batch, sample_obstacles
from .se2 import Se2Element

__all__ = [
    "InitFailed",
    "SamplingFailed",
    "Scenario",
    "Se2Element",
    "acc_front_profile",
    "acc_hopcbf",
    "acc_uref",
    "flatten_param",
    "linear_init",
    "linear_rho_constraints",
    "load_scenario",
    "lqr_gain",
    "lyap_solve",
    "make_acc",
    "make_aggressive_uref",
    "make_baseline_controller",
    "make_clf_greedy",
    "make_controller",
    "make_linear",
    "make_rover",
    "pack_rover_param",
    "rover_fallback_input",
    "rover_h",
    "rover_rho",
    "rover_rho_batch",
    "sample_obstacles",
    "triple_integrator",
    "unflatten_param",
]
