"""Asynchronous dual-gradient distributed MPC over directed networks."""

__version__ = "0.1.0"

from .polytope import Polytope, box, lp_solve, mpi_set, terminal_set
from .model import LtiSubsystem, CondensedProblem, condense, dare_solve, gradient_f
from .qp import PreparedQp, solve_inner, centralized_solve
from .dualgrad import (ApdgNode, DualNodeState, RateCertificate,
                       check_termination, initial_state, local_update,
                       rate_certificate)
from .netsim import (Digraph, IterationCap, NotStronglyConnected, Schedule,
                     eta_bounds, run_apdg, validate_graph)
from .mpc import (DmpcConfig, MpcTrace, build_problem, candidate_shift,
                  closed_loop_run, solve_step, tightened_bound,
                  verify_feasibility)
from .config import load_config, loads_config, save_config, serialize_config
