import os
import warnings

import numpy as np
import pytest

import asyncdmpc
from asyncdmpc import (
    Digraph, DmpcConfig, LtiSubsystem, Schedule, box, build_problem,
    closed_loop_run, load_config,
)
from asyncdmpc.dualgrad import ApdgNode


BUNDLED_CFG = os.path.join(os.path.dirname(asyncdmpc.__file__),
                           "data", "watertank.cfg")


def make_scalar_subsystem():
    """One stable scalar plant whose input feeds a shared unit budget."""
    return LtiSubsystem(
        A=[[0.5]], B=[[1.0]], Q=[[1.0]], R=[[1.0]],
        X=box([-5.0], [5.0]), U=box([-2.0], [2.0]),
        Cg=[[0.0]], Dg=[[1.0]],
    )


def make_group_config(M, N=2, beta=0.02, x0=None, T_sim=3, eps=0.02,
                      schedule=None):
    """M copies of the scalar plant on a ring (or a self-loop when M=1)."""
    subs = [make_scalar_subsystem() for _ in range(M)]
    if M == 1:
        graph = Digraph(1, [])
    elif M == 2:
        graph = Digraph(2, [(0, 1), (1, 0)])
    else:
        graph = Digraph(M, [(i, (i + 1) % M) for i in range(M)])
    gamma = min(0.05, 0.5 / (M * (N + 1)))
    if x0 is None:
        x0 = [-4.0] * M
    if schedule is None:
        schedule = Schedule(0.1, 0.1, 0.0, None, "uniform")
    return DmpcConfig(
        subsystems=subs, N=N, gamma=gamma, eps=min(eps, gamma), eps_b=0.005,
        eps_g=1e-3, graph=graph, schedule=schedule, beta=beta, seed=0,
        T_sim=T_sim, x0=np.array(x0, dtype=float),
    )


class RecordingNode(ApdgNode):
    """ApdgNode that keeps every successor state it produces."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.history = []

    def update(self, state, buffers, weights):
        nxt = super().update(state, buffers, weights)
        self.history.append(nxt)
        return nxt


def make_recording_nodes(problem, cfg, xs):
    nodes = []
    for i, rt in enumerate(problem.runtimes):
        nodes.append(RecordingNode(
            rt.cp, xs[i], None, problem.b_eps, problem.M, beta=cfg.beta,
            eps=cfg.eps, eps_b=cfg.eps_b, eps_g=cfg.eps_g,
            solver=rt.solver, h=rt.local_h(xs[i])))
    return nodes


@pytest.fixture(scope="session")
def tank_cfg():
    return load_config(BUNDLED_CFG)


@pytest.fixture(scope="session")
def tank_problem(tank_cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_problem(tank_cfg)


@pytest.fixture(scope="session")
def tank_run_async(tank_cfg, tank_problem):
    return closed_loop_run(tank_cfg, mode="async", problem=tank_problem)


@pytest.fixture(scope="session")
def tank_run_sync(tank_cfg, tank_problem):
    return closed_loop_run(tank_cfg, mode="synchronous", problem=tank_problem)
