"""Figure rendering for closed-loop traces.

Three figures per run: simulated solve time per control step (one curve per
mode), applied inputs together with the global-constraint rows against
their bound, and the state trajectories. render_report also drops a
standalone plot script next to the CSVs so the figures can be regenerated
without this package installed.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_solve_times(traces, path):
    """Step plot of simulated seconds-to-termination per control step."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, tr in traces.items():
        ax.step(tr.t, tr.solve_seconds, where="post", marker="o",
                markersize=3, label=label)
    ax.set_xlabel("control step t")
    ax.set_ylabel("simulated solve time [s]")
    ax.set_title("Distributed solve time per step")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_inputs_global(trace, path):
    """Applied inputs per subsystem and the global-constraint rows."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    M = len(trace.u0[0]) if trace.u0 else 0
    for i in range(M):
        ui = [float(trace.u0[k][i][0]) for k in range(len(trace.t))]
        ax1.step(trace.t, ui, where="post", label="u%d" % (i + 1))
    ax1.set_ylabel("applied input")
    ax1.grid(True, alpha=0.3)
    ax1.legend(ncol=2, fontsize=8)

    g = np.array(trace.g_applied)
    for r in range(g.shape[1]):
        ax2.step(trace.t, g[:, r], where="post", label="row %d" % (r + 1))
    ax2.axhline(1.0, color="k", linestyle="--", linewidth=1,
                label="bound")
    ax2.set_xlabel("control step t")
    ax2.set_ylabel("global constraint rows")
    ax2.grid(True, alpha=0.3)
    ax2.legend(ncol=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_states(trace, path):
    """All state components of every subsystem over the run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    M = len(trace.x[0]) if trace.x else 0
    for i in range(M):
        xi = np.array([trace.x[k][i] for k in range(len(trace.t))])
        for c in range(xi.shape[1]):
            ax.plot(trace.t, xi[:, c], label="x%d_%d" % (i + 1, c + 1))
    ax.set_xlabel("control step t")
    ax.set_ylabel("state")
    ax.set_title("Closed-loop state trajectories")
    ax.grid(True, alpha=0.3)
    ax.legend(ncol=4, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


_PLOT_SCRIPT = '''#!/usr/bin/env python3
"""Regenerate the run figures from the trace CSVs in this directory."""

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    cols = {name: [float(r[i]) for r in data]
            for i, name in enumerate(header)}
    return header, cols


here = os.path.dirname(os.path.abspath(__file__))
traces = {}
for mode in ("async", "sync"):
    p = os.path.join(here, "trace_%s.csv" % mode)
    if os.path.exists(p):
        traces[mode] = read_trace(p)

fig, ax = plt.subplots(figsize=(7, 4))
for mode, (_, cols) in traces.items():
    ax.step(cols["t"], cols["solve_seconds"], where="post", marker="o",
            markersize=3, label=mode)
ax.set_xlabel("control step t")
ax.set_ylabel("simulated solve time [s]")
ax.grid(True, alpha=0.3)
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "fig_solve_times.png"), dpi=150)
plt.close(fig)

mode = "async" if "async" in traces else next(iter(traces))
header, cols = traces[mode]
u_names = [h for h in header if h.startswith("u")]
g_names = [h for h in header if h.startswith("g_")]
x_names = [h for h in header if h.startswith("x")]

fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
for name in u_names:
    ax1.step(cols["t"], cols[name], where="post", label=name)
ax1.set_ylabel("applied input")
ax1.grid(True, alpha=0.3)
ax1.legend(ncol=2, fontsize=8)
for name in g_names:
    ax2.step(cols["t"], cols[name], where="post", label=name)
ax2.axhline(1.0, color="k", linestyle="--", linewidth=1, label="bound")
ax2.set_xlabel("control step t")
ax2.set_ylabel("global constraint rows")
ax2.grid(True, alpha=0.3)
ax2.legend(ncol=3, fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(here, "fig_inputs_global.png"), dpi=150)
plt.close(fig)

fig, ax = plt.subplots(figsize=(7, 4))
for name in x_names:
    ax.plot(cols["t"], cols[name], label=name)
ax.set_xlabel("control step t")
ax.set_ylabel("state")
ax.grid(True, alpha=0.3)
ax.legend(ncol=4, fontsize=7)
fig.tight_layout()
fig.savefig(os.path.join(here, "fig_states.png"), dpi=150)
plt.close(fig)
print("wrote figures next to", here)
'''


def write_plot_script(out_dir):
    path = os.path.join(out_dir, "plot_traces.py")
    with open(path, "w") as fh:
        fh.write(_PLOT_SCRIPT)
    return path


def render_report(out_dir, traces):
    """Render the three figures and the standalone plot script.

    traces maps a mode label to its MpcTrace; the input/state figures are
    drawn from the asynchronous trace when present.
    """
    paths = []
    paths.append(plot_solve_times(
        traces, os.path.join(out_dir, "fig_solve_times.png")))
    main = traces.get("async") or next(iter(traces.values()))
    if main.t:
        paths.append(plot_inputs_global(
            main, os.path.join(out_dir, "fig_inputs_global.png")))
        paths.append(plot_states(
            main, os.path.join(out_dir, "fig_states.png")))
    paths.append(write_plot_script(out_dir))
    return paths
