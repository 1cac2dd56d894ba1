"""INI-style experiment configuration: parse, validate, normalize, save.

Layout: a [problem] section with scalars, a [graph] section with a 1-based
edge list, a [schedule] section, and one [subsystem i] section per node
holding its matrices (rows separated by ';', entries by spaces), constraint
boxes or general half-space pairs, and its slice of the initial state.
Normalization is idempotent: parse followed by serialize is a fixed point
of its own output.
"""

import configparser
import io

import numpy as np

from .model import LtiSubsystem
from .mpc import ConfigInvalid, DmpcConfig
from .netsim import Digraph, Schedule
from .polytope import Polytope, box


def _fmt(v):
    return "%.17g" % float(v)


def _mat_to_str(mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    return " ; ".join(" ".join(_fmt(v) for v in row) for row in mat)


def _vec_to_str(vec):
    return " ".join(_fmt(v) for v in np.asarray(vec, dtype=float).ravel())


def _parse_matrix(text, where):
    try:
        rows = [[float(tok) for tok in chunk.split()]
                for chunk in text.split(";")]
    except ValueError:
        raise ConfigInvalid("%s: cannot parse number list %r" % (where, text))
    if not rows or any(len(r) == 0 for r in rows):
        raise ConfigInvalid("%s: empty matrix row" % where)
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ConfigInvalid("%s: ragged matrix rows" % where)
    return np.array(rows, dtype=float)


def _parse_vector(text, where):
    m = _parse_matrix(text, where)
    if m.shape[0] != 1:
        raise ConfigInvalid("%s: expected a single row of numbers" % where)
    return m[0]


def _parse_edges(text, where):
    edges = []
    for tok in text.replace("\n", ",").split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ">" not in tok:
            raise ConfigInvalid("%s: edge %r must look like 'i>j'"
                                % (where, tok))
        a, b = tok.split(">", 1)
        try:
            edges.append((int(a), int(b)))
        except ValueError:
            raise ConfigInvalid("%s: edge %r has non-integer endpoints"
                                % (where, tok))
    if not edges:
        raise ConfigInvalid("%s: empty edge list" % where)
    return edges


def _polytope_from(sec, prefix, where):
    """Read either a box (_lb/_ub) or general half-spaces (_G/_h)."""
    has_box = sec.get(prefix + "_lb") is not None
    has_gen = sec.get(prefix + "_G") is not None
    if has_box == has_gen:
        raise ConfigInvalid("%s: give exactly one of %s_lb/%s_ub or "
                            "%s_G/%s_h" % (where, prefix, prefix,
                                           prefix, prefix))
    if has_box:
        lb = _parse_vector(sec[prefix + "_lb"], where)
        ub_text = sec.get(prefix + "_ub")
        if ub_text is None:
            raise ConfigInvalid("%s: %s_lb without %s_ub"
                                % (where, prefix, prefix))
        ub = _parse_vector(ub_text, where)
        return box(lb, ub)
    G = _parse_matrix(sec[prefix + "_G"], where)
    h_text = sec.get(prefix + "_h")
    if h_text is None:
        raise ConfigInvalid("%s: %s_G without %s_h" % (where, prefix, prefix))
    h = _parse_vector(h_text, where)
    return Polytope(G, h)


def load_config(path):
    """Read a config file into a validated DmpcConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path) as fh:
        parser.read_file(fh)
    return config_from_parser(parser)


def loads_config(text):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_file(io.StringIO(text))
    return config_from_parser(parser)


def config_from_parser(parser):
    if "problem" not in parser:
        raise ConfigInvalid("missing [problem] section")
    if "graph" not in parser:
        raise ConfigInvalid("missing [graph] section")
    if "schedule" not in parser:
        raise ConfigInvalid("missing [schedule] section")
    prob = parser["problem"]

    def need(sec, key, conv, secname):
        if key not in sec:
            raise ConfigInvalid("[%s] is missing %r" % (secname, key))
        try:
            return conv(sec[key])
        except ValueError:
            raise ConfigInvalid("[%s] %s: cannot parse %r"
                                % (secname, key, sec[key]))

    N = need(prob, "N", int, "problem")
    gamma = need(prob, "gamma", float, "problem")
    eps = need(prob, "eps", float, "problem")
    eps_b = need(prob, "eps_b", float, "problem")
    eps_g = need(prob, "eps_g", float, "problem")
    beta = need(prob, "beta", float, "problem")
    seed = need(prob, "seed", int, "problem")
    T_sim = need(prob, "T_sim", int, "problem")
    warm = prob.get("warm_start", "false").strip().lower() in ("1", "true",
                                                               "yes", "on")
    cap = int(prob.get("iteration_cap", "100000"))

    gsec = parser["graph"]
    M = need(gsec, "M", int, "graph")
    edges = _parse_edges(gsec.get("edges", ""), "[graph] edges")
    graph = Digraph.from_edges_1based(M, edges)

    ssec = parser["schedule"]
    tau_lo = need(ssec, "tau_lo", float, "schedule")
    tau_hi = need(ssec, "tau_hi", float, "schedule")
    tau_delay = need(ssec, "tau_delay", float, "schedule")
    factors = None
    if ssec.get("factors"):
        factors = tuple(_parse_vector(ssec["factors"].replace(",", " "),
                                      "[schedule] factors"))
        if len(factors) != M:
            raise ConfigInvalid("[schedule] factors: need %d entries" % M)
    delay_dist = ssec.get("delay_dist", "uniform").strip()
    schedule = Schedule(tau_lo, tau_hi, tau_delay, factors, delay_dist)

    subsystems, x0_parts = [], []
    for i in range(1, M + 1):
        name = "subsystem %d" % i
        if name not in parser:
            raise ConfigInvalid("missing [%s] section" % name)
        sec = parser[name]
        where = "[%s]" % name

        def mneed(key):
            if key not in sec:
                raise ConfigInvalid("%s is missing %r" % (where, key))
            return _parse_matrix(sec[key], where + " " + key)

        A = mneed("A")
        B = mneed("B")
        Q = mneed("Q")
        R = mneed("R")
        Cg = mneed("Cg")
        Dg = mneed("Dg")
        X = _polytope_from(sec, "X", where)
        U = _polytope_from(sec, "U", where)
        if "x0" not in sec:
            raise ConfigInvalid("%s is missing 'x0'" % where)
        x0_parts.append(_parse_vector(sec["x0"], where + " x0"))
        subsystems.append(LtiSubsystem(A=A, B=B, Q=Q, R=R, X=X, U=U,
                                       Cg=Cg, Dg=Dg))

    cfg = DmpcConfig(subsystems=subsystems, N=N, gamma=gamma, eps=eps,
                     eps_b=eps_b, eps_g=eps_g, graph=graph,
                     schedule=schedule, beta=beta, seed=seed, T_sim=T_sim,
                     x0=np.concatenate(x0_parts), warm_start=warm,
                     iteration_cap=cap)
    cfg.validate()
    return cfg


def serialize_config(cfg):
    """Write a DmpcConfig back out in normalized text form."""
    lines = ["[problem]"]
    lines.append("N = %d" % cfg.N)
    for key in ("gamma", "eps", "eps_b", "eps_g", "beta"):
        lines.append("%s = %s" % (key, _fmt(getattr(cfg, key))))
    lines.append("seed = %d" % cfg.seed)
    lines.append("T_sim = %d" % cfg.T_sim)
    lines.append("warm_start = %s" % ("true" if cfg.warm_start else "false"))
    lines.append("iteration_cap = %d" % cfg.iteration_cap)

    lines.append("")
    lines.append("[graph]")
    lines.append("M = %d" % cfg.M)
    edges = ["%d>%d" % (i + 1, j + 1) for i, j in cfg.graph.edges_nonself()]
    lines.append("edges = %s" % ", ".join(edges))

    sched = cfg.schedule
    lines.append("")
    lines.append("[schedule]")
    lines.append("tau_lo = %s" % _fmt(sched.tau_lo))
    lines.append("tau_hi = %s" % _fmt(sched.tau_hi))
    lines.append("tau_delay = %s" % _fmt(sched.tau_delay))
    if sched.factors is not None:
        lines.append("factors = %s" % ", ".join(_fmt(f)
                                                for f in sched.factors))
    lines.append("delay_dist = %s" % sched.delay_dist)

    x_parts = cfg.split_state(cfg.x0)
    for i, sys in enumerate(cfg.subsystems):
        lines.append("")
        lines.append("[subsystem %d]" % (i + 1))
        for key, mat in (("A", sys.A), ("B", sys.B), ("Q", sys.Q),
                         ("R", sys.R), ("Cg", sys.Cg), ("Dg", sys.Dg)):
            lines.append("%s = %s" % (key, _mat_to_str(mat)))
        for prefix, poly in (("X", sys.X), ("U", sys.U)):
            b = poly.as_box()
            if b is not None:
                lines.append("%s_lb = %s" % (prefix, _vec_to_str(b[0])))
                lines.append("%s_ub = %s" % (prefix, _vec_to_str(b[1])))
            else:
                lines.append("%s_G = %s" % (prefix, _mat_to_str(poly.G)))
                lines.append("%s_h = %s" % (prefix, _vec_to_str(poly.h)))
        lines.append("x0 = %s" % _vec_to_str(x_parts[i]))
    return "\n".join(lines) + "\n"


def save_config(cfg, path):
    text = serialize_config(cfg)
    with open(path, "w") as fh:
        fh.write(text)
    return path
