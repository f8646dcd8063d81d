"""Convex re-dispatch program: assembly, interior-point solution, setpoints.

The decision vector stacks, in order: the rectangular source-voltage deviation
(6), the rectangular non-source voltage deviations (2N), the active power
deviations at all node phases (N+3), the reactive deviations (N+3), and the
three tap-ratio deviations.  The objective is the summed source power
deviation; equalities carry the linearized network map, the tap coupling, the
transformer power balance, and frozen injections at pure load nodes;
inequalities are boxes, the tightened voltage circles/half-planes, apparent
power balls at generator nodes, and optional line thermal balls.

The solver is a primal-dual interior-point method on the quadratically
constrained linear program, preceded by a Phase-I slack minimization whenever
the zero deviation is not strictly feasible.  An infeasible program is
certified by the positive Phase-I optimum.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigError
from .grid_model import GridModel, TapVector
from .powerflow import SensitivityMatrix

KKT_TOL = 1e-6
IPM_MAX_ITER = 200


# ---------------------------------------------------------------------------
# program representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariableLayout:
    """Column bookkeeping for the stacked decision vector."""

    n_nodes: int                 # N, non-source node phases
    ren_nodes: tuple             # global node indices with dispatchable injection

    @property
    def n_total(self) -> int:
        return self.n_nodes + 3

    @property
    def n_vars(self) -> int:
        return 4 * self.n_nodes + 15

    # column helpers; g is a global node index (source occupies 0..2)
    def re_v(self, g: int) -> int:
        return g if g < 3 else 6 + (g - 3)

    def im_v(self, g: int) -> int:
        return 3 + g if g < 3 else 6 + self.n_nodes + (g - 3)

    def dp(self, g: int) -> int:
        return 6 + 2 * self.n_nodes + g

    def dq(self, g: int) -> int:
        return 6 + 2 * self.n_nodes + self.n_total + g

    def dtap(self, phase: int) -> int:
        return 6 + 2 * self.n_nodes + 2 * self.n_total + phase

    @property
    def v_cols(self) -> np.ndarray:
        """Columns matching the sensitivity matrix ordering
        [Re V_src; Re V; Im V_src; Im V]."""
        n = self.n_nodes
        return np.concatenate([np.arange(0, 3), np.arange(6, 6 + n),
                               np.arange(3, 6), np.arange(6 + n, 6 + 2 * n)])

    @property
    def dv_rect_cols(self) -> np.ndarray:
        """Columns of the non-source deviation in [Re; Im] stacking."""
        return np.arange(6, 6 + 2 * self.n_nodes)

    def describe(self) -> dict:
        n = self.n_nodes
        return {
            "delta_v_src_rect": [0, 6],
            "delta_v_rect": [6, 6 + 2 * n],
            "delta_p": [6 + 2 * n, 6 + 2 * n + self.n_total],
            "delta_q": [6 + 2 * n + self.n_total, 6 + 2 * n + 2 * self.n_total],
            "delta_tap": [self.n_vars - 3, self.n_vars],
        }


@dataclass
class BallConstraint:
    """||B x[idx] + d||^2 + lin_coef . x[lin_idx] <= rhs (B None means identity)."""

    idx: np.ndarray
    d: np.ndarray
    rhs: float
    label: str
    B: np.ndarray | None = None
    lin_idx: np.ndarray | None = None
    lin_coef: np.ndarray | None = None


@dataclass
class ConvexProgram:
    """Linear objective, linear equalities, linear and ball inequalities."""

    layout: VariableLayout
    c: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    g_lin: np.ndarray
    h_lin: np.ndarray
    lin_labels: list
    balls: list
    notes: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "layout": self.layout.describe(),
            "n_vars": self.n,
            "objective": self.c.tolist(),
            "equalities": {"a": self.a_eq.tolist(), "b": self.b_eq.tolist()},
            "linear_inequalities": {"g": self.g_lin.tolist(),
                                    "h": self.h_lin.tolist(),
                                    "labels": list(self.lin_labels)},
            "balls": [{
                "idx": ball.idx.tolist(),
                "d": ball.d.tolist(),
                "rhs": ball.rhs,
                "label": ball.label,
                "b_matrix": None if ball.B is None else ball.B.tolist(),
                "lin_idx": None if ball.lin_idx is None else ball.lin_idx.tolist(),
                "lin_coef": None if ball.lin_coef is None else ball.lin_coef.tolist(),
            } for ball in self.balls],
            "notes": self.notes,
        }


@dataclass
class EnergyLimits:
    """Dispatch boxes and apparent-power caps at generator node phases."""

    nodes: tuple                 # global node indices
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    s_max: np.ndarray

    def __post_init__(self):
        r = len(self.nodes)
        for name in ("p_min", "p_max", "q_min", "q_max", "s_max"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (r,):
                raise ConfigError(f"energy limit '{name}' must have length {r}")
            setattr(self, name, arr)
        if np.any(self.p_min > self.p_max + 1e-12):
            raise ConfigError("p_min exceeds p_max")
        if np.any(self.q_min > self.q_max + 1e-12):
            raise ConfigError("q_min exceeds q_max")
        if np.any(self.s_max < -1e-12):
            raise ConfigError("s_max must be nonnegative")


@dataclass
class Setpoints:
    """Absolute control targets carried between closed-loop steps."""

    tap: TapVector                       # applied (rounded) ratios
    dg: dict                             # global node index -> complex S
    v_src: np.ndarray                    # complex (3,)
    tap_continuous: TapVector | None = None

    @staticmethod
    def initial(grid: GridModel) -> "Setpoints":
        return Setpoints(tap=TapVector.nominal(), dg={}, v_src=grid.v_src.copy(),
                         tap_continuous=TapVector.nominal())


@dataclass
class OpfSolution:
    """Solver output: optimum, multipliers, and certification residuals."""

    status: str                          # optimal | infeasible | max-iter
    layout: VariableLayout
    x: np.ndarray | None
    objective: float
    kkt: dict
    duals_linear: np.ndarray
    duals_ball: np.ndarray
    lin_labels: list
    ball_labels: list
    nu: np.ndarray
    iterations: int
    phase1_slack: float | None = None

    @property
    def delta_v_rect(self) -> np.ndarray:
        return self.x[self.layout.dv_rect_cols]

    @property
    def delta_v_src_rect(self) -> np.ndarray:
        return self.x[:6]

    @property
    def delta_p(self) -> np.ndarray:
        lo = self.layout.dp(0)
        return self.x[lo:lo + self.layout.n_total]

    @property
    def delta_q(self) -> np.ndarray:
        lo = self.layout.dq(0)
        return self.x[lo:lo + self.layout.n_total]

    @property
    def delta_tap(self) -> np.ndarray:
        return self.x[-3:]

    def max_dual(self, label_prefix: str) -> float:
        best = 0.0
        for lam, lab in zip(self.duals_linear, self.lin_labels):
            if lab.startswith(label_prefix):
                best = max(best, float(lam))
        for lam, lab in zip(self.duals_ball, self.ball_labels):
            if lab.startswith(label_prefix):
                best = max(best, float(lam))
        return best

    def to_json_dict(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "x": None if self.x is None else self.x.tolist(),
            "kkt": self.kkt,
            "duals_linear": self.duals_linear.tolist(),
            "duals_ball": self.duals_ball.tolist(),
            "iterations": self.iterations,
            "phase1_slack": self.phase1_slack,
            "layout": self.layout.describe(),
        }


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _independent_rows(a: np.ndarray, b: np.ndarray):
    """Greedy row selection; dependent rows are dropped with a warning.

    Returns (a_kept, b_kept, consistent) where `consistent` is False when a
    dropped row contradicts the kept ones.
    """
    if a.shape[0] == 0:
        return a, b, True
    kept = []
    basis = []
    consistent = True
    for i in range(a.shape[0]):
        row = a[i].astype(float)
        rhs = float(b[i])
        norm0 = np.linalg.norm(row) + abs(rhs)
        for brow, brhs in basis:
            coef = row @ brow
            row = row - coef * brow
            rhs = rhs - coef * brhs
        res = np.linalg.norm(row)
        if res > 1e-10 * max(1.0, norm0):
            scale = 1.0 / res
            basis.append((row * scale, rhs * scale))
            kept.append(i)
        else:
            if abs(rhs) > 1e-9 * max(1.0, norm0):
                consistent = False
            warnings.warn(f"dropping linearly dependent equality row {i}",
                          stacklevel=3)
    return a[kept], b[kept], consistent


def assemble_program(m: SensitivityMatrix, est, tightened, grid: GridModel,
                     limits: EnergyLimits, prev: Setpoints, *,
                     free_source_voltage: bool = False,
                     source_voltage_delta_max: float = 0.02,
                     reactive_objective_weight: float = 1.0) -> ConvexProgram:
    """Build the deviation re-dispatch program around the current estimate.

    `prev` carries the applied setpoints of the previous step; generator
    deviations are taken relative to those, and the tap coupling is linearized
    at the previous ratio and the estimated primary-side voltage.
    """
    n = grid.n
    nt = grid.n_total
    layout = VariableLayout(n_nodes=n, ren_nodes=tuple(limits.nodes))
    nv = layout.n_vars
    tf = grid.transformer

    if m.n_total != nt:
        raise ConfigError("sensitivity matrix does not match the grid size")
    if est.n != n:
        raise ConfigError("estimation result does not match the grid size")
    if tightened.n_nodes != n:
        raise ConfigError("tightened constraint set does not match the grid size")
    for g in limits.nodes:
        if not 3 <= g < nt:
            raise ConfigError(f"generator node index {g} is not a non-source node")
        if g in set(grid.tf1_nodes) | set(grid.tf2_nodes):
            raise ConfigError("generator at a transformer node is not supported")
    if tf is not None:
        if prev.tap is None or not prev.tap.within(tf.tap_min, tf.tap_max):
            raise ConfigError("previous tap outside bounds")

    # objective: summed source power deviation (constant prior terms dropped)
    c = np.zeros(nv)
    for g in range(3):
        c[layout.dp(g)] = 1.0
        c[layout.dq(g)] = reactive_objective_weight

    rows_a = []
    rows_b = []

    def eq_row(entries, rhs=0.0):
        row = np.zeros(nv)
        for col, val in entries:
            row[col] += val
        rows_a.append(row)
        rows_b.append(rhs)

    # power-flow linearization: dS = M dV
    v_cols = layout.v_cols
    for r in range(2 * nt):
        row = np.zeros(nv)
        target = layout.dp(r) if r < nt else layout.dq(r - nt)
        row[target] = 1.0
        row[v_cols] -= m.m[r]
        rows_a.append(row)
        rows_b.append(0.0)

    ren_set = set(limits.nodes)
    tf1 = list(grid.tf1_nodes)
    tf2 = list(grid.tf2_nodes)

    if tf is not None:
        v_tf1_prev = est.v_est[[g - 3 for g in tf1]]
        for k, (g1, g2) in enumerate(zip(tf1, tf2)):
            ph = grid.phase_of(g2)
            a_prev = prev.tap.values[ph]
            eq_row([(layout.re_v(g2), 1.0), (layout.re_v(g1), -a_prev),
                    (layout.dtap(ph), -v_tf1_prev[k].real)])
            eq_row([(layout.im_v(g2), 1.0), (layout.im_v(g1), -a_prev),
                    (layout.dtap(ph), -v_tf1_prev[k].imag)])
        for g1, g2 in zip(tf1, tf2):
            eq_row([(layout.dp(g1), 1.0), (layout.dp(g2), 1.0)])
            eq_row([(layout.dq(g1), 1.0), (layout.dq(g2), 1.0)])
    else:
        # no transformer: taps are inert, pin their deviations
        for ph in range(3):
            eq_row([(layout.dtap(ph), 1.0)])

    frozen = [g for g in range(3, nt)
              if g not in ren_set and g not in tf1 and g not in tf2]
    for g in frozen:
        eq_row([(layout.dp(g), 1.0)])
        eq_row([(layout.dq(g), 1.0)])

    if not free_source_voltage:
        for col in range(6):
            eq_row([(col, 1.0)])

    a_eq = np.vstack(rows_a) if rows_a else np.zeros((0, nv))
    b_eq = np.asarray(rows_b)
    a_eq, b_eq, consistent = _independent_rows(a_eq, b_eq)
    if not consistent:
        raise ConfigError("equality constraints are inconsistent")

    # linear inequalities
    g_rows = []
    h_vals = []
    labels = []

    def lin_row(entries, ub, label):
        row = np.zeros(nv)
        for col, val in entries:
            row[col] += val
        g_rows.append(row)
        h_vals.append(ub)
        labels.append(label)

    if tf is not None:
        for ph in range(3):
            a_prev = prev.tap.values[ph]
            lin_row([(layout.dtap(ph), 1.0)], tf.tap_max - a_prev, f"tap-box[{ph}]")
            lin_row([(layout.dtap(ph), -1.0)], a_prev - tf.tap_min, f"tap-box[{ph}]")

    for r, g in enumerate(limits.nodes):
        s_prev = prev.dg.get(g, 0.0 + 0.0j)
        p_prev, q_prev = s_prev.real, s_prev.imag
        for lo, hi, col, pv, tag in (
                (limits.p_min[r], limits.p_max[r], layout.dp(g), p_prev, "p"),
                (limits.q_min[r], limits.q_max[r], layout.dq(g), q_prev, "q")):
            if hi - lo < 1e-12:
                # degenerate box: pin exactly, keeps Phase I strictly feasible
                extra = np.zeros(nv)
                extra[col] = 1.0
                a_eq = np.vstack([a_eq, extra])
                b_eq = np.append(b_eq, lo - pv)
                continue
            if np.isfinite(hi):
                lin_row([(col, 1.0)], hi - pv, f"energy-box[{g}{tag}]")
            if np.isfinite(lo):
                lin_row([(col, -1.0)], pv - lo, f"energy-box[{g}{tag}]")

    for i in range(n):
        g = i + 3
        nrm = tightened.normals[i]
        for k in range(4):
            lin_row([(layout.re_v(g), -nrm[0]), (layout.im_v(g), -nrm[1])],
                    -tightened.hp_rhs[i, k], f"v-halfplane[{i},{k}]")

    if free_source_voltage:
        for col in range(6):
            lin_row([(col, 1.0)], source_voltage_delta_max, f"vsrc-box[{col}]")
            lin_row([(col, -1.0)], source_voltage_delta_max, f"vsrc-box[{col}]")

    g_lin = np.vstack(g_rows) if g_rows else np.zeros((0, nv))
    h_lin = np.asarray(h_vals)

    # ball inequalities
    balls = []
    for i in range(n):
        g = i + 3
        idx = np.array([layout.re_v(g), layout.im_v(g)])
        for k in range(4):
            balls.append(BallConstraint(
                idx=idx, d=tightened.circle_centers[i, k].copy(),
                rhs=tightened.v_max ** 2, label=f"v-circle[{i},{k}]"))
    for r, g in enumerate(limits.nodes):
        if limits.s_max[r] < 1e-12 or not np.isfinite(limits.s_max[r]):
            continue
        s_prev = prev.dg.get(g, 0.0 + 0.0j)
        balls.append(BallConstraint(
            idx=np.array([layout.dp(g), layout.dq(g)]),
            d=np.array([s_prev.real, s_prev.imag]),
            rhs=float(limits.s_max[r]) ** 2, label=f"dg-cone[{g}]"))

    return ConvexProgram(layout=layout, c=c, a_eq=a_eq, b_eq=b_eq,
                         g_lin=g_lin, h_lin=h_lin, lin_labels=labels,
                         balls=balls,
                         notes={"free_source_voltage": free_source_voltage})


def line_current_terms(grid: GridModel, v_est_bus, layout: VariableLayout):
    """Affine line-current maps at the linearization point.

    One term per (branch, shared phase): current = B x[idx] + d with x the
    decision vector, giving `add_thermal_constraints` its ball geometry.
    """
    v_est_bus = np.asarray(v_est_bus, dtype=complex)
    terms = []
    for br in grid.branches:
        if grid.is_transformer_branch(br):
            continue
        shared, core = grid._branch_core(br)
        gi = [grid.node(br.from_bus, p) for p in shared]
        gj = [grid.node(br.to_bus, p) for p in shared]
        for prow, ph in enumerate(shared):
            coeffs = {}
            cur = 0.0 + 0.0j
            for q, (a, bnode) in enumerate(zip(gi, gj)):
                w = core[prow, q]
                coeffs[a] = coeffs.get(a, 0.0) + w
                coeffs[bnode] = coeffs.get(bnode, 0.0) - w
                cur += w * (v_est_bus[a] - v_est_bus[bnode])
            idx = []
            bcols = []
            for gnode, w in coeffs.items():
                idx.extend([layout.re_v(gnode), layout.im_v(gnode)])
                bcols.append(np.array([[w.real, -w.imag], [w.imag, w.real]]))
            b_mat = np.hstack(bcols)
            terms.append((np.array(idx), b_mat,
                          np.array([cur.real, cur.imag]),
                          f"thermal[{br.from_bus}-{br.to_bus},{ph}]"))
    return terms


def add_thermal_constraints(prog: ConvexProgram, line_terms, i_thermal) -> ConvexProgram:
    """Append squared line-current limits; returns a new program."""
    terms = list(line_terms)
    i_thermal = np.broadcast_to(np.asarray(i_thermal, dtype=float), (len(terms),))
    if np.any(i_thermal <= 0):
        raise ConfigError("thermal current limits must be positive")
    balls = list(prog.balls)
    for (idx, b_mat, d, label), lim in zip(terms, i_thermal):
        if not np.isfinite(lim):
            continue
        balls.append(BallConstraint(idx=idx, d=d, rhs=float(lim) ** 2,
                                    label=label, B=b_mat))
    return replace(prog, balls=balls)


# ---------------------------------------------------------------------------
# primal-dual interior point
# ---------------------------------------------------------------------------

class _IneqSet:
    """Uniform view of the inequality constraints for the solver.

    Order of rows: linear first, then simple balls (identity geometry), then
    general balls.  A slack column (Phase I) subtracts x[col] from every row.
    """

    def __init__(self, g_lin, h_lin, balls, n, slack_col=None):
        self.g = g_lin
        self.h = h_lin
        self.n = n
        self.slack_col = slack_col
        simple = [bl for bl in balls if bl.B is None and bl.lin_idx is None]
        self.gen = [bl for bl in balls if not (bl.B is None and bl.lin_idx is None)]
        if simple:
            self.s_idx = np.array([bl.idx for bl in simple])      # (ms, 2)
            self.s_d = np.array([bl.d for bl in simple])
            self.s_rhs = np.array([bl.rhs for bl in simple])
        else:
            self.s_idx = np.zeros((0, 2), dtype=int)
            self.s_d = np.zeros((0, 2))
            self.s_rhs = np.zeros(0)
        self.m_lin = self.g.shape[0]
        self.m_simple = self.s_idx.shape[0]
        self.m = self.m_lin + self.m_simple + len(self.gen)
        self.labels = None  # optional, attached by the caller

    def values(self, x):
        parts = []
        if self.m_lin:
            parts.append(self.g @ x - self.h)
        else:
            parts.append(np.zeros(0))
        if self.m_simple:
            pts = x[self.s_idx] + self.s_d
            parts.append(np.sum(pts * pts, axis=1) - self.s_rhs)
        else:
            parts.append(np.zeros(0))
        gen_vals = np.empty(len(self.gen))
        for k, bl in enumerate(self.gen):
            img = (bl.B @ x[bl.idx] if bl.B is not None else x[bl.idx]) + bl.d
            val = img @ img - bl.rhs
            if bl.lin_idx is not None:
                val += bl.lin_coef @ x[bl.lin_idx]
            gen_vals[k] = val
        parts.append(gen_vals)
        f = np.concatenate(parts)
        if self.slack_col is not None:
            f = f - x[self.slack_col]
        return f

    def jacobian(self, x):
        df = np.zeros((self.m, self.n))
        if self.m_lin:
            df[:self.m_lin] = self.g
        if self.m_simple:
            rows = self.m_lin + np.arange(self.m_simple)
            grads = 2.0 * (x[self.s_idx] + self.s_d)              # (ms, 2)
            df[rows[:, None], self.s_idx] = grads
        base = self.m_lin + self.m_simple
        for k, bl in enumerate(self.gen):
            img = (bl.B @ x[bl.idx] if bl.B is not None else x[bl.idx]) + bl.d
            grad = 2.0 * (bl.B.T @ img if bl.B is not None else img)
            df[base + k, bl.idx] += grad
            if bl.lin_idx is not None:
                df[base + k, bl.lin_idx] += bl.lin_coef
        if self.slack_col is not None:
            df[:, self.slack_col] -= 1.0
        return df

    def add_hessian(self, lam, h):
        """h += sum_k lam_k * hess(f_k)."""
        if self.m_simple:
            lam_s = lam[self.m_lin:self.m_lin + self.m_simple]
            diag = np.zeros(self.n)
            np.add.at(diag, self.s_idx[:, 0], 2.0 * lam_s)
            np.add.at(diag, self.s_idx[:, 1], 2.0 * lam_s)
            h[np.diag_indices(self.n)] += diag
        base = self.m_lin + self.m_simple
        for k, bl in enumerate(self.gen):
            blk = 2.0 * (bl.B.T @ bl.B if bl.B is not None else np.eye(len(bl.idx)))
            h[np.ix_(bl.idx, bl.idx)] += lam[base + k] * blk


def _pdipm(c, a_eq, b_eq, ineq: _IneqSet, x0, *, mu=10.0, max_iter=IPM_MAX_ITER,
           tol_feas=1e-10, tol_gap=1e-9, early_stop=None):
    """Primal-dual interior-point iteration from a strictly feasible x0."""
    n = x0.shape[0]
    p = a_eq.shape[0]
    x = x0.copy()
    f = ineq.values(x)
    if np.max(f) >= 0:
        raise ValueError("interior-point start must be strictly feasible")
    lam = np.minimum(1.0 / np.maximum(-f, 1e-8), 1e8)
    nu = np.zeros(p)
    m = ineq.m

    def residuals(xv, lv, nv, fv, dfv, t):
        r_dual = c + dfv.T @ lv + (a_eq.T @ nv if p else 0.0)
        r_cent = -lv * fv - 1.0 / t
        r_pri = a_eq @ xv - b_eq if p else np.zeros(0)
        return r_dual, r_cent, r_pri

    status = "max-iter"
    iters = 0
    for it in range(max_iter):
        iters = it + 1
        df = ineq.jacobian(x)
        eta = float(-f @ lam)
        t = mu * m / max(eta, 1e-300)
        r_dual, r_cent, r_pri = residuals(x, lam, nu, f, df, t)

        if (np.linalg.norm(r_pri, np.inf) if p else 0.0) <= tol_feas \
                and np.linalg.norm(r_dual, np.inf) <= 1e-8 and eta <= tol_gap:
            status = "optimal"
            break
        if early_stop is not None and early_stop(x):
            status = "early"
            break

        w = lam / (-f)
        h = df.T @ (w[:, None] * df)
        ineq.add_hessian(lam, h)
        rhs_x = -(r_dual + df.T @ (r_cent / f))
        if p:
            kkt = np.zeros((n + p, n + p))
            kkt[:n, :n] = h
            kkt[:n, n:] = a_eq.T
            kkt[n:, :n] = a_eq
            kkt[n:, n:] = -1e-12 * np.eye(p)
            rhs = np.concatenate([rhs_x, -r_pri])
        else:
            kkt = h
            rhs = rhs_x
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            kkt[:n, :n] += 1e-10 * np.eye(n)
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        dx = sol[:n]
        dnu = sol[n:] if p else np.zeros(0)
        dlam = (r_cent - lam * (df @ dx)) / f

        # step length: keep lam > 0, f < 0, then decrease the residual norm
        neg = dlam < 0
        s = 1.0
        if np.any(neg):
            s = min(1.0, 0.99 * np.min(-lam[neg] / dlam[neg]))
        norm0 = math.sqrt(np.linalg.norm(r_dual) ** 2 + np.linalg.norm(r_cent) ** 2
                          + (np.linalg.norm(r_pri) ** 2 if p else 0.0))
        accepted = False
        for _ in range(60):
            x_new = x + s * dx
            f_new = ineq.values(x_new)
            if np.max(f_new) < 0:
                lam_new = lam + s * dlam
                nu_new = nu + s * dnu
                df_new = ineq.jacobian(x_new)
                rd, rc, rp = residuals(x_new, lam_new, nu_new, f_new, df_new, t)
                norm1 = math.sqrt(np.linalg.norm(rd) ** 2 + np.linalg.norm(rc) ** 2
                                  + (np.linalg.norm(rp) ** 2 if p else 0.0))
                if norm1 <= (1.0 - 0.01 * s) * norm0:
                    accepted = True
                    break
            s *= 0.5
        if not accepted:
            break
        x, lam, nu, f = x_new, lam_new, nu_new, f_new

    return {"x": x, "lam": lam, "nu": nu, "f": f, "status": status,
            "iterations": iters}


def _phase1(a_eq, b_eq, ineq_builder, n):
    """Find a strictly feasible point or certify infeasibility.

    Returns (x or None, slack) where slack is the minimal achievable
    constraint violation (positive certifies infeasibility).
    """
    if a_eq.shape[0]:
        x0, *_ = np.linalg.lstsq(a_eq, b_eq, rcond=None)
        if np.linalg.norm(a_eq @ x0 - b_eq, np.inf) > 1e-8:
            return None, np.inf
    else:
        x0 = np.zeros(n)
    ineq0 = ineq_builder(None)
    f0 = ineq0.values(x0)
    if np.max(f0) < -1e-9:
        return x0, float(np.max(f0))

    # augmented problem: minimize the shared slack s with f_k(x) <= s
    ineq_s = ineq_builder(n)   # slack column appended as coordinate n
    x_aug = np.concatenate([x0, [np.max(f0) + max(1.0, 0.1 * abs(np.max(f0)))]])
    a_aug = np.hstack([a_eq, np.zeros((a_eq.shape[0], 1))]) \
        if a_eq.shape[0] else np.zeros((0, n + 1))
    c_aug = np.zeros(n + 1)
    c_aug[n] = 1.0
    res = _pdipm(c_aug, a_aug, b_eq, ineq_s, x_aug,
                 early_stop=lambda xv: xv[n] < -1e-6)
    slack = float(res["x"][n])
    if slack < -1e-9:
        return res["x"][:n], slack
    return None, max(slack, 0.0)


def solve_program(prog: ConvexProgram, *, max_iter: int = IPM_MAX_ITER) -> OpfSolution:
    """Solve the program; certify with KKT residuals or a Phase-I slack."""
    n = prog.n

    def builder(slack_col):
        if slack_col is None:
            return _IneqSet(prog.g_lin, prog.h_lin, prog.balls, n)
        # widen every row by the slack coordinate
        g = np.hstack([prog.g_lin, np.zeros((prog.g_lin.shape[0], 1))])
        balls = []
        for bl in prog.balls:
            balls.append(BallConstraint(idx=bl.idx, d=bl.d, rhs=bl.rhs,
                                        label=bl.label, B=bl.B,
                                        lin_idx=bl.lin_idx, lin_coef=bl.lin_coef))
        return _IneqSet(g, prog.h_lin, balls, n + 1, slack_col=slack_col)

    def failed(status, phase1_slack=None, x=None, iters=0):
        return OpfSolution(
            status=status, layout=prog.layout, x=x,
            objective=float("nan"), kkt={}, duals_linear=np.zeros(0),
            duals_ball=np.zeros(0), lin_labels=[], ball_labels=[],
            nu=np.zeros(0), iterations=iters, phase1_slack=phase1_slack)

    if prog.g_lin.shape[0] == 0 and not prog.balls:
        raise ConfigError("program must declare at least one inequality")

    x0, slack = _phase1(prog.a_eq, prog.b_eq, builder, n)
    if x0 is None:
        return failed("infeasible", phase1_slack=slack)

    ineq = builder(None)
    res = _pdipm(prog.c, prog.a_eq, prog.b_eq, ineq, x0, max_iter=max_iter)
    x, lam, nu = res["x"], res["lam"], res["nu"]
    f = ineq.values(x)
    df = ineq.jacobian(x)
    r_dual = prog.c + df.T @ lam + (prog.a_eq.T @ nu if prog.a_eq.shape[0] else 0.0)
    kkt = {
        "stationarity": float(np.linalg.norm(r_dual, np.inf)),
        "primal": float(max(
            np.linalg.norm(prog.a_eq @ x - prog.b_eq, np.inf)
            if prog.a_eq.shape[0] else 0.0,
            max(np.max(f), 0.0))),
        "dual": float(max(0.0, -np.min(lam) if lam.size else 0.0)),
        "complementarity": float(np.max(np.abs(lam * f)) if lam.size else 0.0),
    }
    ok = res["status"] == "optimal" and all(v < KKT_TOL for v in kkt.values())
    m_lin = prog.g_lin.shape[0]
    return OpfSolution(
        status="optimal" if ok else "max-iter",
        layout=prog.layout, x=x, objective=float(prog.c @ x), kkt=kkt,
        duals_linear=lam[:m_lin], duals_ball=lam[m_lin:],
        lin_labels=list(prog.lin_labels),
        ball_labels=[bl.label for bl in prog.balls],
        nu=nu, iterations=res["iterations"], phase1_slack=None)


def relax_voltage_constraints(prog: ConvexProgram, weight: float = 1e3) -> ConvexProgram:
    """Soft-mode variant: per-node slack on the voltage constraints.

    Adds one nonnegative slack per node phase, penalized linearly in the
    objective; circles gain `+slack` headroom on the squared radius and half
    planes gain `+slack` directly.  Diagnostic mode for infeasible programs.
    """
    n_old = prog.n
    n_nodes = prog.layout.n_nodes
    n_new = n_old + n_nodes

    def widen(mat):
        if mat.shape[0] == 0:
            return np.zeros((0, n_new))
        return np.hstack([mat, np.zeros((mat.shape[0], n_nodes))])

    c = np.concatenate([prog.c, weight * np.ones(n_nodes)])
    a_eq = widen(prog.a_eq)
    g_lin = widen(prog.g_lin)
    h_lin = prog.h_lin.copy()
    labels = list(prog.lin_labels)
    for row, lab in enumerate(labels):
        if lab.startswith("v-halfplane["):
            i = int(lab.split("[")[1].split(",")[0])
            g_lin[row, n_old + i] -= 1.0
    extra_rows = []
    for i in range(n_nodes):
        row = np.zeros(n_new)
        row[n_old + i] = -1.0
        extra_rows.append(row)
        labels.append(f"slack-pos[{i}]")
    g_lin = np.vstack([g_lin, extra_rows])
    h_lin = np.concatenate([h_lin, np.zeros(n_nodes)])

    balls = []
    for bl in prog.balls:
        if bl.label.startswith("v-circle["):
            i = int(bl.label.split("[")[1].split(",")[0])
            balls.append(BallConstraint(
                idx=bl.idx, d=bl.d, rhs=bl.rhs, label=bl.label, B=None,
                lin_idx=np.array([n_old + i]), lin_coef=np.array([-1.0])))
        else:
            balls.append(bl)
    notes = dict(prog.notes)
    notes["relaxed"] = True
    return ConvexProgram(layout=prog.layout, c=c, a_eq=a_eq, b_eq=prog.b_eq,
                         g_lin=g_lin, h_lin=h_lin, lin_labels=labels,
                         balls=balls, notes=notes)


# ---------------------------------------------------------------------------
# setpoint post-processing
# ---------------------------------------------------------------------------

def round_taps(tap: TapVector, step: float, tap_min: float, tap_max: float) -> TapVector:
    """Nearest step multiple, exact midpoints toward nominal 1.0, then clamp."""
    if step <= 0:
        raise ConfigError("tap step must be positive")
    out = np.empty(3)
    for k, a in enumerate(tap.values):
        kf = math.floor(a / step + 1e-12)
        lo, hi = kf * step, (kf + 1) * step
        d_lo, d_hi = a - lo, hi - a
        if abs(d_lo - d_hi) <= 1e-12 * max(1.0, abs(a)):
            pick = lo if abs(lo - 1.0) <= abs(hi - 1.0) else hi
        else:
            pick = lo if d_lo < d_hi else hi
        out[k] = min(max(pick, tap_min), tap_max)
    return TapVector(out)


def extract_setpoints(sol: OpfSolution, prev: Setpoints, grid: GridModel,
                      limits: EnergyLimits) -> Setpoints:
    """Absolute setpoints prev + delta, taps rounded, boxes enforced.

    Clamping only absorbs solver tolerance; drift beyond that indicates an
    unconverged program and is the caller's responsibility to reject.
    """
    if sol.status != "optimal":
        raise ConfigError(f"cannot extract setpoints from status '{sol.status}'")
    tf = grid.transformer
    tap_cont = TapVector(prev.tap.values + sol.delta_tap)
    if tf is not None:
        tap_applied = round_taps(tap_cont, tf.tap_step, tf.tap_min, tf.tap_max)
    else:
        tap_applied = TapVector.nominal()
        tap_cont = TapVector.nominal()

    dg = {}
    for r, g in enumerate(limits.nodes):
        s_prev = prev.dg.get(g, 0.0 + 0.0j)
        p = s_prev.real + sol.delta_p[g]
        q = s_prev.imag + sol.delta_q[g]
        p = min(max(p, limits.p_min[r]), limits.p_max[r])
        q = min(max(q, limits.q_min[r]), limits.q_max[r])
        mag = math.hypot(p, q)
        if mag > limits.s_max[r] > 0:
            scale = limits.s_max[r] / mag
            p *= scale
            q *= scale
        elif limits.s_max[r] == 0:
            p = q = 0.0
        dg[g] = complex(p, q)

    dv = sol.delta_v_src_rect
    v_src = prev.v_src + (dv[:3] + 1j * dv[3:])
    return Setpoints(tap=tap_applied, dg=dg, v_src=v_src, tap_continuous=tap_cont)
