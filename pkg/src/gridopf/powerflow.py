"""Exact nonlinear power flow and its first-order sensitivity around a state.

The network equations in complex form are

    I = Y V_bus,      S = P + jQ = diag(conj(I)) V_bus

with V_bus = [V_src; V] stacked over node phases.  Power flow solves for V
given specified injections at load nodes, the ideal tap coupling
V_tf2 = diag(a) V_tf1 with S_tf1 + S_tf2 = 0 at the transformer, and the fixed
source voltage.  Positive injections generate; consumed load therefore enters
with a negative sign.

The same quadratic structure yields the exact Jacobian used both inside the
Newton iteration and, evaluated at an estimated state, as the sensitivity
matrix of the linear power-flow model:

    dS = A dV + B conj(dV),   A = diag(conj(Y V_bus)),   B = diag(V_bus) conj(Y)

which in stacked rectangular coordinates [Re; Im] reads

    [dP; dQ] = M [Re dV; Im dV],
    M = [[Re A + Re B, -Im A + Im B],
         [Im A + Im B,  Re A - Re B]].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, LowVoltageError, PowerFlowDivergedError
from .grid_model import AdmittanceMatrix, GridModel, TapVector

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
COLLAPSE_LIMIT = 0.3


class ComplexVoltageState:
    """Source plus non-source voltages with rectangular/polar accessors.

    Entries must be finite with strictly positive magnitude; a state carrying
    a collapsed node is rejected outright.
    """

    def __init__(self, v_src, v):
        v_src = np.asarray(v_src, dtype=complex)
        v = np.asarray(v, dtype=complex)
        if v_src.shape != (3,):
            raise ConfigError("v_src must have exactly 3 entries")
        allv = np.concatenate([v_src, v])
        if not np.all(np.isfinite(allv.real)) or not np.all(np.isfinite(allv.imag)):
            raise ConfigError("voltage state contains non-finite entries")
        if np.any(np.abs(allv) <= 0.0):
            raise ConfigError("voltage state contains a zero-magnitude node")
        self.v_src = v_src
        self.v = v
        for arr in (self.v_src, self.v):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def v_bus(self) -> np.ndarray:
        """Full stacked vector [V_src; V] of length N+3."""
        return np.concatenate([self.v_src, self.v])

    @property
    def rect(self) -> np.ndarray:
        """Non-source voltages as [Re V; Im V] of length 2N."""
        return np.concatenate([self.v.real, self.v.imag])

    @property
    def polar(self):
        """(magnitudes, angles) of the non-source voltages."""
        return np.abs(self.v), np.angle(self.v)

    @staticmethod
    def from_rect(v_src, rect) -> "ComplexVoltageState":
        rect = np.asarray(rect, dtype=float)
        n = rect.shape[0] // 2
        return ComplexVoltageState(v_src, rect[:n] + 1j * rect[n:])

    def tf1(self, grid: GridModel) -> np.ndarray:
        return self.v_bus[list(grid.tf1_nodes)]

    def tf2(self, grid: GridModel) -> np.ndarray:
        return self.v_bus[list(grid.tf2_nodes)]


@dataclass
class PowerInjection:
    """Complex power injected at every node phase (source included)."""

    s: np.ndarray  # complex, (N+3,), p.u.

    @property
    def p(self) -> np.ndarray:
        return self.s.real

    @property
    def q(self) -> np.ndarray:
        return self.s.imag

    @property
    def s_src(self) -> np.ndarray:
        return self.s[:3]

    @property
    def s_nonsource(self) -> np.ndarray:
        return self.s[3:]


@dataclass
class SensitivityMatrix:
    """Real 2(N+3) x 2(N+3) map from stacked voltage deltas to power deltas.

    Row layout [P_src; P; Q_src; Q], column layout [Re V_src; Re V; Im V_src;
    Im V], both in global node order.
    """

    m: np.ndarray
    n_total: int  # N + 3

    def apply(self, dv_rect_full: np.ndarray) -> np.ndarray:
        return self.m @ dv_rect_full


def compute_injections(y: AdmittanceMatrix, state: ComplexVoltageState) -> PowerInjection:
    """Complex injections S_i = V_i conj((Y V_bus)_i) at all node phases."""
    v_bus = state.v_bus
    if y.n != v_bus.shape[0]:
        raise ConfigError(
            f"dimension mismatch: admittance is {y.n}, state has {v_bus.shape[0]} nodes")
    return PowerInjection(s=v_bus * np.conj(y.matrix @ v_bus))


def _power_jacobian(y_matrix: np.ndarray, v_bus: np.ndarray) -> np.ndarray:
    """Exact Jacobian of [P; Q] with respect to [Re V_bus; Im V_bus]."""
    a = np.conj(y_matrix @ v_bus)          # diagonal of A
    b = v_bus[:, None] * np.conj(y_matrix)
    re_a = np.diag(a.real)
    im_a = np.diag(a.imag)
    return np.block([
        [re_a + b.real, -im_a + b.imag],
        [im_a + b.imag, re_a - b.real],
    ])


def linearize(y_isol: AdmittanceMatrix, state: ComplexVoltageState) -> SensitivityMatrix:
    """Sensitivity matrix M evaluated at (source voltage, estimated voltages).

    Exact first derivative of the quadratic injection map; the neglected
    remainder is diag(dV) conj(Y) conj(dV), second order in the deviation.
    """
    v_bus = state.v_bus
    if y_isol.n != v_bus.shape[0]:
        raise ConfigError("admittance/state dimension mismatch")
    return SensitivityMatrix(m=_power_jacobian(y_isol.matrix, v_bus),
                             n_total=v_bus.shape[0])


def flat_start(grid: GridModel, tap: TapVector, v_src=None) -> ComplexVoltageState:
    """Source voltage propagated to every bus, through the tap on side 2."""
    v_src = grid.v_src if v_src is None else np.asarray(v_src, dtype=complex)
    v = np.empty(grid.n, dtype=complex)
    in_sub2 = set(grid.sub2_nodes)
    for g in range(3, grid.n_total):
        ph = grid.phase_of(g)
        scale = tap.values[ph] if g in in_sub2 else 1.0
        v[g - 3] = scale * v_src[ph]
    return ComplexVoltageState(v_src, v)


def _residual_rows(grid: GridModel):
    """Row plan for the Newton system, one (kind, data) pair per node."""
    tf1 = list(grid.tf1_nodes)
    tf2 = list(grid.tf2_nodes)
    rows = []
    for g in range(3, grid.n_total):
        if g in tf1:
            k = tf1.index(g)
            rows.append(("tap", (g, tf2[k], grid.phase_of(g))))
        elif g in tf2:
            k = tf2.index(g)
            rows.append(("balance", (tf1[k], g)))
        else:
            rows.append(("load", g))
    return rows


def solve_powerflow(grid: GridModel, loads, dg=None, tap: TapVector | None = None,
                    v_src=None, tol: float = NEWTON_TOL,
                    max_iter: int = NEWTON_MAX_ITER) -> ComplexVoltageState:
    """Newton-Raphson solution of the exact power-flow equations.

    Parameters
    ----------
    loads : complex array (N,)
        Specified net injections at every non-source node phase (consumption
        negative).  Entries at transformer nodes must be zero.
    dg : dict {global node index: complex}, optional
        Additional injections (generator setpoints) added onto `loads`.
    tap : TapVector, optional
        Tap ratios; defaults to nominal.  Must lie within the declared bounds.
    v_src : complex (3,), optional
        Source voltage override.

    Returns a state with mismatch below `tol` (infinity norm, p.u.).  Raises
    PowerFlowDivergedError on non-convergence and LowVoltageError if any
    magnitude drops below 0.3 p.u. during iteration.
    """
    from .grid_model import build_isolated_admittance

    tap = TapVector.nominal() if tap is None else tap
    tf = grid.transformer
    if tf is not None and not tap.within(tf.tap_min, tf.tap_max):
        raise ConfigError(f"tap {tap.values} outside bounds "
                          f"[{tf.tap_min}, {tf.tap_max}]")

    loads = np.asarray(loads, dtype=complex)
    if loads.shape != (grid.n,):
        raise ConfigError(f"loads must have shape ({grid.n},), got {loads.shape}")
    s_spec = loads.copy()
    if dg:
        for g, s in dg.items():
            if not 3 <= g < grid.n_total:
                raise ConfigError(f"generator index {g} is not a non-source node")
            s_spec[g - 3] += s
    tf_nodes = set(grid.tf1_nodes) | set(grid.tf2_nodes)
    for g in tf_nodes:
        if s_spec[g - 3] != 0:
            raise ConfigError("injections at transformer nodes must be zero")

    y_isol = build_isolated_admittance(grid)
    rows = _residual_rows(grid)
    state = flat_start(grid, tap, v_src)
    v_src_vec = state.v_src
    x = state.rect.copy()
    n = grid.n

    # columns of the full Jacobian belonging to the non-source unknowns
    cols = np.concatenate([np.arange(3, n + 3), np.arange(n + 6, 2 * n + 6)])

    def unpack(xv):
        return xv[:n] + 1j * xv[n:]

    def residual(xv):
        v = unpack(xv)
        v_bus = np.concatenate([v_src_vec, v])
        s = v_bus * np.conj(y_isol.matrix @ v_bus)
        r = np.empty(2 * n)
        for k, (kind, data) in enumerate(rows):
            if kind == "load":
                g = data
                mis = s[g] - s_spec[g - 3]
                r[2 * k], r[2 * k + 1] = mis.real, mis.imag
            elif kind == "tap":
                g1, g2, ph = data
                mis = v_bus[g2] - tap.values[ph] * v_bus[g1]
                r[2 * k], r[2 * k + 1] = mis.real, mis.imag
            else:  # power balance across the transformer
                g1, g2 = data
                mis = s[g1] + s[g2]
                r[2 * k], r[2 * k + 1] = mis.real, mis.imag
        return r, v_bus

    def jacobian(v_bus):
        m_full = _power_jacobian(y_isol.matrix, v_bus)
        nt = grid.n_total
        jac = np.empty((2 * n, 2 * n))
        for k, (kind, data) in enumerate(rows):
            if kind == "load":
                g = data
                jac[2 * k] = m_full[g, cols]
                jac[2 * k + 1] = m_full[nt + g, cols]
            elif kind == "tap":
                g1, g2, ph = data
                rowr = np.zeros(2 * nt)
                rowi = np.zeros(2 * nt)
                rowr[g2] = 1.0
                rowr[g1] = -tap.values[ph]
                rowi[nt + g2] = 1.0
                rowi[nt + g1] = -tap.values[ph]
                jac[2 * k] = rowr[cols]
                jac[2 * k + 1] = rowi[cols]
            else:
                g1, g2 = data
                jac[2 * k] = m_full[g1, cols] + m_full[g2, cols]
                jac[2 * k + 1] = m_full[nt + g1, cols] + m_full[nt + g2, cols]
        return jac

    r, v_bus = residual(x)
    norm = np.max(np.abs(r))
    for _ in range(max_iter):
        if norm < tol:
            return ComplexVoltageState(v_src_vec, unpack(x))
        try:
            step = np.linalg.solve(jacobian(v_bus), r)
        except np.linalg.LinAlgError:
            raise PowerFlowDivergedError(
                "singular Jacobian in Newton iteration", residual=norm) from None
        # damped update: halve until the residual decreases
        scale = 1.0
        for _ in range(5):
            x_new = x - scale * step
            v_new = unpack(x_new)
            if np.any(np.abs(v_new) < COLLAPSE_LIMIT):
                raise LowVoltageError(
                    f"voltage magnitude fell below {COLLAPSE_LIMIT} p.u.",
                    residual=norm)
            r_new, v_bus_new = residual(x_new)
            norm_new = np.max(np.abs(r_new))
            if norm_new < norm or norm_new < tol:
                break
            scale *= 0.5
        x, r, v_bus, norm = x_new, r_new, v_bus_new, norm_new
    if norm < tol:
        return ComplexVoltageState(v_src_vec, unpack(x))
    raise PowerFlowDivergedError(
        f"power flow did not converge in {max_iter} iterations "
        f"(residual {norm:.3e})", residual=norm, iterations=max_iter)
