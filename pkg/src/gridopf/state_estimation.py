"""Weighted-least-squares voltage estimation from sparse noisy measurements.

Sensors (voltage/current phasors and magnitudes, branch current phasors) are
combined with load pseudo-measurements so the feeder becomes observable; the
Gauss-Newton WLS estimate returns the voltage mean together with the
covariance (H' R^-1 H)^-1 evaluated at convergence, both in rectangular
coordinates.  The ideal transformer coupling is exact at estimation time (the
previous tap is known), so secondary-side voltages are eliminated rather than
estimated, and the per-phase transformer power balance enters as a virtual
measurement with a tiny standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (ConfigError, EstimationDivergedError,
                         InvalidCovarianceError, UnobservableError)
from .grid_model import GridModel, TapVector, build_isolated_admittance
from .powerflow import ComplexVoltageState, flat_start

MEASUREMENT_KINDS = ("voltage-phasor", "voltage-magnitude",
                     "node-current-phasor", "node-current-magnitude",
                     "branch-current-phasor", "load-pseudo")

VIRTUAL_SIGMA = 1e-5     # transformer power-balance rows
GN_TOL = 1e-10
GN_STAGNATION_TOL = 1e-8
GN_MAX_ITER = 50
PSD_TOL = 1e-10


@dataclass(frozen=True)
class Measurement:
    kind: str
    sigma: float
    value: object                    # complex for phasor/pseudo kinds, else float
    bus: str | None = None
    phase: str | None = None
    branch: tuple[str, str] | None = None

    def __post_init__(self):
        if self.kind not in MEASUREMENT_KINDS:
            raise ConfigError(f"unknown measurement kind '{self.kind}'")
        if self.sigma <= 0:
            raise ConfigError(f"measurement sigma must be positive, got {self.sigma}")


@dataclass
class MeasurementSet:
    records: list[Measurement] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    @property
    def n_scalars(self) -> int:
        """Number of real-valued rows (phasor kinds count twice)."""
        total = 0
        for m in self.records:
            total += 2 if m.kind.endswith("phasor") or m.kind == "load-pseudo" else 1
        return total


@dataclass(frozen=True)
class SensorSpec:
    kind: str
    sigma: float
    bus: str | None = None
    branch: tuple[str, str] | None = None
    phases: tuple[str, ...] = ()


@dataclass
class MeasurementConfig:
    """Sensor placement plus pseudo-measurement noise settings."""

    sensors: list[SensorSpec]
    pseudo_sigma_frac: float = 0.5
    pseudo_floor: float = 1e-3          # sigma floor for near-zero loads, p.u.
    pseudo_noise: str = "gaussian"      # or "uniform", same std

    def __post_init__(self):
        if self.pseudo_sigma_frac < 0:
            raise ConfigError("pseudo_sigma_frac must be nonnegative")
        if self.pseudo_floor <= 0:
            raise ConfigError("pseudo_floor must be positive")
        if self.pseudo_noise not in ("gaussian", "uniform"):
            raise ConfigError(f"unknown pseudo_noise '{self.pseudo_noise}'")

    @staticmethod
    def from_dict(raw: dict) -> "MeasurementConfig":
        sensors = []
        for i, s in enumerate(raw.get("measurements", [])):
            ctx = f"measurements[{i}]"
            kind = s.get("kind")
            if kind is None:
                raise ConfigError(f"{ctx}: missing field 'kind'")
            branch = None
            if "branch" in s:
                br = s["branch"]
                if not isinstance(br, (list, tuple)) or len(br) != 2:
                    raise ConfigError(f"{ctx}: 'branch' must be [from, to]")
                branch = (str(br[0]), str(br[1]))
            sensors.append(SensorSpec(
                kind=str(kind),
                sigma=float(s.get("sigma", 0.01)),
                bus=str(s["bus"]) if "bus" in s else None,
                branch=branch,
                phases=tuple(s.get("phases", ())),
            ))
        return MeasurementConfig(
            sensors=sensors,
            pseudo_sigma_frac=float(raw.get("pseudo_sigma_frac", 0.5)),
            pseudo_floor=float(raw.get("pseudo_floor", 1e-3)),
            pseudo_noise=str(raw.get("pseudo_noise", "gaussian")),
        )


class EstimationResult:
    """Voltage estimate with rectangular covariance, symmetric PSD."""

    def __init__(self, v_est, sigma_rect):
        self.v_est = np.asarray(v_est, dtype=complex)
        sigma = np.asarray(sigma_rect, dtype=float)
        n = self.v_est.shape[0]
        if sigma.shape != (2 * n, 2 * n):
            raise ConfigError(
                f"covariance shape {sigma.shape} inconsistent with {n} nodes")
        if np.max(np.abs(sigma - sigma.T)) > 1e-9:
            raise InvalidCovarianceError("estimation covariance not symmetric")
        sigma = (sigma + sigma.T) / 2.0
        eigs = np.linalg.eigvalsh(sigma)
        if eigs.min() < -PSD_TOL:
            raise InvalidCovarianceError(
                f"estimation covariance eigenvalue {eigs.min():.3e} below -{PSD_TOL}")
        self.sigma_rect = sigma

    @property
    def n(self) -> int:
        return self.v_est.shape[0]

    @property
    def v_est_rect(self) -> np.ndarray:
        return np.concatenate([self.v_est.real, self.v_est.imag])

    @property
    def sigma_re_diag(self) -> np.ndarray:
        return np.diag(self.sigma_rect)[:self.n]

    @property
    def sigma_im_diag(self) -> np.ndarray:
        return np.diag(self.sigma_rect)[self.n:]


# -- true measurement values -------------------------------------------------

def _branch_current(grid: GridModel, y_cache, branch, phase, v_bus):
    """Complex current on a branch phase, oriented from -> to."""
    br, reversed_ = grid.find_branch(*branch)
    if grid.is_transformer_branch(br):
        raise ConfigError("branch current measurement on the transformer branch "
                          "is not supported")
    shared, core = grid._branch_core(br)
    if phase not in shared:
        raise ConfigError(f"branch {branch}: phase '{phase}' not shared")
    from_bus, to_bus = branch
    gi = np.array([grid.node(from_bus, p) for p in shared])
    gj = np.array([grid.node(to_bus, p) for p in shared])
    w = core.T if reversed_ else core
    row = w[shared.index(phase)]
    coeff = np.zeros(grid.n_total, dtype=complex)
    np.add.at(coeff, gi, row)
    np.add.at(coeff, gj, -row)
    return coeff  # current = coeff @ v_bus


def _scalar_rows(grid: GridModel, y_isol, meas: Measurement):
    """Plan for one record: list of (true_fn_id, payload) scalar rows.

    Returned payloads are consumed by `_evaluate_rows`; splitting plan and
    evaluation keeps the Gauss-Newton loop free of per-record validation.
    """
    kind = meas.kind
    if kind in ("voltage-phasor", "voltage-magnitude", "node-current-phasor",
                "node-current-magnitude", "load-pseudo"):
        g = grid.node(meas.bus, meas.phase)
        if g < 3 and kind == "load-pseudo":
            raise ConfigError("load pseudo-measurement at the source bus")
        if kind in ("node-current-phasor", "node-current-magnitude", "load-pseudo"):
            tfn = set(grid.tf1_nodes) | set(grid.tf2_nodes)
            if g in tfn:
                raise ConfigError(f"{kind} at a transformer node is not supported")
        return (kind, g)
    if kind == "branch-current-phasor":
        coeff = _branch_current(grid, y_isol, meas.branch, meas.phase, None)
        return (kind, coeff)
    raise ConfigError(f"unknown measurement kind '{kind}'")


def _evaluate_rows(grid, y_isol, plan, v_bus):
    """True value(s) and full-space rectangular Jacobian rows for one plan."""
    nt = grid.n_total
    y = y_isol.matrix
    kind, payload = plan

    def current_rows(coeff):
        val = coeff @ v_bus
        jr = np.concatenate([coeff.real, -coeff.imag])
        ji = np.concatenate([coeff.imag, coeff.real])
        return val, jr, ji

    if kind == "voltage-phasor":
        g = payload
        jr = np.zeros(2 * nt)
        ji = np.zeros(2 * nt)
        jr[g] = 1.0
        ji[nt + g] = 1.0
        return [v_bus[g].real, v_bus[g].imag], [jr, ji]
    if kind == "voltage-magnitude":
        g = payload
        mag = abs(v_bus[g])
        j = np.zeros(2 * nt)
        j[g] = v_bus[g].real / mag
        j[nt + g] = v_bus[g].imag / mag
        return [mag], [j]
    if kind in ("node-current-phasor", "node-current-magnitude"):
        g = payload
        coeff = y[g]
        val, jr, ji = current_rows(coeff)
        if kind == "node-current-phasor":
            return [val.real, val.imag], [jr, ji]
        mag = abs(val)
        if mag < 1e-12:
            mag = 1e-12  # gradient ill-defined at exactly zero current
        return [abs(val)], [(val.real * jr + val.imag * ji) / mag]
    if kind == "branch-current-phasor":
        val, jr, ji = current_rows(payload)
        return [val.real, val.imag], [jr, ji]
    if kind == "load-pseudo":
        g = payload
        i_inj = np.conj(y[g] @ v_bus)
        s = v_bus[g] * i_inj
        # d S = A dV + B conj(dV) restricted to row g
        arow = i_inj                       # diagonal entry of A
        brow = v_bus[g] * np.conj(y[g])    # row of B
        jp = np.zeros(2 * nt)
        jq = np.zeros(2 * nt)
        jp[:nt] = brow.real
        jp[nt:] = brow.imag
        jp[g] += arow.real
        jp[nt + g] += -arow.imag
        jq[:nt] = brow.imag
        jq[nt:] = -brow.real
        jq[g] += arow.imag
        jq[nt + g] += arow.real
        return [s.real, s.imag], [jp, jq]
    raise ConfigError(f"unknown measurement kind '{kind}'")


def generate_measurements(grid: GridModel, truth: ComplexVoltageState, loads,
                          config: MeasurementConfig, seed, dg=None) -> MeasurementSet:
    """Synthesize a measurement set from the true state.

    Sensor readings are the true quantities plus zero-mean noise of the
    configured sigma (complex kinds get independent real/imaginary noise).
    Load pseudo-measurements are emitted for every non-source, non-transformer
    node phase: the true net injection perturbed by forecast noise whose sigma
    is `pseudo_sigma_frac` of the load magnitude (floored).  Deterministic for
    a fixed seed.
    """
    rng = np.random.default_rng(seed)
    y_isol = build_isolated_admittance(grid)
    v_bus = truth.v_bus
    loads = np.asarray(loads, dtype=complex)
    if loads.shape != (grid.n,):
        raise ConfigError(f"loads must have shape ({grid.n},)")
    dg = dict(dg or {})

    def noise(sigma, count=1):
        if config.pseudo_noise == "uniform":
            half = np.sqrt(3.0) * sigma
            return rng.uniform(-half, half, size=count)
        return rng.normal(0.0, sigma, size=count)

    records = []
    for spec in config.sensors:
        phases = spec.phases
        if spec.kind == "branch-current-phasor":
            if spec.branch is None:
                raise ConfigError("branch-current-phasor requires 'branch'")
            if not phases:
                raise ConfigError("sensor spec must list phases")
            for ph in phases:
                coeff = _branch_current(grid, y_isol, spec.branch, ph, v_bus)
                true = coeff @ v_bus
                eps = rng.normal(0.0, spec.sigma, size=2)
                records.append(Measurement(
                    kind=spec.kind, sigma=spec.sigma, branch=spec.branch, phase=ph,
                    value=complex(true.real + eps[0], true.imag + eps[1])))
            continue
        if spec.bus is None:
            raise ConfigError(f"{spec.kind} requires 'bus'")
        bus = grid.bus(spec.bus)
        for ph in (phases or bus.phases):
            plan = _scalar_rows(grid, y_isol,
                                Measurement(kind=spec.kind, sigma=spec.sigma,
                                            bus=spec.bus, phase=ph, value=0.0))
            vals, _ = _evaluate_rows(grid, y_isol, plan, v_bus)
            if len(vals) == 2:
                eps = rng.normal(0.0, spec.sigma, size=2)
                value = complex(vals[0] + eps[0], vals[1] + eps[1])
            else:
                value = float(vals[0] + rng.normal(0.0, spec.sigma))
            records.append(Measurement(kind=spec.kind, sigma=spec.sigma,
                                       bus=spec.bus, phase=ph, value=value))

    tf_nodes = set(grid.tf1_nodes) | set(grid.tf2_nodes)
    for g in range(3, grid.n_total):
        if g in tf_nodes:
            continue
        bus_id, ph = grid.nodes[g]
        s_true = loads[g - 3] + dg.get(g, 0.0)
        sigma = max(config.pseudo_sigma_frac * abs(loads[g - 3]),
                    config.pseudo_floor)
        eps = noise(sigma, 2)
        records.append(Measurement(
            kind="load-pseudo", sigma=sigma, bus=bus_id, phase=ph,
            value=complex(s_true.real + eps[0], s_true.imag + eps[1])))
    return MeasurementSet(records=records)


def _reduction_matrix(grid: GridModel, tap_prev: TapVector) -> tuple[np.ndarray, list]:
    """Map from kept rectangular unknowns to all non-source rectangular coords.

    Secondary transformer nodes are expressed through the known tap ratio:
    both rectangular parts scale by the (real) per-phase ratio.
    """
    n = grid.n
    kept = [k for k in range(n) if (k + 3) not in set(grid.tf2_nodes)]
    pos = {k: j for j, k in enumerate(kept)}
    nk = len(kept)
    g_map = np.zeros((2 * n, 2 * nk))
    for k in range(n):
        if k in pos:
            g_map[k, pos[k]] = 1.0
            g_map[n + k, nk + pos[k]] = 1.0
        else:
            g = k + 3
            idx = list(grid.tf2_nodes).index(g)
            k1 = grid.tf1_nodes[idx] - 3
            a = tap_prev.values[grid.phase_of(g)]
            g_map[k, pos[k1]] = a
            g_map[n + k, nk + pos[k1]] = a
    return g_map, kept


def estimate_state(grid: GridModel, meas: MeasurementSet,
                   tap_prev: TapVector | None = None,
                   tol: float = GN_TOL, max_iter: int = GN_MAX_ITER) -> EstimationResult:
    """Gauss-Newton WLS estimate of all non-source node-phase voltages.

    Raises UnobservableError (naming the null-space dimension) when the
    information matrix is singular, and EstimationDivergedError when the
    iteration fails to settle.  Deterministic: no internal randomness.
    """
    tap_prev = TapVector.nominal() if tap_prev is None else tap_prev
    y_isol = build_isolated_admittance(grid)
    nt = grid.n_total

    plans = []
    z = []
    sigmas = []
    for m in meas:
        plan = _scalar_rows(grid, y_isol, m)
        plans.append(plan)
        if isinstance(m.value, complex):
            z.extend([m.value.real, m.value.imag])
            sigmas.extend([m.sigma, m.sigma])
        else:
            z.append(float(m.value))
            sigmas.append(m.sigma)

    # virtual rows: per-phase transformer power balance is exactly zero
    tf_pairs = list(zip(grid.tf1_nodes, grid.tf2_nodes))
    for _ in tf_pairs:
        z.extend([0.0, 0.0])
        sigmas.extend([VIRTUAL_SIGMA, VIRTUAL_SIGMA])

    z = np.asarray(z, dtype=float)
    weights = 1.0 / np.asarray(sigmas, dtype=float) ** 2

    g_map, kept = _reduction_matrix(grid, tap_prev)
    # columns of the full-space Jacobian for non-source unknowns
    cols = np.concatenate([np.arange(3, nt), np.arange(nt + 3, 2 * nt)])

    state = flat_start(grid, tap_prev)
    x = state.rect[np.concatenate([np.array(kept),
                                   grid.n + np.array(kept)])].copy()
    v_src = grid.v_src

    def expand(xk):
        full = g_map @ xk
        return np.concatenate([v_src, full[:grid.n] + 1j * full[grid.n:]])

    def model(v_bus, with_jac=True):
        h_rows = []
        jac_rows = []
        for plan in plans:
            vals, jacs = _evaluate_rows(grid, y_isol, plan, v_bus)
            h_rows.extend(vals)
            if with_jac:
                jac_rows.extend(jacs)
        for g1, g2 in tf_pairs:
            vals1, jacs1 = _evaluate_rows(grid, y_isol, ("load-pseudo", g1), v_bus)
            vals2, jacs2 = _evaluate_rows(grid, y_isol, ("load-pseudo", g2), v_bus)
            h_rows.extend([vals1[0] + vals2[0], vals1[1] + vals2[1]])
            if with_jac:
                jac_rows.extend([jacs1[0] + jacs2[0], jacs1[1] + jacs2[1]])
        h = np.asarray(h_rows)
        if not with_jac:
            return h, None
        jac_full = np.vstack(jac_rows)[:, cols]
        return h, jac_full @ g_map

    sqrt_w = np.sqrt(weights)

    def cost_of(xv):
        h, _ = model(expand(xv), with_jac=False)
        r = sqrt_w * (z - h)
        return float(r @ r)

    converged = False
    final_step = np.inf
    cost = cost_of(x)
    for it in range(max_iter):
        h, jac = model(expand(x))
        jw = jac * sqrt_w[:, None]
        info = jw.T @ jw
        eigs = np.linalg.eigvalsh(info)
        thresh = max(eigs.max(), 0.0) * 1e-12
        null_dim = int(np.sum(eigs <= thresh))
        if null_dim > 0:
            raise UnobservableError(
                f"information matrix singular: null space dimension {null_dim}",
                nullspace_dim=null_dim)
        # QR-based step: the plain normal equations square the conditioning
        # that the near-exact transformer-balance rows already stress
        step = np.linalg.lstsq(jw, sqrt_w * (z - h), rcond=None)[0]
        # backtrack on the weighted residual to kill limit cycles
        scale = 1.0
        accepted = False
        for _ in range(10):
            x_try = x + scale * step
            cost_try = cost_of(x_try)
            if cost_try <= cost * (1.0 + 1e-12):
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            final_step = np.max(np.abs(step))
            converged = final_step < GN_STAGNATION_TOL
            break
        x, cost = x_try, cost_try
        final_step = scale * np.max(np.abs(step))
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e3:
            raise EstimationDivergedError(
                f"Gauss-Newton diverged at iteration {it}")
        if final_step < tol:
            converged = True
            break
    if not converged and final_step > 1e-6:
        raise EstimationDivergedError(
            f"Gauss-Newton did not converge in {max_iter} iterations "
            f"(last step {final_step:.3e})")

    v_bus = expand(x)
    _, jac = model(v_bus)
    jw = jac * sqrt_w[:, None]
    info = jw.T @ jw
    sigma_red = np.linalg.inv(info)
    sigma_full = g_map @ sigma_red @ g_map.T
    full = g_map @ x
    v_est = full[:grid.n] + 1j * full[grid.n:]
    return EstimationResult(v_est=v_est, sigma_rect=sigma_full)


def polar_to_rect_covariance(magnitudes, angles, sigma_polar) -> np.ndarray:
    """Pushforward covariance through (m, theta) -> (m cos theta, m sin theta).

    `sigma_polar` is ordered [magnitudes; angles]; the result is ordered
    [real parts; imaginary parts].
    """
    m = np.asarray(magnitudes, dtype=float)
    th = np.asarray(angles, dtype=float)
    if m.shape != th.shape or m.ndim != 1:
        raise ConfigError("magnitudes and angles must be 1-d arrays of equal length")
    if np.any(m <= 0):
        raise ConfigError("magnitudes must be strictly positive")
    n = m.shape[0]
    sigma_polar = np.asarray(sigma_polar, dtype=float)
    if sigma_polar.shape != (2 * n, 2 * n):
        raise ConfigError(f"sigma_polar must be {2 * n}x{2 * n}")
    cos, sin = np.cos(th), np.sin(th)
    jac = np.zeros((2 * n, 2 * n))
    jac[:n, :n] = np.diag(cos)
    jac[:n, n:] = np.diag(-m * sin)
    jac[n:, :n] = np.diag(sin)
    jac[n:, n:] = np.diag(m * cos)
    return jac @ sigma_polar @ jac.T
