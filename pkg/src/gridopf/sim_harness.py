"""Closed-loop daily scenario runner and report writer.

Each step: exact power flow with the true loads and the carried setpoints
gives the pre-control truth; measurements are synthesized and estimated; the
tightened re-dispatch program is assembled and solved; the new setpoints are
applied and the exact power flow is re-run to obtain the realized voltages.
Per-step failures carry the previous setpoints forward so a run always
completes.  All randomness flows from the scenario seed.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .chance_constraints import (ChanceSpec, tighten_constraints,
                                 verify_chance_satisfaction)
from .exceptions import ConfigError, GridOpfError
from .grid_model import GridModel, load_grid
from .opf_core import (EnergyLimits, Setpoints, add_thermal_constraints,
                       assemble_program, extract_setpoints, line_current_terms,
                       relax_voltage_constraints, solve_program)
from .powerflow import ComplexVoltageState, linearize, solve_powerflow
from .state_estimation import (MeasurementConfig, estimate_state,
                               generate_measurements)
from .svg_report import polyline_chart
from .grid_model import build_isolated_admittance

CSV_HEADER = ("t,node,phase,v_true_mag,v_est_mag,sigma_re,sigma_im,v_real_mag,"
              "violation,p_dg,q_dg,tap_a,tap_b,tap_c,objective,status")

CASES = ("with-cov", "no-cov")


@dataclass(frozen=True)
class DgUnit:
    node: int            # global node index
    kind: str
    s_max: np.ndarray    # (horizon,), p.u.
    p_min: float
    q_frac: float


@dataclass
class Scenario:
    grid: GridModel
    horizon: int
    step_minutes: float
    beta: float
    v_min: float
    v_max: float
    case: str
    seed: int
    load_injections: np.ndarray        # (horizon, N) complex
    dg_units: list
    meas_config: MeasurementConfig
    free_source_voltage: bool = False
    thermal_limit: float | None = None
    name: str = "scenario"

    def __post_init__(self):
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {CASES}, got '{self.case}'")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.load_injections.shape != (self.horizon, self.grid.n):
            raise ConfigError("load profile array shape mismatch")

    def chance_spec(self) -> ChanceSpec:
        if self.case == "no-cov":
            return ChanceSpec.ignore_uncertainty(self.beta, self.v_min, self.v_max)
        return ChanceSpec.from_beta(self.beta, self.v_min, self.v_max)

    def limits_at(self, t: int) -> EnergyLimits:
        nodes = tuple(u.node for u in self.dg_units)
        s = np.array([u.s_max[t] for u in self.dg_units])
        return EnergyLimits(
            nodes=nodes,
            p_min=np.array([u.p_min for u in self.dg_units]),
            p_max=s.copy(),
            q_min=-np.array([u.q_frac for u in self.dg_units]) * s,
            q_max=np.array([u.q_frac for u in self.dg_units]) * s,
            s_max=s,
        )


@dataclass
class StepRecord:
    t: int
    status: str
    objective: float
    wall_time: float
    v_true: np.ndarray
    v_real: np.ndarray
    v_est: np.ndarray
    sigma_re: np.ndarray
    sigma_im: np.ndarray
    sigma_trace: float
    setpoints: Setpoints
    violations: np.ndarray            # bool per node
    dg_available: dict
    dg_used: dict
    max_voltage_dual: float
    curtailed: bool
    predicted_gap: float
    est: object = field(default=None, repr=False)
    delta_v_rect: np.ndarray | None = field(default=None, repr=False)


def load_inputs(scenario_path, grid_path=None, overrides=None) -> Scenario:
    """Parse, cross-validate, and apply CLI overrides to a scenario."""
    overrides = dict(overrides or {})
    try:
        with open(scenario_path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {scenario_path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {scenario_path} is not valid JSON: {exc}") \
            from None

    if grid_path is None:
        rel = raw.get("grid")
        if rel is None:
            raise ConfigError(f"{scenario_path}: missing field 'grid' "
                              "and no grid file given")
        grid_path = os.path.join(os.path.dirname(os.path.abspath(scenario_path)), rel)
    grid = load_grid(grid_path)

    def need(key):
        if key not in raw:
            raise ConfigError(f"{scenario_path}: missing field '{key}'")
        return raw[key]

    file_horizon = int(need("horizon"))
    horizon = int(overrides.get("horizon", file_horizon))
    if horizon < 1:
        raise ConfigError("horizon override must be positive")
    if horizon > file_horizon:
        raise ConfigError(f"horizon override {horizon} exceeds profile length "
                          f"{file_horizon}")

    loads = np.zeros((horizon, grid.n), dtype=complex)
    tf_nodes = set(grid.tf1_nodes) | set(grid.tf2_nodes)
    for i, entry in enumerate(need("loads")):
        ctx = f"{scenario_path}: loads[{i}]"
        for key in ("bus", "phase", "p", "q"):
            if key not in entry:
                raise ConfigError(f"{ctx}: missing field '{key}'")
        g = grid.node(str(entry["bus"]), str(entry["phase"]))
        if g < 3:
            raise ConfigError(f"{ctx}: loads may not sit on the source bus")
        if g in tf_nodes:
            raise ConfigError(f"{ctx}: loads may not sit on transformer buses")
        p = np.asarray(entry["p"], dtype=float)
        q = np.asarray(entry["q"], dtype=float)
        if p.shape != (file_horizon,) or q.shape != (file_horizon,):
            raise ConfigError(f"{ctx}: profile length must equal horizon "
                              f"{file_horizon}")
        # consumption is positive in the file; injections are negated
        loads[:, g - 3] += -(p[:horizon] + 1j * q[:horizon])

    dg_units = []
    for i, entry in enumerate(raw.get("dg", [])):
        ctx = f"{scenario_path}: dg[{i}]"
        for key in ("bus", "phases", "s_max"):
            if key not in entry:
                raise ConfigError(f"{ctx}: missing field '{key}'")
        bus = str(entry["bus"])
        if bus not in {b.id for b in grid.buses}:
            raise ConfigError(f"{ctx}: unknown bus '{bus}'")
        s_max = np.asarray(entry["s_max"], dtype=float)
        if s_max.shape != (file_horizon,):
            raise ConfigError(f"{ctx}: s_max length must equal horizon "
                              f"{file_horizon}")
        if np.any(s_max < 0):
            raise ConfigError(f"{ctx}: s_max must be nonnegative")
        for ph in entry["phases"]:
            g = grid.node(bus, str(ph))
            if g < 3 or g in tf_nodes:
                raise ConfigError(f"{ctx}: invalid generator placement")
            dg_units.append(DgUnit(
                node=g, kind=str(entry.get("kind", "dg")),
                s_max=s_max[:horizon].copy(),
                p_min=float(entry.get("p_min", 0.0)),
                q_frac=float(entry.get("q_frac", 0.44))))

    meas_config = MeasurementConfig.from_dict(raw)
    # fail fast on dangling sensor references
    for s in meas_config.sensors:
        if s.bus is not None:
            grid.bus(s.bus)
        if s.branch is not None:
            grid.find_branch(*s.branch)

    case = str(overrides.get("case", raw.get("case", "with-cov")))
    scenario = Scenario(
        grid=grid,
        horizon=horizon,
        step_minutes=float(raw.get("step_minutes", 15.0)),
        beta=float(overrides.get("beta", need("beta"))),
        v_min=float(need("v_min")),
        v_max=float(need("v_max")),
        case=case,
        seed=int(overrides.get("seed", raw.get("seed", 0))),
        load_injections=loads,
        dg_units=dg_units,
        meas_config=meas_config,
        free_source_voltage=bool(raw.get("free_source_voltage", False)),
        thermal_limit=raw.get("thermal_limit"),
        name=str(raw.get("name", os.path.basename(str(scenario_path)))),
    )
    scenario.chance_spec()  # validate beta early
    return scenario


def _failed_record(t, status, truth, carried, scenario, wall):
    n = scenario.grid.n
    nanv = np.full(n, np.nan)
    mags = np.abs(truth.v)
    viol = (mags < scenario.v_min - 1e-9) | (mags > scenario.v_max + 1e-9)
    return StepRecord(
        t=t, status=status, objective=float("nan"), wall_time=wall,
        v_true=truth.v.copy(), v_real=truth.v.copy(), v_est=nanv + 1j * nanv,
        sigma_re=nanv, sigma_im=nanv, sigma_trace=float("nan"),
        setpoints=carried, violations=viol, dg_available={}, dg_used={},
        max_voltage_dual=float("nan"), curtailed=False,
        predicted_gap=float("nan"))


def run_timestep(scenario: Scenario, t: int, carried: Setpoints, meas_seed,
                 dump_dir=None):
    """One closed-loop step; returns (record, new setpoints)."""
    grid = scenario.grid
    start = time.perf_counter()
    loads_t = scenario.load_injections[t]

    truth = solve_powerflow(grid, loads_t, dg=carried.dg, tap=carried.tap,
                            v_src=carried.v_src)
    try:
        meas = generate_measurements(grid, truth, loads_t, scenario.meas_config,
                                     seed=meas_seed, dg=carried.dg)
        est = estimate_state(grid, meas, carried.tap)
    except GridOpfError as exc:
        wall = time.perf_counter() - start
        return (_failed_record(t, f"failed-se:{type(exc).__name__}", truth,
                               carried, scenario, wall), carried)

    spec = scenario.chance_spec()
    limits = scenario.limits_at(t)
    tightened = tighten_constraints(est, spec)
    lin_state = ComplexVoltageState(carried.v_src, est.v_est)
    y_isol = build_isolated_admittance(grid)
    m = linearize(y_isol, lin_state)
    prog = assemble_program(m, est, tightened, grid, limits, carried,
                            free_source_voltage=scenario.free_source_voltage)
    if scenario.thermal_limit is not None:
        terms = line_current_terms(grid, lin_state.v_bus, prog.layout)
        prog = add_thermal_constraints(prog, terms, float(scenario.thermal_limit))

    sol = solve_program(prog)
    status = sol.status
    if status != "optimal":
        soft = solve_program(relax_voltage_constraints(prog))
        if soft.status == "optimal":
            sol = soft
            status = "soft-optimal"

    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
        with open(os.path.join(dump_dir, f"program_t{t:03d}.json"), "w") as fh:
            json.dump({"program": prog.to_json_dict(),
                       "solution": sol.to_json_dict()}, fh)

    if sol.status != "optimal":
        wall = time.perf_counter() - start
        rec = _failed_record(t, f"failed-opf:{sol.status}", truth, carried,
                             scenario, wall)
        return rec, carried

    new_sp = extract_setpoints(sol, carried, grid, limits)
    try:
        realized = solve_powerflow(grid, loads_t, dg=new_sp.dg, tap=new_sp.tap,
                                   v_src=new_sp.v_src)
    except GridOpfError as exc:
        wall = time.perf_counter() - start
        return (_failed_record(t, f"failed-apply:{type(exc).__name__}", truth,
                               carried, scenario, wall), carried)

    mags = np.abs(realized.v)
    viol = (mags < scenario.v_min - 1e-9) | (mags > scenario.v_max + 1e-9)
    predicted = est.v_est_rect + sol.delta_v_rect
    n = grid.n
    gap = float(np.max(np.abs(realized.v - (predicted[:n] + 1j * predicted[n:]))))

    dg_avail = {}
    dg_used = {}
    curtailed = False
    for r, g in enumerate(limits.nodes):
        avail = limits.s_max[r]
        used = abs(new_sp.dg.get(g, 0.0))
        dg_avail[g] = float(avail)
        dg_used[g] = float(used)
        if used < avail * (1.0 - 1e-6) - 1e-9:
            curtailed = True

    record = StepRecord(
        t=t, status=status, objective=sol.objective,
        wall_time=time.perf_counter() - start,
        v_true=truth.v.copy(), v_real=realized.v.copy(), v_est=est.v_est.copy(),
        sigma_re=np.sqrt(np.clip(est.sigma_re_diag, 0.0, None)),
        sigma_im=np.sqrt(np.clip(est.sigma_im_diag, 0.0, None)),
        sigma_trace=float(np.trace(est.sigma_rect)),
        setpoints=new_sp, violations=viol,
        dg_available=dg_avail, dg_used=dg_used,
        max_voltage_dual=max(sol.max_dual("v-circle"), sol.max_dual("v-halfplane")),
        curtailed=curtailed, predicted_gap=gap,
        est=est, delta_v_rect=sol.delta_v_rect.copy())
    return record, new_sp


def run_scenario(scenario: Scenario, dump_dir=None):
    """Sequential closed-loop fold over the horizon; deterministic per seed."""
    seeds = np.random.SeedSequence(scenario.seed).spawn(2 * scenario.horizon)
    carried = Setpoints.initial(scenario.grid)
    records = []
    for t in range(scenario.horizon):
        record, carried = run_timestep(scenario, t, carried, seeds[t],
                                       dump_dir=dump_dir)
        records.append(record)
    return records


def verify_scenario(scenario: Scenario, n_samples: int):
    """Per-step sampled band probabilities for the solved deviations.

    Returns a list of (t, min probability over nodes) for optimal steps and
    the pass threshold beta - 3 * stderr.
    """
    if scenario.case != "with-cov":
        scenario = replace(scenario, case="with-cov")
    seeds = np.random.SeedSequence(scenario.seed).spawn(2 * scenario.horizon)
    records = run_scenario(scenario)
    spec = scenario.chance_spec()
    rows = []
    for rec in records:
        if rec.est is None or rec.delta_v_rect is None:
            continue
        probs = verify_chance_satisfaction(
            rec.delta_v_rect, rec.est, spec, n_samples,
            seed=seeds[scenario.horizon + rec.t])
        rows.append((rec.t, float(np.min(probs))))
    thresh = scenario.beta - 3.0 * math.sqrt(
        scenario.beta * (1.0 - scenario.beta) / n_samples)
    return rows, thresh


def compare_cases(scenario: Scenario) -> dict:
    """Run both case modes on identical seeds and summarize the contrast."""
    runs = {}
    for case in CASES:
        records = run_scenario(replace(scenario, case=case))
        runs[case] = records
    report = {}
    for case, records in runs.items():
        report[case] = summarize(records, scenario)
    report["comparison"] = {
        "violation_counts": {c: report[c]["violations"] for c in CASES},
        "dg_energy_used": {c: report[c]["dg_energy_used"] for c in CASES},
        "objective_traces": {
            c: [None if math.isnan(r.objective) else r.objective
                for r in runs[c]] for c in CASES},
    }
    return report


def _excursions(records, scenario):
    worst_over = 0.0
    worst_under = 0.0
    for rec in records:
        mags = np.abs(rec.v_real)
        worst_over = max(worst_over, float(np.max(mags - scenario.v_max)))
        worst_under = max(worst_under, float(np.max(scenario.v_min - mags)))
    return worst_over, worst_under


def summarize(records, scenario: Scenario) -> dict:
    worst_over, worst_under = _excursions(records, scenario)
    statuses = {}
    for rec in records:
        statuses[rec.status] = statuses.get(rec.status, 0) + 1
    gaps = [rec.predicted_gap for rec in records
            if not math.isnan(rec.predicted_gap)]
    dt_hours = scenario.step_minutes / 60.0
    return {
        "case": scenario.case,
        "seed": scenario.seed,
        "horizon": scenario.horizon,
        "beta": scenario.beta,
        "violations": int(sum(int(np.sum(rec.violations)) for rec in records)),
        "worst_overvoltage": worst_over,
        "worst_undervoltage": worst_under,
        "dg_energy_available": float(sum(sum(rec.dg_available.values())
                                         for rec in records) * dt_hours),
        "dg_energy_used": float(sum(sum(rec.dg_used.values())
                                    for rec in records) * dt_hours),
        "statuses": statuses,
        "max_predicted_gap": float(max(gaps)) if gaps else None,
        "curtailed_steps": int(sum(1 for rec in records if rec.curtailed)),
    }


def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.10g}"


def emit_outputs(records, out_dir, scenario: Scenario):
    """Write steps.csv, summary.json, and the three SVG charts."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") \
            from None
    grid = scenario.grid

    csv_path = os.path.join(out_dir, "steps.csv")
    try:
        with open(csv_path, "w") as fh:
            fh.write(CSV_HEADER + "\n")
            for rec in records:
                tap = rec.setpoints.tap.values
                for k in range(grid.n):
                    g = k + 3
                    bus, phase = grid.nodes[g]
                    s_dg = rec.setpoints.dg.get(g, 0.0 + 0.0j)
                    row = [
                        str(rec.t), bus, phase,
                        _fmt(abs(rec.v_true[k])), _fmt(abs(rec.v_est[k])),
                        _fmt(rec.sigma_re[k]), _fmt(rec.sigma_im[k]),
                        _fmt(abs(rec.v_real[k])),
                        "1" if rec.violations[k] else "0",
                        _fmt(s_dg.real), _fmt(s_dg.imag),
                        _fmt(tap[0]), _fmt(tap[1]), _fmt(tap[2]),
                        _fmt(rec.objective), rec.status,
                    ]
                    fh.write(",".join(row) + "\n")
    except OSError as exc:
        raise ConfigError(f"cannot write {csv_path}: {exc}") from None

    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summarize(records, scenario), fh, indent=2)
        fh.write("\n")

    ts = [rec.t for rec in records]
    hours = [t * scenario.step_minutes / 60.0 for t in ts]
    v_series = []
    for k in range(grid.n):
        g = k + 3
        bus, phase = grid.nodes[g]
        v_series.append((f"{bus}.{phase}", hours,
                         [abs(rec.v_real[k]) for rec in records]))
    polyline_chart(os.path.join(out_dir, "voltage.svg"), v_series,
                   title="Realized voltage magnitudes",
                   x_label="hour", y_label="|V| (p.u.)",
                   hlines=((scenario.v_min, "lower limit"),
                           (scenario.v_max, "upper limit")))

    tap_series = [(f"phase {p}", hours,
                   [rec.setpoints.tap.values[i] for rec in records])
                  for i, p in enumerate("abc")]
    tf = grid.transformer
    tap_lines = ((tf.tap_min, "min"), (tf.tap_max, "max")) if tf else ()
    polyline_chart(os.path.join(out_dir, "taps.svg"), tap_series,
                   title="Tap ratios", x_label="hour", y_label="ratio",
                   hlines=tap_lines)

    dg_series = []
    for unit in scenario.dg_units:
        bus, phase = grid.nodes[unit.node]
        dg_series.append((f"{bus}.{phase} available", hours,
                          [rec.dg_available.get(unit.node, float("nan"))
                           for rec in records]))
        dg_series.append((f"{bus}.{phase} used", hours,
                          [rec.dg_used.get(unit.node, float("nan"))
                           for rec in records]))
    polyline_chart(os.path.join(out_dir, "energy.svg"), dg_series,
                   title="DG apparent power: available vs used",
                   x_label="hour", y_label="|S| (p.u.)")
    return csv_path
