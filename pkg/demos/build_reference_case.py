"""Regenerate the packaged reference feeder and daily scenario.

The shipped JSON files under src/gridopf/data/ are the canonical artifacts;
this script documents exactly how they were produced and lets you rebuild
them after editing the knobs below.  Profiles are synthetic: a double-hump
diurnal load shape, a solar bell, and gusty wind from filtered noise.
"""

import json
import os

import numpy as np

HORIZON = 96
STEP_MINUTES = 15.0
PROFILE_SEED = 7041  # wind gust noise only; scenario randomness is separate

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "gridopf", "data")


def phase_impedance_block(z_self, coupling=0.3, n=3):
    """Inverse of the symmetric phase impedance matrix, as an admittance block."""
    z = np.full((n, n), coupling * z_self, dtype=complex)
    np.fill_diagonal(z, z_self)
    return np.linalg.inv(z)


def block_to_json(y):
    return [[[v.real, v.imag] for v in row] for row in np.atleast_2d(y)]


def pad_lateral_block(core, from_phases, to_phases, all_from, all_to):
    """Zero-padded block for branches whose endpoints differ in phase sets."""
    out = np.zeros((len(all_from), len(all_to)), dtype=complex)
    rows = [all_from.index(p) for p in from_phases]
    cols = [all_to.index(p) for p in to_phases]
    out[np.ix_(rows, cols)] = core
    return out


def build_grid() -> dict:
    abc = ["a", "b", "c"]
    buses = [
        {"id": "src", "phases": abc},
        {"id": "b1", "phases": abc},
        {"id": "lat1", "phases": ["a", "b"]},
        {"id": "b2", "phases": abc},
        {"id": "tfp", "phases": abc},
        {"id": "tfs", "phases": abc},
        {"id": "b3", "phases": abc},
        {"id": "lat2", "phases": ["b", "c"]},
        {"id": "b4", "phases": abc},
        {"id": "b5", "phases": abc},
    ]

    def line(f, t, z_self):
        return {"from": f, "to": t,
                "y_block": block_to_json(phase_impedance_block(z_self))}

    def lateral(f, t, z_self, phases, to_phases):
        core = phase_impedance_block(z_self, n=2)
        padded = pad_lateral_block(core, phases, phases, ["a", "b", "c"], to_phases)
        return {"from": f, "to": t, "y_block": block_to_json(padded)}

    branches = [
        line("src", "b1", 0.014 + 0.028j),
        line("b1", "b2", 0.024 + 0.048j),
        line("b2", "tfp", 0.024 + 0.048j),
        # transformer branch: nominal series admittance, replaced by the
        # ideal tap coupling in every computation
        {"from": "tfp", "to": "tfs",
         "y_block": block_to_json(np.diag([1.0 / (0.002 + 0.04j)] * 3))},
        line("tfs", "b3", 0.030 + 0.060j),
        line("b3", "b4", 0.036 + 0.072j),
        line("b4", "b5", 0.036 + 0.072j),
        lateral("b1", "lat1", 0.040 + 0.060j, ["a", "b"], ["a", "b"]),
        lateral("b3", "lat2", 0.040 + 0.060j, ["b", "c"], ["b", "c"]),
    ]
    ang = np.exp(-2j * np.pi / 3)
    v_src = [1.0 + 0j, ang, ang.conjugate()]
    return {
        "base_mva": 1.0,
        "base_kv": 4.16,
        "buses": buses,
        "branches": branches,
        "source": {"bus": "src", "v": [[v.real, v.imag] for v in v_src]},
        "transformer": {"primary": "tfp", "secondary": "tfs",
                        "tap_min": 0.9, "tap_max": 1.1, "tap_step": 0.00625},
    }


def diurnal_shape(hours):
    """Double-hump household aggregate, normalized to peak 1."""
    morning = np.exp(-((hours - 8.0) / 2.2) ** 2)
    evening = np.exp(-((hours - 19.5) / 2.8) ** 2)
    shape = 0.42 + 0.30 * morning + 0.58 * evening
    return shape / shape.max()

def solar_shape(hours):
    s = np.cos((hours - 13.0) / 7.0 * (np.pi / 2.0))
    s[np.abs(hours - 13.0) >= 7.0] = 0.0
    return np.clip(s, 0.0, None) ** 1.3


def wind_shape(hours, rng):
    w = np.empty(hours.shape[0])
    w[0] = 0.55
    for k in range(1, w.shape[0]):
        w[k] = 0.90 * w[k - 1] + 0.10 * rng.normal(0.55, 0.35)
    return np.clip(w, 0.0, 1.0)


def build_scenario() -> dict:
    rng = np.random.default_rng(PROFILE_SEED)
    hours = np.arange(HORIZON) * STEP_MINUTES / 60.0
    load = diurnal_shape(hours)
    solar = solar_shape(hours)
    wind = wind_shape(hours, rng)

    # peak consumption per (bus, phase multipliers) for mild unbalance
    peaks = {
        "b1": 0.035, "b2": 0.045, "b3": 0.055, "b4": 0.045, "b5": 0.035,
        "lat1": 0.045, "lat2": 0.045,
    }
    phase_mix = {
        "b1": (1.00, 0.90, 1.10), "b2": (1.08, 1.00, 0.92),
        "b3": (0.94, 1.06, 1.00), "b4": (1.04, 0.96, 1.00),
        "b5": (1.00, 1.05, 0.95), "lat1": (1.00, 0.95, None),
        "lat2": (None, 1.05, 0.95),
    }
    phases_of = {"lat1": ("a", "b"), "lat2": ("b", "c")}
    loads = []
    for bus, peak in peaks.items():
        phases = phases_of.get(bus, ("a", "b", "c"))
        for ph in phases:
            mult = phase_mix[bus]["abc".index(ph)]
            p = peak * mult * load
            loads.append({"bus": bus, "phase": ph,
                          "p": [round(v, 8) for v in p],
                          "q": [round(v, 8) for v in 0.35 * p]})

    dg = [
        {"bus": "b3", "phases": ["a", "b", "c"], "kind": "solar",
         "s_max": [round(v, 8) for v in 0.085 * solar],
         "p_min": 0.0, "q_frac": 0.44},
        {"bus": "b5", "phases": ["a", "b", "c"], "kind": "solar",
         "s_max": [round(v, 8) for v in 0.080 * solar],
         "p_min": 0.0, "q_frac": 0.44},
        {"bus": "b2", "phases": ["a", "b", "c"], "kind": "wind",
         "s_max": [round(v, 8) for v in 0.040 * wind],
         "p_min": 0.0, "q_frac": 0.44},
        {"bus": "lat1", "phases": ["a", "b"], "kind": "wind",
         "s_max": [round(v, 8) for v in 0.035 * wind],
         "p_min": 0.0, "q_frac": 0.44},
    ]

    measurements = [
        {"kind": "voltage-phasor", "bus": "b4", "phases": ["a", "b", "c"],
         "sigma": 0.01},
        {"kind": "voltage-magnitude", "bus": "b2", "phases": ["a", "b", "c"],
         "sigma": 0.01},
        {"kind": "voltage-magnitude", "bus": "b5", "phases": ["a", "b", "c"],
         "sigma": 0.01},
        {"kind": "node-current-phasor", "bus": "b3", "phases": ["a", "b", "c"],
         "sigma": 0.02},
        {"kind": "node-current-magnitude", "bus": "b1",
         "phases": ["a", "b", "c"], "sigma": 0.02},
        {"kind": "branch-current-phasor", "branch": ["src", "b1"],
         "phases": ["a", "b", "c"], "sigma": 0.02},
    ]

    return {
        "name": "reference-25-node-feeder",
        "grid": "reference_grid.json",
        "horizon": HORIZON,
        "step_minutes": STEP_MINUTES,
        "beta": 0.95,
        "v_min": 0.95,
        "v_max": 1.05,
        "case": "with-cov",
        "seed": 2025,
        "loads": loads,
        "dg": dg,
        "measurements": measurements,
        "pseudo_sigma_frac": 0.5,
        "pseudo_floor": 0.002,
    }


def main():
    os.makedirs(DATA_DIR, exist_ok=True)
    grid_path = os.path.join(DATA_DIR, "reference_grid.json")
    scen_path = os.path.join(DATA_DIR, "reference_scenario.json")
    with open(grid_path, "w") as fh:
        json.dump(build_grid(), fh, indent=1)
        fh.write("\n")
    with open(scen_path, "w") as fh:
        json.dump(build_scenario(), fh, indent=1)
        fh.write("\n")
    print(f"wrote {grid_path}")
    print(f"wrote {scen_path}")


if __name__ == "__main__":
    main()
