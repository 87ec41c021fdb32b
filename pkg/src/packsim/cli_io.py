"""Command-line front end: configuration files, presets and CSV output.

Configuration is nested YAML with an ``include`` list for sharing parameter
files between scenarios; user files are merged over the packaged defaults.
Every run writes ``metrics.csv``, ``ledger.csv``, ``temperatures.csv`` and
``capacity_hist_<cycle>.csv`` with full-precision (shortest round-trip)
numbers, so identical seeds give byte-identical output.
"""

from __future__ import annotations

import argparse
import importlib.resources
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import ancillary as anc
from . import cell_model as cm
from . import degradation as dg
from . import pack_topology as pt
from . import thermal_network as tn
from .sim_engine import (Engine, FanUnitConfig, MetricsLog, ParamSet, Scenario,
                         ScenarioError, LEDGER_COLUMNS, METRICS_COLUMNS)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

PRESET_NAMES = ("fig5", "fig8", "contact_r", "cell2cell", "thermal",
                "control_week", "control_life")


class ConfigError(ValueError):
    pass


def _data_root():
    return importlib.resources.files("packsim") / "data"


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


_FLOAT_RE = __import__("re").compile(
    r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _coerce_numbers(obj):
    # YAML 1.1 reads unsigned exponents ('3.5e4') as strings; repair them
    if isinstance(obj, dict):
        return {k: _coerce_numbers(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_coerce_numbers(v) for v in obj]
    if isinstance(obj, str) and _FLOAT_RE.match(obj):
        return float(obj)
    return obj


def load_yaml_tree(path: Path) -> dict:
    """Load one YAML file, resolving its ``include`` list depth-first."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"malformed config at {where}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    merged: dict = {}
    for inc in data.pop("include", []):
        inc_path = Path(inc)
        if not inc_path.is_absolute():
            inc_path = path.parent / inc_path
        merged = _deep_merge(merged, load_yaml_tree(inc_path))
    return _coerce_numbers(_deep_merge(merged, data))


def default_config() -> dict:
    with importlib.resources.as_file(_data_root() / "default_params.yaml") as p:
        return load_yaml_tree(p)


def _need(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"missing field '{key}' in config block '{where}'")
    return block[key]


def _electrode(block: dict, where: str) -> cm.ElectrodeParams:
    try:
        return cm.ElectrodeParams(
            d_ref=_need(block, "d_ref_m2_s", where),
            e_d=_need(block, "e_d_j_mol", where),
            k_ref=_need(block, "k_ref", where),
            e_k=_need(block, "e_k_j_mol", where),
            radius=_need(block, "radius_m", where),
            eps0=_need(block, "eps0", where),
            area=_need(block, "area_m2", where),
            thickness=_need(block, "thickness_m", where),
            c_max=_need(block, "c_max_mol_m3", where),
            r_dc=_need(block, "r_dc_ohm_m2", where))
    except TypeError as exc:
        raise ConfigError(f"bad electrode block '{where}': {exc}") from exc


def _table_path(name: str) -> Path:
    p = Path(name)
    if p.is_absolute() and p.exists():
        return p
    if p.exists():
        return p
    with importlib.resources.as_file(_data_root() / name) as packaged:
        if packaged.exists():
            return packaged
    raise ConfigError(f"OCV table not found: {name}")


def build_param_set(cfg: dict) -> ParamSet:
    """Construct all parameter objects from a merged configuration dict."""
    c = cfg.get("cell", {})
    cell = cm.CellParams(
        anode=_electrode(_need(c, "anode", "cell"), "cell.anode"),
        cathode=_electrode(_need(c, "cathode", "cell"), "cell.cathode"),
        c_el=_need(c, "c_el_mol_m3", "cell"),
        alpha=_need(c, "alpha", "cell"),
        n_e=int(c.get("n_electrons", 1)),
        rho_cell=_need(c, "rho_kg_m3", "cell"),
        a_cell=_need(c, "area_m2", "cell"),
        tau_cell=_need(c, "thickness_m", "cell"),
        cp_cell=_need(c, "cp_j_kgk", "cell"),
        t_ref=_need(c, "t_ref_k", "cell"),
        v_min=_need(c, "v_min_v", "cell"),
        v_max=_need(c, "v_max_v", "cell"),
        q_nom=_need(c, "q_nom_ah", "cell"),
        stoich_empty_n=_need(c, "stoich_empty_n", "cell"),
        stoich_full_n=_need(c, "stoich_full_n", "cell"),
        stoich_empty_p=_need(c, "stoich_empty_p", "cell"),
        n_shells=int(c.get("n_shells", 11)))
    s = cfg.get("sei", {})
    sei = dg.SeiParams(
        k_ref=_need(s, "k_ref", "sei"), e_k=_need(s, "e_k_j_mol", "sei"),
        d_ref=_need(s, "d_ref", "sei"), e_d=_need(s, "e_d_j_mol", "sei"),
        alpha=_need(s, "alpha", "sei"), u_sei=_need(s, "u_sei_v", "sei"),
        v_sei=_need(s, "v_sei_m3_mol", "sei"),
        v_li=_need(s, "v_li_m3_mol", "sei"),
        beta_1=_need(s, "beta_1", "sei"),
        r_dc_sei=_need(s, "r_dc_sei", "sei"),
        tau_0=_need(s, "tau_0_m", "sei"))
    st = cfg.get("stress", {})
    stress = dg.StressParams(
        omega_n=_need(st, "omega_n_m3_mol", "stress"),
        omega_p=_need(st, "omega_p_m3_mol", "stress"),
        young_n=_need(st, "young_n_pa", "stress"),
        young_p=_need(st, "young_p_pa", "stress"),
        poisson_n=_need(st, "poisson_n", "stress"),
        poisson_p=_need(st, "poisson_p", "stress"),
        sigma_yield_n=_need(st, "sigma_yield_n_pa", "stress"),
        sigma_yield_p=_need(st, "sigma_yield_p_pa", "stress"),
        beta_2=_need(st, "beta_2", "stress"),
        m_exp=_need(st, "m_exp", "stress"),
        eps_floor_frac=st.get("eps_floor_frac", 0.01))
    tables = cfg.get("ocv_tables", {})
    ocv = cm.OcvTables.from_csv(
        _table_path(tables.get("anode_csv", "ocp_anode.csv")),
        _table_path(tables.get("cathode_csv", "ocp_cathode.csv")),
        _table_path(tables.get("entropic_csv", "entropic.csv")))
    f = cfg.get("fan", {})
    fan = FanUnitConfig(
        area_per_cell=f.get("area_per_cell_m2", 2.5e-5),
        flow_per_cell=f.get("flow_per_cell_m3_s", 5e-4),
        eta_fan=f.get("eta_fan", 0.554),
        rho_air=f.get("rho_air_kg_m3", 1.204),
        cp_air=f.get("cp_air_j_kgk", 1005.0))
    a = cfg.get("ac", {})
    cv = cfg.get("converter", {})
    converter = anc.ConverterParams(
        v_sc=cv.get("v_sc_v", 1.5), f_sw=cv.get("f_sw_hz", 3000.0),
        e_on=cv.get("e_on_j", 0.25), e_off=cv.get("e_off_j", 0.25),
        passive_frac=cv.get("passive_loss_frac", 0.005),
        v_bus=cv.get("v_bus_v", 1200.0), d_ac=cv.get("d_ac", 0.54),
        rating_w=cv.get("rating_ref_w", 1.2e6),
        rating_ref_w=cv.get("rating_ref_w", 1.2e6))
    th = cfg.get("thermal", {})
    thermal = tn.ThermalBuildParams(
        h_cell_cell=th.get("h_cell_cell", 15.0),
        a_cell_side=th.get("a_cell_side_m2", 0.01),
        h_cell_wall=th.get("h_cell_wall", 15.0),
        a_cell_wall=th.get("a_cell_wall_m2", 0.01),
        a_cell_cool=th.get("a_cell_cool_m2", 0.01),
        c_group_per_cell=th.get("c_group_per_cell_j_k", 400.0),
        a_group_per_cell=th.get("a_group_per_cell_m2", 0.02),
        h_leak=th.get("h_leak", 1.0),
        a_leak_per_cell=th.get("a_leak_per_cell_m2", 0.005),
        h_individual=th.get("h_individual", 40.0),
        guard_factor=th.get("guard_factor", 0.1))
    pi = cfg.get("pi", {})
    return ParamSet(
        cell=cell, sei=sei, stress=stress, ocv=ocv, fan=fan,
        ac_cop=a.get("cop", 3.0),
        ac_capacity_per_cell=a.get("capacity_per_cell_w", 3.0),
        converter=converter,
        converter_rating_per_cell=cv.get("rating_per_cell_w", 75.0),
        thermal=thermal, v_nom=c.get("v_nom_v", 3.6),
        pi_gain_p=pi.get("gain_p", 0.6), pi_gain_i=pi.get("gain_i", 0.05),
        pi_tolerance=pi.get("tolerance", 1e-4),
        pi_max_iter=int(pi.get("max_iter", 50)))


SCENARIO_KEYS = set(Scenario.__dataclass_fields__)
PARAM_BLOCKS = {"cell", "sei", "stress", "fan", "ac", "converter", "thermal",
                "ocv_tables", "pi", "contacts"}


def load_run_config(path) -> tuple[Scenario, ParamSet, dict]:
    """Split a merged config file into scenario and parameter objects."""
    cfg = _deep_merge(default_config(), load_yaml_tree(Path(path)))
    params = build_param_set(cfg)
    raw_sc = {k: v for k, v in cfg.items() if k in SCENARIO_KEYS}
    unknown = set(cfg) - SCENARIO_KEYS - PARAM_BLOCKS
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    if "topology" not in raw_sc:
        raise ConfigError("config needs a 'topology' section")
    return Scenario.from_dict(raw_sc), params, cfg


# -- presets -----------------------------------------------------------------


def _block_topology(n_par=5, contact_r=0.0):
    return {"kind": "parallel", "count": n_par, "contact_r_ohm": contact_r,
            "thermal": "closed", "child": {"kind": "cell"}}


def _module_topology(cell_r, module_r, n_series=20, n_par=7):
    return {"kind": "series", "count": 1, "contact_r_ohm": module_r,
            "thermal": "closed",
            "child": {"kind": "series", "count": n_series,
                      "contact_r_ohm": cell_r, "thermal": "open",
                      "child": {"kind": "parallel", "count": n_par,
                                "contact_r_ohm": cell_r,
                                "child": {"kind": "cell"}}}}


def _rack_topology(cell_r, module_r, n_modules=15):
    module = {"kind": "series", "count": 20, "contact_r_ohm": cell_r,
              "thermal": "closed",
              "child": {"kind": "parallel", "count": 7,
                        "contact_r_ohm": cell_r, "child": {"kind": "cell"}}}
    return {"kind": "series", "count": n_modules, "contact_r_ohm": module_r,
            "thermal": "open", "child": module}


def _cycle_protocol():
    return [{"mode": "cc", "rate_c": 1.0}, {"mode": "cc", "rate_c": -1.0}]


def _daily_profile():
    h = 3600.0
    return [
        {"mode": "rest", "duration_s": 4 * h},
        {"mode": "cc", "rate_c": -1.0, "duration_s": 1 * h},
        {"mode": "rest", "duration_s": 1 * h},
        {"mode": "cc", "rate_c": 1.0, "duration_s": 1 * h},
        {"mode": "rest", "duration_s": 4 * h},
        {"mode": "cc", "rate_c": -0.5, "duration_s": 2 * h},
        {"mode": "rest", "duration_s": 4 * h},
        {"mode": "cc", "rate_c": 0.5, "duration_s": 2 * h},
        {"mode": "rest", "duration_s": 5 * h},
    ]


def preset_scenarios(name: str, cycles: int | None = None,
                     days: int | None = None, seed: int = 7) -> list:
    """Labelled scenario dicts for one bundled study."""
    contacts = default_config().get("contacts", {})
    cell_r = contacts.get("cell_ohm", 7.5e-6)
    module_r = contacts.get("module_ohm", 2.5e-4)
    small_var = {"sd_capacity": 0.004, "sd_resistance": 0.025,
                 "sd_degradation": 0.0, "seed": seed}
    full_var = {"sd_capacity": 0.004, "sd_resistance": 0.025,
                "sd_degradation": 0.10, "seed": seed}

    if name == "fig5":
        base = {
            "protocol": [{"mode": "cc", "rate_c": 1.0},
                         {"mode": "rest", "duration_s": 600.0},
                         {"mode": "cc", "rate_c": -1.0},
                         {"mode": "rest", "duration_s": 600.0}],
            "repeat": 1, "dt_s": 2.0, "thermal_mode": "none",
            "env_t_c": 25.0, "variation": small_var,
            "cell_overrides": {4: {"capacity": 0.5}},
            "metrics_every_cycles": 1, "trace_cells": True, "seed": seed,
        }
        return [("no_contact", base | {"topology": _block_topology(5, 0.0)}),
                ("contact_1mohm", base | {"topology": _block_topology(5, 1e-3)})]

    if name == "fig8":
        sc = {
            "topology": _block_topology(5, 0.0),
            "protocol": _cycle_protocol(), "repeat": 5, "dt_s": 2.0,
            "thermal_mode": "coupled", "env_t_c": 20.0,
            "control": {"variant": "always_on"},
            "variation": small_var, "cell_overrides": {4: {"capacity": 0.5}},
            "temps_every_s": 60.0, "trace_cells": True, "seed": seed,
        }
        return [("fig8", sc)]

    if name == "contact_r":
        n_cycles = cycles or 500
        base = {
            "protocol": _cycle_protocol(), "repeat": n_cycles,
            "dt_s": 20.0, "thermal_mode": "none", "env_t_c": 25.0,
            "variation": None, "capacity_every_cycles": max(n_cycles // 10, 1),
            "metrics_every_cycles": 1, "seed": seed,
        }
        return [
            ("scaled_single", base | {"topology": {
                "kind": "cell", "scale_series": 20, "scale_parallel": 7}}),
            ("nominal", base | {"topology": _module_topology(cell_r, module_r)}),
            ("high_contact", base | {"topology": _module_topology(
                cell_r * 10, module_r * 10)}),
        ]

    if name == "cell2cell":
        n_cycles = cycles or 1000
        base = {
            "topology": _module_topology(cell_r, module_r),
            "protocol": _cycle_protocol(), "repeat": n_cycles,
            "dt_s": 20.0, "thermal_mode": "none", "env_t_c": 25.0,
            "capacity_every_cycles": max(n_cycles // 10, 1), "seed": seed,
        }
        mk = lambda cap, res, deg: {"sd_capacity": cap, "sd_resistance": res,
                                    "sd_degradation": deg, "seed": seed}
        return [
            ("identical", base | {"variation": None}),
            ("resistance", base | {"variation": mk(0.0, 0.025, 0.0)}),
            ("capacity", base | {"variation": mk(0.004, 0.0, 0.0)}),
            ("degradation_rate", base | {"variation": mk(0.0, 0.0, 0.10)}),
            ("all", base | {"variation": mk(0.004, 0.025, 0.10)}),
        ]

    if name == "thermal":
        n_cycles = cycles or 200
        base = {
            "topology": _module_topology(cell_r, module_r),
            "protocol": _cycle_protocol(), "repeat": n_cycles, "dt_s": 10.0,
            "env_t_c": 25.0, "variation": full_var,
            "capacity_every_cycles": max(n_cycles // 10, 1), "seed": seed,
        }
        return [("individual", base | {"thermal_mode": "individual"}),
                ("coupled", base | {"thermal_mode": "coupled",
                                    "control": {"variant": "always_on"}})]

    if name in ("control_week", "control_life"):
        n_days = days or (7 if name == "control_week" else 56)
        base = {
            "topology": _module_topology(cell_r, module_r),
            "protocol": _daily_profile(), "repeat": n_days, "dt_s": 5.0,
            "thermal_mode": "coupled", "env_t_c": 15.0,
            "variation": full_var, "weekly_balance": True,
            "temps_every_s": 300.0, "seed": seed,
            "capacity_every_cycles": 0 if name == "control_week" else 28,
        }
        return [(v, base | {"control": {"variant": v}}) for v in
                ("always_on", "local_on_off", "hotspot_on_off",
                 "proportional_local", "proportional_hotspot")]

    raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


def cli_presets(name: str, variant: str | None = None) -> Scenario:
    """One preset scenario by name (first variant unless specified)."""
    bundle = preset_scenarios(name)
    if variant is None:
        return Scenario.from_dict(bundle[0][1])
    for label, sc in bundle:
        if label == variant:
            return Scenario.from_dict(sc)
    raise ConfigError(f"preset {name!r} has no variant {variant!r}; "
                      f"options: {[l for l, _ in bundle]}")


# -- CSV output -----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list, rows):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def write_outputs(log: MetricsLog, out_dir: Path):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "metrics.csv", METRICS_COLUMNS,
               ([row[k] for k in METRICS_COLUMNS] for row in log.metrics))
    ledger_cols = ["cycle"] + LEDGER_COLUMNS + ["closure_residual"]
    _write_csv(out_dir / "ledger.csv", ledger_cols,
               ([row[k] for k in ledger_cols] for row in log.ledger))
    _write_csv(out_dir / "temperatures.csv", ["time_s", "node", "temp_k"],
               log.temps)
    if log.traces:
        _write_csv(out_dir / "traces.csv",
                   ["time_s", "cell", "current_a", "voltage_v"], log.traces)
    for cycle, ah in log.capacity_hist.items():
        _write_csv(out_dir / f"capacity_hist_{cycle}.csv",
                   ["cell_id", "capacity_ah"],
                   ((i, a) for i, a in enumerate(ah)))


def read_csv(path) -> tuple[list, list]:
    """Round-trip reader for the emitted CSV files (header, rows)."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = []
        for line in f:
            cells = line.rstrip("\n").split(",")
            parsed = []
            for c in cells:
                try:
                    parsed.append(int(c))
                except ValueError:
                    try:
                        parsed.append(float(c))
                    except ValueError:
                        parsed.append(c)
            rows.append(parsed)
    return header, rows


# -- entry point ------------------------------------------------------------------


def _run_one(scenario: Scenario, params: ParamSet, out_dir: Path,
             args) -> int:
    from .pack_topology import SolverError
    eng = Engine(scenario, params)
    if args.resume:
        blob = Path(args.resume).read_bytes()
        eng.restore(blob)
    if args.checkpoint_every:
        every = args.checkpoint_every

        def _cb(engine):
            if engine.cycle_idx % every == 0:
                (out_dir / "checkpoint.ckpt").write_bytes(engine.checkpoint())
        eng.checkpoint_callback = _cb
    try:
        log = eng.run()
    except SolverError as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "failure.ckpt"
        ckpt.write_bytes(eng.checkpoint())
        print(f"solver failure: {exc}", file=sys.stderr)
        print(f"checkpoint written to {ckpt}", file=sys.stderr)
        return EXIT_SOLVER
    write_outputs(log, out_dir)
    print(f"{out_dir}: {eng.stopped} after {eng.cycle_idx} cycles, "
          f"{eng.time_s / 86400.0:.2f} simulated days")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Cell-resolved grid-battery digital twin")
    parser.add_argument("--config", help="scenario configuration file (YAML)")
    parser.add_argument("--preset", choices=PRESET_NAMES,
                        help="bundled study instead of a config file")
    parser.add_argument("--preset-variant", default=None,
                        help="run a single variant of the preset")
    parser.add_argument("--cycles", type=int, default=None,
                        help="override preset cycle count")
    parser.add_argument("--days", type=int, default=None,
                        help="override preset day count")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--resume", default=None, help="checkpoint to resume")
    parser.add_argument("--checkpoint-every", type=int, default=0,
                        help="write a checkpoint every N cycles")
    args = parser.parse_args(argv)

    out_root = Path(args.out or os.environ.get("PACKSIM_OUT", "out"))
    try:
        if args.config and args.preset:
            raise ConfigError("--config and --preset are mutually exclusive")
        if args.config:
            scenario, params, _ = load_run_config(args.config)
            runs = [(None, scenario)]
        elif args.preset:
            params = build_param_set(default_config())
            bundle = preset_scenarios(args.preset, cycles=args.cycles,
                                      days=args.days,
                                      seed=args.seed if args.seed is not None else 7)
            if args.preset_variant:
                bundle = [(l, s) for l, s in bundle if l == args.preset_variant]
                if not bundle:
                    raise ConfigError(
                        f"preset {args.preset!r} has no variant "
                        f"{args.preset_variant!r}")
            runs = [(label, Scenario.from_dict(sc)) for label, sc in bundle]
        else:
            raise ConfigError("one of --config or --preset is required")
    except (ConfigError, ScenarioError, pt.TopologyError,
            tn.ThermalConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    worst = EXIT_OK
    for label, scenario in runs:
        if args.seed is not None:
            scenario.seed = args.seed
            if scenario.variation is not None:
                scenario.variation = dict(scenario.variation, seed=args.seed)
        scenario.n_threads = max(1, args.threads)
        out_dir = out_root / label if label else out_root
        try:
            code = _run_one(scenario, params, out_dir, args)
        except (ConfigError, ScenarioError, pt.TopologyError,
                tn.ThermalConfigError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
