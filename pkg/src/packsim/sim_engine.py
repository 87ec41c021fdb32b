"""Scenario executor.

Runs cycling protocols over a pack: each timestep applies thermal-control
commands, solves the electrical current split, updates degradation, advances
the thermal network and books every energy flow into a per-cycle ledger.
Voltage-limit crossings shorten the final substep so protocol transitions
land on the limit; constant-voltage phases regulate the total current with a
secant iteration on the worst cell voltage.

The engine's whole position (protocol pointer, accumulators, controller and
latch states) lives in plain arrays and scalars, so a checkpoint restores a
run bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import FARADAY, KELVIN_OFFSET
from . import ancillary as anc
from . import cell_model as cm
from . import degradation as dg
from . import pack_topology as pt
from . import thermal_control as tc
from . import thermal_network as tn
from .cellbank import CellBank
from .variability import VariationSpec, sample_factors


CHECKPOINT_MAGIC = b"PKCKPT01"


class ScenarioError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class FanUnitConfig:
    area_per_cell: float = 2.5e-5
    flow_per_cell: float = 5e-4
    eta_fan: float = 0.554
    rho_air: float = 1.204
    cp_air: float = 1005.0

    def for_cells(self, n: int) -> anc.FanParams:
        return anc.FanParams.per_cells(
            n, area_per_cell=self.area_per_cell, flow_per_cell=self.flow_per_cell,
            eta_fan=self.eta_fan, rho_air=self.rho_air, cp_air=self.cp_air)


@dataclass(frozen=True)
class ParamSet:
    """Everything the engine needs besides the scenario itself."""

    cell: cm.CellParams
    sei: dg.SeiParams
    stress: dg.StressParams
    ocv: cm.OcvTables
    fan: FanUnitConfig
    ac_cop: float
    ac_capacity_per_cell: float
    converter: anc.ConverterParams
    converter_rating_per_cell: float
    thermal: tn.ThermalBuildParams
    v_nom: float
    pi_gain_p: float = 0.6
    pi_gain_i: float = 0.05
    pi_tolerance: float = 1e-4
    pi_max_iter: int = 50


@dataclass
class ProtocolStep:
    """One protocol entry.  Positive rate discharges."""

    mode: str                      # cc | cccv | rest
    rate_c: float = 0.0
    duration_s: float | None = None
    i_cutoff_c: float = 0.05

    def __post_init__(self):
        if self.mode not in ("cc", "cccv", "rest"):
            raise ScenarioError(f"unknown protocol mode {self.mode!r}")
        if self.mode == "rest":
            if self.duration_s is None:
                raise ScenarioError("rest steps need a duration")
        elif self.rate_c == 0.0:
            raise ScenarioError("cc/cccv steps need a nonzero rate")
        if self.mode == "cccv" and self.rate_c > 0.0:
            raise ScenarioError("cccv steps must charge (negative rate)")


@dataclass
class Scenario:
    topology: dict
    protocol: list
    repeat: int = 1
    dt_s: float = 2.0
    init_soc: float = 0.5
    thermal_mode: str = "none"        # none | individual | coupled
    env_t_c: float = 25.0
    env_mode: str = "direct-air"
    control: dict = field(default_factory=lambda: {"variant": "always_on"})
    variation: dict | None = None
    cell_overrides: dict = field(default_factory=dict)
    weekly_balance: bool = False
    metrics_every_cycles: int = 1
    temps_every_s: float = 600.0
    capacity_every_cycles: int = 0
    measure_dt_s: float = 5.0
    trace_cells: bool = False
    stop: dict = field(default_factory=dict)
    seed: int = 0
    n_threads: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ScenarioError(f"unknown scenario fields: {sorted(extra)}")
        data = dict(raw)
        data["protocol"] = [ProtocolStep(**s) for s in raw.get("protocol", [])]
        if not data["protocol"]:
            raise ScenarioError("scenario needs a protocol")
        return cls(**data)


LEDGER_COLUMNS = [
    "grid_in_wh", "grid_out_wh", "delta_stored_wh", "entropic_wh",
    "cell_reaction_wh", "cell_ohmic_wh", "cell_polarization_wh", "contact_wh",
    "converter_cond_wh", "converter_sw_wh", "converter_passive_wh", "fan_wh",
    "ac_wh", "balancing_wh",
]

METRICS_COLUMNS = [
    "cycle", "time_s", "fec", "grid_in_wh", "grid_out_wh", "efficiency",
    "usable_frac", "cap_rel_mean", "cap_rel_sd", "cap_rel_min", "cap_rel_max",
    "cap_measured_cycle", "t_mean_k", "t_min_k", "t_max_k", "v_terminal_v",
]


class MetricsLog:
    """Per-cycle metrics, per-cycle energy ledger and temperature series."""

    def __init__(self):
        self.metrics: list[dict] = []
        self.ledger: list[dict] = []
        self.temps: list[tuple] = []      # (time_s, label, kelvin)
        self.traces: list[tuple] = []     # (time_s, cell, current_a, voltage_v)
        self.capacity_hist: dict[int, np.ndarray] = {}

    def closure_residual(self, row: dict) -> float:
        losses = (row["entropic_wh"] + row["cell_reaction_wh"]
                  + row["cell_ohmic_wh"] + row["cell_polarization_wh"]
                  + row["contact_wh"]
                  + row["converter_cond_wh"] + row["converter_sw_wh"]
                  + row["converter_passive_wh"] + row["fan_wh"] + row["ac_wh"]
                  + row["balancing_wh"])
        gap = row["grid_in_wh"] - row["grid_out_wh"] - row["delta_stored_wh"] - losses
        scale = max(abs(row["grid_in_wh"]), abs(row["delta_stored_wh"]), 1e-9)
        return gap / scale


def _zero_accumulators() -> dict:
    return {k: 0.0 for k in LEDGER_COLUMNS if k not in ("delta_stored_wh",)} | {
        "chem_delta_j": 0.0, "throughput_ah": 0.0,
        "t_mean_time_int": 0.0, "t_min": np.inf, "t_max": -np.inf,
        "duration_s": 0.0,
    }


class Engine:
    """One scenario bound to its pack, thermal network and ancillaries."""

    def __init__(self, scenario: Scenario, params: ParamSet):
        self.sc = scenario
        self.ps = params
        self._build()

    # -- construction -----------------------------------------------------

    def _build(self):
        sc, ps = self.sc, self.ps
        topo = sc.topology
        self.scaled_model = topo.get("kind") == "cell"
        if self.scaled_model:
            self.scale_series = float(topo.get("scale_series", 1))
            self.scale_parallel = float(topo.get("scale_parallel", 1))
            if sc.thermal_mode == "coupled":
                raise ScenarioError(
                    "the scaled single-cell model has no thermal hierarchy")
            tree = pt.Cell()
        else:
            self.scale_series = 1.0
            self.scale_parallel = 1.0
            tree = pt.build_tree(topo)
        n_cells = pt.assign_cell_indices(tree)
        self.tree = tree

        factors = None
        if sc.variation is not None:
            spec = VariationSpec(**sc.variation)
            factors = sample_factors(spec, n_cells)
        for idx, over in (sc.cell_overrides or {}).items():
            if factors is None:
                factors = sample_factors(VariationSpec(
                    sd_capacity=0, sd_resistance=0, sd_degradation=0,
                    seed=sc.seed), n_cells)
            for channel, value in over.items():
                factors[channel][int(idx)] = value

        env_t = sc.env_t_c + KELVIN_OFFSET
        self.env = tn.Environment(t_inf=env_t, mode=sc.env_mode)
        self.bank = CellBank(ps.cell, ps.sei, ps.stress, ps.ocv, n_cells,
                             factors=factors, init_soc=sc.init_soc,
                             init_temp=env_t, n_threads=sc.n_threads)
        self.pack = pt.Pack(tree, self.bank, tolerance=ps.pi_tolerance,
                            gain_p=ps.pi_gain_p, gain_i=ps.pi_gain_i,
                            max_iter=ps.pi_max_iter)

        self.thermal = None
        self.fans = []
        self.ac_capacity = 0.0
        if sc.thermal_mode == "coupled":
            if isinstance(tree, pt.Group) and not tree.closed:
                tree.closed = True
            self.thermal = tn.ThermalNetwork.from_tree(
                tree, n_cells, ps.cell.heat_capacity, ps.thermal, self.env)
            self.thermal.adopt_bank_temperature(self.bank)
            h_max = float(anc.fan_convection(ps.fan.for_cells(1).v_nom))
            self.thermal.check_stability(sc.dt_s, h_max)
            groups = self.thermal.groups
            self.fans = groups
            self.ac_capacity = ps.ac_capacity_per_cell * n_cells
            self.ac_fan = ps.fan.for_cells(n_cells)
            self.ac_latch = tc.Latch()
            ref_fan = ps.fan.for_cells(1)
            self._fan_vnom = ref_fan.v_nom
            self._fan_rho_over_eta = ref_fan.rho_air / ref_fan.eta_fan
            self._fan_nodes = np.array([g.node for g in groups])
            self._fan_lo = np.array([g.cell_lo for g in groups])
            self._fan_hi = np.array([g.cell_hi for g in groups])
            self._fan_area = np.array([ps.fan.area_per_cell * g.n_cells
                                       for g in groups])
            self._fan_on = np.zeros(len(groups), dtype=bool)
            node_to_gi = {g.node: i for i, g in enumerate(groups)}
            self._gi_of_cell = np.array(
                [node_to_gi[node] for node in self.thermal.cell_enclosure])
            self._parent_gi = np.array(
                [node_to_gi.get(g.parent_node, -1) for g in groups])
        elif sc.thermal_mode == "individual":
            self.thermal = tn.ThermalNetwork.individual(
                n_cells, ps.cell.heat_capacity, ps.thermal, self.env)
            self.thermal.adopt_bank_temperature(self.bank)
            self.thermal.check_stability(sc.dt_s, ps.thermal.h_individual)
        elif sc.thermal_mode != "none":
            raise ScenarioError(f"unknown thermal mode {sc.thermal_mode!r}")

        self.control = tc.ControlStrategy(**sc.control)
        self.n_rep_cells = n_cells * self.scale_series * self.scale_parallel
        series_mult = 1.0
        for lvl in self.pack.levels:
            if lvl.kind == "series":
                series_mult *= float(lvl.widths[0])
        self.pack_ah = float(np.sum(self.bank.q_nom)) / series_mult \
            * self.scale_parallel
        rating = ps.converter_rating_per_cell * self.n_rep_cells
        self.converter = ps.converter.scaled(rating)
        self.ac = anc.AcParams(cop=ps.ac_cop, capacity_w=self.ac_capacity)

        # run position and accumulators
        self.time_s = 0.0
        self.rep_idx = 0
        self.step_idx = 0
        self.elapsed_in_step = 0.0
        self.phase = "cc"            # cc | cv within a cccv step
        self.cv_current = 0.0
        self.cv_slope = 0.0
        self.cycle_idx = 0
        self.fec = 0.0
        self.e_chem_cum = 0.0
        self.acc = _zero_accumulators()
        self.next_balance_s = 7 * 86400.0 if self.sc.weekly_balance else np.inf
        self.balance_pending = False
        self.next_temp_log_s = 0.0
        self.cap_rel = np.ones(n_cells)
        self.cap_measured_cycle = -1
        self.stopped = None
        self.log = MetricsLog()
        self.has_discharge = any(s.mode != "rest" and s.rate_c > 0
                                 for s in self.sc.protocol)
        self._cell_ids = np.arange(self.bank.n)
        self._init_voltage()

    def _init_voltage(self):
        self.bank.begin_step(self.sc.dt_s)
        self.bank.v_cell = self.bank.trial_voltage(np.zeros(self.bank.n))
        self.bank._ctx = None

    # -- controls -----------------------------------------------------------

    def _cooling(self, dt: float):
        """Fan/AC commands for this step.

        Returns (h_cell array, h_wall per group, ac_extract_w, p_fan_w, p_ac_w).
        """
        sc = self.sc
        if self.thermal is None or sc.thermal_mode == "individual":
            return None, None, 0.0, 0.0, 0.0
        temps = self.thermal.temps
        n_g = len(self.fans)
        t_local = temps[self._fan_nodes]
        t_hot = np.empty(n_g)
        for gi in range(n_g):
            t_hot[gi] = temps[self._fan_lo[gi]:self._fan_hi[gi]].max()
        cmd = tc.fan_commands_array(self.control, t_local, t_hot, self._fan_on)
        v = self._fan_vnom * np.cbrt(cmd)
        h_groups = anc.fan_convection(v)
        p_fan_total = float(np.sum(self._fan_rho_over_eta * self._fan_area * v ** 3))
        # cells convect to their enclosure with that enclosure's fan coefficient;
        # walls see the parent enclosure's air stream
        h_cell = h_groups[self._gi_of_cell]
        h_wall = np.where(self._parent_gi >= 0, h_groups[self._parent_gi], 0.0)
        root = self.thermal.root_group
        t_cont = float(temps[root.node])
        ac_cmd = tc.ac_command(self.control, t_cont, self.thermal.hotspot(root),
                               self.ac_latch)
        demand = ac_cmd * self.ac_capacity
        p_ac = 0.0
        if demand > 0.0:
            try:
                p_ac = anc.ac_power(demand, t_cont, self.env.t_inf, self.env,
                                    self.ac, self.ac_fan)
            except anc.ZeroCapability:
                p_ac = demand / self.ac.cop   # chiller fallback
        return h_cell, h_wall, demand, p_fan_total, p_ac

    # -- one electrical+thermal timestep --------------------------------------

    def _timestep(self, i_total: float, dt: float, check_limits: bool,
                  balancing: bool = False, balance_currents=None):
        h_cell, h_wall, ac_extract, p_fan, p_ac = self._cooling(dt)
        bank, pack = self.bank, self.pack

        event = None
        dt_eff = dt
        if balancing:
            bank.begin_step(dt)
            result = bank.commit_step(balance_currents)
            result["contact_power"] = 0.0
            result["contact_node_heat"] = (np.array([], dtype=int), np.array([]))
            result["v_terminal"] = pack.v_terminal
        else:
            bank.begin_step(dt)
            v_cells = pack.solve(i_total, dt)
            if check_limits:
                event, frac = self._limit_crossing(v_cells)
                if event is not None and frac < 0.999:
                    dt_eff = max(frac, 0.05) * dt
                    bank.begin_step(dt_eff)
                    v_cells = pack.solve(i_total, dt_eff)
            result = pack.commit()
            if np.any(result["saturated"]):
                event = event or ("saturation", int(np.argmax(result["saturated"])))

        if self.thermal is not None:
            self.thermal.add_generated(self._cell_ids, result["q_gen"])
            ids, watts = result["contact_node_heat"]
            if len(ids):
                ok = ids >= 0
                self.thermal.add_generated(ids[ok], watts[ok])

        i_pack = i_total * self.scale_parallel if not balancing else 0.0
        v_pack = result["v_terminal"] * self.scale_series
        conv = {"conduction": 0.0, "switching": 0.0, "passive": 0.0, "total": 0.0}
        if not balancing and abs(i_pack) > 1e-12:
            conv = anc.converter_losses(i_pack, v_pack, 0.0, self.converter)
        if self.thermal is not None and self.thermal.groups:
            self.thermal.add_generated(np.array([self.thermal.root_group.node]),
                                       np.array([conv["total"]]))
        if self.thermal is not None:
            self.thermal.step(dt_eff, h_cell, h_wall, ac_extract)

        self._ledger_step(result, conv, p_fan, p_ac, dt_eff, balancing)
        self.time_s += dt_eff
        self.elapsed_in_step += dt_eff
        self._maybe_log_temps()
        self._maybe_trace()
        return dt_eff, event

    def _limit_crossing(self, v_cells):
        p = self.ps.cell
        prev = self.bank.v_cell
        over = v_cells > p.v_max
        under = v_cells < p.v_min
        if not (np.any(over) or np.any(under)):
            return None, 1.0
        if np.any(over):
            worst = int(np.argmax(v_cells))
            lim, kind = p.v_max, "v_max"
        else:
            worst = int(np.argmin(v_cells))
            lim, kind = p.v_min, "v_min"
        dv = v_cells[worst] - prev[worst]
        frac = 1.0 if abs(dv) < 1e-12 else float((lim - prev[worst]) / dv)
        return (kind, worst), min(max(frac, 0.0), 1.0)

    def _ledger_step(self, result, conv, p_fan, p_ac, dt, balancing):
        scale = self.scale_series * self.scale_parallel
        acc = self.acc
        chem_out = result["e_chem_out"] * scale
        self.e_chem_cum -= chem_out
        acc["chem_delta_j"] -= chem_out
        acc["entropic_wh"] += -result["e_entropic_gain"] * scale / 3600.0
        acc["cell_reaction_wh"] += result["e_cell_reaction"] * scale / 3600.0
        acc["cell_ohmic_wh"] += result["e_cell_ohmic"] * scale / 3600.0
        acc["cell_polarization_wh"] += result["e_polarization"] * scale / 3600.0
        acc["contact_wh"] += result["contact_power"] * dt / 3600.0
        acc["converter_cond_wh"] += conv["conduction"] * dt / 3600.0
        acc["converter_sw_wh"] += conv["switching"] * dt / 3600.0
        acc["converter_passive_wh"] += conv["passive"] * dt / 3600.0
        acc["fan_wh"] += p_fan * dt / 3600.0
        acc["ac_wh"] += p_ac * dt / 3600.0
        acc["throughput_ah"] += result["charge_abs"] * scale / 3600.0

        vi = result["vi_sum"] * scale            # W at cell terminals
        if balancing:
            acc["balancing_wh"] += vi * dt / 3600.0
            p_grid = p_fan + p_ac + conv["total"]
        else:
            p_dc_net = vi - result["contact_power"]
            p_grid = -p_dc_net + conv["total"] + p_fan + p_ac
        if p_grid >= 0.0:
            acc["grid_in_wh"] += p_grid * dt / 3600.0
        else:
            acc["grid_out_wh"] += -p_grid * dt / 3600.0

        t = self.bank.temp
        acc["t_mean_time_int"] += float(np.mean(t)) * dt
        acc["t_min"] = min(acc["t_min"], float(np.min(t)))
        acc["t_max"] = max(acc["t_max"], float(np.max(t)))
        acc["duration_s"] += dt

    def _maybe_trace(self):
        if not self.sc.trace_cells:
            return
        for ci in range(self.bank.n):
            self.log.traces.append(
                (self.time_s, ci, float(self.bank.i_cell[ci]),
                 float(self.bank.v_cell[ci])))

    def _maybe_log_temps(self):
        if self.time_s + 1e-9 < self.next_temp_log_s:
            return
        self.next_temp_log_s = self.next_temp_log_s + self.sc.temps_every_s
        t = self.bank.temp
        rows = [(self.time_s, "cells_mean", float(np.mean(t))),
                (self.time_s, "cells_min", float(np.min(t))),
                (self.time_s, "cells_max", float(np.max(t)))]
        if self.thermal is not None:
            for g in self.thermal.groups:
                rows.append((self.time_s, f"node_{g.node}",
                             float(self.thermal.temps[g.node])))
        self.log.temps.extend(rows)

    # -- protocol ------------------------------------------------------------

    def run(self) -> MetricsLog:
        """Execute the scenario to completion (or a stop condition)."""
        while self.stopped is None:
            pstep = self.sc.protocol[self.step_idx]
            done = self._advance(pstep)
            if done:
                self._finish_step(pstep)
        return self.log

    def _advance(self, pstep: ProtocolStep) -> bool:
        dt = self.sc.dt_s
        if pstep.mode == "rest":
            if self.balance_pending:
                done_bal = self._balance_chunk(dt)
                if done_bal:
                    self.balance_pending = False
            else:
                self._timestep(0.0, dt, check_limits=False)
            return self.elapsed_in_step >= pstep.duration_s - 1e-9

        i_mag = abs(pstep.rate_c) * self.pack_ah / self.scale_parallel
        sign = 1.0 if pstep.rate_c > 0 else -1.0
        if pstep.mode == "cc" or (pstep.mode == "cccv" and self.phase == "cc"):
            _, event = self._timestep(sign * i_mag, dt, check_limits=True)
            if event is not None:
                if pstep.mode == "cccv":
                    self.phase = "cv"
                    self.cv_current = i_mag
                    return False
                return True
            if pstep.duration_s is not None \
                    and self.elapsed_in_step >= pstep.duration_s - 1e-9:
                return True
            return False

        # cv phase of a cccv charge
        done = self._cv_step(dt, pstep)
        return done

    def _cv_step(self, dt: float, pstep: ProtocolStep) -> bool:
        p = self.ps.cell
        bank, pack = self.bank, self.pack
        h = self._cooling(dt)
        h_cell, h_wall, ac_extract, p_fan, p_ac = h
        bank.begin_step(dt)
        i_mag = self.cv_current
        r_est = max(self.pack.differential_resistance()
                    * self.scale_parallel, 1e-6)
        # newton/secant on the worst cell voltage
        prev = None
        for _ in range(10):
            v_cells = pack.solve(-i_mag, dt)
            err = float(np.max(v_cells)) - p.v_max
            if abs(err) < 1e-5:
                break
            slope = r_est  # dV/d(charge magnitude) > 0
            if prev is not None and abs(i_mag - prev[0]) > 1e-12:
                s = (err - prev[1]) / (i_mag - prev[0])
                if s > 1e-9:
                    slope = s
            prev = (i_mag, err)
            i_mag = float(np.clip(i_mag - err / slope, 0.0,
                                  abs(pstep.rate_c) * self.pack_ah
                                  / self.scale_parallel))
        self.cv_current = i_mag
        result = pack.commit()
        if self.thermal is not None:
            self.thermal.add_generated(self._cell_ids, result["q_gen"])
            ids, watts = result["contact_node_heat"]
            if len(ids):
                ok = ids >= 0
                self.thermal.add_generated(ids[ok], watts[ok])
        i_pack = -i_mag * self.scale_parallel
        conv = anc.converter_losses(i_pack, result["v_terminal"] * self.scale_series,
                                    0.0, self.converter) \
            if abs(i_pack) > 1e-12 else {"conduction": 0.0, "switching": 0.0,
                                         "passive": 0.0, "total": 0.0}
        if self.thermal is not None and self.thermal.groups:
            self.thermal.add_generated(np.array([self.thermal.root_group.node]),
                                       np.array([conv["total"]]))
        if self.thermal is not None:
            self.thermal.step(dt, h_cell, h_wall, ac_extract)
        self._ledger_step(result, conv, p_fan, p_ac, dt, balancing=False)
        self.time_s += dt
        self.elapsed_in_step += dt
        self._maybe_log_temps()
        self._maybe_trace()
        cutoff = pstep.i_cutoff_c * self.pack_ah / self.scale_parallel
        return i_mag <= cutoff

    def _balance_chunk(self, dt: float) -> bool:
        """One timestep of dissipative balancing toward the softest cell."""
        bank = self.bank
        bank.begin_step(dt)
        v0 = bank.trial_voltage(np.zeros(bank.n))
        bank._ctx = None
        target = float(np.min(v0))
        above = v0 - target
        if float(np.max(above)) < 5e-4:
            return True
        r = bank.differential_resistance()
        i_bal = np.clip(above / r, 0.0, bank.q_nom / 50.0)
        self._timestep(0.0, dt, check_limits=False, balancing=True,
                       balance_currents=i_bal)
        return False

    def _finish_step(self, pstep: ProtocolStep):
        self.elapsed_in_step = 0.0
        self.phase = "cc"
        closed_cycle = pstep.mode != "rest" and pstep.rate_c > 0
        self.step_idx += 1
        if self.step_idx >= len(self.sc.protocol):
            self.step_idx = 0
            self.rep_idx += 1
            if not self.has_discharge:
                closed_cycle = True       # storage runs log per repetition
        if closed_cycle:
            self._close_cycle()
        if self.time_s >= self.next_balance_s:
            self.balance_pending = True
            self.next_balance_s += 7 * 86400.0
        self._check_stop()

    def _close_cycle(self):
        self.cycle_idx += 1
        acc = self.acc
        self.fec += acc["throughput_ah"] / (2.0 * self.n_rep_cells
                                            * self.ps.cell.q_nom)
        measure_due = (self.sc.capacity_every_cycles > 0
                       and (self.cycle_idx % self.sc.capacity_every_cycles == 0
                            or self.cap_measured_cycle < 0))
        if measure_due:
            self._measure_capacity()

        row = {
            "cycle": self.cycle_idx,
            "time_s": self.time_s,
            "fec": self.fec,
            "grid_in_wh": acc["grid_in_wh"],
            "grid_out_wh": acc["grid_out_wh"],
            "efficiency": (acc["grid_out_wh"] / acc["grid_in_wh"]
                           if acc["grid_in_wh"] > 0 else 0.0),
            "usable_frac": acc["grid_out_wh"]
            / (self.ps.cell.q_nom * self.ps.v_nom * self.n_rep_cells),
            "cap_rel_mean": float(np.mean(self.cap_rel)),
            "cap_rel_sd": float(np.std(self.cap_rel)),
            "cap_rel_min": float(np.min(self.cap_rel)),
            "cap_rel_max": float(np.max(self.cap_rel)),
            "cap_measured_cycle": self.cap_measured_cycle,
            "t_mean_k": acc["t_mean_time_int"] / max(acc["duration_s"], 1e-9),
            "t_min_k": acc["t_min"],
            "t_max_k": acc["t_max"],
            "v_terminal_v": self.pack.v_terminal * self.scale_series,
        }
        ledger_row = {"cycle": self.cycle_idx,
                      "delta_stored_wh": acc["chem_delta_j"] / 3600.0}
        for k in LEDGER_COLUMNS:
            if k != "delta_stored_wh":
                ledger_row[k] = acc[k]
        ledger_row["closure_residual"] = self.log.closure_residual(ledger_row)
        if self.cycle_idx % self.sc.metrics_every_cycles == 0:
            self.log.metrics.append(row)
            self.log.ledger.append(ledger_row)
        self.acc = _zero_accumulators()
        cb = getattr(self, "checkpoint_callback", None)
        if cb is not None:
            cb(self)

    def _check_stop(self):
        st = self.sc.stop
        if self.rep_idx >= self.sc.repeat:
            self.stopped = "protocol complete"
        elif st.get("max_cycles") and self.cycle_idx >= st["max_cycles"]:
            self.stopped = "max cycles"
        elif st.get("max_fec") and self.fec >= st["max_fec"]:
            self.stopped = "max FEC"
        elif st.get("max_sim_s") and self.time_s >= st["max_sim_s"]:
            self.stopped = "max simulated time"
        elif st.get("capacity_floor_frac") \
                and float(np.mean(self.cap_rel)) <= st["capacity_floor_frac"]:
            self.stopped = "capacity floor"
        elif bool(np.any(self.bank.eol)):
            self.stopped = "end of life"

    # -- capacity measurement ---------------------------------------------------

    def _measure_capacity(self):
        ah = measure_capacity(self.bank, dt=self.sc.measure_dt_s)
        self.cap_rel = ah / self.bank.q_nom
        self.cap_measured_cycle = self.cycle_idx
        self.log.capacity_hist[self.cycle_idx] = ah.copy()

    # -- checkpointing ------------------------------------------------------------

    def checkpoint(self) -> bytes:
        meta = {
            "n_cells": self.bank.n,
            "time_s": self.time_s, "rep_idx": self.rep_idx,
            "step_idx": self.step_idx, "elapsed_in_step": self.elapsed_in_step,
            "phase": self.phase, "cv_current": self.cv_current,
            "cycle_idx": self.cycle_idx, "fec": self.fec,
            "e_chem_cum": self.e_chem_cum,
            "next_balance_s": self.next_balance_s,
            "balance_pending": self.balance_pending,
            "next_temp_log_s": self.next_temp_log_s,
            "cap_measured_cycle": self.cap_measured_cycle,
            "acc": self.acc,
            "fan_on": [bool(x) for x in getattr(self, "_fan_on", [])],
            "ac_latch": ([self.ac_latch.fan_on, self.ac_latch.ac_on]
                         if self.sc.thermal_mode == "coupled" else None),
        }
        arrays = {"cap_rel": self.cap_rel}
        for name, arr in self.bank.state_arrays().items():
            arrays[f"bank_{name}"] = arr
        for name, arr in self.pack.state_arrays().items():
            arrays[f"pack_{name}"] = arr
        if self.thermal is not None:
            for name, arr in self.thermal.state_arrays().items():
                arrays[f"thermal_{name}"] = arr
        buf = io.BytesIO()
        np.savez_compressed(buf, meta=np.frombuffer(
            json.dumps(meta, default=str).encode(), dtype=np.uint8), **arrays)
        payload = buf.getvalue()
        digest = hashlib.sha256(payload).digest()
        return CHECKPOINT_MAGIC + digest + payload

    def restore(self, blob: bytes):
        if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CheckpointError("unrecognised checkpoint format/version")
        digest = blob[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 32]
        payload = blob[len(CHECKPOINT_MAGIC) + 32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CheckpointError("checkpoint corrupted (checksum mismatch)")
        data = np.load(io.BytesIO(payload))
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["n_cells"] != self.bank.n:
            raise CheckpointError("checkpoint does not match this scenario")
        bank_arrays = {k[len("bank_"):]: data[k] for k in data.files
                       if k.startswith("bank_")}
        self.bank.load_state_arrays(bank_arrays)
        pack_arrays = {k[len("pack_"):]: data[k] for k in data.files
                       if k.startswith("pack_")}
        self.pack.load_state_arrays(pack_arrays)
        if self.thermal is not None:
            self.thermal.load_state_arrays(
                {k[len("thermal_"):]: data[k] for k in data.files
                 if k.startswith("thermal_")})
            self.thermal.adopt_bank_temperature(self.bank)
        self.cap_rel = np.array(data["cap_rel"])
        for name in ("time_s", "rep_idx", "step_idx", "elapsed_in_step",
                     "phase", "cv_current", "cycle_idx", "fec", "e_chem_cum",
                     "next_balance_s", "balance_pending", "next_temp_log_s",
                     "cap_measured_cycle"):
            setattr(self, name, meta[name])
        acc = _zero_accumulators()
        for k, v in meta["acc"].items():
            acc[k] = float(v)
        self.acc = acc
        if meta.get("fan_on"):
            self._fan_on[:] = np.array(meta["fan_on"], dtype=bool)
        if meta.get("ac_latch") is not None:
            self.ac_latch.fan_on, self.ac_latch.ac_on = meta["ac_latch"]
        self.stopped = None


# -- standalone operations -------------------------------------------------------

def run(scenario: Scenario, params: ParamSet):
    """Execute a scenario; returns (MetricsLog, Engine with final state)."""
    eng = Engine(scenario, params)
    log = eng.run()
    return log, eng


def cccv_charge(pack: pt.Pack, rate_c: float, v_limit: float, i_cutoff: float,
                dt: float = 2.0, max_steps: int = 500000) -> float:
    """CCCV-charge a pack; returns ampere-hours accepted.

    Constant current at ``rate_c`` (C, positive magnitude) until the first
    cell reaches ``v_limit``, then the total current is regulated so the
    worst cell holds the limit, decaying to ``i_cutoff`` (A).
    """
    bank = pack.bank
    i_full = rate_c * _pack_nominal_ah(pack)
    i_mag = i_full
    accepted = 0.0
    phase_cc = True
    for _ in range(max_steps):
        bank.begin_step(dt)
        if phase_cc:
            v_cells = pack.solve(-i_mag, dt)
            if float(np.max(v_cells)) >= v_limit:
                phase_cc = False
            pack.commit()
            accepted += i_mag * dt / 3600.0
        else:
            cur = i_mag
            prev = None
            for _ in range(10):
                v_cells = pack.solve(-cur, dt)
                err = float(np.max(v_cells)) - v_limit
                if abs(err) < 1e-5:
                    break
                slope = max(pack.differential_resistance(), 1e-6)
                if prev is not None and abs(cur - prev[0]) > 1e-12:
                    s = (err - prev[1]) / (cur - prev[0])
                    if s > 1e-9:
                        slope = s
                prev = (cur, err)
                cur = float(np.clip(cur - err / slope, 0.0, i_full))
            pack.commit()
            i_mag = cur
            accepted += i_mag * dt / 3600.0
            if i_mag <= i_cutoff:
                return accepted
    return accepted


def _pack_nominal_ah(pack: pt.Pack) -> float:
    series = 1.0
    for lvl in pack.levels:
        if lvl.kind == "series":
            series *= float(lvl.widths[0])
    return float(np.sum(pack.bank.q_nom)) / series


def weekly_balance(bank: CellBank, dt: float = 5.0, tol_v: float = 5e-4,
                   max_time_s: float = 7200.0):
    """Dissipatively bring every cell to the softest cell's voltage.

    Returns (energy dissipated in J, time consumed in s).
    """
    energy = 0.0
    t = 0.0
    while t < max_time_s:
        bank.begin_step(dt)
        v0 = bank.trial_voltage(np.zeros(bank.n))
        target = float(np.min(v0))
        if float(np.max(v0 - target)) < tol_v:
            bank._ctx = None
            break
        i_bal = np.clip((v0 - target) / bank.differential_resistance(),
                        0.0, bank.q_nom / 50.0)
        result = bank.commit_step(i_bal)
        energy += result["vi_sum"] * dt
        t += dt
    return energy, t


def measure_capacity(bank: CellBank, dt: float = 5.0) -> np.ndarray:
    """Per-cell accepted charge (Ah) of a 1C CCCV charge between the limits.

    Measured on an isolated isothermal clone at the reference temperature
    with degradation frozen: 1C discharge to the lower limit, then 1C CCCV
    to the upper limit with a C/20 cutoff.
    """
    p = bank.p
    clone = bank.clone()
    clone.temp = np.full(clone.n, p.t_ref)
    clone.degradation_frozen = True
    i_1c = clone.q_nom.copy()

    # discharge every cell to its lower limit
    active = np.ones(clone.n, dtype=bool)
    for _ in range(200000):
        if not np.any(active):
            break
        clone.begin_step(dt)
        i = np.where(active, i_1c, 0.0)
        v = clone.trial_voltage(i)
        active &= v > p.v_min
        clone.commit_step(np.where(active, i_1c, 0.0))

    accepted = np.zeros(clone.n)
    # cc charge
    active = np.ones(clone.n, dtype=bool)
    prev_v = clone.v_cell.copy()
    for _ in range(200000):
        if not np.any(active):
            break
        clone.begin_step(dt)
        i = np.where(active, -i_1c, 0.0)
        v = clone.trial_voltage(i)
        crossed = active & (v >= p.v_max)
        lam = np.ones(clone.n)
        dv = v - prev_v
        good = crossed & (np.abs(dv) > 1e-12)
        lam[good] = np.clip((p.v_max - prev_v[good]) / dv[good], 0.0, 1.0)
        accepted += np.where(active, i_1c, 0.0) * np.where(crossed, lam, 1.0) \
            * dt / 3600.0
        active &= ~crossed
        clone.commit_step(np.where(active, -i_1c, 0.0))
        prev_v = clone.v_cell.copy()

    # cv hold per cell, independent currents
    i_cv = i_1c.copy()
    cutoff = i_1c / 20.0
    active = np.ones(clone.n, dtype=bool)
    r = clone.differential_resistance()
    for _ in range(200000):
        if not np.any(active):
            break
        clone.begin_step(dt)
        for _ in range(4):
            v = clone.trial_voltage(np.where(active, -i_cv, 0.0))
            err = v - p.v_max
            i_cv = np.where(active, np.clip(i_cv - err / r, 0.0, i_1c), i_cv)
        clone.commit_step(np.where(active, -i_cv, 0.0))
        accepted += np.where(active, i_cv, 0.0) * dt / 3600.0
        active &= i_cv > cutoff
    return accepted
