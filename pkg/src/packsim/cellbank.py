"""Vectorised state and physics for a population of cells.

The bank holds every cell's state as rows of shared arrays so that one
timestep costs a fixed number of numpy operations regardless of population
size.  Within a step the implicit diffusion solve is performed once per
electrode against a zero-current base plus a unit-flux sensitivity; the
surface concentration is then affine in the applied current, which makes
repeated voltage trials during the current-split iteration purely algebraic.

The bank's temperature array is a view into the thermal network's node
vector, so electrical and thermal sides always agree.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .constants import FARADAY, GAS_CONSTANT
from . import cell_model as cm
from . import degradation as dg


class StepNotPrepared(RuntimeError):
    pass


class CellBank:
    """All cells of one simulation, vectorised.

    ``factors`` carries per-cell multipliers: capacity (electrode areas),
    resistance (specific electrode resistances), d_sei, k_sei, beta_2.
    """

    def __init__(self, base_params: cm.CellParams, sei: dg.SeiParams,
                 stress: dg.StressParams, ocv: cm.OcvTables, n_cells: int,
                 factors: dict | None = None, init_soc: float = 0.5,
                 init_temp: float = 298.15, rest_current_frac: float = 1e-3,
                 n_threads: int = 1):
        self.p = base_params
        self.sei = sei
        self.stress = stress
        self.ocv = ocv
        self.n = int(n_cells)
        self.m = base_params.n_shells
        self.n_threads = max(1, int(n_threads))

        ones = np.ones(self.n)
        factors = factors or {}
        f_cap = np.asarray(factors.get("capacity", ones), dtype=float)
        f_res = np.asarray(factors.get("resistance", ones), dtype=float)
        self.f_dsei = np.asarray(factors.get("d_sei", ones), dtype=float).copy()
        self.f_ksei = np.asarray(factors.get("k_sei", ones), dtype=float).copy()
        self.f_beta2 = np.asarray(factors.get("beta_2", ones), dtype=float).copy()

        self.area_n = base_params.anode.area * f_cap
        self.area_p = base_params.cathode.area * f_cap
        self.r_dc_n = base_params.anode.r_dc * f_res
        self.r_dc_p = base_params.cathode.r_dc * f_res
        self.q_nom = base_params.q_nom * f_cap          # Ah per cell
        self.grid_n = cm.RadialGrid.make(base_params.anode.radius, self.m)
        self.grid_p = cm.RadialGrid.make(base_params.cathode.radius, self.m)

        st = cm.fresh_state(base_params, init_soc, init_temp)
        self.c_n = np.tile(st.c_n, (self.n, 1))
        self.c_p = np.tile(st.c_p, (self.n, 1))
        self.temp = np.full(self.n, float(init_temp))
        self.tau_sei = np.full(self.n, sei.tau_0)
        self.eps_n = np.full(self.n, base_params.anode.eps0)
        self.eps_p = np.full(self.n, base_params.cathode.eps0)
        self.lost_li = np.zeros(self.n)
        self.sig_max_n = np.zeros(self.n)
        self.sig_min_n = np.zeros(self.n)
        self.sig_max_p = np.zeros(self.n)
        self.sig_min_p = np.zeros(self.n)
        self.eta_n = np.zeros(self.n)
        self.eta_p = np.zeros(self.n)
        self.i_cell = np.zeros(self.n)
        self.v_cell = np.zeros(self.n)
        self.regime = np.zeros(self.n, dtype=np.int8)
        self.regime_pending = np.zeros(self.n, dtype=np.int8)
        self.pending_count = np.zeros(self.n, dtype=np.int16)
        self.cum_charge = np.zeros(self.n)      # integral of I dt (C)
        self.cum_sei_charge = np.zeros(self.n)  # integral of i_sei * S_n dt (C)
        self.eol = np.zeros(self.n, dtype=bool)
        self.rest_current = rest_current_frac * base_params.q_nom  # A
        self.degradation_frozen = False

        self._update_derived()
        self._ctx = None

    # -- derived quantities -------------------------------------------------

    def _update_derived(self):
        p = self.p
        self.s_n = cm.active_surface(self.eps_n, p.anode.radius, self.area_n,
                                     p.anode.thickness)
        self.s_p = cm.active_surface(self.eps_p, p.cathode.radius, self.area_p,
                                     p.cathode.thickness)
        self.r_dc = (self.r_dc_n / self.s_n + self.r_dc_p / self.s_p
                     + self.sei.r_dc_sei * self.tau_sei / self.s_n)

    def mean_stoich_n(self):
        wn = self.grid_n.w
        return (self.c_n @ wn) / (wn.sum() * self.p.anode.c_max)

    def soc(self):
        return np.clip((self.mean_stoich_n() - self.p.stoich_empty_n)
                       / self.p.stoich_window(), 0.0, 1.0)

    def total_lithium(self):
        """Lithium inventory per cell (mol), both particles."""
        wn, wp = self.grid_n.w, self.grid_p.w
        mean_n = (self.c_n @ wn) / wn.sum()
        mean_p = (self.c_p @ wp) / wp.sum()
        return (self.eps_n * self.area_n * self.p.anode.thickness * mean_n
                + self.eps_p * self.area_p * self.p.cathode.thickness * mean_p)

    def capacity_inventory_ah(self):
        """Rough capacity proxy from the anode stoichiometry window (Ah)."""
        p = self.p
        span = (self.eps_n * self.area_n * p.anode.thickness * p.anode.c_max
                * p.stoich_window())
        return span * FARADAY * p.n_e / 3600.0

    def differential_resistance(self):
        """dV/dI magnitude estimate per cell at the current state (ohm).

        Includes the open-circuit-potential slope times the within-step
        surface-concentration response when a step is prepared; near the
        steep ends of the tables that term dominates and the current-split
        gains must respect it.
        """
        if self._ctx is not None:
            return self._ctx["r_diff"]
        return self._step_differential_resistance()

    def _step_differential_resistance(self):
        p = self.p
        f = p.n_e * FARADAY / (GAS_CONSTANT * self.temp)
        c_ns = np.clip(self.c_n[:, -1], 1e-6 * p.anode.c_max,
                       (1 - 1e-6) * p.anode.c_max)
        c_ps = np.clip(self.c_p[:, -1], 1e-6 * p.cathode.c_max,
                       (1 - 1e-6) * p.cathode.c_max)
        if self._ctx is not None:
            k_n, k_p = self._ctx["k_n"], self._ctx["k_p"]
        else:
            k_n = cm.arrhenius(p.anode.k_ref, p.anode.e_k, self.temp, p.t_ref)
            k_p = cm.arrhenius(p.cathode.k_ref, p.cathode.e_k, self.temp, p.t_ref)
        i0_n = cm.exchange_current(k_n, c_ns, p.anode.c_max, p.c_el,
                                   p.alpha, p.n_e)
        i0_p = cm.exchange_current(k_p, c_ps, p.cathode.c_max, p.c_el,
                                   p.alpha, p.n_e)
        kinetic = (1.0 / f) * (1.0 / (i0_n * self.s_n) + 1.0 / (i0_p * self.s_p))
        r = self.r_dc + kinetic
        if self._ctx is not None:
            d = 1e-4
            x_n = c_ns / p.anode.c_max
            x_p = c_ps / p.cathode.c_max
            slope_n = (self.ocv.u_n(x_n + d) - self.ocv.u_n(x_n - d)) / (2 * d)
            slope_p = (self.ocv.u_p(x_p + d) - self.ocv.u_p(x_p - d)) / (2 * d)
            r = r + (np.abs(slope_p) * self._ctx["sens_p"] / p.cathode.c_max
                     + np.abs(slope_n) * self._ctx["sens_n"] / p.anode.c_max)
        return r

    # -- step machinery -----------------------------------------------------

    def begin_step(self, dt: float):
        """Prepare the implicit solves and cached algebra for one step."""
        p = self.p
        nf = p.n_e * FARADAY
        neg_delta = -(1.0 / self.temp - 1.0 / p.t_ref) / GAS_CONSTANT
        d_n = p.anode.d_ref * np.exp(p.anode.e_d * neg_delta)
        d_p = p.cathode.d_ref * np.exp(p.cathode.e_d * neg_delta)

        x_surf = np.clip(self.c_n[:, -1] / p.anode.c_max, 1e-9, 1 - 1e-9)
        u_n_surf = self.ocv.u_n(x_surf)
        sei_p = self.sei
        f_side = sei_p.alpha * nf / (GAS_CONSTANT * self.temp)
        k_t = sei_p.k_ref * self.f_ksei * np.exp(sei_p.e_k * neg_delta)
        d_t = sei_p.d_ref * self.f_dsei * np.exp(sei_p.e_d * neg_delta)
        kinetic = 1.0 / (nf * k_t * np.exp(-f_side * (u_n_surf - sei_p.u_sei)))
        diffusive = self.tau_sei / (nf * d_t)
        i_sei = np.exp(-f_side * self.eta_n) / (kinetic + diffusive)
        if self.degradation_frozen:
            i_sei = np.zeros(self.n)
        sei_flux = i_sei / nf

        base_n, unit_n, base_p, unit_p = self._diffusion_solves(d_n, d_p, dt)
        base_n = base_n - sei_flux[:, None] * unit_n

        self._ctx = {
            "dt": dt,
            "i_sei": i_sei,
            "base_n": base_n, "unit_n": unit_n,
            "base_p": base_p, "unit_p": unit_p,
            "sens_n": unit_n[:, -1] / (nf * self.s_n),
            "sens_p": unit_p[:, -1] / (nf * self.s_p),
            "base_n_surf": base_n[:, -1],
            "base_p_surf": base_p[:, -1],
            "k_n": p.anode.k_ref * np.exp(p.anode.e_k * neg_delta),
            "k_p": p.cathode.k_ref * np.exp(p.cathode.e_k * neg_delta),
            "f": p.n_e * FARADAY / (GAS_CONSTANT * self.temp),
            "du_dt": self.ocv.du_dt(self.soc()),
        }
        self._ctx["ocv_shift"] = (self.temp - p.t_ref) * self._ctx["du_dt"]
        self._ctx["r_diff"] = self._step_differential_resistance()

    def _diffusion_solves(self, d_n, d_p, dt):
        def solve_range(lo, hi, out):
            for grid, d_arr, c_arr, slot in (
                    (self.grid_n, d_n, self.c_n, 0),
                    (self.grid_p, d_p, self.c_p, 1)):
                fac = cm.diffusion_factor(grid, d_arr[lo:hi], dt)
                k = hi - lo
                rhs = np.zeros((2 * k, self.m))
                rhs[:k] = c_arr[lo:hi]
                rhs[k:, -1] = dt * grid.radius ** 2 / grid.w[-1]
                # one back-substitution pass serves both right-hand sides
                sol = fac.solve_pair(rhs, k)
                out[2 * slot][lo:hi] = sol[:k]
                out[2 * slot + 1][lo:hi] = sol[k:]

        out = [np.empty((self.n, self.m)) for _ in range(4)]
        chunk = 4096  # fixed so results are bitwise independent of thread count
        if self.n_threads > 1 and self.n > 2 * chunk:
            bounds = list(range(0, self.n, chunk)) + [self.n]
            futs = [self._executor().submit(solve_range, lo, hi, out)
                    for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futs:
                f.result()
        else:
            solve_range(0, self.n, out)
        return out

    def _executor(self):
        ex = getattr(self, "_pool", None)
        if ex is None:
            ex = ThreadPoolExecutor(max_workers=self.n_threads)
            self._pool = ex
        return ex

    def _surface_conc(self, i_cell):
        ctx = self._ctx
        c_ns = ctx["base_n_surf"] - i_cell * ctx["sens_n"]
        c_ps = ctx["base_p_surf"] + i_cell * ctx["sens_p"]
        return c_ns, c_ps

    def _kinetics(self, i_cell, c_ns, c_ps):
        p = self.p
        ctx = self._ctx
        tiny = 1e-9
        c_ns = np.clip(c_ns, tiny * p.anode.c_max, (1 - tiny) * p.anode.c_max)
        c_ps = np.clip(c_ps, tiny * p.cathode.c_max, (1 - tiny) * p.cathode.c_max)
        i0_n = cm.exchange_current(ctx["k_n"], c_ns, p.anode.c_max, p.c_el,
                                   p.alpha, p.n_e)
        i0_p = cm.exchange_current(ctx["k_p"], c_ps, p.cathode.c_max, p.c_el,
                                   p.alpha, p.n_e)
        if p.alpha == 0.5:
            eta_n = (2.0 / ctx["f"]) * np.arcsinh(i_cell / (2.0 * i0_n * self.s_n))
            eta_p = -(2.0 / ctx["f"]) * np.arcsinh(i_cell / (2.0 * i0_p * self.s_p))
        else:
            eta_n = cm.overpotential(-i_cell / self.s_n, c_ns, p.anode.c_max,
                                     p.c_el, ctx["k_n"], self.temp, p.alpha, p.n_e)
            eta_p = cm.overpotential(+i_cell / self.s_p, c_ps, p.cathode.c_max,
                                     p.c_el, ctx["k_p"], self.temp, p.alpha, p.n_e)
        return eta_n, eta_p

    def trial_voltage(self, i_cell):
        """Terminal voltages after this step if cells carried ``i_cell``."""
        if self._ctx is None:
            raise StepNotPrepared("begin_step must run first")
        p = self.p
        c_ns, c_ps = self._surface_conc(i_cell)
        eta_n, eta_p = self._kinetics(i_cell, c_ns, c_ps)
        x_n = np.clip(c_ns / p.anode.c_max, 0.0, 1.0)
        x_p = np.clip(c_ps / p.cathode.c_max, 0.0, 1.0)
        u_n = self.ocv.u_n(x_n)
        u_p = self.ocv.u_p(x_p)
        v = (u_p - u_n + self._ctx["ocv_shift"]
             - (eta_n - eta_p) - self.r_dc * i_cell)
        self._ctx["trial"] = (np.array(i_cell, copy=True), eta_n, eta_p,
                              u_n, u_p, v)
        return v

    def commit_step(self, i_cell):
        """Finalise the step at the solved currents.

        Returns a dict of per-step aggregates for the ledger plus the
        per-cell heat generation array for the thermal update.
        """
        if self._ctx is None:
            raise StepNotPrepared("begin_step must run first")
        p = self.p
        ctx = self._ctx
        dt = ctx["dt"]
        nf = p.n_e * FARADAY
        i_cell = np.asarray(i_cell, dtype=float)

        c_n = ctx["base_n"] - (i_cell / (nf * self.s_n))[:, None] * ctx["unit_n"]
        c_p = ctx["base_p"] + (i_cell / (nf * self.s_p))[:, None] * ctx["unit_p"]
        saturated = self._saturation_mask(c_n, c_p)
        self.c_n = c_n
        self.c_p = c_p

        trial = ctx.get("trial")
        if trial is not None and np.array_equal(trial[0], i_cell):
            _, eta_n, eta_p, u_n, u_p, v = trial
        else:
            c_ns, c_ps = c_n[:, -1], c_p[:, -1]
            eta_n, eta_p = self._kinetics(i_cell, c_ns, c_ps)
            x_n = np.clip(c_ns / p.anode.c_max, 0.0, 1.0)
            x_p = np.clip(c_ps / p.cathode.c_max, 0.0, 1.0)
            u_n = self.ocv.u_n(x_n)
            u_p = self.ocv.u_p(x_p)
            v = (u_p - u_n + ctx["ocv_shift"] - (eta_n - eta_p)
                 - self.r_dc * i_cell)

        q_gen = (i_cell ** 2 * self.r_dc + i_cell * (eta_n - eta_p)
                 + i_cell * self.temp * ctx["du_dt"])

        i_sei = ctx["i_sei"]
        sei_charge = i_sei * self.s_n * dt
        ohmic = float(np.sum(i_cell ** 2 * self.r_dc) * dt)
        reaction = float(np.sum(i_cell * (eta_n - eta_p)) * dt)
        entropic_gain = float(np.sum(ctx["ocv_shift"] * i_cell) * dt)
        # stored energy is drawn at the bulk open-circuit potential; the gap
        # to the surface potential is concentration-polarisation loss
        wn, wp = self.grid_n.w, self.grid_p.w
        x_bulk = (c_n @ wn) / (wn.sum() * p.anode.c_max)
        y_bulk = (c_p @ wp) / (wp.sum() * p.cathode.c_max)
        u_bulk = self.ocv.u_p(y_bulk) - self.ocv.u_n(x_bulk)
        chem_out = float(np.sum(u_bulk * i_cell) * dt)
        polarization = float(np.sum((u_bulk - (u_p - u_n)) * i_cell) * dt)

        self.eta_n = eta_n
        self.eta_p = eta_p
        self.i_cell = i_cell
        self.v_cell = v
        self.cum_charge += i_cell * dt
        self.cum_sei_charge += sei_charge

        if not self.degradation_frozen:
            self._apply_degradation(i_cell, i_sei, dt)
        self._ctx = None
        return {
            "dt": dt,
            "q_gen": q_gen,
            "v_cell": v,
            "saturated": saturated,
            "e_cell_ohmic": ohmic,
            "e_cell_reaction": reaction,
            "e_entropic_gain": entropic_gain,
            "e_chem_out": chem_out,
            "e_polarization": polarization,
            "vi_sum": float(np.sum(v * i_cell)),
            "charge_abs": float(np.sum(np.abs(i_cell))) * dt,
            "sei_charge": float(np.sum(sei_charge)),
        }

    def _saturation_mask(self, c_n, c_p):
        p = self.p
        sat = np.zeros(self.n, dtype=bool)
        for c, c_max in ((c_n, p.anode.c_max), (c_p, p.cathode.c_max)):
            tol = 1e-9 * c_max
            sat |= np.any((c < -tol) | (c > c_max + tol), axis=1)
        return sat

    def _apply_degradation(self, i_cell, i_sei, dt):
        p = self.p
        nf = p.n_e * FARADAY
        sei = self.sei
        stress = self.stress

        self.tau_sei = self.tau_sei + (i_sei / nf) * sei.v_sei * dt
        self.lost_li = self.lost_li + i_sei * self.s_n * dt / nf

        floor_n = stress.eps_floor_frac * p.anode.eps0
        floor_p = stress.eps_floor_frac * p.cathode.eps0
        i_n_density = np.abs(i_cell) / self.s_n
        clog = sei.beta_1 * (sei.v_sei * i_sei + sei.v_li * i_n_density) * dt

        sig_n = self._surface_stress(self.c_n, self.grid_n, stress.omega_n,
                                     stress.young_n, stress.poisson_n)
        sig_p = self._surface_stress(self.c_p, self.grid_p, stress.omega_p,
                                     stress.young_p, stress.poisson_p)
        self._track_stress_regime(i_cell, sig_n, sig_p)

        exponent = 1.0 / stress.m_exp
        beta2 = stress.beta_2 * self.f_beta2
        lam_n = beta2 * ((self.sig_max_n - self.sig_min_n)
                         / stress.sigma_yield_n) ** exponent * dt
        lam_p = beta2 * ((self.sig_max_p - self.sig_min_p)
                         / stress.sigma_yield_p) ** exponent * dt

        new_eps_n = np.maximum(self.eps_n - clog - lam_n, floor_n)
        new_eps_p = np.maximum(self.eps_p - lam_p, floor_p)
        self.eol |= (new_eps_n <= floor_n) | (new_eps_p <= floor_p)

        # lithium in the disconnected material is redistributed so the cell
        # inventory only changes through the booked surface fluxes
        self.c_n *= (self.eps_n / new_eps_n)[:, None]
        self.c_p *= (self.eps_p / new_eps_p)[:, None]
        self.eps_n = new_eps_n
        self.eps_p = new_eps_p
        self._update_derived()

    def _surface_stress(self, c, grid, omega, young, nu):
        k1 = omega * young / (9.0 * (1.0 - nu))
        mean_total = 3.0 * (c @ grid.w) / grid.radius ** 3
        return 2.0 * k1 * (mean_total - c[:, -1])

    def _track_stress_regime(self, i_cell, sig_n, sig_p):
        sign = np.zeros(self.n, dtype=np.int8)
        sign[i_cell > self.rest_current] = 1
        sign[i_cell < -self.rest_current] = -1

        changed = sign != self.regime
        cont = changed & (sign == self.regime_pending)
        fresh = changed & ~cont
        self.pending_count[cont] += 1
        self.pending_count[fresh] = 1
        self.regime_pending[fresh] = sign[fresh]
        self.pending_count[~changed] = 0

        flip = changed & (self.pending_count >= 2)
        self.regime[flip] = sign[flip]
        reset = flip | (self.regime == 0)  # rests re-anchor continuously
        self.sig_max_n[reset] = sig_n[reset]
        self.sig_min_n[reset] = sig_n[reset]
        self.sig_max_p[reset] = sig_p[reset]
        self.sig_min_p[reset] = sig_p[reset]

        np.maximum(self.sig_max_n, sig_n, out=self.sig_max_n)
        np.minimum(self.sig_min_n, sig_n, out=self.sig_min_n)
        np.maximum(self.sig_max_p, sig_p, out=self.sig_max_p)
        np.minimum(self.sig_min_p, sig_p, out=self.sig_min_p)

    # -- snapshots ------------------------------------------------------------

    def state_arrays(self) -> dict:
        """All mutable state as named arrays (used by checkpointing)."""
        return {
            "c_n": self.c_n, "c_p": self.c_p, "temp": self.temp,
            "tau_sei": self.tau_sei, "eps_n": self.eps_n, "eps_p": self.eps_p,
            "lost_li": self.lost_li,
            "sig_max_n": self.sig_max_n, "sig_min_n": self.sig_min_n,
            "sig_max_p": self.sig_max_p, "sig_min_p": self.sig_min_p,
            "eta_n": self.eta_n, "eta_p": self.eta_p,
            "i_cell": self.i_cell, "v_cell": self.v_cell,
            "regime": self.regime, "regime_pending": self.regime_pending,
            "pending_count": self.pending_count,
            "cum_charge": self.cum_charge, "cum_sei_charge": self.cum_sei_charge,
            "eol": self.eol,
        }

    def load_state_arrays(self, arrays: dict):
        for name, arr in arrays.items():
            setattr(self, name, np.array(arr))
        # temperature may have been detached from the thermal view; callers
        # re-wire it after restore
        self._update_derived()
        self._ctx = None

    def clone(self) -> "CellBank":
        other = CellBank.__new__(CellBank)
        other.__dict__.update(self.__dict__)
        for name, arr in self.state_arrays().items():
            setattr(other, name, np.array(arr))
        other._ctx = None
        return other

    def export_cell(self, idx: int) -> cm.CellState:
        """Single-cell state view for the per-cell operation surfaces."""
        deg = dg.DegradationState(
            tau_sei=float(self.tau_sei[idx]), eps_n=float(self.eps_n[idx]),
            eps_p=float(self.eps_p[idx]), lost_li=float(self.lost_li[idx]),
            sig_max_n=float(self.sig_max_n[idx]), sig_min_n=float(self.sig_min_n[idx]),
            sig_max_p=float(self.sig_max_p[idx]), sig_min_p=float(self.sig_min_p[idx]))
        return cm.CellState(self.c_n[idx].copy(), self.c_p[idx].copy(),
                            float(self.temp[idx]), deg)
