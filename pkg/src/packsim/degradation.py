"""Cell degradation: SEI layer growth and stress-driven loss of active material.

Two mechanisms age a cell.  A solvent-reduction side reaction grows a
passivation layer on the anode, consuming cyclable lithium, clogging pores
and adding a resistive film.  Alternating concentration gradients stress the
particles; the per-cycle amplitude of the hydrostatic surface stress drives
crack growth that disconnects active material in both electrodes.  Both
mechanisms raise the total DC resistance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import FARADAY, GAS_CONSTANT
from .cell_model import CellParams, RadialGrid, active_surface, arrhenius


class EndOfLifeEvent(Exception):
    """Active-material fraction reached its configured floor."""

    def __init__(self, electrode: str):
        self.electrode = electrode
        super().__init__(f"active material floor reached in {electrode}")


@dataclass(frozen=True)
class SeiParams:
    """Constants of the SEI growth model (lumped fitted units)."""

    k_ref: float      # kinetic rate constant at t_ref (mol m^-2 s^-1)
    e_k: float        # its activation energy (J/mol)
    d_ref: float      # layer diffusion constant at t_ref (mol m^-1 s^-1)
    e_d: float        # its activation energy (J/mol)
    alpha: float      # side-reaction transfer coefficient (-)
    u_sei: float      # side-reaction equilibrium potential (V)
    v_sei: float      # SEI partial molar volume (m^3/mol)
    v_li: float       # lithium partial molar volume (m^3/mol)
    beta_1: float     # pore-clogging constant (lumped)
    r_dc_sei: float   # specific SEI resistivity per thickness (ohm m^2/m)
    tau_0: float      # formed-layer initial thickness (m)


@dataclass(frozen=True)
class StressParams:
    """Particle-stress and crack-growth constants."""

    omega_n: float        # anode partial molar volume (m^3/mol)
    omega_p: float        # cathode partial molar volume (m^3/mol)
    young_n: float        # anode Young's modulus (Pa)
    young_p: float        # cathode Young's modulus (Pa)
    poisson_n: float      # anode Poisson ratio (-)
    poisson_p: float      # cathode Poisson ratio (-)
    sigma_yield_n: float  # anode yield strength (Pa)
    sigma_yield_p: float  # cathode yield strength (Pa)
    beta_2: float         # crack-to-LAM rate constant (1/s at unit stress ratio)
    m_exp: float          # crack-growth exponent; rate goes as ratio^(1/m)
    eps_floor_frac: float = 0.01  # end-of-life floor as fraction of eps0


@dataclass
class DegradationState:
    """Per-cell degradation state.

    The stress extrema are running per-cycle extrema of the hydrostatic
    surface stress in each electrode; they are reset at load-regime
    boundaries (see the cell bank's regime tracking).
    """

    tau_sei: float        # SEI thickness (m)
    eps_n: float          # anode active-material fraction (-)
    eps_p: float          # cathode active-material fraction (-)
    lost_li: float = 0.0  # lithium consumed by the SEI (mol)
    sig_max_n: float = 0.0
    sig_min_n: float = 0.0
    sig_max_p: float = 0.0
    sig_min_p: float = 0.0

    def copy(self) -> "DegradationState":
        return DegradationState(self.tau_sei, self.eps_n, self.eps_p,
                                self.lost_li, self.sig_max_n, self.sig_min_n,
                                self.sig_max_p, self.sig_min_p)


def sei_current(eta_n, u_n, tau_sei, temp, p: SeiParams, t_ref: float, n_e=1):
    """Side-reaction current density (A/m^2), kinetic and diffusion limited.

    Strictly positive and decreasing in layer thickness.  The kinetic branch
    grows at low anode potential (high SoC) and at the negative
    overpotentials seen while charging.
    """
    nf = n_e * FARADAY
    f = p.alpha * nf / (GAS_CONSTANT * np.asarray(temp, dtype=float))
    k_t = arrhenius(p.k_ref, p.e_k, temp, t_ref)
    d_t = arrhenius(p.d_ref, p.e_d, temp, t_ref)
    kinetic = 1.0 / (nf * k_t * np.exp(-f * (np.asarray(u_n) - p.u_sei)))
    diffusive = np.asarray(tau_sei, dtype=float) / (nf * d_t)
    return np.exp(-f * np.asarray(eta_n)) / (kinetic + diffusive)


def apply_sei(state: DegradationState, i_sei, anode_area_total, dt: float,
              p: SeiParams, n_e=1):
    """Grow the layer, book consumed lithium, return the anode sink flux.

    The returned value is the outward molar flux (mol m^-2 s^-1) to add to
    the anode surface boundary condition.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    nf = n_e * FARADAY
    flux = i_sei / nf
    state.tau_sei = state.tau_sei + flux * p.v_sei * dt
    state.lost_li = state.lost_li + i_sei * anode_area_total * dt / nf
    return flux


def pore_clogging(eps_n, i_sei, i_n, p: SeiParams, dt: float, eps_min: float):
    """Reduce anode active fraction by deposition in the pores.

    The intercalation current density enters by magnitude so the fraction
    never increases.  The result is floored at ``eps_min``; callers emit the
    end-of-life event when the floor binds.
    """
    rate = p.beta_1 * (p.v_sei * np.asarray(i_sei) + p.v_li * np.abs(i_n))
    return np.maximum(np.asarray(eps_n) - rate * dt, eps_min)


def _stress_prefactors(p: StressParams, electrode: str):
    if electrode == "anode":
        return p.omega_n, p.young_n, p.poisson_n
    if electrode == "cathode":
        return p.omega_p, p.young_p, p.poisson_p
    raise ValueError(f"unknown electrode {electrode!r}")


def particle_stresses(c_profile, p: StressParams, electrode: str, radius: float):
    """Radial, tangential and hydrostatic stress profiles (Pa).

    Evaluated at the shell midpoints of the finite-volume grid; the radial
    integrals treat the profile as shell-wise constant, consistent with the
    volume-average interpretation of the state.  A uniform profile is
    stress-free.
    """
    c = np.asarray(c_profile, dtype=float)
    n = c.shape[-1]
    grid = RadialGrid.make(radius, n)
    omega, young, nu = _stress_prefactors(p, electrode)
    k1 = omega * young / (9.0 * (1.0 - nu))

    shell_full = c * grid.w                                    # exact per-shell integral
    cum_prev = np.cumsum(shell_full, axis=-1) - shell_full     # shells below i
    faces = np.linspace(0.0, radius, n + 1)
    partial = c * (grid.r_mid ** 3 - faces[:-1] ** 3) / 3.0    # shell i up to its midpoint
    cum_mid = cum_prev + partial                               # integral of c z^2 to r_mid
    mean_inside = 3.0 * cum_mid / grid.r_mid ** 3
    mean_total = 3.0 * np.sum(shell_full, axis=-1, keepdims=True) / radius ** 3

    sigma_r = 2.0 * k1 * (mean_total - mean_inside)
    sigma_t = k1 * (2.0 * mean_total + mean_inside - 3.0 * c)
    sigma_h = (sigma_r + 2.0 * sigma_t) / 3.0
    return sigma_r, sigma_t, sigma_h


def surface_hydrostatic_stress(c_profile, p: StressParams, electrode: str,
                               radius: float):
    """Hydrostatic stress at the particle surface (Pa).

    At r = R the radial stress vanishes, leaving 2/3 of the tangential
    component, proportional to (volume mean - surface concentration);
    positive (tension) when the surface is depleted.
    """
    c = np.asarray(c_profile, dtype=float)
    n = c.shape[-1]
    grid = RadialGrid.make(radius, n)
    omega, young, nu = _stress_prefactors(p, electrode)
    k1 = omega * young / (9.0 * (1.0 - nu))
    mean_total = 3.0 * np.sum(c * grid.w, axis=-1) / radius ** 3
    return 2.0 * k1 * (mean_total - c[..., -1])


def crack_lam(state: DegradationState, p: StressParams, dt: float):
    """New (eps_n, eps_p) after one step of stress-amplitude crack growth."""
    if state.sig_max_n < state.sig_min_n or state.sig_max_p < state.sig_min_p:
        raise ValueError("stress extrema out of order")
    exponent = 1.0 / p.m_exp
    rate_n = p.beta_2 * ((state.sig_max_n - state.sig_min_n) / p.sigma_yield_n) ** exponent
    rate_p = p.beta_2 * ((state.sig_max_p - state.sig_min_p) / p.sigma_yield_p) ** exponent
    return state.eps_n - rate_n * dt, state.eps_p - rate_p * dt


def total_dc_resistance(state: DegradationState, params: CellParams,
                        p: SeiParams, eps_floor_frac: float = 0.01) -> float:
    """Total cell DC resistance (ohm): both electrodes plus the SEI film.

    Raises :class:`EndOfLifeEvent` once an electrode sits at or below its
    active-material floor.
    """
    if state.eps_n <= eps_floor_frac * params.anode.eps0:
        raise EndOfLifeEvent("anode")
    if state.eps_p <= eps_floor_frac * params.cathode.eps0:
        raise EndOfLifeEvent("cathode")
    s_n = active_surface(state.eps_n, params.anode.radius, params.anode.area,
                         params.anode.thickness)
    s_p = active_surface(state.eps_p, params.cathode.radius, params.cathode.area,
                         params.cathode.thickness)
    return (params.anode.r_dc / s_n + params.cathode.r_dc / s_p
            + p.r_dc_sei * state.tau_sei / s_n)


def fresh_degradation(params: CellParams, sei: SeiParams) -> DegradationState:
    """Degradation state of a new cell with its formed SEI layer."""
    return DegradationState(tau_sei=sei.tau_0, eps_n=params.anode.eps0,
                            eps_p=params.cathode.eps0)
