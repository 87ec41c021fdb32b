"""Single-particle electrochemical cell model.

Each electrode is an averaged spherical particle with Fickian radial
diffusion, discretised by a conservative finite-volume scheme on shells of
equal thickness.  Intercalation kinetics follow Butler-Volmer with the
current density counted positive for lithium entering the particle
(reduction).  A lumped thermal balance provides the cell temperature, and
the terminal voltage combines the electrode open-circuit potentials, an
entropic correction, the kinetic overpotentials and the ohmic drop.

Sign convention throughout: positive applied current discharges the cell.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .constants import FARADAY, GAS_CONSTANT


class CellModelError(Exception):
    """Base error for cell-model operations."""


class DomainError(CellModelError):
    """Input outside the physical domain (e.g. non-positive temperature)."""


class SaturationError(CellModelError):
    """A concentration left [0, c_max]; carries electrode and node index.

    Callers treat surface saturation as a voltage-limit event.
    """

    def __init__(self, electrode: str, node: int, value: float):
        self.electrode = electrode
        self.node = node
        self.value = value
        super().__init__(f"concentration saturation in electrode '{electrode}' "
                         f"at node {node}: {value:.6g} mol/m^3")


@dataclass(frozen=True)
class ElectrodeParams:
    """Geometric and kinetic constants of one electrode."""

    d_ref: float          # solid diffusion constant at t_ref (m^2/s)
    e_d: float            # diffusion activation energy (J/mol)
    k_ref: float          # reaction rate constant at t_ref
    e_k: float            # rate-constant activation energy (J/mol)
    radius: float         # particle radius (m)
    eps0: float           # initial active-material volume fraction (-)
    area: float           # electrode geometric area (m^2)
    thickness: float      # electrode thickness (m)
    c_max: float          # maximum lithium concentration (mol/m^3)
    r_dc: float           # specific electrode resistance (ohm m^2)


@dataclass(frozen=True)
class CellParams:
    """All constants of one cell, including its sampled variations."""

    anode: ElectrodeParams
    cathode: ElectrodeParams
    c_el: float            # electrolyte lithium concentration (mol/m^3), constant
    alpha: float           # charge-transfer coefficient (-)
    n_e: int               # electrons per reaction (-)
    rho_cell: float        # cell density (kg/m^3)
    a_cell: float          # cell surface area (m^2)
    tau_cell: float        # cell thickness (m)
    cp_cell: float         # specific heat capacity (J/(kg K))
    t_ref: float           # reference temperature (K)
    v_min: float           # lower voltage limit (V)
    v_max: float           # upper voltage limit (V)
    q_nom: float           # nominal capacity (Ah)
    stoich_empty_n: float  # anode stoichiometry at 0 % SoC
    stoich_full_n: float   # anode stoichiometry at 100 % SoC
    stoich_empty_p: float  # cathode stoichiometry at 0 % SoC
    n_shells: int = 11     # radial control volumes per particle

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must be in (0,1), got {self.alpha}")
        if self.v_min >= self.v_max:
            raise DomainError("v_min must be below v_max")
        for name, el in (("anode", self.anode), ("cathode", self.cathode)):
            if not 0.0 < el.eps0 < 1.0:
                raise DomainError(f"{name} eps0 must be in (0,1)")

    @property
    def heat_capacity(self) -> float:
        """Lumped heat capacity of the cell (J/K)."""
        return self.rho_cell * self.a_cell * self.tau_cell * self.cp_cell

    def stoich_window(self) -> float:
        """Anode stoichiometry swing between 0 and 100 % SoC."""
        return self.stoich_full_n - self.stoich_empty_n

    def balance_ratio(self) -> float:
        """Moles of anode inventory per mole of cathode inventory."""
        n = self.anode
        p = self.cathode
        return (n.eps0 * n.area * n.thickness * n.c_max) / (
            p.eps0 * p.area * p.thickness * p.c_max)


class OcvTables:
    """Open-circuit potential and entropic-coefficient lookup tables.

    Tables are piecewise-linear in the tabulated abscissa, which preserves
    monotonicity within each segment and reproduces tabulated points
    exactly.
    """

    def __init__(self, x_n, u_n, x_p, u_p, soc, du_dt):
        self.x_n = np.asarray(x_n, dtype=float)
        self.u_n_tab = np.asarray(u_n, dtype=float)
        self.x_p = np.asarray(x_p, dtype=float)
        self.u_p_tab = np.asarray(u_p, dtype=float)
        self.soc_tab = np.asarray(soc, dtype=float)
        self.du_dt_tab = np.asarray(du_dt, dtype=float)
        for name, ax in (("anode", self.x_n), ("cathode", self.x_p),
                         ("entropic", self.soc_tab)):
            if np.any(np.diff(ax) <= 0):
                raise DomainError(f"{name} table abscissa must be strictly increasing")

    @classmethod
    def from_csv(cls, anode_path, cathode_path, entropic_path) -> "OcvTables":
        xn, un = _read_two_column_csv(anode_path)
        xp, up = _read_two_column_csv(cathode_path)
        soc, dudt = _read_two_column_csv(entropic_path)
        return cls(xn, un, xp, up, soc, dudt)

    def u_n(self, x):
        return np.interp(x, self.x_n, self.u_n_tab)

    def u_p(self, x):
        return np.interp(x, self.x_p, self.u_p_tab)

    def du_dt(self, soc):
        return np.interp(soc, self.soc_tab, self.du_dt_tab)


def _read_two_column_csv(path):
    xs, ys = [], []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].startswith("#"):
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                continue  # header row
            xs.append(x)
            ys.append(y)
    return np.array(xs), np.array(ys)


@dataclass
class CellState:
    """Mutable state of one cell.

    ``c_n``/``c_p`` hold volume-average concentrations of the finite-volume
    shells, index 0 at the particle centre.  Degradation state is embedded
    (see :mod:`packsim.degradation`).
    """

    c_n: np.ndarray
    c_p: np.ndarray
    temp: float
    deg: "DegradationState" = None  # set by fresh_state

    def copy(self) -> "CellState":
        return CellState(self.c_n.copy(), self.c_p.copy(), self.temp,
                         self.deg.copy() if self.deg is not None else None)


# --------------------------------------------------------------------------
# radial finite-volume geometry

@dataclass(frozen=True)
class RadialGrid:
    """Equal-thickness shell discretisation of a sphere of radius R.

    Volumes and areas carry the 4*pi factor removed; it cancels in every
    balance.  ``w`` are shell volumes/(4 pi), ``a_face`` the internal face
    areas/(4 pi) (face i sits between volumes i-1 and i), ``r_mid`` the
    shell midpoints used for profile evaluation.
    """

    radius: float
    n: int
    dr: float
    w: np.ndarray
    a_face: np.ndarray
    r_mid: np.ndarray

    @classmethod
    def make(cls, radius: float, n: int) -> "RadialGrid":
        dr = radius / n
        faces = np.linspace(0.0, radius, n + 1)
        w = (faces[1:] ** 3 - faces[:-1] ** 3) / 3.0
        a_face = faces[:-1] ** 2  # a_face[0] = 0 at the centre
        r_mid = 0.5 * (faces[1:] + faces[:-1])
        return cls(radius, n, dr, w, a_face, r_mid)


class TridiagFactor:
    """Factored tridiagonal systems, batched over leading dimensions.

    Thomas elimination is performed once; subsequent right-hand sides reuse
    the factor.  Shapes: ``diag``/``lower``/``upper`` are (..., n).
    """

    def __init__(self, lower, diag, upper):
        lower = np.asarray(lower, dtype=float)
        diag = np.asarray(diag, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = diag.shape[-1]
        cp = np.empty_like(diag)
        minv = np.empty_like(diag)
        minv[..., 0] = 1.0 / diag[..., 0]
        cp[..., 0] = upper[..., 0] * minv[..., 0]
        for i in range(1, n):
            m = diag[..., i] - lower[..., i] * cp[..., i - 1]
            minv[..., i] = 1.0 / m
            cp[..., i] = (upper[..., i] * minv[..., i]) if i < n - 1 else 0.0
        self.lower = lower
        self.cp = cp
        self.minv = minv
        self.n = n

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        x = np.empty_like(rhs)
        d = np.empty_like(rhs)
        d[..., 0] = rhs[..., 0] * self.minv[..., 0]
        for i in range(1, self.n):
            d[..., i] = (rhs[..., i] - self.lower[..., i] * d[..., i - 1]) * self.minv[..., i]
        x[..., -1] = d[..., -1]
        for i in range(self.n - 2, -1, -1):
            x[..., i] = d[..., i] - self.cp[..., i] * x[..., i + 1]
        return x

    def solve_pair(self, rhs_stacked, batch):
        """Solve two stacked right-hand sides (2*batch, n) in one pass."""
        sol = self.solve(rhs_stacked.reshape(2, batch, self.n))
        return sol.reshape(2 * batch, self.n)


def diffusion_factor(grid: RadialGrid, d_coeff, dt: float) -> TridiagFactor:
    """Backward-Euler factor for one particle.

    ``d_coeff`` may be scalar or (batch,) shaped; the returned factor solves
    the implicit step for any surface-flux right-hand side.
    """
    d_coeff = np.asarray(d_coeff, dtype=float)
    scale = (dt / (grid.w * grid.dr))  # (n,)
    if d_coeff.ndim:
        scale = d_coeff[..., None] * scale
    else:
        scale = d_coeff * scale
    a_in = grid.a_face                 # inner faces, a_in[0] = 0
    a_out = np.concatenate([grid.a_face[1:], [0.0]])  # outer faces; surface flux imposed
    lower = scale * (-a_in)
    upper = scale * (-a_out)
    diag = 1.0 - lower - upper
    return TridiagFactor(lower, diag, upper)


def implicit_diffusion_rhs(grid: RadialGrid, c_old, flux_out, dt: float):
    """Right-hand side for the implicit step with outward surface flux.

    ``flux_out`` (mol m^-2 s^-1) positive removes lithium from the particle.
    """
    rhs = np.array(c_old, dtype=float, copy=True)
    flux_out = np.asarray(flux_out, dtype=float)
    rhs[..., -1] = rhs[..., -1] - flux_out * dt * grid.radius ** 2 / grid.w[-1]
    return rhs


# --------------------------------------------------------------------------
# spec operations

def arrhenius(x_ref, e_act, temp, t_ref):
    """Temperature-scaled parameter X(T) = X_ref exp(-E/R (1/T - 1/T_ref))."""
    temp = np.asarray(temp, dtype=float)
    if np.any(temp <= 0.0) or t_ref <= 0.0:
        raise DomainError("temperatures must be positive for Arrhenius scaling")
    return x_ref * np.exp(-(e_act / GAS_CONSTANT) * (1.0 / temp - 1.0 / t_ref))


def active_surface(eps, radius, area, thickness):
    """Total active particle surface of an electrode: 3 (eps/R) A tau (m^2)."""
    return 3.0 * (eps / radius) * area * thickness


def surface_flux_from_current(i_app, params: CellParams, eps_n, eps_p):
    """Outward molar surface flux per electrode for applied current ``i_app``.

    Positive current (discharge) removes lithium from the anode particle and
    inserts it into the cathode particle, so the returned anode flux has the
    sign of the current and the cathode flux the opposite sign.
    """
    eps_n = np.asarray(eps_n, dtype=float)
    eps_p = np.asarray(eps_p, dtype=float)
    if np.any(eps_n <= 0.0) or np.any(eps_p <= 0.0):
        raise DomainError("active-material fraction must be positive")
    nf = params.n_e * FARADAY
    s_n = active_surface(eps_n, params.anode.radius, params.anode.area,
                         params.anode.thickness)
    s_p = active_surface(eps_p, params.cathode.radius, params.cathode.area,
                         params.cathode.thickness)
    j_n = i_app / (nf * s_n)
    j_p = -i_app / (nf * s_p)
    return j_n, j_p


def exchange_current(k_rate, c_surf, c_max, c_el, alpha, n_e=1):
    """Exchange current density i0 = nF k c_s^a c_el^(1-a) (c_max-c_s)^(1-a)."""
    return (n_e * FARADAY * k_rate * np.power(c_surf, alpha)
            * np.power(c_el, 1.0 - alpha) * np.power(c_max - c_surf, 1.0 - alpha))


def overpotential(i_density, c_surf, c_max, c_el, k_rate, temp, alpha, n_e=1):
    """Kinetic overpotential for intercalation current density ``i_density``.

    ``i_density`` is positive for lithium entering the particle.  With
    alpha = 0.5 the Butler-Volmer relation inverts in closed form through
    asinh; other alphas fall back to a bracketed root find converged to
    |residual| < 1e-10 |i| + 1e-12.
    """
    c_surf = np.asarray(c_surf, dtype=float)
    if np.any(c_surf <= 0.0) or np.any(c_surf >= c_max):
        bad = int(np.argmax((c_surf <= 0.0) | (c_surf >= c_max)))
        raise SaturationError("surface", bad, float(np.atleast_1d(c_surf).ravel()[0]))
    i0 = exchange_current(k_rate, c_surf, c_max, c_el, alpha, n_e)
    f = n_e * FARADAY / (GAS_CONSTANT * np.asarray(temp, dtype=float))
    if alpha == 0.5:
        return -(2.0 / f) * np.arcsinh(np.asarray(i_density) / (2.0 * i0))
    return _overpotential_root(np.asarray(i_density, dtype=float), i0, f, alpha)


def _overpotential_root(i_density, i0, f, alpha):
    def solve_one(i_d, i0_s, f_s):
        if i_d == 0.0:
            return 0.0

        def resid(eta):
            return i0_s * (np.exp(-alpha * f_s * eta)
                           - np.exp((1.0 - alpha) * f_s * eta)) - i_d

        hi = 0.1
        while resid(-hi) * resid(hi) > 0.0 and hi < 1e3:
            hi *= 2.0
        tol = 1e-10 * abs(i_d) + 1e-12
        return brentq(resid, -hi, hi, xtol=1e-15, rtol=8.9e-16, maxiter=200,
                      full_output=False) if abs(resid(0.0)) > tol else 0.0

    it = np.broadcast(i_density, i0, f)
    out = np.array([solve_one(float(i), float(j), float(g))
                    for i, j, g in it])
    return out.reshape(it.shape) if it.shape else float(out[0])


def diffusion_step(state: CellState, params: CellParams, j_n, j_p, dt: float,
                   j_n_extra=0.0) -> CellState:
    """Advance both concentration profiles one implicit diffusion step.

    ``j_n``/``j_p`` are outward surface fluxes (mol m^-2 s^-1); ``j_n_extra``
    adds a side-reaction flux to the anode boundary.  The scheme conserves
    lithium exactly up to the imposed surface fluxes.
    """
    if dt <= 0.0:
        raise DomainError("dt must be positive")
    grid_n = RadialGrid.make(params.anode.radius, params.n_shells)
    grid_p = RadialGrid.make(params.cathode.radius, params.n_shells)
    d_n = arrhenius(params.anode.d_ref, params.anode.e_d, state.temp, params.t_ref)
    d_p = arrhenius(params.cathode.d_ref, params.cathode.e_d, state.temp, params.t_ref)
    fac_n = diffusion_factor(grid_n, d_n, dt)
    fac_p = diffusion_factor(grid_p, d_p, dt)
    c_n = fac_n.solve(implicit_diffusion_rhs(grid_n, state.c_n, j_n + j_n_extra, dt))
    c_p = fac_p.solve(implicit_diffusion_rhs(grid_p, state.c_p, j_p, dt))
    for name, c, c_max in (("anode", c_n, params.anode.c_max),
                           ("cathode", c_p, params.cathode.c_max)):
        tol = 1e-9 * c_max  # roundoff guard; genuine violations far exceed this
        bad = (c < -tol) | (c > c_max + tol)
        if np.any(bad):
            node = int(np.argmax(bad))
            raise SaturationError(name, node, float(c[node]))
    new = state.copy()
    new.c_n = c_n
    new.c_p = c_p
    return new


def total_lithium(state: CellState, params: CellParams) -> float:
    """Lithium inventory (mol) by radial quadrature over both particles."""
    grid_n = RadialGrid.make(params.anode.radius, params.n_shells)
    grid_p = RadialGrid.make(params.cathode.radius, params.n_shells)
    eps_n = state.deg.eps_n if state.deg is not None else params.anode.eps0
    eps_p = state.deg.eps_p if state.deg is not None else params.cathode.eps0
    mean_n = np.sum(grid_n.w * state.c_n, axis=-1) / np.sum(grid_n.w)
    mean_p = np.sum(grid_p.w * state.c_p, axis=-1) / np.sum(grid_p.w)
    n_side = eps_n * params.anode.area * params.anode.thickness * mean_n
    p_side = eps_p * params.cathode.area * params.cathode.thickness * mean_p
    return n_side + p_side


def soc_of(state: CellState, params: CellParams) -> float:
    """State of charge from the volume-mean anode stoichiometry, clipped."""
    grid_n = RadialGrid.make(params.anode.radius, params.n_shells)
    mean_x = (np.sum(grid_n.w * state.c_n, axis=-1) / np.sum(grid_n.w)) / params.anode.c_max
    soc = (mean_x - params.stoich_empty_n) / params.stoich_window()
    return float(np.clip(soc, 0.0, 1.0))


def terminal_voltage(state: CellState, params: CellParams, ocv: OcvTables,
                     i_app: float, r_dc: float) -> float:
    """Terminal voltage at applied current ``i_app`` for the given state."""
    eps_n = state.deg.eps_n if state.deg is not None else params.anode.eps0
    eps_p = state.deg.eps_p if state.deg is not None else params.cathode.eps0
    s_n = active_surface(eps_n, params.anode.radius, params.anode.area,
                         params.anode.thickness)
    s_p = active_surface(eps_p, params.cathode.radius, params.cathode.area,
                         params.cathode.thickness)
    c_ns = state.c_n[..., -1]
    c_ps = state.c_p[..., -1]
    k_n = arrhenius(params.anode.k_ref, params.anode.e_k, state.temp, params.t_ref)
    k_p = arrhenius(params.cathode.k_ref, params.cathode.e_k, state.temp, params.t_ref)
    eta_n = overpotential(-i_app / s_n, c_ns, params.anode.c_max, params.c_el,
                          k_n, state.temp, params.alpha, params.n_e)
    eta_p = overpotential(+i_app / s_p, c_ps, params.cathode.c_max, params.c_el,
                          k_p, state.temp, params.alpha, params.n_e)
    soc = soc_of(state, params)
    return float(ocv.u_p(c_ps / params.cathode.c_max)
                 - ocv.u_n(c_ns / params.anode.c_max)
                 + (state.temp - params.t_ref) * ocv.du_dt(soc)
                 - (eta_n - eta_p) - r_dc * i_app)


def heat_generation(state: CellState, params: CellParams, i_app, eta_n, eta_p,
                    r_dc, du_dt):
    """Internal heat generation (W): ohmic + reaction + entropic terms."""
    return (i_app ** 2 * r_dc + i_app * (eta_n - eta_p)
            + i_app * state.temp * du_dt)


def fresh_state(params: CellParams, soc: float, temp: float,
                deg_factory=None) -> CellState:
    """Uniform-concentration state at the given SoC and temperature."""
    x_n = params.stoich_empty_n + soc * params.stoich_window()
    x_p = params.stoich_empty_p - soc * params.stoich_window() * params.balance_ratio()
    n = params.n_shells
    state = CellState(
        c_n=np.full(n, x_n * params.anode.c_max),
        c_p=np.full(n, x_p * params.cathode.c_max),
        temp=float(temp),
    )
    if deg_factory is not None:
        state.deg = deg_factory()
    return state
