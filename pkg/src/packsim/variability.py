"""Seeded sampling of cell-to-cell parameter variations.

Four independent channels: initial capacity (scales the electrode areas),
initial resistance (scales the specific electrode resistances), SEI growth
rate (a correlated pair of multipliers on the layer diffusion and kinetic
rate constants) and the crack-growth rate constant.  All multipliers are
Gaussian around 1, truncated at four standard deviations to keep parameters
physical, and fully reproducible from the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cell_model import CellParams
from .degradation import SeiParams, StressParams


@dataclass(frozen=True)
class VariationSpec:
    """Relative standard deviations of the four variation channels."""

    sd_capacity: float = 0.004
    sd_resistance: float = 0.025
    sd_degradation: float = 0.10
    rho: float = 0.7          # correlation of the (d_sei, k_sei) pair
    seed: int = 0

    def __post_init__(self):
        for name in ("sd_capacity", "sd_resistance", "sd_degradation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")


def _truncated_normal(rng, sd, n, bound=4.0):
    if sd == 0.0:
        return np.ones(n)
    draw = rng.standard_normal(n)
    return 1.0 + sd * np.clip(draw, -bound, bound)


def sample_factors(spec: VariationSpec, n_cells: int) -> dict:
    """Per-cell multiplier arrays for the bank, keyed by channel."""
    if n_cells < 1:
        raise ValueError("population needs at least one cell")
    rng = np.random.default_rng(spec.seed)
    capacity = _truncated_normal(rng, spec.sd_capacity, n_cells)
    resistance = _truncated_normal(rng, spec.sd_resistance, n_cells)
    # correlated pair via a Cholesky mix of two standard normals
    z1 = rng.standard_normal(n_cells)
    z2 = rng.standard_normal(n_cells)
    mix = spec.rho * z1 + np.sqrt(max(1.0 - spec.rho ** 2, 0.0)) * z2
    bound = 4.0
    d_sei = 1.0 + spec.sd_degradation * np.clip(z1, -bound, bound)
    k_sei = 1.0 + spec.sd_degradation * np.clip(mix, -bound, bound)
    if spec.sd_degradation == 0.0:
        d_sei = np.ones(n_cells)
        k_sei = np.ones(n_cells)
    beta_2 = _truncated_normal(rng, spec.sd_degradation, n_cells)
    return {"capacity": capacity, "resistance": resistance,
            "d_sei": d_sei, "k_sei": k_sei, "beta_2": beta_2}


@dataclass(frozen=True)
class CellBundle:
    """One cell's complete constant set after variation."""

    cell: CellParams
    sei: SeiParams
    stress: StressParams


def apply_factors(base_cell: CellParams, base_sei: SeiParams,
                  base_stress: StressParams, factors: dict, idx: int) -> CellBundle:
    f_cap = float(factors["capacity"][idx])
    f_res = float(factors["resistance"][idx])
    cell = replace(
        base_cell,
        anode=replace(base_cell.anode, area=base_cell.anode.area * f_cap,
                      r_dc=base_cell.anode.r_dc * f_res),
        cathode=replace(base_cell.cathode, area=base_cell.cathode.area * f_cap,
                        r_dc=base_cell.cathode.r_dc * f_res),
        q_nom=base_cell.q_nom * f_cap)
    sei = replace(base_sei,
                  d_ref=base_sei.d_ref * float(factors["d_sei"][idx]),
                  k_ref=base_sei.k_ref * float(factors["k_sei"][idx]))
    stress = replace(base_stress,
                     beta_2=base_stress.beta_2 * float(factors["beta_2"][idx]))
    return CellBundle(cell=cell, sei=sei, stress=stress)


def sample_population(base_cell: CellParams, spec: VariationSpec, n_cells: int,
                      base_sei: SeiParams | None = None,
                      base_stress: StressParams | None = None):
    """Sampled population as per-cell bundles (or bare CellParams).

    With the degradation parameter sets supplied, returns
    :class:`CellBundle` objects; otherwise just the varied
    :class:`CellParams`.  The same seed always reproduces the same
    population byte for byte.
    """
    factors = sample_factors(spec, n_cells)
    if base_sei is None or base_stress is None:
        out = []
        for i in range(n_cells):
            f_cap = float(factors["capacity"][i])
            f_res = float(factors["resistance"][i])
            out.append(replace(
                base_cell,
                anode=replace(base_cell.anode,
                              area=base_cell.anode.area * f_cap,
                              r_dc=base_cell.anode.r_dc * f_res),
                cathode=replace(base_cell.cathode,
                                area=base_cell.cathode.area * f_cap,
                                r_dc=base_cell.cathode.r_dc * f_res),
                q_nom=base_cell.q_nom * f_cap))
        return out
    return [apply_factors(base_cell, base_sei, base_stress, factors, i)
            for i in range(n_cells)]
