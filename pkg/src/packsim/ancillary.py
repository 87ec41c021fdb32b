"""Fan, air-conditioning and power-converter models.

All ancillary electrical consumption feeds the energy ledger; converter heat
is injected at the container thermal node.  Fans are commanded by normalised
power fraction p in [0, 1]; air speed follows the cube root of p, which is
why proportional control removes heat far more cheaply than on/off control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .thermal_network import Environment


class AncillaryError(ValueError):
    pass


class RatingExceeded(AncillaryError):
    pass


@dataclass(frozen=True)
class FanParams:
    """Fan scaled to the cell count it serves.

    Per served cell the duct cross-section is 2.5e-5 m^2 and the nominal
    flow 5e-4 m^3/s, keeping the nominal air speed identical at every level
    of the hierarchy.
    """

    area: float            # cross-section (m^2)
    flow_nom: float        # nominal volumetric flow (m^3/s)
    eta_fan: float = 0.554
    rho_air: float = 1.204   # kg/m^3
    cp_air: float = 1005.0   # J/(kg K)

    @classmethod
    def per_cells(cls, n_cells: int, area_per_cell: float = 2.5e-5,
                  flow_per_cell: float = 5e-4, **kw) -> "FanParams":
        return cls(area=area_per_cell * n_cells,
                   flow_nom=flow_per_cell * n_cells, **kw)

    @property
    def v_nom(self) -> float:
        return self.flow_nom / self.area

    @property
    def p_nom(self) -> float:
        return fan_power(self.v_nom, self, cap=False)


@dataclass(frozen=True)
class AcParams:
    """Air-conditioning unit at the container boundary."""

    cop: float = 3.0               # chiller coefficient of performance
    capacity_w: float = 0.0        # rated heat-extraction power (W thermal)


@dataclass(frozen=True)
class ConverterParams:
    """Two-stage converter (DC/DC then DC/AC) loss model.

    Passive elements (filters, DC-bus capacitor) are lumped into one
    normalised equivalent-resistance coefficient: they dissipate
    ``passive_frac`` of the rating at rated throughput and scale with the
    square of the power, which keeps the rescaling to other ratings

    well-behaved at any pack voltage.
    """

    v_sc: float = 1.5           # semiconductor drop per stage (V)
    f_sw: float = 3000.0        # switching frequency (Hz)
    e_on: float = 0.25          # turn-on loss per event (J) at reference rating
    e_off: float = 0.25         # turn-off loss per event (J) at reference rating
    passive_frac: float = 0.005  # passive loss fraction at rated power (-)
    v_bus: float = 1200.0       # intermediate DC bus voltage (V)
    d_ac: float = 0.54          # grid-stage modulation ratio (-)
    rating_w: float = 1.2e6     # power rating (W)
    rating_ref_w: float = 1.2e6  # rating the switching losses were quoted at

    def scaled(self, rating_w: float) -> "ConverterParams":
        """Linear rescale to another power rating."""
        s = rating_w / self.rating_ref_w
        return ConverterParams(
            v_sc=self.v_sc, f_sw=self.f_sw,
            e_on=self.e_on * s, e_off=self.e_off * s,
            passive_frac=self.passive_frac,
            v_bus=self.v_bus, d_ac=self.d_ac,
            rating_w=rating_w, rating_ref_w=self.rating_ref_w)


def fan_convection(v) -> float:
    """Convective coefficient (W/m^2 K) of air at duct speed v (m/s)."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0.0):
        raise AncillaryError("air speed must be non-negative")
    return 12.12 - 1.16 * v + 11.6 * np.sqrt(v)


def fan_power(v, p: FanParams, cap: bool = True):
    """Electrical power (W) to move air at speed v, capped at the rating."""
    v = np.asarray(v, dtype=float)
    power = p.rho_air * p.area * v ** 3 / p.eta_fan
    if cap:
        power = np.minimum(power, p.p_nom)
    return float(power) if power.ndim == 0 else power


def fan_speed_from_command(cmd, p: FanParams):
    """Air speed for a normalised power command (power goes as speed cubed)."""
    return p.v_nom * np.asarray(cmd, dtype=float) ** (1.0 / 3.0)


def ac_power(cooling_demand: float, t_hot: float, t_cold: float,
             env: Environment, ac: AcParams, fan: FanParams) -> float:
    """Electrical power (W) to remove ``cooling_demand`` W of heat.

    Direct-air mode sizes the exhaust fan's mass flow from the enthalpy
    difference between hot and cold streams; chiller mode divides by the
    coefficient of performance.  With no usable temperature difference the
    direct mode has zero capability and the caller falls back to the chiller.
    """
    if cooling_demand < 0.0:
        raise AncillaryError("cooling demand must be non-negative")
    if cooling_demand == 0.0:
        return 0.0
    if env.mode == "chiller":
        return cooling_demand / ac.cop
    if t_hot <= t_cold:
        raise ZeroCapability()
    m_dot = cooling_demand / (fan.cp_air * (t_hot - t_cold))
    v = m_dot / (fan.rho_air * fan.area)
    return float(fan_power(v, fan))


class ZeroCapability(AncillaryError):
    """Direct-air cooling impossible; fall back to the chiller."""

    def __init__(self):
        super().__init__("no temperature difference for direct-air cooling")


def converter_losses(i_batt: float, v_batt: float, p_ac: float,
                     p: ConverterParams, active: bool = True) -> dict:
    """Two-stage converter losses (W), decomposed.

    Conduction per stage is I*V_sc*D with the stage's own current and
    modulation ratio; switching per stage is f*(E_on+E_off), gated off when
    the converter idles; passive elements dissipate I^2 R.  Returns a dict
    with conduction/switching/passive/total.
    """
    p_batt = abs(i_batt * v_batt)
    if p_batt > p.rating_w * (1.0 + 1e-9):
        raise RatingExceeded(
            f"throughput {p_batt:.0f} W above rating {p.rating_w:.0f} W")
    i1 = abs(i_batt)
    d1 = min(abs(v_batt) / p.v_bus, 1.0)
    i2 = p_batt / p.v_bus
    cond = i1 * p.v_sc * d1 + i2 * p.v_sc * p.d_ac
    sw = 2.0 * p.f_sw * (p.e_on + p.e_off) if active else 0.0
    passive = p.passive_frac * p_batt ** 2 / p.rating_w
    return {"conduction": cond, "switching": sw, "passive": passive,
            "total": cond + sw + passive}
