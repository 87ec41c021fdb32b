"""Thermal management control strategies.

Five selectable policies command every fan and the AC unit from the local
(enclosure) temperature and the hot-spot (worst cell behind the actuator)
temperature.  Commands are normalised power fractions in [0, 1].

Thresholds in degrees Celsius:

==========================  ===========================  ==========================
variant                     fan                          AC unit
==========================  ===========================  ==========================
1 always_on                 always 1                     1, off below 20 local
2 local_on_off              on >35 local, off <25        on >25 local, off <20
3 hotspot_on_off            on >35 hot-spot, off <25     on >30 hot-spot, off <20 local
4 proportional_local        (T_loc-25)/10 clamped        (T_loc-20)/5 clamped
5 proportional_hotspot      (T_hot-25)/10 clamped        (T_hot-25)/5 clamped, gated
                                                         off below 20 local
==========================  ===========================  ==========================
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .constants import KELVIN_OFFSET


VARIANTS = ("always_on", "local_on_off", "hotspot_on_off",
            "proportional_local", "proportional_hotspot")


class ControlError(ValueError):
    pass


def _c(t_kelvin: float) -> float:
    return t_kelvin - KELVIN_OFFSET


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


@dataclass
class Latch:
    """Per-actuator hysteresis memory for the on/off variants."""

    fan_on: bool = False
    ac_on: bool = False


@dataclass
class ControlStrategy:
    """Strategy selection plus threshold overrides (degrees C)."""

    variant: str = "always_on"
    fan_on_c: float = 35.0
    fan_off_c: float = 25.0
    ac_on_c: float = 25.0
    ac_off_c: float = 20.0
    ac_hot_on_c: float = 30.0
    ac_gate_c: float = 20.0
    prop_fan_lo_c: float = 25.0
    prop_fan_hi_c: float = 35.0
    prop_ac_lo_c: float = 20.0
    prop_ac_hi_c: float = 25.0
    prop_ac_hot_lo_c: float = 25.0
    prop_ac_hot_hi_c: float = 30.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ControlError(f"unknown control variant {self.variant!r}")
        if self.fan_on_c <= self.fan_off_c or self.ac_on_c <= self.ac_off_c:
            raise ControlError("on-threshold must exceed off-threshold")
        if (self.prop_fan_hi_c <= self.prop_fan_lo_c
                or self.prop_ac_hi_c <= self.prop_ac_lo_c
                or self.prop_ac_hot_hi_c <= self.prop_ac_hot_lo_c):
            raise ControlError("proportional bands need positive width")


def fan_command(strategy: ControlStrategy, t_local: float, t_hotspot: float,
                latch: Latch) -> float:
    """Normalised fan power for this step; updates the latch in place."""
    s = strategy
    v = s.variant
    if v == "always_on":
        return 1.0
    if v in ("local_on_off", "hotspot_on_off"):
        t = _c(t_local) if v == "local_on_off" else _c(t_hotspot)
        if latch.fan_on:
            if t < s.fan_off_c:
                latch.fan_on = False
        elif t > s.fan_on_c:
            latch.fan_on = True
        return 1.0 if latch.fan_on else 0.0
    if v == "proportional_local":
        return _clamp01((_c(t_local) - s.prop_fan_lo_c)
                        / (s.prop_fan_hi_c - s.prop_fan_lo_c))
    return _clamp01((_c(t_hotspot) - s.prop_fan_lo_c)
                    / (s.prop_fan_hi_c - s.prop_fan_lo_c))


def fan_commands_array(strategy: ControlStrategy, t_local, t_hotspot, fan_on):
    """Vectorised fan commands over many actuators.

    ``fan_on`` is the boolean latch array, updated in place.  Matches
    :func:`fan_command` element for element.
    """
    import numpy as np

    s = strategy
    v = s.variant
    t_local = np.asarray(t_local) - KELVIN_OFFSET
    t_hotspot = np.asarray(t_hotspot) - KELVIN_OFFSET
    if v == "always_on":
        return np.ones_like(t_local)
    if v in ("local_on_off", "hotspot_on_off"):
        t = t_local if v == "local_on_off" else t_hotspot
        fan_on[:] = np.where(fan_on, t >= s.fan_off_c, t > s.fan_on_c)
        return fan_on.astype(float)
    t = t_local if v == "proportional_local" else t_hotspot
    return np.clip((t - s.prop_fan_lo_c) / (s.prop_fan_hi_c - s.prop_fan_lo_c),
                   0.0, 1.0)


def ac_command(strategy: ControlStrategy, t_local: float, t_hotspot: float,
               latch: Latch) -> float:
    """Normalised AC power for this step; updates the latch in place."""
    s = strategy
    v = s.variant
    if v == "always_on":
        return 0.0 if _c(t_local) < s.ac_gate_c else 1.0
    if v == "local_on_off":
        t = _c(t_local)
        if latch.ac_on:
            if t < s.ac_off_c:
                latch.ac_on = False
        elif t > s.ac_on_c:
            latch.ac_on = True
        return 1.0 if latch.ac_on else 0.0
    if v == "hotspot_on_off":
        if latch.ac_on:
            if _c(t_local) < s.ac_off_c:
                latch.ac_on = False
        elif _c(t_hotspot) > s.ac_hot_on_c:
            latch.ac_on = True
        return 1.0 if latch.ac_on else 0.0
    if v == "proportional_local":
        return _clamp01((_c(t_local) - s.prop_ac_lo_c)
                        / (s.prop_ac_hi_c - s.prop_ac_lo_c))
    if _c(t_local) <= s.ac_gate_c:
        return 0.0
    return _clamp01((_c(t_hotspot) - s.prop_ac_hot_lo_c)
                    / (s.prop_ac_hot_hi_c - s.prop_ac_hot_lo_c))
