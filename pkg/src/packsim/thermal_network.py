"""Lumped thermal equivalent-circuit network over the pack hierarchy.

Every cell is one thermal node; every thermally closed group (an enclosure
with its own fan) is another.  Adjacent sibling cells conduct to each other,
chain-end cells conduct to the enclosure wall, and all cells convect to the
enclosing air node with a coefficient set by that enclosure's fan.  Closed
groups convect to their parent enclosure; the outermost enclosure exchanges
with the environment through the air-conditioning unit plus a passive leak.

Temperatures advance explicitly on the electrical timestep (thermal time
constants are far longer); a stability guard rejects timesteps above one
tenth of the smallest node time constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pack_topology as pt


ENV_NODE = -1


class ThermalConfigError(ValueError):
    pass


@dataclass
class Environment:
    """Ambient conditions and the container cooling mode."""

    t_inf: float                 # ambient temperature (K)
    mode: str = "direct-air"     # or "chiller"

    def __post_init__(self):
        if self.t_inf <= 0.0:
            raise ThermalConfigError("ambient temperature must be positive")
        if self.mode not in ("direct-air", "chiller"):
            raise ThermalConfigError(f"unknown cooling mode {self.mode!r}")


@dataclass
class ThermalNode:
    """Reference node form: links are (neighbor id, h, area) with -1 = ambient."""

    id: int
    temp: float
    heat_capacity: float
    links: list = field(default_factory=list)
    generated: float = 0.0


def exchange_step(nodes: list[ThermalNode], dt: float, t_env: float = 293.15):
    """Advance a list of nodes one explicit step (reference implementation).

    Returns (new temperatures, heat removed at the ambient boundary in J).
    Link symmetry is the caller's responsibility.
    """
    if dt <= 0.0:
        raise ThermalConfigError("dt must be positive")
    temps = {n.id: n.temp for n in nodes}
    removed = 0.0
    new = []
    for n in nodes:
        q_net = n.generated
        for other, h, area in n.links:
            t_other = t_env if other == ENV_NODE else temps[other]
            q = h * area * (n.temp - t_other)
            q_net -= q
            if other == ENV_NODE:
                removed += q * dt
        new.append(n.temp + q_net * dt / n.heat_capacity)
    for n, t in zip(nodes, new):
        n.temp = t
    return np.array(new), removed


@dataclass
class ThermalBuildParams:
    """Coefficients of the network (documented order-of-magnitude defaults)."""

    h_cell_cell: float = 15.0      # cell-to-cell conduction (W/m^2 K)
    a_cell_side: float = 0.01      # contact area between neighbours (m^2)
    h_cell_wall: float = 15.0      # chain-end cell to enclosure wall
    a_cell_wall: float = 0.01
    a_cell_cool: float = 0.01      # convectively cooled cell area (m^2)
    c_group_per_cell: float = 400.0   # enclosure capacity per cell served (J/K)
    a_group_per_cell: float = 0.02    # enclosure outer wall area per cell (m^2)
    h_leak: float = 1.0            # container passive loss coefficient
    a_leak_per_cell: float = 0.005
    h_individual: float = 40.0     # per-cell coefficient in 'individual' mode
    guard_factor: float = 0.1


@dataclass
class ClosedGroupInfo:
    node: int
    parent_node: int         # enclosing node or ENV_NODE
    cell_lo: int
    cell_hi: int
    n_cells: int
    wall_area: float


class ThermalNetwork:
    """Vectorised network used by the engine."""

    def __init__(self, n_cells: int, cell_capacity: float,
                 cfg: ThermalBuildParams, env: Environment):
        self.cfg = cfg
        self.env = env
        self.n_cells = n_cells
        self.groups: list[ClosedGroupInfo] = []
        self.cell_enclosure = np.full(n_cells, ENV_NODE)
        self.cond_a = np.empty(0, dtype=int)
        self.cond_b = np.empty(0, dtype=int)
        self.cond_g = np.empty(0)
        self._cell_capacity = cell_capacity
        self.heat_removed = 0.0   # J, at the ambient boundary
        self.temps = None
        self.capacity = None
        self.generated = None

    # -- construction -------------------------------------------------------

    @classmethod
    def individual(cls, n_cells, cell_capacity, cfg, env):
        """Per-cell convection straight to ambient; no hierarchy, no fans."""
        net = cls(n_cells, cell_capacity, cfg, env)
        net._finalise(n_groups=0)
        return net

    @classmethod
    def from_tree(cls, root, n_cells, cell_capacity, cfg, env):
        net = cls(n_cells, cell_capacity, cfg, env)
        cond = []

        def walk(unit, enclosure_node):
            if isinstance(unit, pt.Cell):
                unit.thermal_node_id = unit.index
                net.cell_enclosure[unit.index] = enclosure_node
                return
            node_here = enclosure_node
            if unit.closed:
                node_here = n_cells + len(net.groups)
                lo, hi = unit.cell_range
                net.groups.append(ClosedGroupInfo(
                    node=node_here, parent_node=enclosure_node,
                    cell_lo=lo, cell_hi=hi, n_cells=hi - lo,
                    wall_area=cfg.a_group_per_cell * (hi - lo)))
            unit.thermal_node_id = node_here
            cells = [c for c in unit.children if isinstance(c, pt.Cell)]
            for a, b in zip(cells[:-1], cells[1:]):
                cond.append((a.index, b.index,
                             cfg.h_cell_cell * cfg.a_cell_side))
            if cells:
                ends = [cells[0].index]
                if cells[-1].index != cells[0].index:
                    ends.append(cells[-1].index)
                for endpoint in ends:
                    cond.append((endpoint, node_here,
                                 cfg.h_cell_wall * cfg.a_cell_wall))
            for child in unit.children:
                walk(child, node_here)

        root_node = root if isinstance(root, pt.Group) else None
        if root_node is not None and not root_node.closed:
            raise ThermalConfigError(
                "coupled thermal mode requires a closed root group")
        walk(root, ENV_NODE)
        if cond:
            arr = np.array(cond)
            keep = arr[:, 1] != ENV_NODE
            arr = arr[keep]
            net.cond_a = arr[:, 0].astype(int)
            net.cond_b = arr[:, 1].astype(int)
            net.cond_g = arr[:, 2].astype(float)
        net._finalise(n_groups=len(net.groups))
        return net

    def _finalise(self, n_groups):
        n = self.n_cells + n_groups
        self.n_nodes = n
        self.capacity = np.empty(n)
        self.capacity[:self.n_cells] = self._cell_capacity
        for g in self.groups:
            self.capacity[g.node] = self.cfg.c_group_per_cell * g.n_cells
        self.temps = np.full(n, self.env.t_inf)
        self.generated = np.zeros(n)
        self.root_group = self.groups[0] if self.groups else None
        if self.groups:
            # outermost enclosure is the first closed group encountered
            roots = [g for g in self.groups if g.parent_node == ENV_NODE]
            if len(roots) != 1:
                raise ThermalConfigError("exactly one outermost enclosure expected")
            self.root_group = roots[0]

    def adopt_bank_temperature(self, bank):
        """Share the cell temperature storage with the bank."""
        self.temps[:self.n_cells] = bank.temp
        bank.temp = self.temps[:self.n_cells]

    # -- stability ------------------------------------------------------------

    def check_stability(self, dt: float, h_conv_max: float):
        """Reject timesteps above guard_factor x smallest time constant."""
        g_sum = np.zeros(self.n_nodes)
        if len(self.cond_a):
            np.add.at(g_sum, self.cond_a, self.cond_g)
            np.add.at(g_sum, self.cond_b, self.cond_g)
        conv = h_conv_max * self.cfg.a_cell_cool
        g_sum[:self.n_cells] += conv
        for g in self.groups:
            g_sum[g.node] += conv * g.n_cells + h_conv_max * g.wall_area
            if g.parent_node == ENV_NODE:
                g_sum[g.node] += self.cfg.h_leak * self.cfg.a_leak_per_cell * g.n_cells
        if self.n_cells and not self.groups:
            g_sum[:self.n_cells] += self.cfg.h_individual * self.cfg.a_cell_cool
        tau_min = float(np.min(self.capacity / np.maximum(g_sum, 1e-12)))
        if dt > self.cfg.guard_factor * tau_min:
            raise ThermalConfigError(
                f"dt={dt} s exceeds {self.cfg.guard_factor} x smallest "
                f"thermal time constant ({tau_min:.1f} s)")

    # -- stepping -------------------------------------------------------------

    def add_generated(self, node_ids, watts):
        np.add.at(self.generated, node_ids, watts)

    def step(self, dt: float, h_cell, h_group_wall=None, ac_extract_w: float = 0.0):
        """Advance all temperatures one explicit step.

        ``h_cell`` is the per-cell convective coefficient (W/m^2 K) from the
        serving fan; ``h_group_wall`` the coefficient at each closed group's
        outer wall (from its parent's fan).  ``ac_extract_w`` is drawn out of
        the outermost enclosure.  Returns heat removed to ambient this step (J).
        """
        t = self.temps
        net = self.generated
        removed = 0.0
        n = self.n_nodes
        if len(self.cond_a):
            q = self.cond_g * (t[self.cond_a] - t[self.cond_b])
            net -= np.bincount(self.cond_a, weights=q, minlength=n)
            net += np.bincount(self.cond_b, weights=q, minlength=n)
        if self.groups:
            parents = self.cell_enclosure
            q = h_cell * self.cfg.a_cell_cool * (t[:self.n_cells] - t[parents])
            net[:self.n_cells] -= q
            net += np.bincount(parents, weights=q, minlength=n)
            for gi, g in enumerate(self.groups):
                h_wall = 0.0 if h_group_wall is None else float(h_group_wall[gi])
                if g.parent_node == ENV_NODE:
                    g_leak = self.cfg.h_leak * self.cfg.a_leak_per_cell * g.n_cells
                    q_env = g_leak * (t[g.node] - self.env.t_inf)
                    q_ac = ac_extract_w
                    if self.env.mode == "direct-air":
                        # outside air cannot cool the container below ambient
                        headroom = self.capacity[g.node] * (t[g.node] - self.env.t_inf) / dt
                        q_ac = min(q_ac, max(headroom, 0.0))
                    net[g.node] -= q_env + q_ac
                    removed += (q_env + q_ac) * dt
                else:
                    q_w = h_wall * g.wall_area * (t[g.node] - t[g.parent_node])
                    net[g.node] -= q_w
                    net[g.parent_node] += q_w
        elif self.n_cells:
            h = self.cfg.h_individual if h_cell is None else h_cell
            q = h * self.cfg.a_cell_cool * (t[:self.n_cells] - self.env.t_inf)
            net[:self.n_cells] -= q
            removed += float(np.sum(q)) * dt
        t += net * dt / self.capacity
        self.heat_removed += removed
        self.generated[:] = 0.0
        return removed

    def thermal_energy(self) -> float:
        """Sum of C*T over all nodes (J)."""
        return float(np.sum(self.capacity * self.temps))

    def hotspot(self, group: ClosedGroupInfo) -> float:
        return float(np.max(self.temps[group.cell_lo:group.cell_hi]))

    def state_arrays(self) -> dict:
        return {"temps": self.temps, "heat_removed": np.array([self.heat_removed])}

    def load_state_arrays(self, arrays: dict):
        self.temps[:] = arrays["temps"]
        self.heat_removed = float(arrays["heat_removed"][0])
