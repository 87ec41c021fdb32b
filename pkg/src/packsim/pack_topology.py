"""Series/parallel composition of cells with contact resistances.

A pack is a recursive tree of units.  Parallel groups impose a Kirchhoff
constraint: every child's terminal-path voltage, including the cumulative
drops over the chain of contact resistances ahead of it, must match (the
group terminals sit before the first child).  A per-child
proportional-integral controller nudges the current split toward that
constraint; corrections are projected to zero sum so charge is conserved
exactly at every iteration.  Series groups carry one current through every
child.

For speed the tree is compiled into bottom-up levels operating on flat
arrays: all groups of one depth update in a handful of vectorised
operations, so solver cost scales with tree depth rather than group count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cellbank import CellBank


class SolverError(RuntimeError):
    """Current-split iteration failed to converge."""

    def __init__(self, residual: float, limit: int):
        self.residual = residual
        super().__init__(f"parallel current split not converged after {limit} "
                         f"iterations (worst relative residual {residual:.3e})")


class TopologyError(ValueError):
    pass


@dataclass
class PiState:
    """Controller state of one parallel group (arrays over children)."""

    integral_error: np.ndarray
    k_p: np.ndarray          # A/V per child
    k_i: np.ndarray          # A/(V s) per child
    tolerance: float


@dataclass
class Cell:
    """Leaf unit; ``index`` is the row in the cell bank."""

    index: int = -1
    thermal_node_id: int = -1


@dataclass
class Group:
    """Series or parallel composition of child units."""

    kind: str
    children: list
    contact_r: list
    closed: bool = False
    thermal_node_id: int = -1
    pi: PiState | None = None
    cell_range: tuple = (0, 0)

    def __post_init__(self):
        if self.kind not in ("series", "parallel"):
            raise TopologyError(f"unknown group kind {self.kind!r}")
        if not self.children:
            raise TopologyError("group must have children")
        if len(self.contact_r) != len(self.children):
            raise TopologyError("one contact resistance per child required")
        if any(r < 0 for r in self.contact_r):
            raise TopologyError("contact resistances must be non-negative")


def build_tree(spec: dict):
    """Build a unit tree from a nested topology description.

    Spec nodes: ``{kind: cell}`` or ``{kind: series|parallel, count: k,
    contact_r_ohm: r, thermal: open|closed, child: {...}}``.
    """
    kind = spec.get("kind", "cell")
    if kind == "cell":
        return Cell()
    count = int(spec["count"])
    if count < 1:
        raise TopologyError("group count must be at least 1")
    r = float(spec.get("contact_r_ohm", 0.0))
    children = [build_tree(spec["child"]) for _ in range(count)]
    return Group(kind=kind, children=children, contact_r=[r] * count,
                 closed=spec.get("thermal", "open") == "closed")


def assign_cell_indices(root) -> int:
    """Depth-first cell numbering; returns the cell count."""
    counter = [0]

    def visit(unit):
        if isinstance(unit, Cell):
            unit.index = counter[0]
            counter[0] += 1
            return
        lo = counter[0]
        for child in unit.children:
            visit(child)
        unit.cell_range = (lo, counter[0])

    visit(root)
    return counter[0]


def iter_cells(unit):
    if isinstance(unit, Cell):
        yield unit
        return
    for child in unit.children:
        yield from iter_cells(child)


def _normalise(unit):
    """Wrap bare cells so every leaf sits in a parallel slot of its own."""
    if isinstance(unit, Cell):
        return Group(kind="parallel", children=[unit], contact_r=[0.0],
                     cell_range=(unit.index, unit.index + 1))
    unit.children = [
        Group(kind="parallel", children=[c], contact_r=[0.0],
              cell_range=(c.index, c.index + 1))
        if isinstance(c, Cell) else _normalise(c)
        for c in unit.children
    ]
    return unit


@dataclass
class _Level:
    kind: str
    groups: list                      # source Group objects, DFS order
    starts: np.ndarray                # (G+1,) boundaries into child units
    widths: np.ndarray                # (G,)
    contact_r: np.ndarray             # (n_children,)
    contact_sum: np.ndarray           # (G,)
    child_group: np.ndarray           # (n_children,) owning group index
    child_end: np.ndarray             # (n_children,) index past own group
    child_start: np.ndarray           # (n_children,) first child of own group
    has_contact: bool
    err_scale: np.ndarray | None = None   # parallel: k/(k-1), 0 for singletons
    currents: np.ndarray | None = None    # parallel: per-child currents
    integral: np.ndarray | None = None    # parallel: PI integral per child
    k_p: np.ndarray | None = None
    k_i: np.ndarray | None = None

    def thermal_nodes(self):
        return np.array([g.thermal_node_id for g in self.groups])


class Pack:
    """Compiled electrical pack over a cell bank.

    The root carries the externally imposed current; :meth:`solve` finds the
    split for a prepared bank step, :meth:`commit` advances the bank and
    books contact losses.
    """

    def __init__(self, root, bank: CellBank, tolerance: float = 1e-4,
                 gain_p: float = 0.6, gain_i: float = 0.05, max_iter: int = 50):
        if isinstance(root, Cell):
            root = Group(kind="parallel", children=[root], contact_r=[0.0],
                         cell_range=(0, 1))
        self.root = root
        self.bank = bank
        self.tolerance = float(tolerance)
        self.gain_p = float(gain_p)
        self.gain_i = float(gain_i)
        self.max_iter = int(max_iter)
        self._compile(_normalise(root))
        self.i_total = 0.0
        self.v_terminal = 0.0
        self.last_residual = 0.0
        self.last_iterations = 0

    def _compile(self, root):
        by_depth: dict[int, list] = {}

        def visit(g, depth):
            by_depth.setdefault(depth, []).append(g)
            for c in g.children:
                if isinstance(c, Group):
                    visit(c, depth + 1)

        visit(root, 0)
        self.levels: list[_Level] = []
        for d in sorted(by_depth, reverse=True):   # deepest (cell slots) first
            groups = by_depth[d]
            kinds = {g.kind for g in groups}
            if len(kinds) > 1:
                raise TopologyError(
                    "groups at one tree depth must share a kind; wrap odd "
                    "branches in single-child groups")
            widths = np.array([len(g.children) for g in groups])
            starts = np.concatenate([[0], np.cumsum(widths)])
            contact = np.concatenate([np.asarray(g.contact_r, dtype=float)
                                      for g in groups])
            child_group = np.repeat(np.arange(len(groups)), widths)
            lvl = _Level(
                kind=groups[0].kind, groups=groups, starts=starts,
                widths=widths, contact_r=contact,
                contact_sum=np.add.reduceat(contact, starts[:-1]),
                child_group=child_group,
                child_end=np.repeat(starts[1:], widths),
                child_start=np.repeat(starts[:-1], widths),
                has_contact=bool(np.any(contact > 0.0)))
            if lvl.kind == "parallel":
                w = widths.astype(float)
                scale = np.where(w > 1, w / np.maximum(w - 1.0, 1.0), 0.0)
                lvl.err_scale = scale[child_group]
                lvl.currents = np.zeros(int(starts[-1]))
                lvl.integral = np.zeros(int(starts[-1]))
            self.levels.append(lvl)

        n_units = self.bank.n
        for lvl in self.levels:
            if int(lvl.starts[-1]) != n_units:
                raise TopologyError("leaf depths must be uniform across the tree")
            n_units = len(lvl.groups)
        if n_units != 1:
            raise TopologyError("tree must have a single root")
        self.i_cell = np.zeros(self.bank.n)

    # -- segmented array helpers ---------------------------------------------

    @staticmethod
    def _seg_sum(x, lvl):
        return np.add.reduceat(x, lvl.starts[:-1])

    @staticmethod
    def _suffix(x, lvl):
        rev = np.concatenate([np.cumsum(x[::-1])[::-1], [0.0]])
        return rev[:len(x)] - rev[lvl.child_end]

    @staticmethod
    def _seg_cumsum(d, lvl):
        cum = np.cumsum(d)
        before = np.concatenate([[0.0], cum])[lvl.child_start]
        return cum - before

    # -- gain scheduling -------------------------------------------------------

    def _refresh_gains(self):
        # normalise the voltage-error gains by each child's differential
        # resistance so one dimensionless tuning spans cell and rack groups
        r = self.bank.differential_resistance()
        for lvl in self.levels:
            r_child = np.maximum(r + lvl.contact_r, 1e-9)
            if lvl.kind == "parallel":
                lvl.k_p = self.gain_p / r_child
                lvl.k_i = self.gain_i * lvl.k_p
                r = 1.0 / self._seg_sum(1.0 / r_child, lvl)
            else:
                r = self._seg_sum(r_child, lvl)

    # -- current distribution ---------------------------------------------------

    def _push_down(self, i_root: float):
        current = np.array([float(i_root)])
        for lvl in reversed(self.levels):
            if lvl.kind == "series":
                current = current[lvl.child_group]
            else:
                shift = (current - self._seg_sum(lvl.currents, lvl)) / lvl.widths
                lvl.currents = lvl.currents + shift[lvl.child_group]
                current = lvl.currents
        self.i_cell = current

    def _evaluate(self, v_cells):
        """Aggregate voltages bottom-up; returns root voltage + path info."""
        v = v_cells
        current = self.i_cell
        info = []
        for lvl in self.levels:
            if lvl.kind == "series":
                i_group = current[lvl.starts[:-1]]
                v = self._seg_sum(v, lvl) - lvl.contact_sum * i_group
                info.append(None)
                current = i_group
            else:
                if lvl.has_contact:
                    suffix = self._suffix(current, lvl)
                    drops = self._seg_cumsum(lvl.contact_r * suffix, lvl)
                    path = v - drops
                else:
                    path = v.copy()
                mean = self._seg_sum(path, lvl) / lvl.widths
                dev = path - mean[lvl.child_group]
                # contract tolerance is on the worst pairwise spread
                spread = (np.maximum.reduceat(path, lvl.starts[:-1])
                          - np.minimum.reduceat(path, lvl.starts[:-1]))
                denom = max(float(np.max(np.abs(mean))), 0.1)
                info.append({"dev": dev, "path": path,
                             "currents": lvl.currents.copy(),
                             "resid": float(np.max(spread)) / denom})
                v = mean
                current = self._seg_sum(current, lvl)
        return float(v[0]), info

    def _pi_update(self, info, dt, damp: float = 1.0):
        for lvl, data in zip(self.levels, info):
            if data is None or lvl.err_scale is None:
                continue
            err = data["dev"] * lvl.err_scale
            lvl.integral = lvl.integral + err * dt
            delta = damp * (lvl.k_p * err + lvl.k_i * lvl.integral)
            delta = delta - (self._seg_sum(delta, lvl) / lvl.widths)[lvl.child_group]
            lvl.currents = lvl.currents + delta

    # -- solve/commit ------------------------------------------------------------

    def solve(self, i_total: float, dt: float):
        """Find the current split for the prepared bank step.

        Leaves the bank uncommitted so callers may re-solve at another total
        current (constant-voltage regulation does).  Returns trial cell
        voltages at the solved split.
        """
        self._refresh_gains()
        self._push_down(i_total)
        self.i_total = float(i_total)
        for lvl in self.levels:
            if lvl.integral is not None:
                lvl.integral[:] = 0.0   # per-step accumulator; currents carry
                                        # the warm start across steps
        residual = np.inf
        best = np.inf
        damp = 1.0
        stalled = 0
        prev_info = None
        for it in range(self.max_iter + 1):
            v_cells = self.bank.trial_voltage(self.i_cell)
            v_root, info = self._evaluate(v_cells)
            residual = max((d["resid"] for d in info if d), default=0.0)
            if residual <= self.tolerance:
                self.v_terminal = float(v_root)
                self.last_residual = residual
                self.last_iterations = it
                return v_cells
            if it == self.max_iter:
                break
            if residual < best:
                best = residual
                stalled = 0
            else:
                stalled += 1
                if stalled >= 4:   # oscillating, not crawling: brake
                    damp *= 0.5
                    stalled = 0
            self._measure_slopes(info, prev_info)
            self._pi_update(info, dt, damp)
            self._push_down(i_total)
            prev_info = info
        raise SolverError(residual, self.max_iter)

    def _measure_slopes(self, info, prev_info):
        """Lower per-child gains where the measured dV/dI beats the estimate.

        Near the steep ends of the open-circuit tables the scheduled gains
        overshoot; a secant slope from the previous iterate restores the
        gain margin.
        """
        if prev_info is None:
            return
        for lvl, data, prev in zip(self.levels, info, prev_info):
            if data is None or lvl.err_scale is None:
                continue
            d_i = data["currents"] - prev["currents"]
            d_p = data["path"] - prev["path"]
            # only children that moved appreciably carry their own slope;
            # the rest would alias their siblings' mean-field shift
            thr = 0.25 * np.max(np.abs(d_i)) if len(d_i) else 0.0
            ok = np.abs(d_i) > max(thr, 1e-9)
            slope = np.zeros_like(d_i)
            slope[ok] = np.abs(d_p[ok] / d_i[ok])
            k_meas = np.where(ok & (slope > 1e-12),
                              self.gain_p / np.maximum(slope, 1e-12), np.inf)
            lvl.k_p = np.minimum(lvl.k_p, k_meas)
            lvl.k_i = self.gain_i * lvl.k_p

    def commit(self):
        """Advance the bank at the solved split; book contact losses.

        Adds ``contact_power`` (W, total) and ``contact_node_heat``
        (node-id array, watt array) to the bank's step aggregates.
        """
        result = self.bank.commit_step(self.i_cell)
        total = 0.0
        node_ids = []
        node_watts = []
        current = self.i_cell
        for lvl in self.levels:
            if lvl.kind == "series":
                i_group = current[lvl.starts[:-1]]
                if lvl.has_contact:
                    power = lvl.contact_sum * i_group ** 2
                current = i_group
            else:
                if lvl.has_contact:
                    suffix = self._suffix(current, lvl)
                    power = self._seg_sum(lvl.contact_r * suffix ** 2, lvl)
                current = self._seg_sum(current, lvl)
            if lvl.has_contact:
                total += float(power.sum())
                node_ids.append(lvl.thermal_nodes())
                node_watts.append(power)
        result["contact_power"] = total
        if node_ids:
            result["contact_node_heat"] = (np.concatenate(node_ids),
                                           np.concatenate(node_watts))
        else:
            result["contact_node_heat"] = (np.array([], dtype=int), np.array([]))
        result["v_terminal"] = self.v_terminal
        return result

    # -- accessors ------------------------------------------------------------

    def terminal_voltage(self) -> float:
        return self.v_terminal

    def current(self) -> float:
        return self.i_total

    def top_level_currents(self) -> np.ndarray:
        """Currents of the root group's children."""
        lvl = self.levels[-1]
        if lvl.kind == "parallel":
            return lvl.currents.copy()
        # series root: every child carries the root current
        return np.full(int(lvl.starts[-1]), self.i_total)

    def differential_resistance(self) -> float:
        """Estimated dV/dI magnitude of the whole pack (ohm)."""
        r = self.bank.differential_resistance()
        for lvl in self.levels:
            r_child = np.maximum(r + lvl.contact_r, 1e-12)
            if lvl.kind == "series":
                r = self._seg_sum(r_child, lvl)
            else:
                r = 1.0 / self._seg_sum(1.0 / r_child, lvl)
        return float(r[0])

    def state_arrays(self) -> dict:
        out = {"i_cell": self.i_cell}
        for idx, lvl in enumerate(self.levels):
            if lvl.kind == "parallel":
                out[f"lvl{idx}_currents"] = lvl.currents
                out[f"lvl{idx}_integral"] = lvl.integral
        return out

    def load_state_arrays(self, arrays: dict):
        self.i_cell = np.array(arrays["i_cell"])
        for idx, lvl in enumerate(self.levels):
            if lvl.kind == "parallel":
                lvl.currents = np.array(arrays[f"lvl{idx}_currents"])
                lvl.integral = np.array(arrays[f"lvl{idx}_integral"])


# -- operation surfaces --------------------------------------------------------

def solve_parallel_currents(pack: Pack, i_total: float, dt: float) -> np.ndarray:
    """Advance a parallel pack one step; return the root children's currents.

    Child currents sum to ``i_total`` exactly; terminal-path voltages agree
    within the pack tolerance.
    """
    if pack.root.kind != "parallel":
        raise TopologyError("root group is not parallel")
    pack.bank.begin_step(dt)
    pack.solve(i_total, dt)
    pack.commit()
    return pack.top_level_currents()


def step_series(pack: Pack, i_total: float, dt: float) -> float:
    """Advance a series pack one step at a common current; returns voltage."""
    if pack.root.kind != "series":
        raise TopologyError("root group is not series")
    pack.bank.begin_step(dt)
    pack.solve(i_total, dt)
    pack.commit()
    return pack.terminal_voltage()


def terminal_voltage_of(pack: Pack) -> float:
    return pack.terminal_voltage()


def current_of(pack: Pack) -> float:
    return pack.current()
