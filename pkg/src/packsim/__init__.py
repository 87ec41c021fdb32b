"""Cell-resolved digital twin of grid-scale battery systems."""

from .cell_model import (CellParams, CellState, ElectrodeParams, OcvTables,
                         SaturationError, arrhenius, diffusion_step,
                         heat_generation, overpotential,
                         surface_flux_from_current, terminal_voltage,
                         total_lithium)
from .degradation import (DegradationState, EndOfLifeEvent, SeiParams,
                          StressParams, apply_sei, crack_lam, particle_stresses,
                          pore_clogging, sei_current, total_dc_resistance)
from .pack_topology import (Cell, Group, Pack, PiState, SolverError,
                            TopologyError, build_tree, current_of,
                            solve_parallel_currents, step_series,
                            terminal_voltage_of)
from .thermal_network import (Environment, ThermalNetwork, ThermalNode,
                              exchange_step)
from .ancillary import (AcParams, ConverterParams, FanParams, ac_power,
                        converter_losses, fan_convection, fan_power)
from .thermal_control import ControlStrategy, Latch, ac_command, fan_command
from .variability import VariationSpec, sample_factors, sample_population
from .cellbank import CellBank
from .sim_engine import (Engine, MetricsLog, ParamSet, ProtocolStep, Scenario,
                         cccv_charge, measure_capacity, run, weekly_balance)

__version__ = "0.1.0"
