"""Circuit simulator for power-electronic converters.

Transient analysis with implicit integration and fast periodic steady state
by shooting on the state variables over one switching period.
"""

from .errors import (ConvergenceError, ElementError, NetlistError, SimError,
                     SingularMatrixError, SSWError)
from .mna import assemble, build_layout
from .netlist import flatten, parse_netlist, unparse, validate
from .solver import NewtonSettings, newton_solve, startup_solve, transient
from .ssw import period_map, ssw_solve

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "ElementError", "NetlistError", "SimError",
    "SingularMatrixError", "SSWError", "assemble", "build_layout", "flatten",
    "parse_netlist", "unparse", "validate", "NewtonSettings", "newton_solve",
    "startup_solve", "transient", "period_map", "ssw_solve",
]
