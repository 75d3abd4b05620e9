"""Trilevel commuter driving-and-charging optimisation suite.

Layers, bottom to top:

* commuters reach a Wardrop equilibrium over driving routes, park-and-ride
  hubs and charging options (``transport``, ``equilibrium``);
* the charging operator prices hub charging from a water-filling scheduler
  (``charging``) and maximises revenue minus supply-contract costs;
* the network operator sets the supply-contract power threshold against its
  distribution-grid costs (``powerflow``, ``operators``), solved by an
  iterative bounding loop with simulated annealing (``trilevel``).

``baselines`` implements the single-operator grid-LMP iteration used for
comparison, and ``scenario`` wires bundled data, sweeps and file outputs.
"""

from .charging import HubChargingCase, ChargingProfile, qp_oracle
from .equilibrium import (
    FlowAssignment,
    EquilibriumResult,
    PathSystem,
    solve_wardrop,
    wardrop_gap,
    uniqueness_probe,
)
from .transport import (
    Arc,
    Hub,
    VehicleClass,
    GlobalPath,
    TransportScenario,
    ChargingDecision,
    enumerate_paths,
)

__version__ = "0.1.0"
