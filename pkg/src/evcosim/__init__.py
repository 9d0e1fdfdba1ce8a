"""Co-simulation of coupled power and transportation networks under EV charging.

Units: time in minutes, money in dollars, transport energy in kWh, power
quantities in MWh per epoch, flows in vehicles per epoch, electricity
prices in $/MWh on the power side ($/kWh at the per-arc money hook).
"""

from .assignment import (
    DemandMap,
    FlowState,
    arc_flow_to_demand,
    build_demand_map,
    compute_marginal_tolls,
    flows_to_arc_flow,
    solve_ctap,
    solve_user_equilibrium,
)
from .coordination import (
    CoordinationTrace,
    CycleReport,
    SocialOptimum,
    infeasibility_bound,
    primal_infeasibility,
    run_dual_decomposition,
    run_greedy_pricing,
    solve_social_optimum,
)
from .espp import (
    Path,
    PathSet,
    VehicleClass,
    enumerate_feasible_paths,
    is_energy_feasible,
    solve_espp,
)
from .power import (
    DispatchResult,
    Line,
    PowerNetwork,
    compute_ptdf,
    economic_dispatch,
    generator_best_response,
    validate_feasibility,
)
from .reserves import (
    DualConeSample,
    ReservePlan,
    UncertaintySample,
    deploy_reserve,
    estimate_dual_bound,
    procure_reserves,
    sample_dual_cone,
    sample_uncertainty_set,
    verify_reserve_adequacy,
)
from .scenario import Scenario, load_scenario, save_scenario
from .transport import (
    ChargingStation,
    ExtendedArc,
    ExtendedGraph,
    RoadArc,
    arc_money_cost,
    arc_time_cost,
    build_extended_graph,
)

__version__ = "0.1.0"
