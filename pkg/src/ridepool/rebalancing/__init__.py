"""Repositioning strategies for idle vehicles."""
from .base import RebalanceCommand, Rebalancer, RebalancingContext, closest_vehicle
from .benchmarks import (
    HorRebalancer, QTRebalancer, ReactRebalancer, hor_flows, hor_rebalance, qt_flows, qt_rebalance,
    react_rebalance,
)
from .sampling import (
    FutureStates, RebalancingProblem, RebalancingSolution, SampledTour, SamplingRebalancer,
    build_and_solve_rebalancing, build_rebalancing_model, dispatch_rebalancing,
    simulate_future_states, simulate_sample,
)

STRATEGIES = ("none", "react", "qt", "hor", "sampling")


def make_rebalancer(name: str, **params) -> Rebalancer:
    """Build a strategy by name; unknown parameters raise ``TypeError``."""
    if name == "none":
        return Rebalancer()
    if name == "react":
        return ReactRebalancer(**params)
    if name == "qt":
        return QTRebalancer(**params)
    if name == "hor":
        return HorRebalancer(**params)
    if name == "sampling":
        return SamplingRebalancer(**params)
    raise ValueError(f"unknown rebalancer {name!r}; choose from {', '.join(STRATEGIES)}")
