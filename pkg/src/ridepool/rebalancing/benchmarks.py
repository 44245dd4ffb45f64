"""Comparison repositioning strategies: reactive, queueing-based flow balancing and horizon-based."""
from __future__ import annotations

import logging
import time

import numpy as np
from scipy.optimize import linear_sum_assignment

from .. import milp
from ..demand import ForecastMatrix
from ..network import TravelTimeMatrix, ZoneSystem
from ..scheduling import VehicleState
from .base import RebalanceCommand, Rebalancer, RebalancingContext, closest_vehicle

LOG = logging.getLogger(__name__)


# ---------------------------------------------------------------- React

def react_rebalance(locations: list[int], idle: list[VehicleState], matrix: TravelTimeMatrix,
                    zones: ZoneSystem | None = None, now: float = 0.0):
    """Min-total-travel-time matching of idle vehicles to tracked unserved origins.

    Returns ``(commands, matched_location_indices)``.
    """
    if not locations or not idle:
        return [], set()
    idle = sorted(idle, key=lambda v: v.vid)
    cost = np.array([[matrix.times[v.node][n] for n in locations] for v in idle], dtype=float)
    big = 1e12
    cost[~np.isfinite(cost)] = big
    rows, cols = linear_sum_assignment(cost)
    commands, matched = [], set()
    for r, c in zip(rows, cols):
        if cost[r, c] >= big:
            continue
        target = locations[c]
        zone = zones.zone_of(target) if zones is not None else -1
        matched.add(int(c))
        if idle[r].node == target:
            continue
        commands.append(RebalanceCommand(idle[r].vid, target, zone, now))
    return commands, matched


class ReactRebalancer(Rebalancer):
    name = "react"

    def __init__(self, memory_periods: int = 1):
        super().__init__()
        self.memory_periods = memory_periods
        self.tracked: list[tuple[int, int]] = []  # (node, periods survived)

    def rebalance(self, ctx: RebalancingContext) -> list[RebalanceCommand]:
        start = time.perf_counter()
        self.tracked.extend((n, 0) for n in ctx.rejected_nodes)
        nodes = [n for n, _ in self.tracked]
        commands, matched = react_rebalance(nodes, ctx.idle_vehicles(), ctx.matrix, ctx.zones, ctx.now)
        self.tracked = [(n, age + 1) for k, (n, age) in enumerate(self.tracked)
                        if k not in matched and age < self.memory_periods]
        self.call_times.append(time.perf_counter() - start)
        return commands


# ---------------------------------------------------------------- QT

def _assign_zone_flows(flows: dict[tuple[int, int], int], idle_by_zone: dict[int, list[VehicleState]],
                       zones: ZoneSystem, matrix: TravelTimeMatrix, now: float,
                       rng: np.random.Generator | None) -> list[RebalanceCommand]:
    commands = []
    for o in sorted(idle_by_zone):
        units = []
        for (oo, d), n in sorted(flows.items()):
            if oo == o and d != o:
                units.extend([d] * n)
        if rng is not None and len(units) > 1:
            units = [units[k] for k in rng.permutation(len(units))]
        taken: set[int] = set()
        for d in units:
            target = zones.centroid[d]
            veh = closest_vehicle(idle_by_zone[o], target, matrix, taken)
            if veh is None:
                break  # no idle vehicle left in this zone
            taken.add(veh.vid)
            commands.append(RebalanceCommand(veh.vid, target, d, now))
    return commands


def qt_flows(lam: dict[tuple[int, int], float], idle: dict[int, int], costs, zone_ids: list[int],
             mu: float = 0.7) -> dict[tuple[int, int], float] | None:
    """Continuous flow balancing LP; ``None`` when it has no solution.

    Net rebalancing outflow of zone o is set to
    ``-mu * (expected trips leaving o - trips entering o) + I_o - mean(I)``.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    model = milp.LinearModel("qt", "min")
    beta = {}
    for o in zone_ids:
        for d in zone_ids:
            if o != d:
                beta[(o, d)] = model.add_var(f"beta_{o}_{d}")
    model.set_objective({j: costs[o][d] for (o, d), j in beta.items()})
    mean_idle = sum(idle.get(z, 0) for z in zone_ids) / len(zone_ids)
    for o in zone_ids:
        row = {}
        for d in zone_ids:
            if d == o:
                continue
            row[beta[(o, d)]] = row.get(beta[(o, d)], 0.0) + 1.0
            row[beta[(d, o)]] = row.get(beta[(d, o)], 0.0) - 1.0
        demand = sum(lam.get((o, d), 0.0) - lam.get((d, o), 0.0) for d in zone_ids if d != o)
        rhs = -mu * demand + idle.get(o, 0) - mean_idle
        if row:
            model.add_constr(row, milp.EQ, rhs, f"flow_{o}")
    sol = milp.solve_relaxation(model)
    if not sol.ok:
        LOG.warning("QT balancing LP not solved (%s)", sol.status)
        return None
    return {k: sol.x[j] for k, j in beta.items()}


def qt_rebalance(fc: ForecastMatrix, idle_by_zone: dict[int, list[VehicleState]], zones: ZoneSystem,
                 matrix: TravelTimeMatrix, now: float, mu: float = 0.7, horizon: float = 2700.0,
                 rng: np.random.Generator | None = None) -> list[RebalanceCommand]:
    lam = fc.od_totals(now, now + horizon) if fc is not None else {}
    idle = {z: len(v) for z, v in idle_by_zone.items()}
    flows = qt_flows(lam, idle, zones.cost, list(zones.ids), mu)
    if flows is None:
        return []
    rounded = {k: int(np.floor(v + 0.5)) for k, v in flows.items()}
    return _assign_zone_flows({k: n for k, n in rounded.items() if n > 0}, idle_by_zone,
                              zones, matrix, now, rng)


class QTRebalancer(Rebalancer):
    name = "qt"
    needs_forecast = True

    def __init__(self, mu: float = 0.7, horizon: float = 2700.0):
        super().__init__()
        self.mu = mu
        self.horizon = horizon

    def rebalance(self, ctx):
        start = time.perf_counter()
        out = qt_rebalance(ctx.forecast, ctx.idle_by_zone(), ctx.zones, ctx.matrix, ctx.now,
                           self.mu, self.horizon, ctx.rng)
        self.call_times.append(time.perf_counter() - start)
        return out


# ---------------------------------------------------------------- Hor

def hor_flows(lam: dict[tuple[int, int], float], idle: dict[int, int], costs, zone_ids: list[int],
              mu: float = 0.1, horizon: float = 1800.0, maximize: bool = True,
              weight: str = "zone", time_limit: float = 30.0) -> dict[tuple[int, int], int]:
    """Integer horizon-based flows, including stay-put flows ``(o, o)``.

    :param weight: ``"zone"`` weights a flow by the demand originating in its
        destination zone, ``"od"`` by the demand of the pair itself.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    lam_zone = {z: sum(lam.get((z, j), 0.0) for j in zone_ids) for z in zone_ids}
    model = milp.LinearModel("hor", "max" if maximize else "min")
    beta = {}
    obj = {}
    for o in zone_ids:
        if idle.get(o, 0) <= 0:
            continue
        for d in zone_ids:
            tau = costs[o][d]
            if tau > horizon:
                continue  # cannot arrive within the horizon
            j = model.add_var(f"beta_{o}_{d}", 0, idle[o], milp.INTEGER)
            beta[(o, d)] = j
            w = lam_zone[d] if weight == "zone" else lam.get((o, d), 0.0)
            obj[j] = (horizon - tau) * w
    model.set_objective(obj)
    for o in zone_ids:
        row = {j: 1.0 for (oo, d), j in beta.items() if oo == o}
        if row:
            model.add_constr(row, milp.LE, idle.get(o, 0), f"idle_{o}")
    for d in zone_ids:
        row = {j: 1.0 - costs[o][dd] / horizon for (o, dd), j in beta.items() if dd == d}
        if row:
            model.add_constr(row, milp.LE, lam_zone[d] * mu, f"cap_{d}")
    if not beta:
        return {}
    sol = milp.solve(model, time_limit=time_limit)
    if not sol.ok:
        LOG.warning("Hor ILP not solved (%s)", sol.status)
        return {}
    return {k: int(round(sol.x[j])) for k, j in beta.items() if sol.x[j] > 0.5}


def hor_rebalance(fc: ForecastMatrix, idle_by_zone: dict[int, list[VehicleState]], zones: ZoneSystem,
                  matrix: TravelTimeMatrix, now: float, mu: float = 0.1, horizon: float = 1800.0,
                  maximize: bool = True, weight: str = "zone") -> list[RebalanceCommand]:
    lam = fc.od_totals(now, now + horizon) if fc is not None else {}
    idle = {z: len(v) for z, v in idle_by_zone.items()}
    flows = hor_flows(lam, idle, zones.cost, list(zones.ids), mu, horizon, maximize, weight)
    return _assign_zone_flows(flows, idle_by_zone, zones, matrix, now, None)


class HorRebalancer(Rebalancer):
    name = "hor"
    needs_forecast = True

    def __init__(self, mu: float = 0.1, horizon: float = 1800.0, maximize: bool = True,
                 weight: str = "zone"):
        super().__init__()
        if weight not in ("zone", "od"):
            raise ValueError("weight must be 'zone' or 'od'")
        self.mu = mu
        self.horizon = horizon
        self.maximize = maximize
        self.weight = weight

    def rebalance(self, ctx):
        start = time.perf_counter()
        out = hor_rebalance(ctx.forecast, ctx.idle_by_zone(), ctx.zones, ctx.matrix, ctx.now,
                            self.mu, self.horizon, self.maximize, self.weight)
        self.call_times.append(time.perf_counter() - start)
        return out
