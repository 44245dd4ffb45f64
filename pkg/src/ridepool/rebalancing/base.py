from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..demand import ForecastMatrix, Request
from ..network import TravelTimeMatrix, ZoneSystem
from ..scheduling import ServiceConstraints, VehicleState


@dataclass(frozen=True)
class RebalanceCommand:
    vehicle_id: int
    target_node: int
    target_zone: int
    issued_at: float


@dataclass
class RebalancingContext:
    """Everything a strategy may look at when it is invoked."""

    now: float
    vehicles: list[VehicleState]
    matrix: TravelTimeMatrix
    zones: ZoneSystem
    cons: ServiceConstraints
    pi: float
    period: float
    requests: Mapping[int, Request]
    rng: np.random.Generator
    forecast: ForecastMatrix | None = None
    rejected_nodes: list[int] = field(default_factory=list)

    def idle_vehicles(self) -> list[VehicleState]:
        return [v for v in self.vehicles if v.is_idle]

    def idle_by_zone(self) -> dict[int, list[VehicleState]]:
        out = {z: [] for z in self.zones.ids}
        for v in self.idle_vehicles():
            out[self.zones.zone_of(v.node)].append(v)
        return out


class Rebalancer:
    """Strategy interface; ``rebalance`` is called every rebalancing period."""

    name = "none"
    needs_forecast = False

    def __init__(self):
        self.call_times: list[float] = []

    def rebalance(self, ctx: RebalancingContext) -> list[RebalanceCommand]:
        return []


def closest_vehicle(candidates: list[VehicleState], target: int, matrix: TravelTimeMatrix,
                    taken: set[int]) -> VehicleState | None:
    best = None
    for v in candidates:
        if v.vid in taken:
            continue
        key = (matrix.times[v.node][target], v.vid)
        if best is None or key < best[0]:
            best = (key, v)
    return None if best is None else best[1]
