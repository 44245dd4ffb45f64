"""Road network, fastest-path routing, travel-time tables and zoning."""
from __future__ import annotations

import csv
import heapq
import itertools
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from . import milp

LOG = logging.getLogger(__name__)

# fallback when a network file has no edge lengths
DEFAULT_SPEED_MPS = 10.0


class Unreachable(Exception):
    """No path exists between two nodes."""


class Infeasible(Exception):
    """A covering or zoning problem has no solution."""


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    travel_time: float
    length: float
    label: str = ""


class Network:
    """Directed graph with static edge travel times and a set of access nodes.

    Parallel edges between the same node pair are collapsed to the fastest one.
    """

    def __init__(self, nodes: Iterable[int], edges: Iterable[Edge | tuple],
                 access_nodes: Iterable[int] | None = None,
                 coords: dict[int, tuple[float, float]] | None = None):
        self.nodes = frozenset(nodes)
        self.coords = dict(coords or {})
        self.edges: list[Edge] = []
        self._adj: dict[int, list[Edge]] = {n: [] for n in self.nodes}
        best: dict[tuple[int, int], Edge] = {}
        for e in edges:
            if not isinstance(e, Edge):
                e = Edge(*e)
            if e.source not in self.nodes or e.target not in self.nodes:
                raise ValueError(f"edge {e.source}->{e.target} references an undeclared node")
            if not e.travel_time > 0:
                raise ValueError(f"edge {e.source}->{e.target} has non-positive travel time")
            if e.length < 0:
                raise ValueError(f"edge {e.source}->{e.target} has negative length")
            key = (e.source, e.target)
            old = best.get(key)
            if old is None or (e.travel_time, e.length) < (old.travel_time, old.length):
                best[key] = e
        for key in sorted(best):
            e = best[key]
            self.edges.append(e)
            self._adj[e.source].append(e)
        self.access_nodes = frozenset(self.nodes if access_nodes is None else access_nodes)
        if not self.access_nodes <= self.nodes:
            raise ValueError("access nodes must be a subset of nodes")
        self._edge_map = best

    def out_edges(self, node: int) -> list[Edge]:
        return self._adj[node]

    def edge(self, u: int, v: int) -> Edge:
        return self._edge_map[(u, v)]

    def with_access_nodes(self, access: Iterable[int]) -> "Network":
        return Network(self.nodes, self.edges, access, self.coords)

    def __repr__(self):
        return (f"Network({len(self.nodes)} nodes, {len(self.edges)} edges, "
                f"{len(self.access_nodes)} access nodes)")


def shortest_path_tree(net: Network, source: int):
    """Dijkstra from ``source`` with deterministic tie-breaking.

    Labels are ``(time, distance, path)`` tuples compared lexicographically, so
    among equally fast paths the shorter one wins, then the lexicographically
    smaller node sequence.  Returns ``{node: (time, distance, path)}``.
    """
    if source not in net.nodes:
        raise KeyError(source)
    labels = {source: (0.0, 0.0, (source,))}
    done = set()
    heap = [(0.0, 0.0, (source,))]
    while heap:
        t, d, path = heapq.heappop(heap)
        u = path[-1]
        if u in done:
            continue
        done.add(u)
        for e in net.out_edges(u):
            v = e.target
            if v in done:
                continue
            cand = (t + e.travel_time, d + e.length, path + (v,))
            old = labels.get(v)
            if old is None or cand < old:
                labels[v] = cand
                heapq.heappush(heap, cand)
    return labels


def fastest_path(net: Network, o: int, d: int) -> tuple[float, float, list[int]]:
    """Fastest ``o -> d`` route as ``(time_s, distance_m, node_sequence)``.

    Raises :class:`Unreachable` when ``d`` cannot be reached from ``o``.
    """
    if o not in net.nodes or d not in net.nodes:
        raise KeyError(f"unknown node in ({o}, {d})")
    if o == d:
        return 0.0, 0.0, [o]
    label = shortest_path_tree(net, o).get(d)
    if label is None:
        raise Unreachable(f"no path from {o} to {d}")
    return label[0], label[1], list(label[2])


def scale_edge_times(net: Network, factor: float) -> Network:
    if not factor > 0:
        raise ValueError("scaling factor must be positive")
    edges = [Edge(e.source, e.target, e.travel_time * factor, e.length, e.label) for e in net.edges]
    return Network(net.nodes, edges, net.access_nodes, net.coords)


class TravelTimeMatrix:
    """Precomputed fastest-path times, distances and routes between node pairs.

    ``times[o][d]`` and ``dists[o][d]`` are ``inf`` for unreachable pairs.
    """

    def __init__(self, net: Network, nodes: Iterable[int] | None = None):
        self.net = net
        self.nodes = sorted(net.nodes if nodes is None else nodes)
        node_set = set(self.nodes)
        self.times: dict[int, dict[int, float]] = {}
        self.dists: dict[int, dict[int, float]] = {}
        self._paths: dict[int, dict[int, tuple]] = {}
        for o in self.nodes:
            tree = shortest_path_tree(net, o)
            trow, drow, prow = {}, {}, {}
            for d in self.nodes:
                lab = tree.get(d)
                if lab is None:
                    trow[d] = drow[d] = math.inf
                else:
                    trow[d], drow[d] = lab[0], lab[1]
                    prow[d] = lab[2]
            self.times[o], self.dists[o] = trow, drow
            if node_set == net.nodes:
                self._paths[o] = prow
            else:
                self._paths[o] = {d: lab[2] for d, lab in tree.items()}

    def time(self, o: int, d: int) -> float:
        return self.times[o][d]

    def dist(self, o: int, d: int) -> float:
        return self.dists[o][d]

    def reachable(self, o: int, d: int) -> bool:
        return not math.isinf(self.times[o][d])

    def path(self, o: int, d: int) -> list[int]:
        try:
            return list(self._paths[o][d])
        except KeyError:
            raise Unreachable(f"no path from {o} to {d}") from None


def select_access_nodes(net: Network, boarding_rules: Callable[[Edge], bool] | None,
                        min_spacing: float, target_count: int, rng: random.Random,
                        distance: Callable[[int, int], float] | None = None) -> set[int]:
    """Thin out candidate boarding nodes until ``target_count`` remain.

    A node is a candidate when every adjacent edge satisfies ``boarding_rules``.
    Nodes whose nearest surviving access node lies closer than ``min_spacing``
    are removed uniformly at random; if that alone cannot reach the target,
    removal continues uniformly at random over all survivors.  ``distance``
    defaults to Euclidean distance on node coordinates.
    """
    adjacent: dict[int, list[Edge]] = {n: [] for n in net.nodes}
    for e in net.edges:
        adjacent[e.source].append(e)
        adjacent[e.target].append(e)
    if boarding_rules is None:
        candidates = set(net.nodes)
    else:
        candidates = {n for n in net.nodes if adjacent[n] and all(boarding_rules(e) for e in adjacent[n])}
    if target_count > len(candidates):
        raise ValueError(f"target_count {target_count} exceeds {len(candidates)} candidates")
    if distance is None:
        def distance(a, b):
            (xa, ya), (xb, yb) = net.coords[a], net.coords[b]
            return math.hypot(xa - xb, ya - yb)
    alive = sorted(candidates)
    while len(alive) > target_count:
        crowded = []
        if min_spacing > 0:
            for n in alive:
                if any(distance(n, m) < min_spacing for m in alive if m != n):
                    crowded.append(n)
        pool = crowded or alive
        alive.remove(pool[rng.randrange(len(pool))])
    return set(alive)


def reach_sets(matrix: TravelTimeMatrix, nodes: Iterable[int], reach_limit: float) -> dict[int, set[int]]:
    """For every node ``c`` the set of ``nodes`` reachable from ``c`` within ``reach_limit``."""
    nodes = sorted(nodes)
    return {c: {n for n in nodes if matrix.times[c][n] <= reach_limit + 1e-9} for c in nodes}


def select_zone_centroids(net: Network, reach_limit: float,
                          matrix: TravelTimeMatrix | None = None,
                          time_limit: float = 60.0) -> list[int]:
    """Minimum set of access nodes from which every access node is reachable within ``reach_limit``.

    Set-cover ILP: minimise the number of centroids subject to every access node
    being covered by at least one centroid.
    """
    if matrix is None:
        matrix = TravelTimeMatrix(net)
    access = sorted(net.access_nodes)
    reach = reach_sets(matrix, access, reach_limit)
    covered_by: dict[int, list[int]] = {n: [] for n in access}
    for c in access:
        for n in reach[c]:
            covered_by[n].append(c)
    model = milp.LinearModel("zone_centroids", "min")
    x = {c: model.add_var(f"x_{c}", kind=milp.BINARY) for c in access}
    model.set_objective({x[c]: 1.0 for c in access})
    for n in access:
        model.add_constr({x[c]: 1.0 for c in covered_by[n]}, milp.GE, 1.0, f"cover_{n}")
    sol = milp.solve(model, time_limit=time_limit)
    if sol.status != milp.OPTIMAL:
        raise Infeasible(f"zone centroid problem not solved: {sol.status}")
    return [c for c in access if sol.x[x[c]] > 0.5]


@dataclass
class Zone:
    zone_id: int
    centroid: int
    members: set[int] = field(default_factory=set)


def assign_nodes_to_zones(net: Network, centroids: Iterable[int],
                          matrix: TravelTimeMatrix | None = None) -> list[Zone]:
    """Partition the access nodes by closest centroid (ties to the smallest centroid id)."""
    centroids = sorted(set(centroids))
    if not centroids:
        raise ValueError("at least one centroid required")
    if matrix is None:
        matrix = TravelTimeMatrix(net)
    zones = [Zone(i, c, set()) for i, c in enumerate(centroids)]
    for n in sorted(net.access_nodes | set(centroids)):
        if n not in net.access_nodes and n not in centroids:
            continue
        best = min(range(len(centroids)), key=lambda k: (matrix.times[centroids[k]][n], centroids[k]))
        if math.isinf(matrix.times[centroids[best]][n]):
            raise Infeasible(f"node {n} unreachable from every centroid")
        zones[best].members.add(n)
    for z in zones:
        z.members.add(z.centroid)
    return zones


class ZoneSystem:
    """Zones plus node lookup and centroid-to-centroid travel costs."""

    def __init__(self, zones: list[Zone], matrix: TravelTimeMatrix):
        self.zones = sorted(zones, key=lambda z: z.zone_id)
        self.ids = [z.zone_id for z in self.zones]
        self.by_id = {z.zone_id: z for z in self.zones}
        self.node_zone: dict[int, int] = {}
        for z in self.zones:
            for n in z.members:
                self.node_zone[n] = z.zone_id
        self.members = {z.zone_id: sorted(z.members) for z in self.zones}
        self.centroid = {z.zone_id: z.centroid for z in self.zones}
        self.cost = {o: {d: matrix.times[self.centroid[o]][self.centroid[d]] for d in self.ids}
                     for o in self.ids}
        self._matrix = matrix

    def __len__(self):
        return len(self.zones)

    def zone_of(self, node: int) -> int:
        z = self.node_zone.get(node)
        if z is None:
            # non-access nodes belong to the zone of the closest centroid
            z = min(self.ids, key=lambda k: (self._matrix.times[self.centroid[k]][node], k))
            self.node_zone[node] = z
        return z


def build_zones(net: Network, reach_limit: float, matrix: TravelTimeMatrix | None = None) -> list[Zone]:
    matrix = matrix or TravelTimeMatrix(net)
    return assign_nodes_to_zones(net, select_zone_centroids(net, reach_limit, matrix), matrix)


# ---------------------------------------------------------------- synthetic networks

def grid_network(rows: int, cols: int, edge_time: float = 60.0, edge_length: float = 500.0) -> Network:
    """Bidirectional ``rows x cols`` grid; node id ``r * cols + c``, all nodes are access nodes."""
    nodes = range(rows * cols)
    coords = {r * cols + c: (c * edge_length, r * edge_length) for r in range(rows) for c in range(cols)}
    edges = []
    for r, c in itertools.product(range(rows), range(cols)):
        n = r * cols + c
        if c + 1 < cols:
            edges += [Edge(n, n + 1, edge_time, edge_length), Edge(n + 1, n, edge_time, edge_length)]
        if r + 1 < rows:
            edges += [Edge(n, n + cols, edge_time, edge_length), Edge(n + cols, n, edge_time, edge_length)]
    return Network(nodes, edges, None, coords)


# ---------------------------------------------------------------- file formats

def load_network(directory) -> Network:
    """Read ``nodes.csv`` (node_id, is_access, x, y) and ``edges.csv`` (from, to, travel_time_s, length_m)."""
    directory = Path(directory)
    nodes, access, coords = [], [], {}
    with open(directory / "nodes.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            n = int(row["node_id"])
            nodes.append(n)
            if int(row.get("is_access") or 0):
                access.append(n)
            if row.get("x") not in (None, "") and row.get("y") not in (None, ""):
                coords[n] = (float(row["x"]), float(row["y"]))
    edges = []
    with open(directory / "edges.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            tt = float(row["travel_time_s"])
            length = row.get("length_m")
            length = float(length) if length not in (None, "") else tt * DEFAULT_SPEED_MPS
            edges.append(Edge(int(row["from"]), int(row["to"]), tt, length))
    return Network(nodes, edges, access, coords)


def write_network(net: Network, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "is_access", "x", "y"])
        for n in sorted(net.nodes):
            x, y = net.coords.get(n, ("", ""))
            w.writerow([n, int(n in net.access_nodes), x, y])
    with open(directory / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "travel_time_s", "length_m"])
        for e in net.edges:
            w.writerow([e.source, e.target, e.travel_time, e.length])


def write_zones(zones: list[Zone], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "zone_id", "is_centroid"])
        rows = sorted((n, z.zone_id, int(n == z.centroid)) for z in zones for n in z.members)
        w.writerows(rows)


def load_zones(path) -> list[Zone]:
    zones: dict[int, Zone] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            n, zid = int(row["node_id"]), int(row["zone_id"])
            z = zones.setdefault(zid, Zone(zid, -1, set()))
            z.members.add(n)
            if int(row["is_centroid"]):
                z.centroid = n
    for z in zones.values():
        if z.centroid < 0:
            raise ValueError(f"zone {z.zone_id} has no centroid")
    return [zones[k] for k in sorted(zones)]
