"""Brute-force reference implementations used by the tests.

Nothing here imports the solver, routing, insertion or enumeration code of the
package; only plain data classes are shared.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict

EPS = 1e-6


# ---------------------------------------------------------------- routing

def floyd_warshall(nodes, arcs):
    """All-pairs fastest times; ``arcs`` is an iterable of (u, v, time)."""
    nodes = sorted(nodes)
    d = {u: {v: (0.0 if u == v else math.inf) for v in nodes} for u in nodes}
    for u, v, t in arcs:
        d[u][v] = min(d[u][v], t)
    for k in nodes:
        for i in nodes:
            dik = d[i][k]
            if dik == math.inf:
                continue
            for j in nodes:
                if dik + d[k][j] < d[i][j]:
                    d[i][j] = dik + d[k][j]
    return d


def enumerate_path_times(nodes, arcs, o, dst):
    """Fastest time over all simple paths (exhaustive DFS)."""
    adj = defaultdict(list)
    for u, v, t in arcs:
        adj[u].append((v, t))
    best = math.inf if o != dst else 0.0

    def dfs(u, t, seen):
        nonlocal best
        if u == dst:
            best = min(best, t)
            return
        for v, w in adj[u]:
            if v not in seen:
                seen.add(v)
                dfs(v, t + w, seen)
                seen.discard(v)

    dfs(o, 0.0, {o})
    return best


# ---------------------------------------------------------------- set cover

def min_cover_size(nodes, reach):
    """Smallest number of centres whose reach sets cover all nodes."""
    nodes = sorted(nodes)
    for k in range(1, len(nodes) + 1):
        for combo in itertools.combinations(nodes, k):
            covered = set()
            for c in combo:
                covered |= reach[c]
            if covered >= set(nodes):
                return k
    return None


# ---------------------------------------------------------------- schedules

def simulate_stops(seq, start_node, start_time, onboard, reqs, tt, wait, detour, cap, bd=0.0):
    """Independent feasibility check.

    ``seq`` is a list of ``(node, kind, rid)`` with kind ``"p"``/``"d"``; stops
    with equal node that follow each other are *not* merged.  Returns the time
    the last action finishes, or ``None`` when infeasible.
    """
    t = start_time
    pos = start_node
    inside = set(onboard)
    done = set()
    picked = set()
    for node, kind, rid in seq:
        t += tt[pos][node]
        pos = node
        r = reqs[rid]
        if kind == "p":
            if rid in picked or rid in inside or rid in done:
                return None
            t = max(t, r.request_time)
            if t > r.request_time + wait + EPS:
                return None
            inside.add(rid)
            picked.add(rid)
            if len(inside) > cap:
                return None
        else:
            if rid not in inside:
                return None
            if t > r.request_time + wait + (1 + detour) * r.direct_time + EPS:
                return None
            inside.discard(rid)
            done.add(rid)
        t += bd
    if inside:
        return None
    return t


def stops_to_seq(stops):
    """Flatten package stops into ``(node, kind, rid)`` actions (alight before board)."""
    seq = []
    for s in stops:
        for rid in sorted(s.alighting):
            seq.append((s.node, "d", rid))
        for rid in sorted(s.boarding):
            seq.append((s.node, "p", rid))
    return seq


def best_insertion_end(base_seq, req, start_node, start_time, onboard, reqs, tt, wait, detour, cap):
    """Minimum finishing time over all pick-up/drop-off positions in ``base_seq``."""
    n = len(base_seq)
    best = None
    for i in range(n + 1):
        for j in range(i, n + 1):
            seq = base_seq[:i] + [(req.origin, "p", req.id)] + base_seq[i:j] + \
                  [(req.destination, "d", req.id)] + base_seq[j:]
            end = simulate_stops(seq, start_node, start_time, onboard, reqs, tt, wait, detour, cap)
            if end is not None and (best is None or end < best):
                best = end
    return best


def feasible_orders(base_seq, new_reqs, start_node, start_time, onboard, reqs, tt, wait, detour, cap):
    """Every feasible ordering of base actions plus pick-up/drop-off of ``new_reqs``
    in which the base actions keep their relative order.  Yields ``(seq, end)``.

    Orders are built action by action; a branch is cut as soon as its prefix
    breaks precedence, a time window or capacity, which no completion can repair.
    """
    new_actions = []
    for r in new_reqs:
        new_actions += [(r.origin, "p", r.id), (r.destination, "d", r.id)]
    nb = len(base_seq)
    total = nb + len(new_actions)
    out = []

    def extend(seq, t, pos, inside, next_base, used):
        if len(seq) == total:
            if not inside:
                out.append((tuple(seq), t))
            return
        cands = []
        if next_base < nb:
            cands.append(("b", next_base, base_seq[next_base]))
        for k, act in enumerate(new_actions):
            if k not in used:
                cands.append(("n", k, act))
        for src, k, (node, kind, rid) in cands:
            r = reqs[rid]
            t2 = t + tt[pos][node]
            if kind == "p":
                if rid in inside:
                    continue
                t2 = max(t2, r.request_time)
                if t2 > r.request_time + wait + EPS or len(inside) + 1 > cap:
                    continue
                inside2 = inside | {rid}
            else:
                if rid not in inside:
                    continue
                if t2 > r.request_time + wait + (1 + detour) * r.direct_time + EPS:
                    continue
                inside2 = inside - {rid}
            seq.append((node, kind, rid))
            if src == "b":
                extend(seq, t2, node, inside2, next_base + 1, used)
            else:
                extend(seq, t2, node, inside2, next_base, used | {k})
            seq.pop()

    extend([], start_time, start_node, frozenset(onboard), 0, frozenset())
    seen = set()
    for seq, t in out:
        if seq not in seen:
            seen.add(seq)
            # double-check the complete order with the plain simulator
            assert simulate_stops(list(seq), start_node, start_time, onboard, reqs, tt, wait, detour, cap) == t
            yield seq, t


def brute_force_assignment(vehicles, new_reqs, reqs, tt, wait, detour, cap, now, pi):
    """Optimal batch objective by trying every request-to-vehicle map.

    ``vehicles`` is a list of dicts with ``node``, ``t0``, ``onboard``, ``base_seq``
    and ``served`` (requests it must keep).  A vehicle without obligations that
    gets nothing contributes 0.  Returns the optimal objective.
    """
    best_cache = {}

    def best_for(k, subset):
        key = (k, subset)
        if key not in best_cache:
            v = vehicles[k]
            ends = [end for _, end in feasible_orders(v["base_seq"], [reqs[r] for r in subset], v["node"],
                                                      v["t0"], v["onboard"], reqs, tt, wait, detour, cap)]
            best_cache[key] = min(ends) if ends else None
        return best_cache[key]

    best = None
    ids = [r.id for r in new_reqs]
    for choice in itertools.product(range(-1, len(vehicles)), repeat=len(ids)):
        total = 0.0
        ok = True
        for k, v in enumerate(vehicles):
            subset = tuple(sorted(r for r, c in zip(ids, choice) if c == k))
            if not subset and not v["base_seq"] and not v["onboard"]:
                continue
            end = best_for(k, subset)
            if end is None:
                ok = False
                break
            n_served = len(set(v["served"]) | set(subset))
            total += (end - now) - pi * n_served
        if ok and (best is None or total < best - 1e-9):
            best = total
    return best


# ---------------------------------------------------------------- rebalancing ILP

def enumerate_rebalancing(zones, costs, idle, tours, increments, n_samples, t_max, period, now, gamma,
                          strict=False):
    """Optimal rebalancing objective by enumerating every tour coverage.

    Each tour is either uncovered or covered from one admissible (zone, step);
    trip variables then take their smallest consistent values, which is optimal
    because trips only add nonnegative cost and consume supply.
    """
    options = []
    for t in tours:
        opts = [None]
        for T in range(t_max + 1):
            for o in zones:
                if now + T * period + costs[o][t.start_zone] <= t.start_time + 1e-6:
                    opts.append((o, T))
        options.append(opts)
    w = 1.0 / n_samples
    best = None
    for choice in itertools.product(*options):
        # one entry per (sample, tour)
        used = defaultdict(int)
        for t, c in zip(tours, choice):
            if c is not None:
                used[(t.sample, t.tour)] += 1
        if any(n > 1 for n in used.values()):
            continue
        cover0 = defaultdict(int)   # (s, o, d)
        coverT = defaultdict(int)   # (s, T, o, d)
        for t, c in zip(tours, choice):
            if c is None:
                continue
            o, T = c
            if T == 0:
                cover0[(t.sample, o, t.start_zone)] += 1
            else:
                coverT[(t.sample, T, o, t.start_zone)] += 1
        theta0 = {}
        feasible = True
        for o in zones:
            for d in zones:
                vals = [cover0.get((s, o, d), 0) for s in range(n_samples)]
                if strict and len(set(vals)) > 1:
                    feasible = False
                theta0[(o, d)] = max(vals)
        if not feasible:
            continue
        for o in zones:
            if sum(theta0[(o, d)] for d in zones) > idle.get(o, 0):
                feasible = False
        for s in range(n_samples):
            for T in range(1, t_max + 1):
                for o in zones:
                    out = sum(theta0[(o, d)] for d in zones)
                    out += sum(coverT.get((s, tau, o, d), 0) for tau in range(1, T + 1) for d in zones)
                    back = 0
                    for t, c in zip(tours, choice):
                        if c is not None and t.sample == s and t.end_zone == o:
                            if math.floor((t.end_time - now) / period + 1e-9) <= T - 1:
                                back += 1
                    supply = idle.get(o, 0) + sum(increments.get((s, tau, o), 0) for tau in range(T))
                    if out - back > supply + 1e-9:
                        feasible = False
        if not feasible:
            continue
        obj = sum(costs[o][d] * theta0[(o, d)] for o in zones for d in zones)
        obj += w * sum(gamma ** T * costs[o][d] * n for (s, T, o, d), n in coverT.items())
        for t, c in zip(tours, choice):
            if c is not None:
                obj += w * gamma ** c[1] * t.objective
        if best is None or obj < best - 1e-12:
            best = obj
    return best


# ---------------------------------------------------------------- generic MILP

def enumerate_binary_program(c, rows, sense="min"):
    """Optimum of a pure binary program by trying all points.

    ``rows`` are ``(coeffs list, relation, rhs)``.  Returns ``None`` if infeasible.
    """
    n = len(c)
    best = None
    for x in itertools.product((0, 1), repeat=n):
        ok = True
        for a, rel, b in rows:
            lhs = sum(ai * xi for ai, xi in zip(a, x))
            if rel == "<=" and lhs > b + 1e-9 or rel == ">=" and lhs < b - 1e-9 or \
                    rel == "==" and abs(lhs - b) > 1e-9:
                ok = False
                break
        if not ok:
            continue
        val = sum(ci * xi for ci, xi in zip(c, x))
        if best is None or (val < best if sense == "min" else val > best):
            best = val
    return best
