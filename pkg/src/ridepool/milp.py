"""Small mixed-integer linear programming layer.

Models are built incrementally with :class:`LinearModel` and solved by a
best-first branch-and-bound whose node relaxations are solved with the HiGHS
dual simplex (through :func:`scipy.optimize.linprog`).  Models can also be
written in CPLEX LP text format so that any external solver can re-read them.
"""
from __future__ import annotations

import heapq
import logging
import math
import re
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

LOG = logging.getLogger(__name__)

CONTINUOUS = "C"
INTEGER = "I"
BINARY = "B"

LE, EQ, GE = "<=", "==", ">="

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
LIMIT = "limit"

FEAS_TOL = 1e-6
INT_TOL = 1e-6


@dataclass
class Variable:
    index: int
    name: str
    lb: float
    ub: float
    kind: str


@dataclass
class Constraint:
    coeffs: dict[int, float]
    relation: str
    rhs: float
    name: str


class LinearModel:
    """Sparse linear model with bounded continuous, integer and binary variables."""

    def __init__(self, name: str = "model", sense: str = "min"):
        self.name = name
        self.sense = sense
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective: dict[int, float] = {}
        self.objective_constant = 0.0

    def add_var(self, name: str | None = None, lb: float = 0.0, ub: float = math.inf,
                kind: str = CONTINUOUS) -> int:
        if kind == BINARY:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise ValueError(f"variable {name!r}: lower bound {lb} exceeds upper bound {ub}")
        if kind not in (CONTINUOUS, INTEGER, BINARY):
            raise ValueError(f"unknown variable kind {kind!r}")
        idx = len(self.variables)
        self.variables.append(Variable(idx, name or f"x{idx}", float(lb), float(ub), kind))
        return idx

    def add_constr(self, coeffs: dict[int, float], relation: str, rhs: float,
                   name: str | None = None) -> int:
        if relation not in (LE, EQ, GE):
            raise ValueError(f"unknown relation {relation!r}")
        n = len(self.variables)
        clean = {}
        for j, a in coeffs.items():
            if not 0 <= j < n:
                raise ValueError(f"constraint references undeclared variable {j}")
            if a != 0:
                clean[j] = clean.get(j, 0.0) + float(a)
        idx = len(self.constraints)
        self.constraints.append(Constraint(clean, relation, float(rhs), name or f"c{idx}"))
        return idx

    def set_objective(self, coeffs: dict[int, float], sense: str | None = None,
                      constant: float = 0.0) -> None:
        if sense is not None:
            if sense not in ("min", "max"):
                raise ValueError(f"unknown sense {sense!r}")
            self.sense = sense
        n = len(self.variables)
        for j in coeffs:
            if not 0 <= j < n:
                raise ValueError(f"objective references undeclared variable {j}")
        self.objective = {j: float(a) for j, a in coeffs.items() if a != 0}
        self.objective_constant = float(constant)

    @property
    def num_vars(self) -> int:
        return len(self.variables)

    def is_integer(self, j: int) -> bool:
        return self.variables[j].kind != CONTINUOUS

    def evaluate(self, x) -> float:
        return self.objective_constant + sum(a * x[j] for j, a in self.objective.items())

    def max_violation(self, x) -> float:
        """Largest absolute violation of any bound or constraint at point ``x``."""
        worst = 0.0
        for v in self.variables:
            worst = max(worst, v.lb - x[v.index], x[v.index] - v.ub)
        for c in self.constraints:
            lhs = sum(a * x[j] for j, a in c.coeffs.items())
            if c.relation == LE:
                worst = max(worst, lhs - c.rhs)
            elif c.relation == GE:
                worst = max(worst, c.rhs - lhs)
            else:
                worst = max(worst, abs(lhs - c.rhs))
        return worst


@dataclass
class Solution:
    status: str
    x: list[float] = field(default_factory=list)
    objective: float = math.nan
    bound: float = math.nan
    nodes: int = 0
    runtime: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL or (self.status == LIMIT and bool(self.x))

    def value(self, j: int) -> float:
        return self.x[j]


class _Relaxation:
    """Matrix form of a model, reused by every branch-and-bound node."""

    def __init__(self, model: LinearModel):
        n = model.num_vars
        sign = -1.0 if model.sense == "max" else 1.0
        self.c = np.zeros(n)
        for j, a in model.objective.items():
            self.c[j] = sign * a
        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        for con in model.constraints:
            if con.relation == LE:
                ub_rows.append(con.coeffs)
                ub_rhs.append(con.rhs)
            elif con.relation == GE:
                ub_rows.append({j: -a for j, a in con.coeffs.items()})
                ub_rhs.append(-con.rhs)
            else:
                eq_rows.append(con.coeffs)
                eq_rhs.append(con.rhs)
        self.A_ub = _to_csr(ub_rows, n)
        self.b_ub = np.array(ub_rhs) if ub_rhs else None
        self.A_eq = _to_csr(eq_rows, n)
        self.b_eq = np.array(eq_rhs) if eq_rhs else None
        self.lb = np.array([v.lb for v in model.variables], dtype=float)
        self.ub = np.array([v.ub for v in model.variables], dtype=float)
        self.int_idx = np.array([j for j in range(n) if model.is_integer(j)], dtype=int)

    def solve(self, lb, ub, time_left: float | None = None):
        if self.c.size == 0:
            return 0, np.zeros(0), 0.0
        bounds = np.column_stack([lb, np.where(np.isinf(ub), np.inf, ub)])
        bounds = [(None if math.isinf(a) else a, None if math.isinf(b) else b) for a, b in bounds]
        options = {"presolve": True}
        if time_left is not None:
            options["time_limit"] = max(time_left, 1e-3)
        res = linprog(self.c, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
                      bounds=bounds, method="highs-ds", options=options)
        return res.status, res.x, res.fun


def _to_csr(rows, n):
    if not rows:
        return None
    data, indices, indptr = [], [], [0]
    for row in rows:
        for j in sorted(row):
            indices.append(j)
            data.append(row[j])
        indptr.append(len(indices))
    return csr_matrix((data, indices, indptr), shape=(len(rows), n))


def _most_fractional(x, int_idx):
    """Index of the integer variable farthest from integrality, or -1."""
    best, best_frac = -1, INT_TOL
    for j in int_idx:
        f = x[j] - math.floor(x[j])
        frac = min(f, 1.0 - f)
        if frac > best_frac:
            best, best_frac = j, frac
    return best


def solve(model: LinearModel, time_limit: float = 30.0, gap: float = 0.0,
          backend: str = "builtin") -> Solution:
    """Solve ``model`` to proven optimality (within ``gap``) or until ``time_limit``.

    Unbounded and infeasible models are reported through ``Solution.status``.
    ``backend="highs"`` hands the whole model to :func:`scipy.optimize.milp`.
    """
    if backend == "highs":
        return _solve_highs(model, time_limit, gap)
    if backend != "builtin":
        raise ValueError(f"unknown backend {backend!r}")
    start = time.perf_counter()
    sign = -1.0 if model.sense == "max" else 1.0
    rel = _Relaxation(model)
    n = model.num_vars
    if n == 0:
        feasible = all(
            (c.relation == LE and 0 <= c.rhs + FEAS_TOL) or (c.relation == GE and 0 >= c.rhs - FEAS_TOL)
            or (c.relation == EQ and abs(c.rhs) <= FEAS_TOL) for c in model.constraints)
        if not feasible:
            return Solution(INFEASIBLE, runtime=time.perf_counter() - start)
        return Solution(OPTIMAL, [], model.objective_constant, model.objective_constant, 0,
                        time.perf_counter() - start)

    lb0 = rel.lb.copy()
    ub0 = rel.ub.copy()
    # integer bounds can be tightened up front
    for j in rel.int_idx:
        lb0[j] = math.ceil(lb0[j] - INT_TOL)
        ub0[j] = math.floor(ub0[j] + INT_TOL) if not math.isinf(ub0[j]) else ub0[j]
        if lb0[j] > ub0[j]:
            return Solution(INFEASIBLE, runtime=time.perf_counter() - start)

    status, x, fun = rel.solve(lb0, ub0, time_limit)
    nodes = 1
    if status == 2:
        return Solution(INFEASIBLE, nodes=nodes, runtime=time.perf_counter() - start)
    if status == 3:
        return Solution(UNBOUNDED, nodes=nodes, runtime=time.perf_counter() - start)
    if status != 0:
        return Solution(LIMIT, nodes=nodes, runtime=time.perf_counter() - start)

    incumbent_x = None
    incumbent = math.inf
    counter = 0
    heap = [(fun, counter, lb0, ub0, x)]
    best_bound = fun
    timed_out = False
    while heap:
        bound, _, lb, ub, x = heapq.heappop(heap)
        best_bound = bound
        if bound >= incumbent - 1e-9 - gap * abs(incumbent):
            best_bound = incumbent
            heap.clear()
            break
        j = _most_fractional(x, rel.int_idx)
        if j < 0:
            cand = x.copy()
            cand[rel.int_idx] = np.round(cand[rel.int_idx])
            if model.max_violation(cand) <= FEAS_TOL:
                val = float(rel.c @ cand)
                if val < incumbent:
                    incumbent, incumbent_x = val, cand
                continue
            # rounding broke feasibility; fix the integers and re-solve the continuous part
            flb, fub = lb.copy(), ub.copy()
            flb[rel.int_idx] = cand[rel.int_idx]
            fub[rel.int_idx] = cand[rel.int_idx]
            st, fx, ffun = rel.solve(flb, fub)
            nodes += 1
            if st == 0 and model.max_violation(fx) <= FEAS_TOL and ffun < incumbent:
                incumbent, incumbent_x = float(ffun), fx
            continue
        elapsed = time.perf_counter() - start
        if elapsed > time_limit:
            heapq.heappush(heap, (bound, counter, lb, ub, x))
            timed_out = True
            break
        down_ub = ub.copy()
        down_ub[j] = math.floor(x[j])
        up_lb = lb.copy()
        up_lb[j] = math.ceil(x[j])
        for clb, cub in ((lb, down_ub), (up_lb, ub)):
            if clb[j] > cub[j]:
                continue
            st, cx, cfun = rel.solve(clb, cub, time_limit - elapsed)
            nodes += 1
            if st == 0 and cfun < incumbent - 1e-9:
                counter += 1
                heapq.heappush(heap, (cfun, counter, clb, cub, cx))
            elif st == 3:
                return Solution(UNBOUNDED, nodes=nodes, runtime=time.perf_counter() - start)

    runtime = time.perf_counter() - start
    if timed_out:
        best_bound = min([h[0] for h in heap] + [incumbent])
        if incumbent_x is None:
            return Solution(LIMIT, bound=sign * best_bound, nodes=nodes, runtime=runtime)
        xs = [float(v) for v in incumbent_x]
        return Solution(LIMIT, xs, model.evaluate(xs), sign * best_bound, nodes, runtime)
    if incumbent_x is None:
        return Solution(INFEASIBLE, nodes=nodes, runtime=runtime)
    xs = [float(v) for v in incumbent_x]
    obj = model.evaluate(xs)
    return Solution(OPTIMAL, xs, obj, sign * min(best_bound, incumbent) + model.objective_constant,
                    nodes, runtime)


def solve_relaxation(model: LinearModel) -> Solution:
    """Solve the continuous relaxation (integrality dropped)."""
    start = time.perf_counter()
    rel = _Relaxation(model)
    status, x, fun = rel.solve(rel.lb, rel.ub)
    runtime = time.perf_counter() - start
    if status == 2:
        return Solution(INFEASIBLE, runtime=runtime)
    if status == 3:
        return Solution(UNBOUNDED, runtime=runtime)
    if status != 0:
        return Solution(LIMIT, runtime=runtime)
    xs = [float(v) for v in x]
    return Solution(OPTIMAL, xs, model.evaluate(xs), model.evaluate(xs), 1, runtime)


def _solve_highs(model: LinearModel, time_limit: float, gap: float) -> Solution:
    from scipy.optimize import Bounds, LinearConstraint, milp

    start = time.perf_counter()
    rel = _Relaxation(model)
    n = model.num_vars
    if n == 0:
        return solve(model, time_limit, gap)
    cons = []
    if rel.A_ub is not None:
        cons.append(LinearConstraint(rel.A_ub, -np.inf, rel.b_ub))
    if rel.A_eq is not None:
        cons.append(LinearConstraint(rel.A_eq, rel.b_eq, rel.b_eq))
    integrality = np.array([1 if model.is_integer(j) else 0 for j in range(n)])
    res = milp(rel.c, constraints=cons, integrality=integrality, bounds=Bounds(rel.lb, rel.ub),
               options={"time_limit": time_limit, "mip_rel_gap": gap})
    runtime = time.perf_counter() - start
    if res.status == 2:
        return Solution(INFEASIBLE, runtime=runtime)
    if res.status == 3:
        return Solution(UNBOUNDED, runtime=runtime)
    if res.x is None:
        return Solution(LIMIT, runtime=runtime)
    xs = [float(v) for v in res.x]
    for j in rel.int_idx:
        xs[j] = float(round(xs[j]))
    return Solution(OPTIMAL if res.status == 0 else LIMIT, xs, model.evaluate(xs),
                    model.evaluate(xs), 0, runtime)


_NAME_OK = re.compile(r"[^A-Za-z0-9_.]")


def _lp_name(name: str) -> str:
    name = _NAME_OK.sub("_", name)
    if not name or name[0].isdigit() or name[0] in ".eE":
        name = "v_" + name
    return name


def _lp_terms(coeffs: dict[int, float], names: list[str]) -> str:
    parts = []
    for j in sorted(coeffs):
        a = coeffs[j]
        sign = "-" if a < 0 else "+"
        parts.append(f"{sign} {abs(a):.12g} {names[j]}")
    if not parts:
        return "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def export_model(model: LinearModel) -> str:
    """Render ``model`` in CPLEX LP format (objective, constraints, bounds, integrality)."""
    names = []
    seen: dict[str, int] = {}
    for v in model.variables:
        base = _lp_name(v.name)
        if base in seen:
            seen[base] += 1
            base = f"{base}_{seen[base]}"
        else:
            seen[base] = 0
        names.append(base)
    lines = [f"\\ {model.name}", "Minimize" if model.sense == "min" else "Maximize"]
    obj = _lp_terms(model.objective, names)
    if model.objective_constant:
        c = model.objective_constant
        obj = f"{obj} {'-' if c < 0 else '+'} {abs(c):.12g}"
    if obj == "0" and names:
        obj = f"0 {names[0]}"
    lines.append(f" obj: {obj}")
    lines.append("Subject To")
    op = {LE: "<=", GE: ">=", EQ: "="}
    for c in model.constraints:
        lhs = _lp_terms(c.coeffs, names)
        if lhs == "0":
            if not names:
                continue
            lhs = f"0 {names[0]}"
        lines.append(f" {_lp_name(c.name)}: {lhs} {op[c.relation]} {c.rhs:.12g}")
    lines.append("Bounds")
    for v, nm in zip(model.variables, names):
        if v.kind == BINARY:
            continue
        lo = "-inf" if math.isinf(v.lb) else f"{v.lb:.12g}"
        hi = "+inf" if math.isinf(v.ub) else f"{v.ub:.12g}"
        if math.isinf(v.lb) and math.isinf(v.ub):
            lines.append(f" {nm} free")
        else:
            lines.append(f" {lo} <= {nm} <= {hi}")
    generals = [nm for v, nm in zip(model.variables, names) if v.kind == INTEGER]
    binaries = [nm for v, nm in zip(model.variables, names) if v.kind == BINARY]
    lines.append("General")
    lines.extend(f" {nm}" for nm in generals)
    lines.append("Binary")
    lines.extend(f" {nm}" for nm in binaries)
    lines.append("End")
    return "\n".join(lines) + "\n"


def dump_model(model: LinearModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(export_model(model))
