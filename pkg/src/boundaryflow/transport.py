"""Boundary-reservoir transport costs as exact linear programs.

Three costs are provided, all using the quadratic ground cost |x-y|^2 on
the support nodes [0, x_1, ..., x_N, 1]:

``wb2``        interior marginals prescribed, boundary rows/columns free
               (the boundary is an unlimited reservoir);
``wb2_signed`` additionally prescribes the net first-minus-second marginal
               at each boundary node, so boundary bookkeeping is kept; a
               true metric on the signed-measure state space in 1D;
``t_cost``     like ``wb2_signed`` but with boundary-to-boundary moves
               forbidden; may be infinite and fails the triangle
               inequality, but is what the variational step uses.

Each program is solved with scipy's HiGHS backend on the dense arc set.
Results are deterministic for fixed inputs; argument order is canonicalized
first so the symmetry of each cost holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import PreconditionViolated, SolverDiverged
from .measures import Grid, InteriorMeasure, SignedMeasure, check_same_grid

_HIGHS_OPTS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}

PLAN_PRUNE_TOL = 1e-14


@dataclass(frozen=True)
class TransportPlan:
    """Sparse nonnegative mass on ordered support-node pairs (a, b)."""

    grid: Grid
    a_idx: np.ndarray
    b_idx: np.ndarray
    mass: np.ndarray
    kind: str = "wb2tilde"

    def cost(self) -> float:
        pos = self.grid.support_nodes
        return float(np.sum((pos[self.a_idx] - pos[self.b_idx]) ** 2 * self.mass))

    def marginal(self, axis: int) -> np.ndarray:
        """Mass per support node of the first (axis=0) or second (axis=1)
        coordinate; length n_cells + 2."""
        idx = self.a_idx if axis == 0 else self.b_idx
        out = np.zeros(self.grid.n_cells + 2)
        np.add.at(out, idx, self.mass)
        return out

    def transpose(self) -> "TransportPlan":
        return TransportPlan(self.grid, self.b_idx, self.a_idx, self.mass, self.kind)

    def sorted_entries(self):
        order = np.lexsort((self.b_idx, self.a_idx))
        return self.a_idx[order], self.b_idx[order], self.mass[order]


def write_plan(plan: TransportPlan, path) -> None:
    """Dump as CSV rows a_index,b_index,mass, sorted lexicographically."""
    a, b, m = plan.sorted_entries()
    with open(path, "w", encoding="ascii") as fh:
        for ai, bi, mi in zip(a, b, m):
            fh.write(f"{ai},{bi},{mi!r}\n")


@dataclass(frozen=True)
class CostResult:
    """Outcome of a transport program.

    ``cost`` is the distance value (square root of the optimal plan cost),
    or ``inf`` when the program is infeasible.
    """

    cost: float
    plan: Optional[TransportPlan]
    status: str  # "optimal" | "infeasible"

    @property
    def cost_squared(self) -> float:
        return self.cost * self.cost


def _arc_arrays(n: int, kind: str):
    """Arc index arrays (a, b) for the allowed pairs of each program."""
    cells = np.arange(1, n + 1)
    ii_a = np.repeat(cells, n)
    ii_b = np.tile(cells, n)
    bnodes = np.array([0, n + 1])
    ib_a = np.repeat(cells, 2)
    ib_b = np.tile(bnodes, n)
    bi_a = np.tile(bnodes, n)
    bi_b = np.repeat(cells, 2)
    a = [ii_a, ib_a, bi_a]
    b = [ii_b, ib_b, bi_b]
    if kind == "wb2tilde":
        # off-diagonal boundary pairs only; zero-cost self-loops are
        # optimality-neutral and excluding them keeps plans bounded
        a.append(np.array([0, n + 1]))
        b.append(np.array([n + 1, 0]))
    return np.concatenate(a), np.concatenate(b)


def _solve_program(grid: Grid, kind: str, mu_int, nu_int, d0, d1) -> CostResult:
    """Min-cost program over the arc set of ``kind``.

    Equality constraints: interior row sums = mu_int, interior column sums
    = nu_int and, except for ``kind='wb2'``, net boundary balance
    row_k - col_k = d_k at both boundary nodes.
    """
    n = grid.n_cells
    a_idx, b_idx = _arc_arrays(n, kind)
    pos = grid.support_nodes
    cost_vec = (pos[a_idx] - pos[b_idx]) ** 2

    n_arcs = a_idx.size
    with_nets = kind != "wb2"
    n_rows = 2 * n + (2 if with_nets else 0)

    rows = []
    cols = []
    vals = []
    arc_ids = np.arange(n_arcs)

    a_interior = (a_idx >= 1) & (a_idx <= n)
    rows.append(a_idx[a_interior] - 1)
    cols.append(arc_ids[a_interior])
    vals.append(np.ones(int(a_interior.sum())))

    b_interior = (b_idx >= 1) & (b_idx <= n)
    rows.append(n + b_idx[b_interior] - 1)
    cols.append(arc_ids[b_interior])
    vals.append(np.ones(int(b_interior.sum())))

    if with_nets:
        for slot, node in enumerate((0, n + 1)):
            sel_a = a_idx == node
            rows.append(np.full(int(sel_a.sum()), 2 * n + slot))
            cols.append(arc_ids[sel_a])
            vals.append(np.ones(int(sel_a.sum())))
            sel_b = b_idx == node
            rows.append(np.full(int(sel_b.sum()), 2 * n + slot))
            cols.append(arc_ids[sel_b])
            vals.append(-np.ones(int(sel_b.sum())))

    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, n_arcs),
    ).tocsr()
    b_eq = np.concatenate([mu_int, nu_int, [d0, d1]] if with_nets else [mu_int, nu_int])

    res = linprog(cost_vec, A_eq=A, b_eq=b_eq, bounds=(0, None),
                  method="highs", options=_HIGHS_OPTS)
    if res.status == 2:
        return CostResult(float("inf"), None, "infeasible")
    if res.status != 0:
        raise SolverDiverged(f"transport LP failed with status {res.status}: {res.message}")

    x = np.asarray(res.x)
    keep = x > PLAN_PRUNE_TOL
    plan = TransportPlan(grid, a_idx[keep].copy(), b_idx[keep].copy(),
                         x[keep].copy(), kind)
    value = float(cost_vec @ x)
    return CostResult(float(np.sqrt(max(value, 0.0))), plan, "optimal")


def _canonical_pair(mu, nu):
    """Deterministic ordering so that d(mu,nu) and d(nu,mu) run the same LP."""
    key_mu = (mu.interior_mass.tobytes(), getattr(mu, "b0", 0.0), getattr(mu, "b1", 0.0))
    key_nu = (nu.interior_mass.tobytes(), getattr(nu, "b0", 0.0), getattr(nu, "b1", 0.0))
    return (mu, nu, False) if key_mu <= key_nu else (nu, mu, True)


def wb2(mu: InteriorMeasure, nu: InteriorMeasure) -> CostResult:
    """Reservoir distance between nonnegative interior measures.

    Never infeasible: the boundary absorbs or provides any mass imbalance.
    """
    check_same_grid(mu, nu)
    key_mu = mu.mass.tobytes()
    key_nu = nu.mass.tobytes()
    swap = key_mu > key_nu
    lhs, rhs = (nu, mu) if swap else (mu, nu)
    result = _solve_program(mu.grid, "wb2", lhs.mass, rhs.mass, 0.0, 0.0)
    if swap and result.plan is not None:
        result = CostResult(result.cost, result.plan.transpose(), result.status)
    return result


def wb2_signed(mu: SignedMeasure, nu: SignedMeasure) -> CostResult:
    """Metric on the signed-measure state space (1D): interior marginals
    prescribed, net boundary balance enforced, boundary cross-moves allowed."""
    check_same_grid(mu, nu)
    lhs, rhs, swapped = _canonical_pair(mu, nu)
    result = _solve_program(
        mu.grid, "wb2tilde", lhs.interior_mass, rhs.interior_mass,
        lhs.b0 - rhs.b0, lhs.b1 - rhs.b1,
    )
    if swapped and result.plan is not None:
        result = CostResult(result.cost, result.plan.transpose(), result.status)
    return result


def t_cost(mu: SignedMeasure, nu: SignedMeasure) -> CostResult:
    """Extended-semimetric cost with boundary-to-boundary moves forbidden.

    Infeasible instances return status 'infeasible' and infinite cost.
    """
    check_same_grid(mu, nu)
    lhs, rhs, swapped = _canonical_pair(mu, nu)
    result = _solve_program(
        mu.grid, "t", lhs.interior_mass, rhs.interior_mass,
        lhs.b0 - rhs.b0, lhs.b1 - rhs.b1,
    )
    if swapped and result.plan is not None:
        result = CostResult(result.cost, result.plan.transpose(), result.status)
    return result


def check_admissible(plan: TransportPlan, mu, nu, kind: str, tol: float = 1e-9):
    """Verify the marginal/balance conditions of ``kind`` for ``plan``.

    Returns (ok, residuals) where residuals maps condition names to their
    worst absolute violation. Diagnostic only; never raises on failure.
    """
    n = plan.grid.n_cells
    first = plan.marginal(0)
    second = plan.marginal(1)
    res = {}
    mu_int = mu.mass if isinstance(mu, InteriorMeasure) else mu.interior_mass
    nu_int = nu.mass if isinstance(nu, InteriorMeasure) else nu.interior_mass
    res["first_marginal_interior"] = float(np.max(np.abs(first[1:-1] - mu_int)))
    res["second_marginal_interior"] = float(np.max(np.abs(second[1:-1] - nu_int)))
    res["nonnegative"] = float(max(0.0, -np.min(plan.mass))) if plan.mass.size else 0.0
    if kind in ("wb2tilde", "t"):
        d0 = mu.b0 - nu.b0
        d1 = mu.b1 - nu.b1
        res["boundary_net_0"] = abs((first[0] - second[0]) - d0)
        res["boundary_net_1"] = abs((first[n + 1] - second[n + 1]) - d1)
    if kind == "t":
        bb = (plan.a_idx == 0) | (plan.a_idx == n + 1)
        bb &= (plan.b_idx == 0) | (plan.b_idx == n + 1)
        res["no_boundary_to_boundary"] = float(np.sum(plan.mass[bb]))
    ok = all(v <= tol for v in res.values())
    return ok, res


def monotone_w2_cost(pos_a, mass_a, pos_b, mass_b) -> float:
    """Classical 1D quadratic-cost optimal transport between two discrete
    measures of equal total mass, by monotone rearrangement."""
    pos_a = np.asarray(pos_a, dtype=float)
    pos_b = np.asarray(pos_b, dtype=float)
    mass_a = np.asarray(mass_a, dtype=float)
    mass_b = np.asarray(mass_b, dtype=float)
    ta, tb = mass_a.sum(), mass_b.sum()
    if abs(ta - tb) > 1e-9 * max(1.0, ta, tb):
        raise PreconditionViolated(f"unbalanced marginals: {ta} vs {tb}")
    oa = np.argsort(pos_a, kind="stable")
    ob = np.argsort(pos_b, kind="stable")
    pos_a, mass_a = pos_a[oa], mass_a[oa].copy()
    pos_b, mass_b = pos_b[ob], mass_b[ob].copy()
    i = j = 0
    cost = 0.0
    while i < len(pos_a) and j < len(pos_b):
        m = min(mass_a[i], mass_b[j])
        if m > 0.0:
            cost += m * (pos_a[i] - pos_b[j]) ** 2
        mass_a[i] -= m
        mass_b[j] -= m
        if mass_a[i] <= 1e-300:
            i += 1
        if j < len(pos_b) and mass_b[j] <= 1e-300:
            j += 1
    return cost


def restricted_w2_optimality(plan: TransportPlan, node_set_a, node_set_b,
                             tol: float = 1e-9) -> bool:
    """Check that the restriction of ``plan`` to A x B is optimal for the
    classical quadratic transport between its own marginals.

    Precondition (for plans produced by ``t_cost``): A x B must not contain
    any boundary-boundary pair.
    """
    n = plan.grid.n_cells
    set_a = np.zeros(n + 2, dtype=bool)
    set_b = np.zeros(n + 2, dtype=bool)
    set_a[np.asarray(list(node_set_a), dtype=int)] = True
    set_b[np.asarray(list(node_set_b), dtype=int)] = True
    if plan.kind == "t":
        bnd = np.zeros(n + 2, dtype=bool)
        bnd[[0, n + 1]] = True
        if np.any(set_a & bnd) and np.any(set_b & bnd):
            raise PreconditionViolated(
                "restriction of a boundary-separated plan must avoid boundary pairs"
            )
    keep = set_a[plan.a_idx] & set_b[plan.b_idx]
    if not np.any(keep):
        return True
    a, b, m = plan.a_idx[keep], plan.b_idx[keep], plan.mass[keep]
    pos = plan.grid.support_nodes
    restricted_cost = float(np.sum((pos[a] - pos[b]) ** 2 * m))
    oracle = monotone_w2_cost(pos[a], m, pos[b], m)
    return restricted_cost <= oracle + tol
