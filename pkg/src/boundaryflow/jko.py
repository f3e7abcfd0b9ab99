"""One step of the minimizing-movement scheme and the trajectory driver.

The step from a state ``prev`` minimizes, over transport plans gamma >= 0
on support-node pairs,

    sum_i ent_h(r_i)  +  psi0 * net0(gamma) + psi1 * net1(gamma)
    + (1 / 2 tau) * sum |x_a - x_b|^2 gamma_ab,

where the second-coordinate interior sums are pinned to the previous
interior masses, r_i is the new mass of cell i (a first-coordinate sum),
ent_h(m) = m log(m/h) + (V_i - 1) m + h, and net_k is the first minus
second marginal at boundary node k. The minimizer is
``prev + (first marginal - second marginal)``. Plans may not move mass
between the two boundary nodes; the "wb2tilde_scheme" variant also admits
the two boundary cross arcs and exists for the equivalence check only.

Internally the program is solved on a sub-cell refinement (see
``_step_core``) so that per-step displacements below one cell width are
resolved; rows are aggregated back to cells afterwards. The reported plan
lives on the coarse support nodes; the reported squared cost is that of
the refined optimal plan. Aggregation can only decrease the entropy (cell
averaging) and leaves the previous state's energy unchanged, so the
one-step descent inequality survives exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._step_core import build_fine_problem, solve_fine_step, subcell_factor
from .errors import PreconditionViolated, SolverDiverged
from .functionals import energy
from .measures import PotentialData, SignedMeasure, check_same_grid
from .transport import TransportPlan

T_SCHEME = "t_scheme"
WB2TILDE_SCHEME = "wb2tilde_scheme"


def default_eps_schedule(floor: float = 1e-8, start: float = 1e-1,
                         ratio: float = 0.5):
    """Geometric schedule from ``start`` down to the first value <= floor."""
    out = [start]
    while out[-1] > floor:
        out.append(out[-1] * ratio)
    return tuple(out)


@dataclass(frozen=True)
class JkoConfig:
    tau: float
    solver_tol: float = 1e-8
    max_outer_iters: int = 80
    eps_schedule: tuple = None
    scheme: str = T_SCHEME
    ent_iters_per_level: int = 60
    subcell: int = 0  # 0 = choose automatically from tau and h

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.scheme not in (T_SCHEME, WB2TILDE_SCHEME):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.eps_schedule is None:
            object.__setattr__(self, "eps_schedule",
                               default_eps_schedule(floor=self.solver_tol))
        eps = tuple(self.eps_schedule)
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps_schedule must be strictly decreasing")
        if eps[-1] > self.solver_tol:
            raise ValueError("eps_schedule must end at or below solver_tol")
        object.__setattr__(self, "eps_schedule", eps)
        if self.subcell and self.subcell % 2 == 0:
            raise ValueError("subcell refinement must be odd")


@dataclass(frozen=True)
class StepResult:
    minimizer: SignedMeasure
    plan: TransportPlan
    objective: float
    descent_gap: float
    kkt_residual: float
    aux: dict = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Trajectory:
    grid: object
    config: JkoConfig
    times: np.ndarray
    states: list
    step_records: list


def _solve_step(prev: SignedMeasure, pot: PotentialData, cfg: JkoConfig,
                warm=None):
    check_same_grid(prev, pot)
    grid = prev.grid
    n = grid.n_cells
    allow_bb = cfg.scheme == WB2TILDE_SCHEME
    if allow_bb and 2.0 * cfg.tau * pot.lip_psi >= 1.0:
        raise PreconditionViolated(
            "boundary cross moves make the step unbounded: "
            f"2*tau*|psi1-psi0| = {2.0 * cfg.tau * pot.lip_psi} >= 1"
        )
    q = cfg.subcell or subcell_factor(grid.h, cfg.tau, n)
    p = build_fine_problem(
        prev.interior_mass, pot.v_center, pot.psi0, pot.psi1, cfg.tau, q,
        grid.h, cfg.solver_tol, cfg.max_outer_iters, cfg.eps_schedule,
        cfg.ent_iters_per_level, allow_bb,
    )
    warm_lam = warm[0] if warm is not None and warm[1] == q else None
    fa, fj, flow, phi, kkt, lam_act = solve_fine_step(p, warm_lam=warm_lam)

    nf = p.nf
    pos_fine = np.concatenate([p.pos, [0.0, 1.0]])
    cost2 = float(np.sum((pos_fine[fa] - pos_fine[fj]) ** 2 * flow))

    # aggregate to the coarse node set: 0 = left boundary, 1..n cells, n+1
    def coarse(idx):
        out = np.where(idx < nf, 1 + idx // q, 0)
        out[idx == nf] = 0
        out[idx == nf + 1] = n + 1
        return out

    ca, cb = coarse(fa.copy()), coarse(fj.copy())
    key = ca.astype(np.int64) * (n + 2) + cb
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    flow_s = flow[order]
    uniq, starts = np.unique(key_s, return_index=True)
    agg_mass = np.add.reduceat(flow_s, starts)
    plan = TransportPlan(grid, (uniq // (n + 2)).astype(int),
                         (uniq % (n + 2)).astype(int), agg_mass,
                         "wb2tilde" if allow_bb else "t")

    first = plan.marginal(0)
    second = plan.marginal(1)
    interior = first[1:n + 1]
    b0 = prev.b0 + first[0] - second[0]
    b1 = prev.b1 + first[n + 1] - second[n + 1]
    total = math.fsum(interior.tolist()) + b0 + b1
    if abs(total) > 1e-10:
        raise SolverDiverged(f"mass balance broke: total {total:.3e}")
    if abs(b0) >= abs(b1):
        b0 -= total
    else:
        b1 -= total
    minimizer = SignedMeasure(grid, interior, float(b0), float(b1))

    e_prev = energy(prev, pot).total_H
    e_new = energy(minimizer, pot).total_H
    objective = e_new + cost2 / (2.0 * cfg.tau)
    descent_gap = e_prev - objective

    aux = _fine_diagnostics(p, fa, fj, flow, phi, cfg.tau, grid, q)
    aux["cost_squared"] = cost2
    result = StepResult(minimizer, plan, objective, descent_gap, kkt, aux)
    return result, (lam_act, q)


def _fine_diagnostics(p, fa, fj, flow, phi, tau, grid, q):
    """First-order structure residuals evaluated at fine resolution."""
    nf = p.nf
    # (a): phi_i >= psi_k - |x_i - k|^2 / 2 tau for both boundary points
    res_a = np.inf
    for k in (0, 1):
        vals = phi - (p.psi[k] - p.inv2tau * (p.pos - float(k)) ** 2)
        res_a = min(res_a, float(np.min(vals)))
    # (b): equality on arcs importing from a boundary node
    imp = fj >= nf
    res_b = 0.0
    if np.any(imp):
        k = np.where(fj[imp] == nf, 0, 1)
        psivals = np.where(k == 0, p.psi[0], p.psi[1])
        rows = fa[imp]
        interior = rows < nf
        rows = rows[interior]
        kk = psivals[interior]
        dist = p.pos[rows] - np.where(fj[imp][interior] == nf, 0.0, 1.0)
        vals = phi[rows] - kk + p.inv2tau * dist**2
        res_b = float(np.max(np.abs(vals))) if rows.size else 0.0
    # (c): cell-aggregated barycenter flux identity
    n = grid.n_cells
    h = grid.h
    pos_fine = np.concatenate([p.pos, [0.0, 1.0]])
    r_fine = np.zeros(nf)
    wsum_fine = np.zeros(nf)
    rowsel = fa < nf
    np.add.at(r_fine, fa[rowsel], flow[rowsel])
    np.add.at(wsum_fine, fa[rowsel], flow[rowsel] * pos_fine[fj[rowsel]])
    r_cell = r_fine.reshape(n, q).sum(axis=1)
    w_cell = wsum_fine.reshape(n, q).sum(axis=1)
    bary = np.where(r_cell > 0, w_cell / np.maximum(r_cell, 1e-300),
                    grid.centers)
    rho = r_cell / h
    v_cell = p.v.reshape(n, q)[:, 0]
    u = rho * np.exp(v_cell)
    lhs = (bary - grid.centers) / tau * rho
    res_c = 0.0
    if n > 2:
        rhs = np.exp(-v_cell[1:-1]) * (u[2:] - u[:-2]) / (2 * h)
        res_c = float(np.max(np.abs(lhs[1:-1] - rhs)))
    return {
        "price_bound_min": res_a,
        "boundary_identity_max": res_b,
        "flux_identity_max": res_c,
        "flux_identity_per_h": res_c / h,
        "subcell": q,
    }


def jko_step(prev: SignedMeasure, pot: PotentialData, cfg: JkoConfig) -> StepResult:
    """Solve one minimizing-movement step from ``prev``."""
    result, _ = _solve_step(prev, pot, cfg)
    return result


def run_scheme(initial: SignedMeasure, pot: PotentialData, cfg: JkoConfig,
               t_end: float) -> Trajectory:
    """Iterate the step ceil(t_end / tau) times, recording every state."""
    n_steps = int(math.ceil(t_end / cfg.tau - 1e-12)) if t_end > 0 else 0
    states = [initial]
    records = []
    warm = None
    current = initial
    for k in range(n_steps):
        try:
            result, warm = _solve_step(current, pot, cfg, warm=warm)
        except SolverDiverged as exc:
            raise SolverDiverged(str(exc), step_index=k) from exc
        records.append(result)
        current = result.minimizer
        states.append(current)
    times = np.arange(n_steps + 1) * cfg.tau
    return Trajectory(initial.grid, cfg, times, states, records)


def verify_step_optimality(step: StepResult, prev: SignedMeasure,
                           pot: PotentialData, cfg: JkoConfig) -> dict:
    """Residuals of the step's first-order structure.

    (a) the one-sided price bound holds at every cell against both
        boundary points (minimum should be >= -tolerance);
    (b) cells coupled to a boundary node satisfy the price identity;
    (c) the row barycenters reproduce the discrete flux identity
        (S - x)/tau * rho = exp(-V) D_h(rho exp(V)) up to O(h).

    Solver-produced steps carry these residuals at sub-cell resolution;
    for externally loaded plans they are recomputed on the coarse nodes.
    """
    if step.aux is not None:
        return dict(step.aux)
    grid = prev.grid
    n = grid.n_cells
    h = grid.h
    tau = cfg.tau
    rho = step.minimizer.density()
    logr = np.log(np.maximum(rho, 1e-300))
    psi = np.array([pot.psi0, pot.psi1])
    bnd = np.array([0.0, 1.0])
    vals_a = (logr[:, None] + pot.v_center[:, None] - psi[None, :]
              + (grid.centers[:, None] - bnd[None, :]) ** 2 / (2 * tau))
    res_a = float(np.min(vals_a))
    plan = step.plan
    imp = (plan.b_idx == 0) | (plan.b_idx == n + 1)
    imp &= (plan.a_idx >= 1) & (plan.a_idx <= n)
    res_b = 0.0
    for a, b in zip(plan.a_idx[imp], plan.b_idx[imp]):
        i = a - 1
        k = 0 if b == 0 else 1
        val = (logr[i] - psi[k] + pot.v_center[i]
               + (grid.centers[i] - bnd[k]) ** 2 / (2 * tau))
        res_b = max(res_b, abs(val))
    pos = grid.support_nodes
    first = plan.marginal(0)[1:n + 1]
    weighted = np.zeros(n + 2)
    np.add.at(weighted, plan.a_idx, plan.mass * pos[plan.b_idx])
    bary = np.where(first > 0, weighted[1:n + 1] / np.maximum(first, 1e-300),
                    grid.centers)
    u = rho * np.exp(pot.v_center)
    lhs = (bary - grid.centers) / tau * rho
    res_c = 0.0
    if n > 2:
        rhs = np.exp(-pot.v_center[1:-1]) * (u[2:] - u[:-2]) / (2 * h)
        res_c = float(np.max(np.abs(lhs[1:-1] - rhs)))
    return {
        "price_bound_min": res_a,
        "boundary_identity_max": res_b,
        "flux_identity_max": res_c,
        "flux_identity_per_h": res_c / h,
    }


def scheme_equivalence_check(prev: SignedMeasure, pot: PotentialData,
                             cfg: JkoConfig) -> bool:
    """Minimizers of the two schemes agree when 2 tau |psi1 - psi0| < 1."""
    if 2.0 * cfg.tau * pot.lip_psi >= 1.0:
        raise PreconditionViolated(
            f"need 2*tau*|psi1-psi0| < 1, got {2.0 * cfg.tau * pot.lip_psi}"
        )
    res_t = jko_step(prev, pot, replace(cfg, scheme=T_SCHEME))
    res_w = jko_step(prev, pot, replace(cfg, scheme=WB2TILDE_SCHEME))
    return res_t.minimizer.is_close(res_w.minimizer, 10.0 * cfg.solver_tol)


def write_trajectory_csv(path, times, states, step_records=None) -> None:
    """Trajectory CSV: per recorded time, rows t,b0,<v>; t,b1,<v>;
    t,cell_i,<density>; then one 5-field row per step record
    (t,objective,cost2,descent_gap,kkt_residual)."""
    lines = []
    for t, mu in zip(times, states):
        dens = mu.density()
        lines.append(f"{float(t)!r},b0,{mu.b0!r}")
        lines.append(f"{float(t)!r},b1,{mu.b1!r}")
        for i, d in enumerate(dens, start=1):
            lines.append(f"{float(t)!r},cell_{i},{d!r}")
    if step_records:
        for t, rec in zip(times[1:], step_records):
            cost2 = rec.aux["cost_squared"] if rec.aux else rec.plan.cost()
            lines.append(
                f"{float(t)!r},{rec.objective!r},{cost2!r},"
                f"{rec.descent_gap!r},{rec.kkt_residual!r}"
            )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
