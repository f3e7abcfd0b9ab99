"""Internal solver for one variational step on a sub-cell refinement.

The public step minimizes entropy plus boundary-weighted net flux plus
quadratic transport cost over plans whose second-coordinate interior sums
match the previous cell masses. Solving that program directly on the cell
lattice quantizes displacements to whole cells, which freezes the dynamics
whenever the per-step displacement is below one cell width. The solver
therefore runs the identical program on a refined grid (factor ``q``
sub-cells per cell, odd so every cell center is a sub-node) and aggregates
rows back to cells afterwards; entropy, the descent inequality and the
truncated-norm contraction are preserved exactly under that aggregation.

Algorithm: eliminate the rows from the dual. With column prices lam (one
per old-mass sub-cell, boxed above by the boundary-export prices), each
row responds with mass h_sub * exp(-V - c_i), c_i the cheapest access
cost min_b (chat_ib - price_b). The resulting semidual is concave; its
softmin smoothing (annealed over the configured schedule) is maximized
with L-BFGS-B, which converges globally where alternating scaling stalls.
The smoothed gradient needs only a narrow window around each hard argmin,
found exactly with O(n) quadratic lower envelopes. The finisher rounds to
the tight arc set, recovers flows (leaf elimination on the support forest,
HiGHS for tied cases), snaps the potentials to the exact optimality
relations of the final support, and certifies a global KKT residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, minimize
from scipy.special import logsumexp

from .errors import SolverDiverged

_HIGHS_OPTS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def subcell_factor(h: float, tau: float, n_cells: int,
                   max_fine: int = 16000) -> int:
    """Smallest odd refinement factor that resolves per-step displacements.

    Transport between nodes at spacing s only activates against potential
    gradients above s/(2 tau); keeping s <= tau/6 bounds that threshold by
    1/12, well below the gradients the production runs must resolve.
    """
    q = max(1, int(math.ceil(12.0 * h / tau)))
    q = min(q, max(1, max_fine // n_cells))
    if q % 2 == 0:
        q += 1
    return q


def _quad_envelope_py(val, pos, queries, weight):
    n = val.size
    m = queries.size
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for j in range(1, n):
        while True:
            i = v[k]
            s = ((val[j] - val[i]) / weight + pos[j] ** 2 - pos[i] ** 2) / (
                2.0 * (pos[j] - pos[i]))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = j
        z[k] = s
        z[k + 1] = np.inf
    out_val = np.empty(m)
    out_arg = np.empty(m, dtype=np.int64)
    k = 0
    for qi in range(m):
        x = queries[qi]
        while z[k + 1] < x:
            k += 1
        j = v[k]
        out_val[qi] = val[j] + weight * (x - pos[j]) ** 2
        out_arg[qi] = j
    return out_val, out_arg


def _tree_flow_py(u, v, need, n_vert):
    """Leaf elimination on the bipartite support forest.

    u, v: vertex ids per arc (-1 marks an unconstrained boundary endpoint).
    Returns (flow, ok): ok = 0 on success, 1 if elimination stalls (cycle
    or doubly-slack degeneracy), 2 on unbalanced residual.
    """
    n_arcs = u.size
    deg = np.zeros(n_vert, dtype=np.int64)
    for t in range(n_arcs):
        if u[t] >= 0:
            deg[u[t]] += 1
        if v[t] >= 0:
            deg[v[t]] += 1
    starts = np.zeros(n_vert + 1, dtype=np.int64)
    for w in range(n_vert):
        starts[w + 1] = starts[w] + deg[w]
    incid = np.empty(starts[n_vert], dtype=np.int64)
    fill = starts.copy()
    for t in range(n_arcs):
        if u[t] >= 0:
            incid[fill[u[t]]] = t
            fill[u[t]] += 1
        if v[t] >= 0:
            incid[fill[v[t]]] = t
            fill[v[t]] += 1
    remaining = deg.copy()
    resid = need.copy()
    flow = np.zeros(n_arcs)
    done = np.zeros(n_arcs, dtype=np.bool_)
    queue = np.empty(n_vert + n_arcs, dtype=np.int64)
    qlen = 0
    for w in range(n_vert):
        if remaining[w] == 1:
            queue[qlen] = w
            qlen += 1
        elif remaining[w] == 0 and abs(resid[w]) > 1e-9:
            return flow, 2
    head = 0
    while head < qlen:
        w = queue[head]
        head += 1
        if remaining[w] != 1:
            continue
        t = -1
        for s in range(starts[w], starts[w + 1]):
            if not done[incid[s]]:
                t = incid[s]
                break
        if t < 0:
            return flow, 1
        flow[t] = resid[w]
        done[t] = True
        resid[w] = 0.0
        remaining[w] = 0
        other = v[t] if u[t] == w else u[t]
        if other >= 0:
            resid[other] -= flow[t]
            remaining[other] -= 1
            if remaining[other] == 1:
                queue[qlen] = other
                qlen += 1
            elif remaining[other] == 0 and abs(resid[other]) > 1e-9:
                return flow, 2
    for t in range(n_arcs):
        if not done[t]:
            uu = u[t]
            vv = v[t]
            u_open = uu >= 0 and remaining[uu] > 0
            v_open = vv >= 0 and remaining[vv] > 0
            if u_open or v_open:
                return flow, 1
    return flow, 0


try:  # hot loops; the plain Python fallback keeps numba optional
    from numba import njit

    quad_envelope = njit(cache=True)(_quad_envelope_py)
    _tree_flow_core = njit(cache=True)(_tree_flow_py)
except ImportError:  # pragma: no cover
    quad_envelope = _quad_envelope_py
    _tree_flow_core = _tree_flow_py


def envelope_min(values, positions, queries, weight):
    """min_j values[j] + weight (x - p_j)^2 with argmin, skipping infs."""
    finite = np.flatnonzero(np.isfinite(values))
    if finite.size == 0:
        return (np.full(queries.size, np.inf),
                np.full(queries.size, -1, dtype=np.int64))
    out_val, out_arg = quad_envelope(values[finite], positions[finite],
                                     queries, weight)
    return out_val, finite[out_arg]


@dataclass
class FineProblem:
    """Refined geometry for one step."""

    nf: int
    q: int
    h_sub: float
    pos: np.ndarray
    v: np.ndarray
    col_mass: np.ndarray
    psi: tuple
    inv2tau: float
    allow_bb: bool
    solver_tol: float
    max_outer_iters: int
    eps_schedule: tuple
    ent_iters_per_level: int

    def __post_init__(self):
        self.col_active = self.col_mass > 0.0
        self.act = np.flatnonzero(self.col_active)
        # boundary-export price cap per column
        self.lam_ub = np.minimum(
            self.psi[0] + self.inv2tau * self.pos**2,
            self.psi[1] + self.inv2tau * (1.0 - self.pos) ** 2,
        )


def build_fine_problem(prev_interior, v_center, psi0, psi1, tau, q, h,
                       solver_tol, max_outer_iters, eps_schedule,
                       ent_iters_per_level, allow_bb):
    n = prev_interior.size
    nf = n * q
    h_sub = h / q
    pos = (np.arange(nf) + 0.5) * h_sub
    return FineProblem(
        nf=nf, q=q, h_sub=h_sub, pos=pos, v=np.repeat(v_center, q),
        col_mass=np.repeat(prev_interior / q, q), psi=(float(psi0), float(psi1)),
        inv2tau=1.0 / (2.0 * tau), allow_bb=allow_bb, solver_tol=solver_tol,
        max_outer_iters=max_outer_iters, eps_schedule=tuple(eps_schedule),
        ent_iters_per_level=ent_iters_per_level,
    )


def _band_indices(centers, w, nf):
    """(n, 2w+1) index window around each center, invalid marked False."""
    offs = np.arange(-w, w + 1)
    idx = centers[:, None] + offs[None, :]
    valid = (idx >= 0) & (idx < nf)
    return np.where(valid, idx, 0), valid


def _row_access_cost(p: FineProblem, lam_full):
    """Exact cheapest access cost per row and its source.

    c_i = min_b (chat_ib - price_b) over interior columns (price lam) and
    the two boundary columns (price psi_k). Returns (c, argsource) with
    argsource in [0, nf) for interior, nf + k for boundary k.
    """
    nf = p.nf
    env, arg = envelope_min(-lam_full, p.pos, p.pos, p.inv2tau)
    c = env
    src = arg.copy()
    for k in (0, 1):
        cand = p.inv2tau * (p.pos - float(k)) ** 2 - p.psi[k]
        better = cand < c
        c = np.where(better, cand, c)
        src = np.where(better, nf + k, src)
    return c, src


def _semidual(lam_act, p: FineProblem, eps, w):
    """Negative smoothed semidual value and gradient in the active lam.

    D(lam) = sum_j m_j lam_j + sum_i h_sub (1 - exp(-V_i - c_i^eps)),
    c_i^eps the softmin access cost over a window around the exact argmin.
    """
    nf = p.nf
    lam_full = np.full(nf, -np.inf)
    lam_full[p.act] = lam_act
    c_hard, src = _row_access_cost(p, lam_full)

    centers = np.where(src < nf, src, np.clip(np.rint(p.pos * nf - 0.5), 0,
                                              nf - 1).astype(np.int64))
    idx, valid = _band_indices(centers, w, nf)
    lam_w = np.where(valid, lam_full[idx], -np.inf)
    cost_w = p.inv2tau * (p.pos[:, None] - p.pos[idx]) ** 2
    expo = (lam_w - cost_w + 0.0)  # price - chat
    bnd0 = p.psi[0] - p.inv2tau * p.pos**2
    bnd1 = p.psi[1] - p.inv2tau * (1.0 - p.pos) ** 2
    full = np.concatenate([expo, bnd0[:, None], bnd1[:, None]], axis=1)
    shift = np.max(full, axis=1)
    weights = np.exp((full - shift[:, None]) / eps)
    norm = np.sum(weights, axis=1)
    c_soft = -(shift + eps * np.log(norm))
    r = p.h_sub * np.exp(np.minimum(-p.v - c_soft, 700.0))

    value = float(np.sum(p.col_mass[p.act] * lam_act)
                  + p.h_sub * nf - np.sum(r))
    grad = p.col_mass[p.act].copy()
    pull = r[:, None] * weights[:, :-2] / norm[:, None]
    flat_idx = idx.ravel()
    flat_pull = np.where(valid, pull, 0.0).ravel()
    drawn = np.zeros(nf)
    np.add.at(drawn, flat_idx, flat_pull)
    grad -= drawn[p.act]
    return -value, -grad


def _ascend(p: FineProblem, lam_act, tau, warm=False):
    """Anneal the softmin smoothing down the schedule with L-BFGS-B.

    Intermediate levels only need to hand a decent start to the next one;
    the final level is driven to machine precision. Warm starts (duals
    carried over from the previous step) skip the coarse levels.
    """
    if lam_act.size == 0:
        return lam_act
    bounds = [(None, ub) for ub in p.lam_ub[p.act]]
    schedule = p.eps_schedule
    head = [e for e in schedule if e > 3e-5][::2]
    if warm or not head:
        head = [max(3e-5, schedule[-1])]
    for eps in head:
        w = int(math.ceil(math.sqrt(2.0 * tau * eps * 65.0) / p.h_sub))
        w = int(min(max(w, 4), min(p.nf, 768)))
        res = minimize(
            _semidual, lam_act, args=(p, eps, w), method="L-BFGS-B",
            jac=True, bounds=bounds,
            options={
                "maxiter": min(p.ent_iters_per_level, 30),
                "ftol": 0.0,
                "gtol": max(1e-12, 3e-2 * eps * p.h_sub),
            },
        )
        lam_act = res.x
    # quadratic cleanup; smaller smoothing destabilizes the Newton model
    # and is unnecessary: the finisher re-solves the tight-band problem
    return _newton_polish(p, lam_act, tau, levels=(3e-5, 1e-5))


def _window_state(p: FineProblem, lam_full, eps, w):
    """Row responses and softmax source weights on argmin-centered windows.

    Returns (r, idx, valid, wts) where wts[:, :-2] are the interior-source
    weights on window ``idx`` and the last two slots are the boundary
    sources; rows sum to one.
    """
    nf = p.nf
    c_hard, src = _row_access_cost(p, lam_full)
    centers = np.where(src < nf, src,
                       np.clip(np.rint(p.pos * nf - 0.5), 0,
                               nf - 1).astype(np.int64))
    idx, valid = _band_indices(centers, w, nf)
    lam_w = np.where(valid, lam_full[idx], -np.inf)
    expo = lam_w - p.inv2tau * (p.pos[:, None] - p.pos[idx]) ** 2
    bnd0 = p.psi[0] - p.inv2tau * p.pos**2
    bnd1 = p.psi[1] - p.inv2tau * (1.0 - p.pos) ** 2
    full = np.concatenate([expo, bnd0[:, None], bnd1[:, None]], axis=1)
    shift = np.max(full, axis=1)
    wts = np.exp((full - shift[:, None]) / eps)
    norm = np.sum(wts, axis=1)
    wts /= norm[:, None]
    c_soft = -(shift + eps * np.log(norm))
    r = p.h_sub * np.exp(np.minimum(-p.v - c_soft, 700.0))
    return r, idx, valid, wts


def _newton_polish(p: FineProblem, lam_act, tau, levels=(1e-5, 1e-6, 1e-7, 1e-8)):
    """Damped projected Newton on the smoothed semidual.

    The Hessian is banded because the softmax weights live on narrow
    argmin-centered windows at small smoothing; direct banded solves give
    the dual accuracy that limited-memory ascent cannot reach along the
    stiff valleys of this objective.
    """
    from scipy.linalg import solveh_banded

    nf = p.nf
    act = p.act
    n_act = act.size
    if n_act == 0:
        return lam_act
    slot = np.full(nf, -1)
    slot[act] = np.arange(n_act)
    ub = p.lam_ub[act]
    masses = p.col_mass[act]

    for eps in levels:
        w = int(math.ceil(math.sqrt(2.0 * tau * eps * 65.0) / p.h_sub))
        w = int(min(max(w, 3), min(nf, 64)))
        for _ in range(30):
            lam_full = np.full(nf, -np.inf)
            lam_full[act] = lam_act
            r, idx, valid, wts = _window_state(p, lam_full, eps, w)
            win = wts[:, :-2]
            slots = np.where(valid, slot[idx], -1)
            ok = slots >= 0
            drawn = np.zeros(n_act)
            np.add.at(drawn, slots[ok], (r[:, None] * win)[ok])
            grad = masses - drawn
            at_bound = (lam_act >= ub - 1e-13) & (grad > 0.0)
            free = ~at_bound
            gnorm = float(np.max(np.abs(grad[free]))) if np.any(free) else 0.0
            if gnorm <= max(1e-15, 1e-9 * eps):
                break

            # banded Hessian of -D on the free coordinates
            nb = 2 * w + 1
            band = np.zeros((nb, n_act))
            diag = drawn / eps
            scale = (1.0 / eps - 1.0)
            rw = r[:, None] * win
            for a in range(win.shape[1]):
                sa = slots[:, a]
                oka = sa >= 0
                for b in range(a, win.shape[1]):
                    sb = slots[:, b]
                    sel = oka & (sb >= 0)
                    if not np.any(sel):
                        continue
                    d = sb[sel] - sa[sel]
                    contrib = scale * rw[sel, a] * wts[sel, b]
                    pos_d = d >= 0
                    np.add.at(band, (d[pos_d], sa[sel][pos_d]),
                              -contrib[pos_d])
                    if a != b:
                        neg_d = ~pos_d
                        np.add.at(band, (-d[neg_d], sb[sel][neg_d]),
                                  -contrib[neg_d])
            band[0, :] += diag
            # restrict to free coordinates by pinning bound ones
            pinned = np.flatnonzero(~free)
            if pinned.size:
                for dd in range(nb):
                    cols = pinned
                    band[dd, cols] = 0.0
                    left = pinned - dd
                    band[dd, left[left >= 0]] = 0.0
                band[0, pinned] = 1.0
            band[0, :] += 1e-14 * (1.0 + np.abs(band[0, :]))
            rhs = np.where(free, grad, 0.0)
            try:
                step = solveh_banded(band, rhs, lower=True)
            except np.linalg.LinAlgError:
                break
            step = np.where(free, step, 0.0)

            # backtracking on the (negative) semidual value
            base_val, _ = _semidual(lam_act, p, eps, w)
            t = 1.0
            for _ls in range(25):
                trial = np.minimum(lam_act + t * step, ub)
                val, _ = _semidual(trial, p, eps, w)
                if val <= base_val - 1e-12 * abs(base_val):
                    lam_act = trial
                    break
                t *= 0.5
            else:
                break
    return lam_act


def _collect_tight(p: FineProblem, phi, lam_full, delta):
    """All arcs with reduced cost at most delta.

    Row side: for each row the interior window around the exact argmin
    plus both boundary imports. Column side: for each active column the
    rows within the window of its best source plus boundary exports.
    """
    nf = p.nf
    w = int(math.ceil(math.sqrt(2.0 * delta / p.inv2tau) / p.h_sub)) + 4

    fa = []
    fj = []
    # row side
    c_hard, src = _row_access_cost(p, lam_full)
    centers = np.where(src < nf, src,
                       np.clip(np.rint(p.pos * nf - 0.5), 0, nf - 1).astype(np.int64))
    idx, valid = _band_indices(centers, w, nf)
    g = (phi[:, None] + p.inv2tau * (p.pos[:, None] - p.pos[idx]) ** 2
         - np.where(valid, lam_full[idx], -np.inf))
    keep = g <= delta
    ri, ci = np.nonzero(keep)
    fa.append(ri)
    fj.append(idx[ri, ci])
    for k in (0, 1):
        g_b = phi - (p.psi[k] - p.inv2tau * (p.pos - float(k)) ** 2)
        sel = np.flatnonzero(g_b <= delta)
        fa.append(sel)
        fj.append(np.full(sel.size, nf + k))

    # column side: best interior source row per column, then its window
    env, arg = envelope_min(phi, p.pos, p.pos[p.act], p.inv2tau)
    centers_c = arg.astype(np.int64)
    idxc, validc = _band_indices(centers_c, w, nf)
    gc = (phi[idxc] + p.inv2tau * (p.pos[idxc] - p.pos[p.act][:, None]) ** 2
          - lam_full[p.act][:, None])
    gc = np.where(validc, gc, np.inf)
    keepc = gc <= delta
    rj, cj = np.nonzero(keepc)
    fa.append(idxc[rj, cj])
    fj.append(p.act[rj])
    for k in (0, 1):
        g_b = (p.psi[k] + p.inv2tau * (p.pos[p.act] - float(k)) ** 2
               - lam_full[p.act])
        sel = np.flatnonzero(g_b <= delta)
        fa.append(np.full(sel.size, nf + k))
        fj.append(p.act[sel])

    fa = np.concatenate(fa).astype(np.int64)
    fj = np.concatenate(fj).astype(np.int64)
    keys = fa * (nf + 2) + fj
    uniq = np.unique(keys)
    return uniq // (nf + 2), uniq % (nf + 2)


def _chat_arcs(p: FineProblem, ai, aj):
    pos_full = np.concatenate([p.pos, [0.0, 1.0]])
    return p.inv2tau * (pos_full[ai] - pos_full[aj]) ** 2


def _psi_arcs(p: FineProblem, idx):
    return np.where(np.asarray(idx) == p.nf, p.psi[0], p.psi[1])


def _flows(p: FineProblem, fa, fj, r_row):
    need = np.concatenate([r_row, np.where(p.col_active, p.col_mass, 0.0)])
    u = np.where(fa < p.nf, fa, -1)
    v = np.where(fj < p.nf, p.nf + fj, -1)
    flow, status = _tree_flow_core(u.astype(np.int64), v.astype(np.int64),
                                   need, 2 * p.nf)
    if status == 0:
        return flow
    if status == 2:
        return None
    return _lp_flow(p, fa, fj, r_row)


def _lp_flow(p: FineProblem, fa, fj, r_row):
    nf = p.nf
    n_arcs = fa.size
    if n_arcs == 0:
        return None
    slot = np.full(nf, -1)
    slot[p.act] = np.arange(p.act.size)
    rows_list = []
    cols_list = []
    vals = []
    arc_ids = np.arange(n_arcs)
    ri = fa < nf
    rows_list.append(fa[ri])
    cols_list.append(arc_ids[ri])
    vals.append(np.ones(int(ri.sum())))
    ci = fj < nf
    slots = np.where(ci, slot[np.minimum(fj, nf - 1)], -1)
    ok = slots >= 0
    rows_list.append(nf + slots[ok])
    cols_list.append(arc_ids[ok])
    vals.append(np.ones(int(ok.sum())))
    A = sp.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows_list), np.concatenate(cols_list))),
        shape=(nf + p.act.size, n_arcs),
    ).tocsr()
    b_eq = np.concatenate([r_row, p.col_mass[p.act]])
    res = linprog(_chat_arcs(p, fa, fj), A_eq=A, b_eq=b_eq, bounds=(0, None),
                  method="highs", options=_HIGHS_OPTS)
    if res.status != 0:
        return None
    return np.asarray(res.x)


def _column_repair(p: FineProblem, fj, flow):
    """Close every active column exactly on its largest arc."""
    nf = p.nf
    col_sum = np.zeros(nf + 2)
    np.add.at(col_sum, fj, flow)
    gaps = np.where(p.col_active, p.col_mass - col_sum[:nf], 0.0)
    worst = float(np.max(np.abs(gaps))) if gaps.size else 0.0
    to_fix = np.flatnonzero(np.abs(gaps) > 0.0)
    if to_fix.size:
        order = np.argsort(fj, kind="stable")
        fj_sorted = fj[order]
        starts = np.searchsorted(fj_sorted, to_fix)
        ends = np.searchsorted(fj_sorted, to_fix, side="right")
        for j, s, e in zip(to_fix, starts, ends):
            sel = order[s:e]
            if sel.size == 0:
                return None, worst
            flow[sel[np.argmax(flow[sel])]] += gaps[j]
    return np.maximum(flow, 0.0), worst


def _group_logsumexp(labels, values, n_groups):
    top = np.full(n_groups, -np.inf)
    np.maximum.at(top, labels, values)
    safe = np.where(np.isfinite(top[labels]), top[labels], 0.0)
    sums = np.zeros(n_groups)
    np.add.at(sums, labels, np.exp(values - safe))
    return np.where(top > -np.inf, top + np.log(np.maximum(sums, 1e-300)),
                    -np.inf)


def _snap_potentials(p: FineProblem, fa, fj, flow, floor=0.0):
    """Exact potentials for the final support structure.

    Only arcs carrying flow above ``floor`` define the structure: noise
    flows that merely route round-off must not dictate potential
    relations. Boundary arcs pin levels; interior components without pins
    take their shift from mass balance. Returns (phi, lam_full) or None
    when the structure is inconsistent; certification by the caller
    catches any wrong exclusion.
    """
    nf = p.nf
    carrying = flow > max(floor, 1e-15)
    ai, aj = fa[carrying], fj[carrying]
    chat = _chat_arcs(p, ai, aj)
    ii = (ai < nf) & (aj < nf)
    ib = (ai < nf) & (aj >= nf)
    bi = (ai >= nf) & (aj < nf)

    row_pin = np.full(nf, -np.inf)
    np.maximum.at(row_pin, ai[ib], _psi_arcs(p, aj[ib]) - chat[ib])
    col_pin = np.full(nf, np.inf)
    np.minimum.at(col_pin, aj[bi], _psi_arcs(p, ai[bi]) + chat[bi])

    ii_idx = np.flatnonzero(ii)
    n_vert = 2 * nf
    parent = np.arange(n_vert)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    tree = []
    for t in ii_idx:
        ra, rb = find(ai[t]), find(nf + aj[t])
        if ra != rb:
            parent[rb] = ra
            tree.append(t)
        # a flow-carrying non-tree arc closes a cycle; quadratic costs
        # admit none away from exact ties, where any tree choice works
    roots = np.array([find(x) for x in range(n_vert)])
    _, labels = np.unique(roots, return_inverse=True)
    n_comp = int(labels.max()) + 1
    lab_row, lab_col = labels[:nf], labels[nf:]

    rel = np.zeros(n_vert)
    seen = np.zeros(n_vert, dtype=bool)
    if tree:
        tree = np.array(tree)
        src = np.concatenate([ai[tree], nf + aj[tree]])
        dst = np.concatenate([nf + aj[tree], ai[tree]])
        wts = np.concatenate([chat[tree], -chat[tree]])
        adj = sp.coo_matrix((np.arange(1, 2 * tree.size + 1), (src, dst)),
                            shape=(n_vert, n_vert)).tocsr()
        arc_w = np.concatenate([[0.0], wts])
        for root in range(nf):
            if seen[root]:
                continue
            seen[root] = True
            stack = [root]
            while stack:
                w = stack.pop()
                for ptr in range(adj.indptr[w], adj.indptr[w + 1]):
                    nb = adj.indices[ptr]
                    if not seen[nb]:
                        seen[nb] = True
                        rel[nb] = rel[w] + arc_w[adj.data[ptr]]
                        stack.append(nb)
    rel_row = rel[:nf]
    rel_col = np.where(seen[nf:], rel[nf:], np.nan)

    reached_col = p.col_active & ~np.isnan(rel_col)
    lo = np.full(n_comp, -np.inf)
    has_pin_r = row_pin > -np.inf
    np.maximum.at(lo, lab_row[has_pin_r],
                  row_pin[has_pin_r] - rel_row[has_pin_r])
    hi = np.full(n_comp, np.inf)
    sel_c = (col_pin < np.inf) & reached_col
    np.minimum.at(hi, lab_col[sel_c], col_pin[sel_c] - rel_col[sel_c])
    if np.any(lo > hi + 1e-9):
        return None

    comp_mass = np.zeros(n_comp)
    np.add.at(comp_mass, lab_col[reached_col], p.col_mass[reached_col])
    # mass balance must exclude boundary exchange, which only pinned
    # components have; clamping reproduces their pinned level
    log_d = _group_logsumexp(lab_row, rel_row - p.v, n_comp) + math.log(p.h_sub)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(comp_mass > 0.0, np.log(comp_mass) - log_d,
                         np.where(lo > -np.inf, lo, 0.0))
    theta = np.minimum(np.maximum(theta, lo), hi)

    phi = rel_row + theta[lab_row]
    lam_full = np.full(nf, -np.inf)
    lam_full[reached_col] = (rel_col + theta[lab_col])[reached_col]
    lonely = p.col_active & np.isnan(rel_col)
    lam_full[lonely] = col_pin[lonely]
    if np.any(np.isnan(phi)) or np.any(np.isnan(lam_full[p.col_active])):
        return None
    return phi, lam_full


def _certify(p: FineProblem, phi, lam_full):
    """Global dual feasibility violation (>= 0) of (phi, lam)."""
    nf = p.nf
    worst = 0.0
    c_hard, _ = _row_access_cost(p, lam_full)
    worst = max(worst, float(np.max(-phi - c_hard)))
    if p.act.size:
        env, _ = envelope_min(phi, p.pos, p.pos[p.act], p.inv2tau)
        for k in (0, 1):
            cand = p.psi[k] + p.inv2tau * (p.pos[p.act] - float(k)) ** 2
            env = np.minimum(env, cand)
        worst = max(worst, float(np.max(lam_full[p.act] - env)))
    if p.allow_bb:
        for k in (0, 1):
            worst = max(worst, -(p.psi[k] - p.psi[1 - k] + p.inv2tau))
    return worst


def solve_fine_step(p: FineProblem, warm_lam=None):
    """Returns (fa, fj, flow, phi, kkt, lam_act)."""
    tau = 1.0 / (2.0 * p.inv2tau)
    if p.act.size:
        lam0 = np.log(np.maximum(p.col_mass / p.h_sub, 1e-300)) + p.v
        lam0 = np.minimum(lam0, p.lam_ub)
        warm = warm_lam is not None and warm_lam.size == p.act.size
        lam_act = warm_lam if warm else lam0[p.act]
        lam_act = np.minimum(lam_act, p.lam_ub[p.act])
        lam_act = _ascend(p, lam_act, tau, warm=warm)
    else:
        lam_act = np.zeros(0)

    lam_full = np.full(p.nf, -np.inf)
    lam_full[p.act] = lam_act

    # the first rung must exceed both the dual accuracy of the ascent and
    # the neighbor-arc cost, so that round-off imbalances can route
    d0 = max(5e-5, 4.0 * p.inv2tau * p.h_sub**2)
    for delta in (d0, 10.0 * d0, 100.0 * d0):
        c_hard, _ = _row_access_cost(p, lam_full)
        phi = -c_hard
        fa, fj = _collect_tight(p, phi, lam_full, delta)
        r_row = p.h_sub * np.exp(phi - p.v)
        flow = _flows(p, fa, fj, r_row)
        if flow is None:
            continue
        flow = np.maximum(flow, 0.0)

        max_flow = float(np.max(flow, initial=0.0))
        for floor_rel in (1e-4, 1e-8, 0.0):
            snapped = _snap_potentials(p, fa, fj, flow, floor_rel * max_flow)
            if snapped is None:
                continue
            phi2, lam2 = snapped
            if _certify(p, phi2, lam2) > 0.05 * p.solver_tol:
                continue
            fa2, fj2 = _collect_tight(p, phi2, lam2, 1e-11)
            r2 = p.h_sub * np.exp(phi2 - p.v)
            flow2 = _flows(p, fa2, fj2, r2)
            if flow2 is None or np.min(flow2, initial=0.0) <= -1e-12:
                continue
            flow2 = np.maximum(flow2, 0.0)
            flow2, primal = _column_repair(p, fj2, flow2)
            if flow2 is None:
                continue
            keep = flow2 > 0.0
            kkt = max(primal, 0.0)
            lam_out = lam2[p.act] if p.act.size else lam_act
            return fa2[keep], fj2[keep], flow2[keep], phi2, kkt, lam_out

        # fall back to the pre-snap duals: feasible by construction
        flow, primal = _column_repair(p, fj, flow)
        if flow is None:
            continue
        g_arcs = (np.where(fa < p.nf, phi[np.minimum(fa, p.nf - 1)],
                           _psi_arcs(p, fa))
                  + _chat_arcs(p, fa, fj)
                  - np.where(fj < p.nf, lam_full[np.minimum(fj, p.nf - 1)],
                             _psi_arcs(p, fj)))
        comp_slack = float(np.max(flow * np.maximum(g_arcs, 0.0))) \
            if flow.size else 0.0
        kkt = max(primal, comp_slack)
        if kkt <= p.solver_tol:
            keep = flow > 0.0
            return fa[keep], fj[keep], flow[keep], phi, kkt, lam_act
    raise SolverDiverged("step solver failed to certify the KKT residual")
