"""Energy functionals and norms on the discrete measures.

The driving functional is an entropy with drift on the interior plus a
linear term weighting the boundary atoms by the boundary log-data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidExponent
from .measures import InteriorMeasure, PotentialData, SignedMeasure, check_same_grid


@dataclass(frozen=True)
class EnergyRecord:
    """Energy split into interior entropy and boundary contribution."""

    entropy_E: float
    boundary_term: float

    @property
    def total_H(self) -> float:
        return self.entropy_E + self.boundary_term


def _xlogx(r: np.ndarray) -> np.ndarray:
    # 0*log(0) = 0 convention
    out = np.zeros_like(r)
    pos = r > 0.0
    out[pos] = r[pos] * np.log(r[pos])
    return out


def entropy(rho: InteriorMeasure, pot: PotentialData) -> float:
    """Interior entropy: sum over cells of (r log r + (V-1) r + 1) h,
    with r the cell density."""
    check_same_grid(rho, pot)
    h = rho.grid.h
    r = rho.mass / h
    cell = _xlogx(r) + (pot.v_center - 1.0) * r + 1.0
    return float(np.sum(cell) * h)


def energy(mu: SignedMeasure, pot: PotentialData) -> EnergyRecord:
    """Full energy: interior entropy plus psi-weighted boundary atoms."""
    check_same_grid(mu, pot)
    ent = entropy(InteriorMeasure(mu.grid, mu.interior_mass), pot)
    bterm = pot.psi0 * mu.b0 + pot.psi1 * mu.b1
    return EnergyRecord(ent, bterm)


def _kr_norm_raw(grid, interior, b0, b1) -> float:
    """Kantorovich-Rubinstein norm of a discrete signed measure given by
    (possibly signed) cell masses and boundary atoms.

    Equals |total mass| plus the exact integral of |tail(t)| over (0,1),
    where tail(t) is the measure of (t,1]; the tail is piecewise constant
    between consecutive support nodes.
    """
    interior = np.asarray(interior, dtype=float)
    total = math.fsum(interior.tolist()) + b0 + b1
    # tail on the segment (node_k, node_{k+1}) = mass strictly right of it
    # nodes: 0, x_1, ..., x_N, 1 -> N+1 segments
    masses_right = np.concatenate((interior, [b1]))  # atoms at x_1..x_N, 1
    tails = np.cumsum(masses_right[::-1])[::-1]  # tails[k] = sum of atoms > node_k
    seg_len = np.diff(grid.support_nodes)
    return abs(total) + float(np.sum(np.abs(tails) * seg_len))


def kr_norm(mu: SignedMeasure, nu: SignedMeasure | None = None) -> float:
    """Kantorovich-Rubinstein norm of ``mu`` (or of ``mu - nu``).

    The difference of two valid signed measures may have signed interior
    mass, which is why the subtraction happens inside this function.
    """
    if nu is None:
        return _kr_norm_raw(mu.grid, mu.interior_mass, mu.b0, mu.b1)
    check_same_grid(mu, nu)
    return _kr_norm_raw(
        mu.grid, mu.interior_mass - nu.interior_mass, mu.b0 - nu.b0, mu.b1 - nu.b1
    )


def truncated_lq_norm(
    rho: InteriorMeasure, pot: PotentialData, q: float, theta: float
) -> float:
    """Truncated, exp(V)-weighted Lq integral:
    sum of max(r, theta exp(-V))^q exp((q-1)V) h."""
    check_same_grid(rho, pot)
    if not (q >= 1.0 and math.isfinite(q)):
        raise InvalidExponent(f"q must satisfy q >= 1, got {q}")
    if not (theta > 0.0 and math.isfinite(theta)):
        raise InvalidExponent(f"theta must be positive, got {theta}")
    h = rho.grid.h
    r = rho.mass / h
    v = pot.v_center
    integrand = np.maximum(r, theta * np.exp(-v)) ** q * np.exp((q - 1.0) * v)
    return float(np.sum(integrand) * h)
