"""Discrete measures on [0,1] with signed boundary atoms.

The domain is the unit interval split into ``n_cells`` uniform cells.
Interior mass lives on cell centers; two signed atoms sit on the boundary
points 0 and 1.  A valid signed measure has nonnegative interior mass and
zero total mass, so the boundary acts as a reservoir that absorbs or
provides whatever the interior exchanges with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GridMismatch,
    MassImbalance,
    NegativeDensity,
    NegativeInteriorMass,
    ParseError,
)

MASS_BALANCE_TOL = 1e-12


def _frozen(a):
    a = np.asarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Grid:
    """Uniform partition of [0,1] into ``n_cells`` cells.

    Cell centers are x_i = (i - 1/2) h, i = 1..n_cells, with h = 1/n_cells.
    ``support_nodes`` lists every location mass can occupy, in order:
    [0, x_1, ..., x_N, 1]; indices 0 and N+1 are the boundary nodes.
    """

    n_cells: int
    h: float = field(init=False)
    centers: np.ndarray = field(init=False, repr=False)
    support_nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.n_cells, (int, np.integer)) or self.n_cells < 1:
            raise ValueError(f"n_cells must be a positive integer, got {self.n_cells!r}")
        h = 1.0 / self.n_cells
        centers = (np.arange(1, self.n_cells + 1) - 0.5) * h
        nodes = np.concatenate(([0.0], centers, [1.0]))
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "centers", _frozen(centers))
        object.__setattr__(self, "support_nodes", _frozen(nodes))

    def __eq__(self, other):
        return isinstance(other, Grid) and other.n_cells == self.n_cells

    def __hash__(self):
        return hash(("Grid", self.n_cells))

    @property
    def faces(self) -> np.ndarray:
        """Cell faces j*h, j = 0..n_cells (endpoints included)."""
        return np.linspace(0.0, 1.0, self.n_cells + 1)


def check_same_grid(*objs):
    grids = [o.grid for o in objs]
    if any(g != grids[0] for g in grids[1:]):
        raise GridMismatch(f"operands on different grids: {[g.n_cells for g in grids]}")
    return grids[0]


@dataclass(frozen=True)
class SignedMeasure:
    """Element of the state space: nonnegative interior mass, signed boundary
    atoms b0/b1 at 0/1, total mass zero."""

    grid: Grid
    interior_mass: np.ndarray
    b0: float
    b1: float

    @property
    def total_mass(self) -> float:
        return math.fsum(self.interior_mass.tolist()) + self.b0 + self.b1

    @property
    def interior_total(self) -> float:
        return float(np.sum(self.interior_mass))

    def density(self) -> np.ndarray:
        """Interior density per cell (mass / h)."""
        return self.interior_mass / self.grid.h

    def boundary_atom(self, node_index: int) -> float:
        """Atom at support node 0 (left) or n_cells+1 (right)."""
        if node_index == 0:
            return self.b0
        if node_index == self.grid.n_cells + 1:
            return self.b1
        raise ValueError(f"node {node_index} is not a boundary node")

    def is_close(self, other: "SignedMeasure", tol: float) -> bool:
        return (
            self.grid == other.grid
            and abs(self.b0 - other.b0) <= tol
            and abs(self.b1 - other.b1) <= tol
            and bool(np.all(np.abs(self.interior_mass - other.interior_mass) <= tol))
        )


@dataclass(frozen=True)
class InteriorMeasure:
    """Nonnegative measure supported on cell centers only."""

    grid: Grid
    mass: np.ndarray

    def density(self) -> np.ndarray:
        return self.mass / self.grid.h

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.mass))


@dataclass(frozen=True)
class PotentialData:
    """Sampled drift potential and boundary data.

    ``v_center``: V at the n_cells cell centers.
    ``v_face``: V at all n_cells+1 faces; the first/last entries are the
    values at 0 and 1 (extrapolated when V is only given in the interior).
    ``psi0``/``psi1``: boundary log-data at 0 and 1; the prescribed boundary
    trace of the density is exp(psi - V).
    """

    grid: Grid
    v_center: np.ndarray
    v_face: np.ndarray
    psi0: float
    psi1: float

    def __post_init__(self):
        vc = _frozen(self.v_center)
        vf = _frozen(self.v_face)
        n = self.grid.n_cells
        if vc.shape != (n,):
            raise ValueError(f"v_center must have length {n}, got {vc.shape}")
        if vf.shape != (n + 1,):
            raise ValueError(f"v_face must have length {n + 1}, got {vf.shape}")
        if not (np.all(np.isfinite(vc)) and np.all(np.isfinite(vf))
                and np.isfinite(self.psi0) and np.isfinite(self.psi1)):
            raise ValueError("potential data must be finite")
        object.__setattr__(self, "v_center", vc)
        object.__setattr__(self, "v_face", vf)

    @property
    def lip_psi(self) -> float:
        """Lipschitz constant of the linear boundary-data extension."""
        return abs(self.psi1 - self.psi0)

    @property
    def theta0(self) -> float:
        """Largest boundary value of exp(psi)."""
        return max(math.exp(self.psi0), math.exp(self.psi1))

    def psi_at(self, x) -> np.ndarray:
        """Linear extension of the boundary data to [0,1]."""
        return self.psi0 + (self.psi1 - self.psi0) * np.asarray(x, dtype=float)

    def psi_node(self, node_index: int) -> float:
        n = self.grid.n_cells
        if node_index == 0:
            return self.psi0
        if node_index == n + 1:
            return self.psi1
        raise ValueError(f"node {node_index} is not a boundary node")


def potential_from_callables(grid: Grid, v, psi0: float, psi1: float) -> PotentialData:
    """Sample a potential function V on centers and faces."""
    vc = np.array([float(v(x)) for x in grid.centers])
    vf = np.array([float(v(x)) for x in grid.faces])
    return PotentialData(grid, vc, vf, float(psi0), float(psi1))


def make_measure(grid: Grid, interior, b0: float, b1: float) -> SignedMeasure:
    """Construct a signed measure, enforcing the state-space invariants."""
    interior = np.asarray(interior, dtype=float)
    if interior.shape != (grid.n_cells,):
        raise ValueError(
            f"interior must have length {grid.n_cells}, got shape {interior.shape}"
        )
    if np.any(interior < 0.0):
        i = int(np.argmin(interior))
        raise NegativeInteriorMass(f"interior_mass[{i}] = {interior[i]} < 0")
    total = math.fsum(interior.tolist()) + float(b0) + float(b1)
    if not math.isfinite(total) or abs(total) > MASS_BALANCE_TOL:
        raise MassImbalance(f"total mass {total:.3e} exceeds tolerance {MASS_BALANCE_TOL}")
    return SignedMeasure(grid, _frozen(interior), float(b0), float(b1))


def balanced_measure(grid: Grid, interior, split: float = 0.5) -> SignedMeasure:
    """Signed measure with the given interior and boundary atoms chosen to
    balance the total mass (fraction ``split`` assigned to the left atom)."""
    interior = np.asarray(interior, dtype=float)
    tot = math.fsum(interior.tolist())
    b0 = -split * tot
    b1 = -(tot + b0)
    return make_measure(grid, interior, b0, b1)


def sample_density(grid: Grid, f) -> InteriorMeasure:
    """Midpoint-rule sampling: mass[i] = f(x_i) * h."""
    vals = np.array([float(f(x)) for x in grid.centers])
    if np.any(vals < 0.0):
        i = int(np.argmin(vals))
        raise NegativeDensity(f"f({grid.centers[i]}) = {vals[i]} < 0")
    return InteriorMeasure(grid, _frozen(vals * grid.h))


def restrict_interior(mu: SignedMeasure) -> InteriorMeasure:
    """Drop the boundary atoms."""
    return InteriorMeasure(mu.grid, mu.interior_mass)


def write_measure(mu: SignedMeasure, path) -> None:
    """Serialize to the measure CSV format (full round-trip precision)."""
    lines = [f"n={mu.grid.n_cells}", f"b0={mu.b0!r}", f"b1={mu.b1!r}"]
    for i, m in enumerate(mu.interior_mass, start=1):
        lines.append(f"{i},{m!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_measure(path) -> SignedMeasure:
    """Parse the measure CSV format written by :func:`write_measure`."""
    with open(path, "r", encoding="ascii") as fh:
        raw = fh.read().splitlines()
    lines = [(k + 1, s.strip()) for k, s in enumerate(raw) if s.strip()]
    if len(lines) < 3:
        raise ParseError("file too short: need n=, b0=, b1= headers", line=len(lines))

    def expect(idx, key):
        lineno, text = lines[idx]
        if not text.startswith(key + "="):
            raise ParseError(f"expected '{key}=...', got {text!r}", line=lineno)
        return lineno, text[len(key) + 1:]

    lineno, nstr = expect(0, "n")
    try:
        n = int(nstr)
    except ValueError:
        raise ParseError(f"bad cell count {nstr!r}", line=lineno) from None
    if n < 1:
        raise ParseError(f"cell count must be positive, got {n}", line=lineno)

    def parse_float(lineno, s, what):
        try:
            return float(s)
        except ValueError:
            raise ParseError(f"bad {what} {s!r}", line=lineno) from None

    lineno, s = expect(1, "b0")
    b0 = parse_float(lineno, s, "b0")
    lineno, s = expect(2, "b1")
    b1 = parse_float(lineno, s, "b1")

    rows = lines[3:]
    if len(rows) != n:
        raise ParseError(
            f"expected {n} cell rows, found {len(rows)}",
            line=rows[-1][0] if rows else lines[2][0],
        )
    interior = np.empty(n)
    for k, (lineno, text) in enumerate(rows):
        parts = text.split(",")
        if len(parts) != 2:
            raise ParseError(f"expected '<i>,<mass>', got {text!r}", line=lineno)
        try:
            i = int(parts[0])
        except ValueError:
            raise ParseError(f"bad cell index {parts[0]!r}", line=lineno) from None
        if i != k + 1:
            raise ParseError(f"cell rows out of order: expected {k + 1}, got {i}", line=lineno)
        interior[k] = parse_float(lineno, parts[1], "mass")

    grid = Grid(n)
    try:
        return make_measure(grid, interior, b0, b1)
    except (NegativeInteriorMass, MassImbalance):
        raise
