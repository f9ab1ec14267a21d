"""Piecewise-affine barrier functions built from open convex polyhedra.

A barrier is stored as a list of polyhedra ``P_i = {x : C_i x < b_i}``.  Its
value is the min over polyhedra of the max over facets of ``c_ij . x - b_ij``,
so ``h(x) >= 0`` exactly when ``x`` lies in none of the (open) polyhedra.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Rows with norms outside this range are reported by ``scaling_report``.
ROW_NORM_RANGE = (1e-6, 1e6)


class BarrierError(ValueError):
    """Raised for malformed barrier or polyhedron data."""


@dataclass(frozen=True, eq=False)
class Polyhedron:
    """Open polyhedron ``{x : C x < b}``; one row of ``C`` per facet."""

    C: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        C = np.array(self.C, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float).reshape(-1)
        if C.ndim != 2 or C.shape[0] < 1 or C.shape[1] < 1:
            raise BarrierError(f"C must be a nonempty 2-D matrix, got shape {C.shape}")
        if b.shape[0] != C.shape[0]:
            raise BarrierError(f"C has {C.shape[0]} rows but b has {b.shape[0]} entries")
        if not (np.all(np.isfinite(C)) and np.all(np.isfinite(b))):
            raise BarrierError("polyhedron data must be finite")
        if np.any(np.all(C == 0.0, axis=1)):
            raise BarrierError("C contains an all-zero row")
        C.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "b", b)

    @property
    def n_facets(self) -> int:
        return self.C.shape[0]

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    def contains(self, x) -> bool:
        """Strict membership test, ``C x < b`` componentwise."""
        return bool(np.all(self.C @ np.asarray(x, dtype=float) < self.b))

    def __eq__(self, other):
        if not isinstance(other, Polyhedron):
            return NotImplemented
        return np.array_equal(self.C, other.C) and np.array_equal(self.b, other.b)

    def to_dict(self) -> dict:
        return {"C": self.C.tolist(), "b": self.b.tolist()}


@dataclass(frozen=True, eq=False)
class PwaBarrier:
    """Min-of-max affine barrier over an ordered list of polyhedra.

    The facet data of all polyhedra is also kept stacked (``C_all``,
    ``b_all``) with ``offsets[i]`` giving the first row of polyhedron ``i``;
    the filter works on those flat arrays.
    """

    polyhedra: tuple[Polyhedron, ...]
    ns: int
    C_all: np.ndarray = field(init=False, repr=False)
    b_all: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        polys = tuple(self.polyhedra)
        if len(polys) < 1:
            raise BarrierError("a barrier needs at least one polyhedron")
        for k, p in enumerate(polys):
            if not isinstance(p, Polyhedron):
                raise BarrierError(f"entry {k} is not a Polyhedron")
            if p.dim != self.ns:
                raise BarrierError(
                    f"polyhedron {k} has dimension {p.dim}, expected {self.ns}"
                )
        object.__setattr__(self, "polyhedra", polys)
        C_all = np.vstack([p.C for p in polys])
        b_all = np.concatenate([p.b for p in polys])
        offsets = np.zeros(len(polys) + 1, dtype=np.intp)
        offsets[1:] = np.cumsum([p.n_facets for p in polys])
        for arr in (C_all, b_all, offsets):
            arr.setflags(write=False)
        object.__setattr__(self, "C_all", C_all)
        object.__setattr__(self, "b_all", b_all)
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_polyhedra(self) -> int:
        return len(self.polyhedra)

    @property
    def n_facets(self) -> tuple[int, ...]:
        return tuple(p.n_facets for p in self.polyhedra)

    @property
    def n_facets_total(self) -> int:
        return int(self.offsets[-1])

    def __eq__(self, other):
        if not isinstance(other, PwaBarrier):
            return NotImplemented
        return self.ns == other.ns and self.polyhedra == other.polyhedra

    def _check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.ns,):
            raise BarrierError(f"state must have shape ({self.ns},), got {x.shape}")
        return x

    def _check_index(self, i: int, j: int | None = None):
        if not 0 <= i < self.n_polyhedra:
            raise IndexError(f"polyhedron index {i} out of range [0, {self.n_polyhedra})")
        if j is not None and not 0 <= j < self.polyhedra[i].n_facets:
            raise IndexError(
                f"facet index {j} out of range [0, {self.polyhedra[i].n_facets}) "
                f"for polyhedron {i}"
            )

    def _affine(self, X: np.ndarray) -> np.ndarray:
        # Coordinate-ordered accumulation, so single states and batches round
        # identically (a BLAS product may not).
        C = self.C_all
        vals = X[..., 0, None] * C[:, 0]
        for k in range(1, self.ns):
            vals = vals + X[..., k, None] * C[:, k]
        return vals - self.b_all

    def facet_value(self, i: int, j: int, x) -> float:
        self._check_index(i, j)
        return float(self.facet_values(x)[self.offsets[i] + j])

    def facet_values(self, x) -> np.ndarray:
        """All ``c_ij . x - b_ij`` stacked in polyhedron order."""
        return self._affine(self._check_state(x))

    def block_value(self, i: int, x) -> float:
        self._check_index(i)
        return float(self.block_values(x)[i])

    def block_values(self, x) -> np.ndarray:
        vals = self.facet_values(x)
        return np.maximum.reduceat(vals, self.offsets[:-1])

    def evaluate(self, x) -> float:
        return float(np.min(self.block_values(x)))

    def is_safe(self, x) -> bool:
        # Boundary points (h == 0) are safe: the polyhedra are open.
        return self.evaluate(x) >= 0.0

    def evaluate_many(self, X) -> np.ndarray:
        """Barrier values for each row of ``X``."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.ns:
            raise BarrierError(f"expected an array of shape (k, {self.ns}), got {X.shape}")
        vals = self._affine(X)
        return np.min(np.maximum.reduceat(vals, self.offsets[:-1], axis=1), axis=1)

    def scaling_report(self) -> list[tuple[int, int, float]]:
        """Facets whose normal norm lies outside ``ROW_NORM_RANGE``."""
        lo, hi = ROW_NORM_RANGE
        bad = []
        for i, p in enumerate(self.polyhedra):
            for j, nrm in enumerate(np.linalg.norm(p.C, axis=1)):
                if not lo <= nrm <= hi:
                    bad.append((i, j, float(nrm)))
        return bad

    def to_dict(self) -> dict:
        return {"ns": self.ns, "polyhedra": [p.to_dict() for p in self.polyhedra]}


def from_obstacles(obstacles: Sequence[Polyhedron]) -> PwaBarrier:
    """Barrier whose safe set is the complement of the union of ``obstacles``."""
    obstacles = list(obstacles)
    if not obstacles:
        raise BarrierError("need at least one obstacle")
    barrier = PwaBarrier(tuple(obstacles), ns=obstacles[0].dim)
    for i, j, nrm in barrier.scaling_report():
        logger.warning("facet (%d, %d) has badly scaled normal, |c| = %.3g", i, j, nrm)
    return barrier


def halfspace_obstacle(c: Iterable[float], b: float) -> Polyhedron:
    """Single-facet obstacle ``{x : c . x < b}``."""
    return Polyhedron(np.array([list(c)], dtype=float), np.array([b], dtype=float))


def barrier_from_dict(data: dict) -> PwaBarrier:
    try:
        ns = int(data["ns"])
        polys = [Polyhedron(p["C"], p["b"]) for p in data["polyhedra"]]
    except (KeyError, TypeError) as exc:
        raise BarrierError(f"malformed barrier document: {exc}") from exc
    for k, p in enumerate(polys):
        if p.dim != ns:
            raise BarrierError(f"polyhedron {k} has {p.dim} columns, ns is {ns}")
    return PwaBarrier(tuple(polys), ns=ns)


def load_barrier(path) -> PwaBarrier:
    return barrier_from_dict(json.loads(Path(path).read_text()))


def save_barrier(barrier: PwaBarrier, path) -> None:
    Path(path).write_text(json.dumps(barrier.to_dict(), indent=2))
