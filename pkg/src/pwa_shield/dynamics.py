"""Control-affine discrete-time dynamics ``x+ = A(x) + B(x) u + g(x, xi)``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


def rotation_z(theta: float) -> np.ndarray:
    """Rotation by ``theta`` about the z axis of R^3."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _bounds(v, na):
    if v is None:
        return None
    return np.broadcast_to(np.asarray(v, dtype=float), (na,)).copy()


class Dynamics:
    """Base class.  Subclasses provide ``drift`` and ``input_map``.

    ``noise_map(x)`` returns the matrix ``G(x)`` of a linear noise channel
    ``g(x, xi) = G(x) xi``, or ``None`` for purely additive noise.
    """

    ns: int
    na: int
    nxi: int
    u_lower: Optional[np.ndarray] = None
    u_upper: Optional[np.ndarray] = None

    def drift(self, x) -> np.ndarray:
        raise NotImplementedError

    def input_map(self, x) -> np.ndarray:
        raise NotImplementedError

    def noise_map(self, x) -> Optional[np.ndarray]:
        return None

    # True when g(x, xi) does not depend on x; quantile terms can then be cached.
    state_independent_noise = True

    def f(self, x, u) -> np.ndarray:
        return self.drift(x) + self.input_map(x) @ np.asarray(u, dtype=float)

    def step(self, x, u, xi) -> np.ndarray:
        nxt = self.f(x, u)
        G = self.noise_map(x)
        return nxt + (np.asarray(xi, dtype=float) if G is None else G @ xi)

    def clip_input(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.u_lower is not None:
            u = np.maximum(u, self.u_lower)
        if self.u_upper is not None:
            u = np.minimum(u, self.u_upper)
        return u


@dataclass(frozen=True, eq=False)
class UnicycleDynamics(Dynamics):
    """Planar robot ``x+ = x + dt R_z(theta) u + xi`` with state ``(p_x, p_y, theta)``."""

    dt: float = 0.1
    u_lower: Optional[np.ndarray] = None
    u_upper: Optional[np.ndarray] = None

    ns = 3
    na = 3
    nxi = 3

    def __post_init__(self):
        object.__setattr__(self, "u_lower", _bounds(self.u_lower, 3))
        object.__setattr__(self, "u_upper", _bounds(self.u_upper, 3))

    def drift(self, x):
        return np.array(x, dtype=float)

    def input_map(self, x):
        return self.dt * rotation_z(float(x[2]))

    def __eq__(self, other):
        return isinstance(other, UnicycleDynamics) and self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            "type": "unicycle",
            "dt": self.dt,
            "u_lower": None if self.u_lower is None else self.u_lower.tolist(),
            "u_upper": None if self.u_upper is None else self.u_upper.tolist(),
        }


@dataclass(frozen=True, eq=False)
class LinearDynamics(Dynamics):
    """``x+ = A x + B u + G xi`` with constant matrices (``G`` defaults to identity)."""

    A: np.ndarray
    B: np.ndarray
    G: Optional[np.ndarray] = None
    u_lower: Optional[np.ndarray] = None
    u_upper: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        B = np.array(self.B, dtype=float, ndmin=2)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"incompatible shapes A {A.shape}, B {B.shape}")
        G = None if self.G is None else np.array(self.G, dtype=float, ndmin=2)
        if G is not None and G.shape[0] != A.shape[0]:
            raise ValueError(f"noise matrix has {G.shape[0]} rows, expected {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "u_lower", _bounds(self.u_lower, B.shape[1]))
        object.__setattr__(self, "u_upper", _bounds(self.u_upper, B.shape[1]))

    @property
    def ns(self):
        return self.A.shape[0]

    @property
    def na(self):
        return self.B.shape[1]

    @property
    def nxi(self):
        return self.ns if self.G is None else self.G.shape[1]

    def drift(self, x):
        return self.A @ np.asarray(x, dtype=float)

    def input_map(self, x):
        return self.B

    def noise_map(self, x):
        return self.G

    def __eq__(self, other):
        return isinstance(other, LinearDynamics) and self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            "type": "linear",
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "G": None if self.G is None else self.G.tolist(),
            "u_lower": None if self.u_lower is None else self.u_lower.tolist(),
            "u_upper": None if self.u_upper is None else self.u_upper.tolist(),
        }


def dynamics_from_dict(d: dict) -> Dynamics:
    kind = d.get("type")
    if kind == "unicycle":
        return UnicycleDynamics(d.get("dt", 0.1), d.get("u_lower"), d.get("u_upper"))
    if kind == "linear":
        return LinearDynamics(d["A"], d["B"], d.get("G"), d.get("u_lower"), d.get("u_upper"))
    raise ValueError(f"unknown dynamics type {kind!r}")
