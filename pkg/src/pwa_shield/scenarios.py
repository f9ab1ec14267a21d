"""Packaged experiment set-ups: corridor navigation and a cluttered obstacle course."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import noise as nz
from .barrier import Polyhedron, PwaBarrier, barrier_from_dict, from_obstacles
from .dynamics import Dynamics, UnicycleDynamics, dynamics_from_dict, rotation_z
from .filter import ConfigError, FilterConfig, SafetyFilter

FIXTURE_DIR = resources.files("pwa_shield") / "fixtures"


# -- base policies ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AffinePolicy:
    """``u = offset + gain @ x``."""

    offset: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        object.__setattr__(self, "gain", np.array(self.gain, dtype=float, ndmin=2))

    def __call__(self, x, k: int = 0) -> np.ndarray:
        return self.offset + self.gain @ x

    def __eq__(self, other):
        return isinstance(other, AffinePolicy) and self.to_dict() == other.to_dict()

    def to_dict(self):
        return {"type": "affine", "offset": self.offset.tolist(), "gain": self.gain.tolist()}


@dataclass(frozen=True, eq=False)
class TrackingPolicy:
    """Saturated proportional tracking of a planar polyline, blind to obstacles.

    The world-frame velocity is ``speed * t + gain * (p_ref - p)`` where
    ``p_ref`` is the nearest point on the reference and ``t`` its unit
    tangent (zero past the last waypoint).  It is rotated into the body
    frame, the turn rate is ``-heading_gain * theta``, and every component
    is clipped to ``[-u_max, u_max]``.
    """

    waypoints: np.ndarray
    gain: float = 2.0
    speed: float = 1.0
    heading_gain: float = 1.0
    u_max: float = 5.0

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=float, ndmin=2)
        if wp.shape[0] < 1 or wp.shape[1] != 2:
            raise ValueError("waypoints must be a nonempty (k, 2) array")
        object.__setattr__(self, "waypoints", wp)

    def nearest(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Closest reference point and the tangent there."""
        wp = self.waypoints
        if wp.shape[0] == 1:
            return wp[0].copy(), np.zeros(2)
        best, best_d, tangent = None, np.inf, np.zeros(2)
        last = wp.shape[0] - 2
        for s in range(wp.shape[0] - 1):
            a, b = wp[s], wp[s + 1]
            seg = b - a
            L2 = float(seg @ seg)
            lam = 0.0 if L2 == 0 else float(np.clip((p - a) @ seg / L2, 0.0, 1.0))
            pt = a + lam * seg
            d = float((p - pt) @ (p - pt))
            if d < best_d:
                best_d, best = d, pt
                if L2 == 0 or (s == last and lam >= 1.0):
                    tangent = np.zeros(2)
                else:
                    tangent = seg / np.sqrt(L2)
        return best, tangent

    def __call__(self, x, k: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        p = x[:2]
        ref, tangent = self.nearest(p)
        v_world = self.speed * tangent + self.gain * (ref - p)
        v_body = rotation_z(-x[2])[:2, :2] @ v_world
        u = np.array([v_body[0], v_body[1], -self.heading_gain * x[2]])
        return np.clip(u, -self.u_max, self.u_max)

    def __eq__(self, other):
        return isinstance(other, TrackingPolicy) and self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            "type": "tracking",
            "waypoints": self.waypoints.tolist(),
            "gain": self.gain,
            "speed": self.speed,
            "heading_gain": self.heading_gain,
            "u_max": self.u_max,
        }


def tracking_policy(reference, gain: float = 2.0, speed: float = 1.0,
                    heading_gain: float = 1.0, u_max: float = 5.0) -> TrackingPolicy:
    return TrackingPolicy(np.asarray(reference, dtype=float), gain, speed, heading_gain, u_max)


def policy_from_dict(d: dict):
    kind = d.get("type")
    if kind == "affine":
        return AffinePolicy(d["offset"], d["gain"])
    if kind == "tracking":
        return TrackingPolicy(d["waypoints"], d.get("gain", 2.0), d.get("speed", 1.0),
                              d.get("heading_gain", 1.0), d.get("u_max", 5.0))
    raise ValueError(f"unknown policy type {kind!r}")


# -- scenario ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DataDrivenSpec:
    """How the filter's dataset is obtained.

    Either ``n_samples`` fresh draws from ``source`` per rollout (the
    dataset is independent of the rollout noise), or a fixed ``dataset``.
    """

    n_samples: Optional[int] = None
    source: Optional[nz.NoiseModel] = None
    dataset: Optional[nz.Empirical] = None

    def __post_init__(self):
        if (self.dataset is None) == (self.n_samples is None):
            raise ConfigError("give exactly one of n_samples or dataset")

    def draw(self, rng: np.random.Generator, fallback: nz.NoiseModel) -> nz.Empirical:
        if self.dataset is not None:
            return self.dataset
        return nz.Empirical((self.source or fallback).sample(rng, self.n_samples))

    def __eq__(self, other):
        return isinstance(other, DataDrivenSpec) and self.to_dict() == other.to_dict()

    def to_dict(self):
        d = {}
        if self.n_samples is not None:
            d["n_samples"] = self.n_samples
        if self.source is not None:
            d["source"] = self.source.to_dict()
        if self.dataset is not None:
            d["dataset"] = self.dataset.to_dict()
        return d


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    dynamics: Dynamics
    barrier: PwaBarrier
    sim_noise: nz.NoiseModel
    x0: np.ndarray
    config: FilterConfig
    policy: object
    filter_noise: Optional[nz.NoiseModel] = None
    data_driven: Optional[DataDrivenSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def assumed_noise(self) -> Optional[nz.NoiseModel]:
        if self.data_driven is not None:
            return None
        return self.filter_noise if self.filter_noise is not None else self.sim_noise

    def validate(self) -> list[str]:
        """Raise ``ConfigError`` on hard errors; return a list of warnings."""
        warnings = []
        if self.x0.shape != (self.dynamics.ns,):
            raise ConfigError(f"x0 has shape {self.x0.shape}, expected ({self.dynamics.ns},)")
        if self.barrier.ns != self.dynamics.ns:
            raise ConfigError("barrier and dynamics dimensions differ")
        if self.sim_noise.dim != self.dynamics.nxi:
            raise ConfigError(f"noise dimension {self.sim_noise.dim} != {self.dynamics.nxi}")
        if self.data_driven is None:
            if self.filter_noise is not None and self.filter_noise != self.sim_noise:
                raise ConfigError("filter and simulation noise may differ only in data-driven mode")
            if isinstance(self.sim_noise, nz.Empirical):
                raise ConfigError("analytic mode needs an analytic noise model")
        elif self.config.confidence is None:
            raise ConfigError("data-driven mode needs config.confidence")
        if not self.barrier.is_safe(self.x0):
            warnings.append("initial state is not in the safe set")
        for i, j, nrm in self.barrier.scaling_report():
            warnings.append(f"facet ({i}, {j}) badly scaled: |c| = {nrm:.3g}")
        return warnings

    def make_filter(self, dataset: Optional[nz.Empirical] = None, **cfg_overrides) -> SafetyFilter:
        cfg = replace(self.config, **cfg_overrides) if cfg_overrides else self.config
        if self.data_driven is not None:
            if dataset is None:
                raise ConfigError("data-driven scenario: pass the dataset drawn for this run")
            return SafetyFilter(self.barrier, self.dynamics, None, cfg, dataset=dataset)
        return SafetyFilter(self.barrier, self.dynamics, self.assumed_noise, cfg)

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "dynamics": self.dynamics.to_dict(),
            "barrier": self.barrier.to_dict(),
            "sim_noise": self.sim_noise.to_dict(),
            "x0": self.x0.tolist(),
            "config": self.config.to_dict(),
            "policy": self.policy.to_dict(),
        }
        if self.filter_noise is not None:
            d["filter_noise"] = self.filter_noise.to_dict()
        if self.data_driven is not None:
            d["data_driven"] = self.data_driven.to_dict()
        return d


def scenario_from_dict(d: dict, base_dir: Path | None = None) -> Scenario:
    try:
        dd = None
        if "data_driven" in d:
            spec = d["data_driven"]
            dd = DataDrivenSpec(
                n_samples=spec.get("n_samples"),
                source=nz.noise_from_dict(spec["source"], base_dir) if "source" in spec else None,
                dataset=nz.noise_from_dict(spec["dataset"], base_dir) if "dataset" in spec else None,
            )
        return Scenario(
            name=d.get("name", "scenario"),
            dynamics=dynamics_from_dict(d["dynamics"]),
            barrier=barrier_from_dict(d["barrier"]),
            sim_noise=nz.noise_from_dict(d["sim_noise"], base_dir),
            x0=d["x0"],
            config=FilterConfig.from_dict(d.get("config", {})),
            policy=policy_from_dict(d["policy"]),
            filter_noise=nz.noise_from_dict(d["filter_noise"], base_dir) if "filter_noise" in d else None,
            data_driven=dd,
        )
    except KeyError as exc:
        raise ConfigError(f"scenario document is missing {exc}") from exc


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(s.to_dict(), indent=1))


def load_scenario(path_or_name) -> Scenario:
    """Load a scenario file, or a packaged fixture by bare name (e.g. ``corridor``)."""
    path = Path(path_or_name)
    if not path.exists():
        candidate = FIXTURE_DIR / f"{path_or_name}.json"
        if not candidate.is_file():
            raise ConfigError(f"no scenario file or fixture named {path_or_name!r}")
        return scenario_from_dict(json.loads(candidate.read_text()))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(doc, base_dir=path.parent)


# -- corridor ---------------------------------------------------------------

CORRIDOR_HALF_WIDTH = 0.5


def corridor_barrier() -> PwaBarrier:
    """``min(-p_y + 0.5, p_y + 0.5)`` as two single-facet obstacles."""
    w = CORRIDOR_HALF_WIDTH
    return from_obstacles([
        Polyhedron([[0.0, -1.0, 0.0]], [-w]),  # p_y > 0.5
        Polyhedron([[0.0, 1.0, 0.0]], [-w]),  # p_y < -0.5
    ])


def heavy_tail_noise(distribution: str, sigma: float, dof: float = 8.0) -> nz.NoiseModel:
    """Noise on ``p_y`` only.  For Laplace and Student-t, ``sigma`` is the scale parameter."""
    if distribution == "gaussian":
        return nz.Gaussian(np.zeros(3), np.diag([0.0, sigma**2, 0.0]))
    scale = [0.0, sigma, 0.0]
    if distribution == "laplace":
        return nz.Laplace(np.zeros(3), scale)
    if distribution == "student_t":
        return nz.StudentT(np.zeros(3), scale, dof)
    raise ValueError(f"unknown distribution {distribution!r}")


def corridor_scenario(sigma: float = 0.03, epsilon: float = 0.1, horizon: int = 20,
                      mode: str = "analytic", n_samples: Optional[int] = None,
                      confidence: Optional[float] = None, distribution: str = "gaussian",
                      dof: float = 8.0, recompute_each_step: bool = False,
                      dt: float = 0.1) -> Scenario:
    """Narrow corridor ``|p_y| <= 0.5`` with the unsafe base policy ``(0.2, 1, -theta)``."""
    if mode not in ("analytic", "data_driven"):
        raise ValueError(f"unknown mode {mode!r}")
    noise = heavy_tail_noise(distribution, sigma, dof)
    policy = AffinePolicy([0.2, 1.0, 0.0], [[0, 0, 0], [0, 0, 0], [0, 0, -1.0]])
    cfg = FilterConfig(epsilon=epsilon, horizon=horizon,
                       confidence=confidence if mode == "data_driven" else None,
                       recompute_each_step=recompute_each_step)
    dd = None
    if mode == "data_driven":
        if n_samples is None or confidence is None:
            raise ConfigError("data-driven corridor needs n_samples and confidence")
        dd = DataDrivenSpec(n_samples=n_samples)
    return Scenario(
        name=f"corridor-{mode}-{distribution}",
        dynamics=UnicycleDynamics(dt),
        barrier=corridor_barrier(),
        sim_noise=noise,
        x0=np.zeros(3),
        config=cfg,
        policy=policy,
        data_driven=dd,
    )


# -- obstacle course --------------------------------------------------------


def obstacle_course_scenario(layout: str = "obstacle_course", sigma: float = 0.03,
                             epsilon: float = 0.1, horizon: int = 150) -> Scenario:
    """The packaged 13-obstacle course with a straight-line tracking base policy."""
    base = load_scenario(layout)
    cfg = replace(base.config, epsilon=epsilon, horizon=horizon)
    noise = nz.Gaussian(np.zeros(3), np.diag([sigma**2, sigma**2, 0.0]))
    return replace(base, sim_noise=noise, config=cfg, filter_noise=None)


def generate_obstacle_course(seed: int = 7, n_obstacles: int = 13) -> Scenario:
    """Procedural serpentine obstacle course (used to produce the fixture).

    Two long walls bound the pathway; the remaining obstacles alternate
    above and below the straight reference line and each pokes a tip across
    it, so the base policy drives into every one of them.
    """
    from scipy.spatial import ConvexHull

    rng = np.random.default_rng(seed)
    obstacles = []
    x_start, spacing = 1.2, 1.45
    n_inner = n_obstacles - 2
    for k in range(n_inner):
        side = 1.0 if k % 2 == 0 else -1.0
        cx = x_start + spacing * k
        while True:
            n_vert = int(rng.integers(2, 6))  # plus the tip vertex
            angles = np.sort(rng.uniform(0.15 * np.pi, 0.85 * np.pi, n_vert))
            radius = rng.uniform(0.35, 0.5, n_vert)
            base_y = side * 0.45
            pts = np.column_stack([cx + radius * np.cos(angles),
                                   base_y + side * radius * np.sin(angles)])
            tip = np.array([[cx + rng.uniform(-0.1, 0.1), -side * rng.uniform(0.15, 0.3)]])
            pts = np.vstack([pts, tip,
                             [[cx - 0.42, base_y + side * 0.05], [cx + 0.42, base_y + side * 0.05]]])
            hull = ConvexHull(pts)
            if 3 <= len(hull.equations) <= 6:
                break
        obstacles.append(_hull_polyhedron(hull))
    x_end = x_start + spacing * (n_inner - 1) + 1.5
    for side in (1.0, -1.0):
        y_in, y_out = side * 1.45, side * 2.0
        pts = np.array([[-1.0, y_in], [x_end + 1.0, y_in + side * 0.1],
                        [x_end + 1.0, y_out], [-1.0, y_out]])
        obstacles.append(_hull_polyhedron(ConvexHull(pts)))
    barrier = from_obstacles(obstacles)
    reference = np.array([[0.0, 0.0], [x_end, 0.0]])
    # Ordering by the predicted successor matched the exact filter far more
    # often than the current state on this layout.
    cfg = FilterConfig(epsilon=0.1, horizon=150, order_anchor="predicted")
    return Scenario(
        name="obstacle_course",
        dynamics=UnicycleDynamics(0.1, u_lower=[-5.0] * 3, u_upper=[5.0] * 3),
        barrier=barrier,
        sim_noise=nz.Gaussian(np.zeros(3), np.diag([0.03**2, 0.03**2, 0.0])),
        x0=np.zeros(3),
        config=cfg,
        policy=tracking_policy(reference, gain=2.0, speed=1.0),
    )


def _hull_polyhedron(hull) -> Polyhedron:
    # Hull facets satisfy n . p + d <= 0 inside, with unit outward normals n.
    eq = np.round(hull.equations, 12)
    C = np.column_stack([eq[:, 0], eq[:, 1], np.zeros(len(eq))])
    return Polyhedron(C, -eq[:, 2])
