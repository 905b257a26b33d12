"""Scenario data model, synthetic generation, ground-truth occupancy
rasterization, privileged scene-context encoding, and scenario file I/O.

Scenarios are ego-centered at t=0 (the ego's current pose defines the
frame origin only loosely: all coordinates are stored in one fixed world
frame whose origin is the ego position at t=0). Non-ego futures follow
constant-turn-rate-and-speed kinematics; the ego future is produced by
the discrete bicycle model so control round trips are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import AGENT_CLASSES, COMMANDS, TEMPLATES, TL_STATES, GeneratorConfig, GridConfig
from .errors import ConfigurationError, DataError, ParseError

Array = np.ndarray

VEHICLE_BOX = (4.8, 2.0)
CYCLIST_BOX = (1.8, 0.6)
PEDESTRIAN_BOX = (0.6, 0.6)
WHEELBASE = 2.8
MAP_EXTENT = 32.0
POLYLINE_TAGS = ("lane", "edge")


# -- grid geometry ---------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Ego-centered occupancy grid: world <-> cell transforms."""

    height_cells: int
    width_cells: int
    resolution: float
    horizon_steps: int
    step_seconds: float

    def __post_init__(self):
        if self.height_cells <= 0 or self.width_cells <= 0:
            raise ConfigurationError("grid extents must be positive")
        if self.resolution <= 0 or self.horizon_steps <= 0 or self.step_seconds <= 0:
            raise ConfigurationError("resolution, horizon and step must be positive")

    @property
    def origin(self) -> tuple[float, float]:
        """World coordinates of the grid's low corner (cell (0,0) corner)."""
        return (-0.5 * self.height_cells * self.resolution,
                -0.5 * self.width_cells * self.resolution)

    def world_to_cell(self, points: Array) -> Array:
        """Continuous cell coords; integer values are cell centers."""
        p = np.asarray(points, dtype=np.float64)
        ox, oy = self.origin
        out = np.empty_like(p)
        out[..., 0] = (p[..., 0] - ox) / self.resolution - 0.5
        out[..., 1] = (p[..., 1] - oy) / self.resolution - 0.5
        return out

    def world_to_cell_t(self, points: Tensor) -> Tensor:
        ox, oy = self.origin
        shifted = points - Tensor(np.array([ox + 0.5 * self.resolution,
                                            oy + 0.5 * self.resolution]))
        return shifted * (1.0 / self.resolution)

    def cell_center(self, ij: Array) -> Array:
        ij = np.asarray(ij, dtype=np.float64)
        ox, oy = self.origin
        out = np.empty_like(ij)
        out[..., 0] = ox + (ij[..., 0] + 0.5) * self.resolution
        out[..., 1] = oy + (ij[..., 1] + 0.5) * self.resolution
        return out

    def cell_of(self, points: Array) -> Array:
        p = np.asarray(points, dtype=np.float64)
        ox, oy = self.origin
        return np.stack([
            np.floor((p[..., 0] - ox) / self.resolution),
            np.floor((p[..., 1] - oy) / self.resolution),
        ], axis=-1).astype(np.int64)

    def in_bounds(self, cells: Array) -> Array:
        c = np.asarray(cells)
        return ((c[..., 0] >= 0) & (c[..., 0] < self.height_cells)
                & (c[..., 1] >= 0) & (c[..., 1] < self.width_cells))

    def centers_grid(self) -> Array:
        """(H, W, 2) world coordinates of all cell centers."""
        ii, jj = np.meshgrid(np.arange(self.height_cells), np.arange(self.width_cells),
                             indexing="ij")
        return self.cell_center(np.stack([ii, jj], axis=-1))

    def coarse(self, factor: int) -> "GridSpec":
        if self.height_cells % factor or self.width_cells % factor:
            raise ConfigurationError(f"grid extents not divisible by {factor}")
        return GridSpec(self.height_cells // factor, self.width_cells // factor,
                        self.resolution * factor, self.horizon_steps, self.step_seconds)


def grid_from_config(cfg: GridConfig) -> GridSpec:
    return GridSpec(cfg.height_cells, cfg.width_cells, cfg.resolution,
                    cfg.horizon_steps, cfg.step_seconds)


# -- agents and scenario -----------------------------------------------------------

def normalize_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return out if out.shape else float(out)


@dataclass
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    valid: bool = True

    def pos(self) -> Array:
        return np.array([self.x, self.y])


@dataclass
class AgentTrack:
    agent_class: str
    length: float
    width: float
    history: list[AgentState]   # T_h+1 states, last one is t=0
    future: list[AgentState]    # T states, t=1..T

    def __post_init__(self):
        if self.agent_class not in AGENT_CLASSES:
            raise DataError(f"unknown agent class '{self.agent_class}'")
        if self.length <= 0 or self.width <= 0:
            raise DataError("agent box extents must be positive")

    @property
    def current(self) -> AgentState:
        return self.history[-1]


@dataclass
class Scenario:
    template: str
    polylines: list[tuple[str, Array]]      # (tag, (P, 2) points)
    agents: list[AgentTrack]                # index 0 is the ego
    route: Array                            # (R, 2) dense, s-monotone
    goal: tuple[float, float]
    command: str
    tl_state: str
    ego_controls: Array                     # (T, 2): accel, steer per future step

    @property
    def ego(self) -> AgentTrack:
        return self.agents[0]

    @property
    def ego_status(self) -> tuple[float, float]:
        cur = self.ego.current
        return (cur.speed, cur.heading)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def horizon(self) -> int:
        return len(self.ego.future)

    def future_array(self) -> Array:
        """(N_A, T, 2) logged future positions."""
        return np.array([[[s.x, s.y] for s in a.future] for a in self.agents])

    def future_valid(self) -> Array:
        return np.array([[s.valid for s in a.future] for a in self.agents], dtype=bool)

    def current_states(self) -> Array:
        """(N_A, 4): x, y, heading, speed at t=0."""
        return np.array([[a.current.x, a.current.y, a.current.heading, a.current.speed]
                         for a in self.agents])


def _check_finite(scenario: Scenario) -> None:
    for a in scenario.agents:
        for s in a.history + a.future:
            if not all(map(math.isfinite, (s.x, s.y, s.heading, s.speed))):
                raise DataError("non-finite agent state in scenario")


# -- kinematics --------------------------------------------------------------------

def ctrv_state(x0: float, y0: float, heading: float, v: float, omega: float,
               t: float) -> tuple[float, float, float]:
    """Closed-form constant-turn-rate-and-speed position/heading at time t."""
    if abs(omega) < 1e-9:
        return (x0 + v * t * math.cos(heading), y0 + v * t * math.sin(heading), heading)
    h1 = heading + omega * t
    x = x0 + (v / omega) * (math.sin(h1) - math.sin(heading))
    y = y0 - (v / omega) * (math.cos(h1) - math.cos(heading))
    return (x, y, normalize_angle(h1))


def bicycle_step(state: tuple[float, float, float, float], accel: float, steer: float,
                 dt: float, wheelbase: float = WHEELBASE) -> tuple[float, float, float, float]:
    """Discrete kinematic bicycle step (speed clamped at zero)."""
    x, y, psi, v = state
    x2 = x + v * math.cos(psi) * dt
    y2 = y + v * math.sin(psi) * dt
    psi2 = normalize_angle(psi + (v / wheelbase) * math.tan(steer) * dt)
    v2 = max(v + accel * dt, 0.0)
    return (x2, y2, psi2, v2)


def _ctrv_track(rng_unused, cls: str, length: float, width: float,
                x0: float, y0: float, heading: float, v: float, omega: float,
                t_hist: int, t_fut: int, dt: float) -> AgentTrack:
    history = []
    for k in range(-t_hist, 1):
        x, y, h = ctrv_state(x0, y0, heading, v, omega, k * dt)
        history.append(AgentState(x, y, h, v))
    future = []
    for k in range(1, t_fut + 1):
        x, y, h = ctrv_state(x0, y0, heading, v, omega, k * dt)
        future.append(AgentState(x, y, h, v))
    return AgentTrack(cls, length, width, history, future)


def _ego_track_from_controls(start: tuple[float, float, float, float], controls: Array,
                             t_hist: int, dt: float) -> AgentTrack:
    x0, y0, psi0, v0 = start
    history = []
    for k in range(-t_hist, 1):
        x, y, h = ctrv_state(x0, y0, psi0, v0, 0.0, k * dt)
        history.append(AgentState(x, y, h, v0))
    future = []
    state = (x0, y0, psi0, v0)
    for a, d in controls:
        state = bicycle_step(state, float(a), float(d), dt)
        future.append(AgentState(state[0], state[1], state[2], state[3]))
    return AgentTrack("vehicle", *VEHICLE_BOX, history, future)


# -- templates ----------------------------------------------------------------------

def _line(p0, p1, n=33) -> Array:
    return np.linspace(np.asarray(p0, float), np.asarray(p1, float), n)


def _arc(center, radius, a0, a1, n=33) -> Array:
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=-1)


def _pick_class(rng) -> tuple[str, float, float]:
    r = rng.random()
    if r < 0.8:
        return ("vehicle", *VEHICLE_BOX)
    if r < 0.9:
        return ("cyclist", *CYCLIST_BOX)
    return ("pedestrian", *PEDESTRIAN_BOX)


def _noisy(rng, base: float, std: float) -> float:
    return base + rng.uniform(-std, std) if std > 0 else base


def generate_scenario(seed: int, cfg: GeneratorConfig, grid: GridConfig | None = None) -> Scenario:
    """Deterministic synthetic scenario from (seed, cfg)."""
    cfg.validate()
    grid = grid or GridConfig()
    rng = np.random.default_rng(seed)
    t_fut = grid.horizon_steps
    t_hist = cfg.history_steps
    dt = grid.step_seconds
    std = cfg.noise_std
    n_neighbors = cfg.n_agents - 1

    lane_w = 3.5
    if cfg.template == "straight":
        polylines = [("lane", _line((-MAP_EXTENT, 0.0), (MAP_EXTENT, 0.0))),
                     ("lane", _line((-MAP_EXTENT, lane_w), (MAP_EXTENT, lane_w))),
                     ("edge", _line((-MAP_EXTENT, -lane_w / 2), (MAP_EXTENT, -lane_w / 2))),
                     ("edge", _line((-MAP_EXTENT, 1.5 * lane_w), (MAP_EXTENT, 1.5 * lane_w)))]
        v_ego = _noisy(rng, 6.0, 4 * std)
        controls = np.zeros((t_fut, 2))
        ego = _ego_track_from_controls((0.0, 0.0, 0.0, v_ego), controls, t_hist, dt)
        route = _line((-10.0, 0.0), (MAP_EXTENT + 20.0, 0.0), 120)
        command = "straight"
        tl = "none"
        neighbors = []
        for i in range(n_neighbors):
            cls, ln, wd = _pick_class(rng)
            lane_y = lane_w if i % 2 else 0.0
            gap = 10.0 + 8.0 * (i // 2)
            x0 = gap if (i % 4) < 2 else -gap
            v = _noisy(rng, 5.0 if cls == "vehicle" else 2.0, 6 * std)
            v = max(v, 0.5)
            neighbors.append(_ctrv_track(rng, cls, ln, wd, x0, _noisy(rng, lane_y, std),
                                         0.0, v, _noisy(rng, 0.0, 0.02 * std),
                                         t_hist, t_fut, dt))
    elif cfg.template == "intersection":
        polylines = [("lane", _line((-MAP_EXTENT, 0.0), (MAP_EXTENT, 0.0))),
                     ("lane", _line((0.0, -MAP_EXTENT), (0.0, MAP_EXTENT))),
                     ("edge", _line((-MAP_EXTENT, -lane_w), (-lane_w, -lane_w))),
                     ("edge", _line((lane_w, -lane_w), (MAP_EXTENT, -lane_w)))]
        command = COMMANDS[rng.integers(0, 3)]
        tl = TL_STATES[1 + rng.integers(0, 3)]
        v_ego = _noisy(rng, 5.0, 4 * std)
        controls = np.zeros((t_fut, 2))
        if command != "straight":
            steer = 0.35 if command == "left" else -0.35
            controls[2:7, 1] = steer
        ego = _ego_track_from_controls((-12.0, 0.0, 0.0, v_ego), controls, t_hist, dt)
        if command == "straight":
            route = _line((-20.0, 0.0), (MAP_EXTENT + 20.0, 0.0), 120)
        else:
            sgn = 1.0 if command == "left" else -1.0
            r = 8.0
            route = np.concatenate([
                _line((-20.0, 0.0), (-r, 0.0), 30),
                _arc((-r, sgn * r), r, -sgn * np.pi / 2, 0.0, 40)[1:],
                _line((0.0, sgn * r), (0.0, sgn * (MAP_EXTENT + 10.0)), 40)[1:],
            ])
        neighbors = []
        for i in range(n_neighbors):
            cls, ln, wd = _pick_class(rng)
            v = max(_noisy(rng, 4.5 if cls == "vehicle" else 1.5, 6 * std), 0.5)
            if i % 2 == 0:
                # cross traffic on the vertical road, timed to reach the center
                t_cross = 1.0 + 0.8 * (i // 2) + _noisy(rng, 0.0, std)
                y0 = -v * t_cross * (1 if i % 4 < 2 else -1)
                head = math.pi / 2 if y0 < 0 else -math.pi / 2
                neighbors.append(_ctrv_track(rng, cls, ln, wd, _noisy(rng, 0.0, std), y0,
                                             head, v, _noisy(rng, 0.0, 0.02 * std),
                                             t_hist, t_fut, dt))
            else:
                x0 = 8.0 + 7.0 * (i // 2)
                neighbors.append(_ctrv_track(rng, cls, ln, wd, x0, _noisy(rng, 0.0, std),
                                             math.pi, v, _noisy(rng, 0.0, 0.02 * std),
                                             t_hist, t_fut, dt))
    elif cfg.template == "roundabout":
        ring_r = 12.0
        polylines = [("lane", _arc((0.0, 0.0), ring_r, 0.0, 2 * np.pi, 80)),
                     ("lane", _line((-MAP_EXTENT, -ring_r - lane_w), (MAP_EXTENT, -ring_r - lane_w))),
                     ("edge", _arc((0.0, 0.0), ring_r + lane_w, 0.0, 2 * np.pi, 80))]
        command = "straight"
        tl = "none"
        v_ego = _noisy(rng, 4.0, 3 * std)
        # steer to hold the ring radius with the bicycle model
        steer = math.atan(WHEELBASE / ring_r)
        controls = np.zeros((t_fut, 2))
        controls[:, 1] = steer
        ego = _ego_track_from_controls((0.0, -ring_r, 0.0, v_ego), controls, t_hist, dt)
        route = _arc((0.0, 0.0), ring_r, -np.pi / 2, np.pi, 160)
        neighbors = []
        for i in range(n_neighbors):
            cls, ln, wd = _pick_class(rng)
            ang = -np.pi / 2 + (i + 1) * (2 * np.pi / (n_neighbors + 1)) + _noisy(rng, 0.0, 0.1 * std)
            v = max(_noisy(rng, 3.5 if cls == "vehicle" else 1.2, 4 * std), 0.5)
            x0 = ring_r * math.cos(ang)
            y0 = ring_r * math.sin(ang)
            heading = normalize_angle(ang + math.pi / 2)
            neighbors.append(_ctrv_track(rng, cls, ln, wd, x0, y0, heading, v,
                                         v / ring_r, t_hist, t_fut, dt))
    else:  # merge
        polylines = [("lane", _line((-MAP_EXTENT, 0.0), (MAP_EXTENT, 0.0))),
                     ("lane", np.concatenate([_line((-MAP_EXTENT, -8.0), (-5.0, -1.0), 30),
                                              _line((-5.0, -1.0), (MAP_EXTENT, 0.0), 30)[1:]])),
                     ("edge", _line((-MAP_EXTENT, lane_w / 2), (MAP_EXTENT, lane_w / 2)))]
        command = "straight"
        tl = "none"
        v_ego = _noisy(rng, 5.0, 3 * std)
        heading0 = math.atan2(7.0, 27.0)
        controls = np.zeros((t_fut, 2))
        controls[0:4, 1] = -0.12  # straighten onto the main lane
        ego = _ego_track_from_controls((-14.0, -2.5, heading0, v_ego), controls, t_hist, dt)
        route = np.concatenate([_line((-20.0, -4.0), (-5.0, -1.0), 40),
                                _line((-5.0, -1.0), (MAP_EXTENT + 10.0, 0.0), 60)[1:]])
        neighbors = []
        for i in range(n_neighbors):
            cls, ln, wd = _pick_class(rng)
            gap = 8.0 + 7.0 * i
            x0 = -gap if i % 2 else gap - 4.0
            v = max(_noisy(rng, 5.5 if cls == "vehicle" else 2.0, 5 * std), 0.5)
            neighbors.append(_ctrv_track(rng, cls, ln, wd, x0, _noisy(rng, 0.0, std), 0.0, v,
                                         _noisy(rng, 0.0, 0.02 * std), t_hist, t_fut, dt))

    agents = [ego] + neighbors
    # keep all agents inside the map extent at t=0
    for a in agents[1:]:
        cur = a.current
        if abs(cur.x) > MAP_EXTENT - 2 or abs(cur.y) > MAP_EXTENT - 2:
            shrink = (MAP_EXTENT - 2) / max(abs(cur.x), abs(cur.y))
            dx, dy = cur.x * (shrink - 1.0), cur.y * (shrink - 1.0)
            for s in a.history + a.future:
                s.x += dx
                s.y += dy

    goal_idx = min(len(route) - 1, int(0.75 * len(route)))
    scenario = Scenario(
        template=cfg.template,
        polylines=polylines,
        agents=agents,
        route=route,
        goal=(float(route[goal_idx, 0]), float(route[goal_idx, 1])),
        command=command,
        tl_state=tl,
        ego_controls=controls,
    )
    _check_finite(scenario)
    return scenario


# -- occupancy rasterization ----------------------------------------------------------

@dataclass
class ConditionedOccupancy:
    """Per-agent occupancy channels plus the max-collapsed joint grid.

    conditioned: (T, H, W, N_A) probabilities in [0, 1]; channel 0 (ego)
    stays empty for ground-truth labels. joint: (T, H, W) = max over the
    agent axis, exactly.
    """

    conditioned: Array

    def __post_init__(self):
        self.conditioned = np.asarray(self.conditioned, dtype=np.float64)
        if self.conditioned.ndim != 4:
            raise DataError(f"conditioned occupancy must be 4-D, got shape {self.conditioned.shape}")
        if self.conditioned.min() < 0.0 or self.conditioned.max() > 1.0:
            raise DataError("occupancy probabilities must lie in [0, 1]")

    @property
    def joint(self) -> Array:
        return self.conditioned.max(axis=-1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.conditioned.shape


def _stamp_box(grid_arr: Array, spec: GridSpec, cx: float, cy: float, heading: float,
               length: float, width: float) -> None:
    """Set cells whose centers fall inside the oriented box (in place)."""
    half_diag = 0.5 * math.hypot(length, width)
    lo = spec.cell_of(np.array([cx - half_diag, cy - half_diag]))
    hi = spec.cell_of(np.array([cx + half_diag, cy + half_diag]))
    i0, j0 = max(int(lo[0]), 0), max(int(lo[1]), 0)
    i1 = min(int(hi[0]) + 1, spec.height_cells)
    j1 = min(int(hi[1]) + 1, spec.width_cells)
    if i0 >= i1 or j0 >= j1:
        return
    ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
    centers = spec.cell_center(np.stack([ii, jj], axis=-1))
    dx = centers[..., 0] - cx
    dy = centers[..., 1] - cy
    c, s = math.cos(heading), math.sin(heading)
    lon = dx * c + dy * s
    lat = -dx * s + dy * c
    inside = (np.abs(lon) <= length / 2.0) & (np.abs(lat) <= width / 2.0)
    grid_arr[i0:i1, j0:j1][inside] = 1.0


def rasterize_gt_occupancy(scenario: Scenario, spec: GridSpec) -> ConditionedOccupancy:
    """Hard 0/1 labels: cell center inside a neighbor's oriented box.

    The ego (agent 0) is excluded; out-of-bounds agents contribute nothing.
    """
    t_fut = scenario.horizon
    out = np.zeros((t_fut, spec.height_cells, spec.width_cells, scenario.n_agents))
    for ai, agent in enumerate(scenario.agents):
        if ai == 0:
            continue
        for t, state in enumerate(agent.future):
            if not state.valid:
                continue
            _stamp_box(out[t, :, :, ai], spec, state.x, state.y, state.heading,
                       agent.length, agent.width)
    return ConditionedOccupancy(out)


def constant_velocity_prior(scenario: Scenario, spec: GridSpec) -> Array:
    """(T, H, W) joint occupancy from constant-velocity extrapolation of the
    current neighbor states; the coarse prior consumed before any policy exists."""
    t_fut = spec.horizon_steps
    dt = spec.step_seconds
    out = np.zeros((t_fut, spec.height_cells, spec.width_cells))
    for ai, agent in enumerate(scenario.agents):
        if ai == 0 or not agent.current.valid:
            continue
        cur = agent.current
        vx = cur.speed * math.cos(cur.heading)
        vy = cur.speed * math.sin(cur.heading)
        for t in range(t_fut):
            _stamp_box(out[t], spec, cur.x + vx * (t + 1) * dt, cur.y + vy * (t + 1) * dt,
                       cur.heading, agent.length, agent.width)
    return out


# -- privileged scene-context encoding ---------------------------------------------

@dataclass
class ContextFeatures:
    """Encoded scene context: grid, agent, and map features (batched)."""

    q_b: Tensor    # (B, H', W', D) at the coarsest pyramid scale
    q_a: Tensor    # (B, N_A, D)
    q_map: Tensor  # (B, N_M, D)


def resample_polyline(points: Array, n: int) -> Array:
    """Arc-length uniform resampling to exactly n points."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        return np.tile(pts[0], (n, 1))
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, 2))
    out[:, 0] = np.interp(targets, s, pts[:, 0])
    out[:, 1] = np.interp(targets, s, pts[:, 1])
    return out


class ContextEncoder:
    """Privileged encoder replacing camera perception: semantic grid stamping
    plus per-agent / per-polyline MLPs."""

    POLY_POINTS = 16
    HIST_FEATS = 6   # x, y, cos/sin heading, speed, valid
    BOX_FEATS = 2 + len(AGENT_CLASSES)

    def __init__(self, store: nn.ParamStore, spec: GridSpec, dim: int, pe_dim: int,
                 history_steps: int, coarse_factor: int):
        self.spec = spec
        self.coarse_spec = spec.coarse(coarse_factor)
        self.dim = dim
        self.pe_dim = pe_dim
        hist_in = (history_steps + 1) * self.HIST_FEATS + self.BOX_FEATS
        self.agent_mlp = nn.MLP(store, "encoder.agent_mlp", [hist_in, dim, dim])
        self.point_mlp = nn.MLP(store, "encoder.map_point_mlp",
                                [2 + len(POLYLINE_TAGS), dim, dim])
        self.map_out = nn.Linear(store, "encoder.map_out", dim, dim)
        self.sem_proj = nn.Linear(store, "encoder.grid_sem", 3, dim)
        self.pe_proj = nn.Linear(store, "encoder.grid_pe", pe_dim, dim)
        self.history_steps = history_steps
        self._pe_cache: Array | None = None

    def agent_features(self, scenario: Scenario) -> Array:
        rows = []
        n_hist = self.history_steps + 1
        for agent in scenario.agents:
            hist = agent.history[-n_hist:]
            vals = [0.0] * (6 * (n_hist - len(hist)))  # left-pad short histories
            for s in hist:
                if s.valid:
                    vals += [s.x / MAP_EXTENT, s.y / MAP_EXTENT, math.cos(s.heading),
                             math.sin(s.heading), s.speed / 10.0, 1.0]
                else:
                    vals += [0.0] * 6
            onehot = [1.0 if agent.agent_class == c else 0.0 for c in AGENT_CLASSES]
            vals += [agent.length / 5.0, agent.width / 5.0] + onehot
            rows.append(vals)
        return np.array(rows)

    def map_features(self, scenario: Scenario) -> Array:
        feats = np.zeros((len(scenario.polylines), self.POLY_POINTS,
                          2 + len(POLYLINE_TAGS)))
        for pi, (tag, pts) in enumerate(scenario.polylines):
            if tag not in POLYLINE_TAGS:
                raise DataError(f"unknown polyline tag '{tag}'")
            rs = resample_polyline(pts, self.POLY_POINTS)
            feats[pi, :, 0] = rs[:, 0] / MAP_EXTENT
            feats[pi, :, 1] = rs[:, 1] / MAP_EXTENT
            feats[pi, :, 2 + POLYLINE_TAGS.index(tag)] = 1.0
        return feats

    def semantic_channels(self, scenario: Scenario) -> Array:
        """(H', W', 3): drivable / lane-center / agent-footprint stamps."""
        spec = self.coarse_spec
        centers = spec.centers_grid().reshape(-1, 2)
        sem = np.zeros((centers.shape[0], 3))
        for tag, pts in scenario.polylines:
            rs = resample_polyline(pts, 48)
            d = np.linalg.norm(centers[:, None, :] - rs[None, :, :], axis=-1).min(axis=1)
            sem[:, 0] = np.maximum(sem[:, 0], (d < 6.0).astype(float))
            if tag == "lane":
                sem[:, 1] = np.maximum(sem[:, 1], (d < 2.0).astype(float))
        foot = np.zeros((spec.height_cells, spec.width_cells))
        for agent in scenario.agents:
            cur = agent.current
            if cur.valid:
                _stamp_box(foot, spec, cur.x, cur.y, cur.heading, agent.length, agent.width)
        sem[:, 2] = foot.reshape(-1)
        return sem.reshape(spec.height_cells, spec.width_cells, 3)

    def encode_arrays(self, agent_rows: Array, map_rows: Array, sem: Array) -> ContextFeatures:
        """Encode pre-extracted feature arrays (batched); the raw-feature
        extraction is deterministic per scenario so callers may cache it."""
        if not np.all(np.isfinite(agent_rows)):
            raise DataError("non-finite agent features")
        q_a = self.agent_mlp(Tensor(agent_rows))
        point_feats = self.point_mlp(Tensor(map_rows))
        pooled = point_feats.max(axis=2)
        q_map = self.map_out(pooled)
        if self._pe_cache is None:
            self._pe_cache = nn.sinusoidal_pe(
                self.coarse_spec.centers_grid(), self.pe_dim).data
        q_b = self.sem_proj(Tensor(sem)) + self.pe_proj(Tensor(self._pe_cache))
        return ContextFeatures(q_b=q_b, q_a=q_a, q_map=q_map)

    def encode_batch(self, scenarios: list[Scenario]) -> ContextFeatures:
        n_agents = scenarios[0].n_agents
        n_polys = len(scenarios[0].polylines)
        for s in scenarios:
            if s.n_agents != n_agents or len(s.polylines) != n_polys:
                raise DataError("all scenarios in a batch must share agent and polyline counts")
        agent_rows = np.stack([self.agent_features(s) for s in scenarios])
        map_rows = np.stack([self.map_features(s) for s in scenarios])
        sem = np.stack([self.semantic_channels(s) for s in scenarios])
        return self.encode_arrays(agent_rows, map_rows, sem)

    def encode(self, scenario: Scenario) -> ContextFeatures:
        return self.encode_batch([scenario])


# -- scenario file io -----------------------------------------------------------------

_FILE_HEADER = "hybridplan-scenario v1"


def _fmt(x: float) -> str:
    return repr(float(x))


def save_scenario(path: str, scenario: Scenario) -> None:
    lines = [_FILE_HEADER,
             f"template {scenario.template}",
             f"tl {scenario.tl_state}",
             f"command {scenario.command}",
             f"goal {_fmt(scenario.goal[0])} {_fmt(scenario.goal[1])}",
             f"route {len(scenario.route)}"]
    for x, y in scenario.route:
        lines.append(f"{_fmt(x)} {_fmt(y)}")
    lines.append(f"polylines {len(scenario.polylines)}")
    for tag, pts in scenario.polylines:
        lines.append(f"polyline {tag} {len(pts)}")
        for x, y in pts:
            lines.append(f"{_fmt(x)} {_fmt(y)}")
    lines.append(f"agents {len(scenario.agents)}")
    for agent in scenario.agents:
        lines.append(f"agent {agent.agent_class} {_fmt(agent.length)} {_fmt(agent.width)}")
        for name, states in (("history", agent.history), ("future", agent.future)):
            lines.append(f"{name} {len(states)}")
            for s in states:
                lines.append(f"{_fmt(s.x)} {_fmt(s.y)} {_fmt(s.heading)} {_fmt(s.speed)} "
                             f"{int(s.valid)}")
    lines.append(f"ego_controls {len(scenario.ego_controls)}")
    for a, d in scenario.ego_controls:
        lines.append(f"{_fmt(a)} {_fmt(d)}")
    lines.append("end")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, path: str, text: str):
        self.path = path
        self.lines = text.splitlines()
        self.i = 0

    def next(self) -> str:
        if self.i >= len(self.lines):
            raise ParseError(f"{self.path}: unexpected end of file at line {self.i + 1}")
        line = self.lines[self.i].strip()
        self.i += 1
        return line

    def expect(self, keyword: str) -> list[str]:
        line = self.next()
        parts = line.split()
        if not parts or parts[0] != keyword:
            raise ParseError(f"{self.path}:{self.i}: expected '{keyword}', got '{line}'")
        return parts[1:]

    def floats(self, n: int) -> list[float]:
        line = self.next()
        parts = line.split()
        if len(parts) != n:
            raise ParseError(f"{self.path}:{self.i}: expected {n} fields, got '{line}'")
        try:
            return [float(p) for p in parts]
        except ValueError as e:
            raise ParseError(f"{self.path}:{self.i}: {e}") from e


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ParseError(f"cannot read scenario {path}: {e}") from e
    r = _Reader(path, text)
    if r.next() != _FILE_HEADER:
        raise ParseError(f"{path}:1: not a scenario file (bad header)")
    (template,) = r.expect("template")
    if template not in TEMPLATES:
        raise ParseError(f"{path}:{r.i}: unknown template '{template}'")
    (tl,) = r.expect("tl")
    if tl not in TL_STATES:
        raise ParseError(f"{path}:{r.i}: unknown tl state '{tl}'")
    (command,) = r.expect("command")
    if command not in COMMANDS:
        raise ParseError(f"{path}:{r.i}: unknown command '{command}'")
    gx, gy = (float(v) for v in r.expect("goal"))
    (n_route,) = r.expect("route")
    route = np.array([r.floats(2) for _ in range(int(n_route))])
    (n_poly,) = r.expect("polylines")
    polylines = []
    for _ in range(int(n_poly)):
        tag, count = r.expect("polyline")
        if tag not in POLYLINE_TAGS:
            raise ParseError(f"{path}:{r.i}: unknown polyline tag '{tag}'")
        pts = np.array([r.floats(2) for _ in range(int(count))])
        polylines.append((tag, pts))
    (n_agents,) = r.expect("agents")
    agents = []
    for _ in range(int(n_agents)):
        cls, length, width = r.expect("agent")
        if cls not in AGENT_CLASSES:
            raise ParseError(f"{path}:{r.i}: unknown agent class '{cls}'")
        (n_hist,) = r.expect("history")
        history = [AgentState(*vals[:4], bool(int(vals[4])))
                   for vals in (r.floats(5) for _ in range(int(n_hist)))]
        (n_fut,) = r.expect("future")
        future = [AgentState(*vals[:4], bool(int(vals[4])))
                  for vals in (r.floats(5) for _ in range(int(n_fut)))]
        agents.append(AgentTrack(cls, float(length), float(width), history, future))
    (n_ctrl,) = r.expect("ego_controls")
    controls = np.array([r.floats(2) for _ in range(int(n_ctrl))]).reshape(int(n_ctrl), 2)
    end = r.next()
    if end != "end":
        raise ParseError(f"{path}:{r.i}: expected 'end', got '{end}'")
    if r.i < len(r.lines) and any(l.strip() for l in r.lines[r.i:]):
        raise ParseError(f"{path}:{r.i + 1}: trailing content after 'end'")
    scenario = Scenario(template=template, polylines=polylines, agents=agents,
                        route=route, goal=(gx, gy), command=command, tl_state=tl,
                        ego_controls=controls)
    _check_finite(scenario)
    return scenario


def scenarios_equal(a: Scenario, b: Scenario) -> bool:
    if (a.template, a.command, a.tl_state, a.goal) != (b.template, b.command, b.tl_state, b.goal):
        return False
    if not np.array_equal(a.route, b.route) or not np.array_equal(a.ego_controls, b.ego_controls):
        return False
    if len(a.polylines) != len(b.polylines) or len(a.agents) != len(b.agents):
        return False
    for (ta, pa), (tb, pb) in zip(a.polylines, b.polylines):
        if ta != tb or not np.array_equal(pa, pb):
            return False
    for aa, ab in zip(a.agents, b.agents):
        if (aa.agent_class, aa.length, aa.width) != (ab.agent_class, ab.length, ab.width):
            return False
        for sa, sb in zip(aa.history + aa.future, ab.history + ab.future):
            if (sa.x, sa.y, sa.heading, sa.speed, sa.valid) != (sb.x, sb.y, sb.heading, sb.speed, sb.valid):
                return False
        if len(aa.history) != len(ab.history) or len(aa.future) != len(ab.future):
            return False
    return True
