"""zdmix billiard - the Z²-periodic Sinai billiard with disk scatterers.

A phase state sits on the boundary of one disk copy: obstacle i at lattice
cell ℓ, boundary angle θ (position c_i + ℓ + r_i(cos θ, sin θ)) and reflection
angle φ, measured from the outward normal, so the outgoing velocity points
along θ + φ. The collision map moves a state to the next disk hit; κ is the
lattice offset between the two disk copies.
"""

import csv
import hashlib
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from zdmix.core import (
    ConfigError,
    GeometryError,
    TangentCollision,
    UnboundedFlightError,
)
from zdmix.tensor import SymTensor, symmetrize

logger = logging.getLogger(__name__)

DEFAULT_FLIGHT_CAP = 1_000_000
TANGENT_TOL = 1e-12
HIT_EPS = 1e-12
GAP_TOL = 1e-12

# kernel status codes
OK = 0
CAPPED = 1
TANGENT = 2


# ── Table ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class BoundingLine:
    """One edge of a corridor: offset along the unit normal and the disks touching it."""

    offset: float
    tangent_ids: tuple[int, ...]


@dataclass(frozen=True)
class Corridor:
    direction: tuple[int, int]
    width: float
    bounding_lines: tuple[BoundingLine, BoundingLine]

    @property
    def norm(self) -> float:
        return math.hypot(*self.direction)

    @property
    def free_flights(self) -> tuple[tuple[int, int], tuple[int, int]]:
        p, q = self.direction
        return (p, q), (-p, -q)


@dataclass(frozen=True)
class HorizonClass:
    finite: bool
    corridors: tuple[Corridor, ...]


class BilliardTable:
    """Disks in the unit cell, repeated over Z². Immutable once built."""

    def __init__(self, obstacles: Sequence[Obstacle], flight_cap: int = DEFAULT_FLIGHT_CAP):
        if not obstacles:
            raise GeometryError("table needs at least one obstacle")
        if flight_cap < 1:
            raise GeometryError("flight_cap must be >= 1")
        self.obstacles = tuple(
            Obstacle((float(o.center[0]) % 1.0, float(o.center[1]) % 1.0), float(o.radius))
            for o in obstacles
        )
        self.flight_cap = int(flight_cap)
        self.cx = np.array([o.center[0] for o in self.obstacles], dtype=np.float64)
        self.cy = np.array([o.center[1] for o in self.obstacles], dtype=np.float64)
        self.radii = np.array([o.radius for o in self.obstacles], dtype=np.float64)
        self._validate()
        self._horizon: HorizonClass | None = None

    def _validate(self) -> None:
        for i, o in enumerate(self.obstacles):
            if not 0.0 < o.radius < 0.5:
                raise GeometryError(f"obstacle {i}: radius {o.radius} outside (0, 1/2)")
        m = len(self.obstacles)
        for i in range(m):
            for j in range(i, m):
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        if i == j and dx == 0 and dy == 0:
                            continue
                        dist = math.hypot(
                            self.cx[j] + dx - self.cx[i], self.cy[j] + dy - self.cy[i]
                        )
                        if dist <= self.radii[i] + self.radii[j]:
                            raise GeometryError(
                                f"obstacles {i} and {j} overlap "
                                f"(distance {dist:.6g} <= {self.radii[i] + self.radii[j]:.6g})"
                            )

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)

    @property
    def perimeter_total(self) -> float:
        return float(2 * math.pi * self.radii.sum())

    @property
    def single_obstacle(self) -> bool:
        return len(self.obstacles) == 1

    @property
    def horizon(self) -> HorizonClass:
        if self._horizon is None:
            self._horizon = classify_horizon(self)
        return self._horizon

    @property
    def corridors(self) -> tuple[Corridor, ...]:
        return self.horizon.corridors

    @property
    def finite_horizon(self) -> bool:
        return self.horizon.finite

    def hash(self) -> str:
        return table_hash(self)

    def __repr__(self) -> str:
        disks = ", ".join(
            f"({o.center[0]:g}, {o.center[1]:g}) r={o.radius:g}" for o in self.obstacles
        )
        return f"BilliardTable([{disks}], flight_cap={self.flight_cap})"


def table_hash(table: BilliardTable) -> str:
    """sha256 over obstacle geometry and flight cap."""
    blob = json.dumps(
        {
            "obstacles": [[o.center[0], o.center[1], o.radius] for o in table.obstacles],
            "flight_cap": table.flight_cap,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


PRESET_TABLES = {
    "finite": [Obstacle((0.0, 0.0), 0.4), Obstacle((0.5, 0.5), 0.2)],
    "infinite": [Obstacle((0.0, 0.0), 0.3)],
}


def build_table(config: Mapping | None) -> BilliardTable:
    """Build a table from a `table:` config section.

    Accepted forms: `{preset: finite|infinite}`, `{obstacles: [{center,
    radius}, ...]}` or a single `{obstacle: {center, radius}}`. `flight_cap`
    is optional with each form.
    """
    config = config or {"preset": "finite"}
    cap = config.get("flight_cap", DEFAULT_FLIGHT_CAP)
    if isinstance(cap, bool) or not isinstance(cap, int):
        raise ConfigError(f"table.flight_cap must be an integer, got {cap!r}")
    if "preset" in config:
        name = config["preset"]
        if name not in PRESET_TABLES:
            raise ConfigError(
                f"unknown table preset '{name}' (choose from {sorted(PRESET_TABLES)})"
            )
        specs = PRESET_TABLES[name]
    else:
        raw = config.get("obstacles")
        if raw is None and "obstacle" in config:
            raw = [config["obstacle"]]
        if not raw:
            raise ConfigError("table: need 'preset', 'obstacles' or 'obstacle'")
        try:
            specs = [
                Obstacle(tuple(float(x) for x in o["center"]), float(o["radius"])) for o in raw
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"table: malformed obstacle entry ({e})") from e
        if any(len(o.center) != 2 for o in specs):
            raise ConfigError("table: obstacle centers must have two coordinates")
    table = BilliardTable(specs, flight_cap=cap)
    if table.single_obstacle:
        logger.warning("single-obstacle table %s: results are flagged single_obstacle", table)
    return table


# ── Horizon and corridors ────────────────────────────────────────────────


def _primitive_directions(max_norm: float) -> list[tuple[int, int]]:
    """Primitive w, one per ±pair (p > 0, or p = 0 and q = 1), with |w| <= max_norm."""
    out = []
    bound = int(math.floor(max_norm))
    for p in range(0, bound + 1):
        for q in range(-bound, bound + 1):
            if p == 0 and q != 1:
                continue
            if math.gcd(p, abs(q)) != 1 or p * p + q * q > max_norm**2:
                continue
            out.append((p, q))
    return sorted(out, key=lambda w: (w[0] ** 2 + w[1] ** 2, w))


def _gaps_on_circle(starts: np.ndarray, ends: np.ndarray, period: float):
    """Uncovered arcs of [0, period) left by intervals [start, end] taken mod period."""
    order = np.argsort(starts, kind="stable")
    s0 = starts[order[0]]
    covered = ends[order[0]]
    gaps = []
    for k in order[1:]:
        if starts[k] > covered + GAP_TOL:
            gaps.append((covered, starts[k]))
        covered = max(covered, ends[k])
    if s0 + period > covered + GAP_TOL:
        gaps.append((covered, s0 + period))
    return gaps


def _touching(values: np.ndarray, at: float, period: float) -> tuple[int, ...]:
    diff = np.abs((values - at + period / 2) % period - period / 2)
    return tuple(int(i) for i in np.flatnonzero(diff < 1e-9))


def classify_horizon(table: BilliardTable) -> HorizonClass:
    """Find every corridor, i.e. every obstacle-free infinite strip.

    Obstacle copies c_i + Z² project onto the unit normal of w with period
    1/|w|. Gaps left by the projected radius intervals are corridors. No
    direction with |w| >= 1/(2 max r) can carry one: the largest family
    alone covers its period.
    """
    r_max = float(table.radii.max())
    corridors = []
    for p, q in _primitive_directions(1.0 / (2.0 * r_max)):
        norm = math.hypot(p, q)
        period = 1.0 / norm
        ux, uy = -q / norm, p / norm
        centers = (table.cx * ux + table.cy * uy) % period
        starts = centers - table.radii
        ends = centers + table.radii
        if np.any(2 * table.radii >= period):
            continue
        for lo, hi in _gaps_on_circle(starts, ends, period):
            width = hi - lo
            lower = BoundingLine(lo % period, _touching(ends, lo, period))
            upper = BoundingLine(hi % period, _touching(starts, hi, period))
            corridors.append(Corridor((p, q), float(width), (lower, upper)))
    result = HorizonClass(finite=not corridors, corridors=tuple(corridors))
    logger.debug(
        "horizon: %s, %d corridors",
        "finite" if result.finite else "infinite",
        len(result.corridors),
    )
    return result


def sigma_infinity(table: BilliardTable) -> SymTensor:
    """Superdiffusive covariance from corridor widths.

    One tangent periodic orbit per (corridor, bounding line, gliding
    orientation), however many disks touch the line. Each is weighted
    d²/(2|w|·perimeter) times w⊗w.
    """
    if table.finite_horizon:
        raise GeometryError("sigma_infinity needs an infinite-horizon table")
    total = np.zeros((2, 2))
    for c in table.corridors:
        weight = c.width**2 / (2 * c.norm * table.perimeter_total)
        for _ in c.bounding_lines:
            for w in c.free_flights:
                total += weight * np.outer(w, w)
    return symmetrize(SymTensor(total))


# ── Phase states ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class PhaseState:
    obstacle_id: int
    boundary_angle: float
    reflect_angle: float
    cell: tuple[int, int] = (0, 0)

    def position(self, table: BilliardTable) -> np.ndarray:
        o = table.obstacles[self.obstacle_id]
        return np.array(
            [
                o.center[0] + self.cell[0] + o.radius * math.cos(self.boundary_angle),
                o.center[1] + self.cell[1] + o.radius * math.sin(self.boundary_angle),
            ]
        )

    def velocity(self) -> np.ndarray:
        a = self.boundary_angle + self.reflect_angle
        return np.array([math.cos(a), math.sin(a)])


@dataclass
class StateBatch:
    """Many phase states as parallel arrays; `cell` is (B, 2) int64."""

    obstacle: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    cell: np.ndarray

    def __len__(self) -> int:
        return len(self.obstacle)

    def state(self, k: int) -> PhaseState:
        return PhaseState(
            int(self.obstacle[k]),
            float(self.theta[k]),
            float(self.phi[k]),
            (int(self.cell[k, 0]), int(self.cell[k, 1])),
        )

    def select(self, mask: np.ndarray) -> "StateBatch":
        return StateBatch(self.obstacle[mask], self.theta[mask], self.phi[mask], self.cell[mask])

    @classmethod
    def from_states(cls, states: Sequence[PhaseState]) -> "StateBatch":
        return cls(
            np.array([s.obstacle_id for s in states], dtype=np.int64),
            np.array([s.boundary_angle for s in states], dtype=np.float64),
            np.array([s.reflect_angle for s in states], dtype=np.float64),
            np.array([s.cell for s in states], dtype=np.int64).reshape(-1, 2),
        )


def time_reverse(state):
    """Ψ(q, v) = (q, -v_in): φ ↦ -φ at the same boundary point. An involution."""
    if isinstance(state, StateBatch):
        return StateBatch(state.obstacle, state.theta, -state.phi, state.cell)
    return PhaseState(state.obstacle_id, state.boundary_angle, -state.reflect_angle, state.cell)


def sample_invariant(table: BilliardTable, rng: np.random.Generator, size: int | None = None):
    """Draw from the invariant probability on one cell.

    Obstacle ∝ perimeter, θ uniform, φ with density cos φ / 2. Tangent
    draws are redrawn. Returns a PhaseState, or a StateBatch when `size`
    is given.
    """
    count = 1 if size is None else int(size)
    weights = table.radii / table.radii.sum()
    obstacle = rng.choice(table.n_obstacles, size=count, p=weights).astype(np.int64)
    theta = rng.uniform(0.0, 2 * math.pi, size=count)
    phi = np.arcsin(2 * rng.random(count) - 1)
    bad = np.abs(np.cos(phi)) < TANGENT_TOL
    while bad.any():
        phi[bad] = np.arcsin(2 * rng.random(int(bad.sum())) - 1)
        bad = np.abs(np.cos(phi)) < TANGENT_TOL
    batch = StateBatch(obstacle, theta, phi, np.zeros((count, 2), dtype=np.int64))
    return batch.state(0) if size is None else batch


# ── Collision kernel ─────────────────────────────────────────────────────


@njit(cache=True)
def _free_flight(cx, cy, rad, i0, theta, phi, cap):
    """Trace one flight by grid traversal.

    Returns (obstacle, kx, ky, theta', phi', length, status). Unit cells
    are walked in ray order; in each, the disk copies centred in the 3x3
    neighbouring cells are tested, which covers every disk that reaches the
    cell since all radii are below 1/2.
    """
    m = cx.shape[0]
    px = cx[i0] + rad[i0] * math.cos(theta)
    py = cy[i0] + rad[i0] * math.sin(theta)
    vx = math.cos(theta + phi)
    vy = math.sin(theta + phi)

    gx = int(math.floor(px))
    gy = int(math.floor(py))
    step_x = 1 if vx > 0 else -1
    step_y = 1 if vy > 0 else -1
    inf = np.inf
    if vx > 0:
        t_max_x = (gx + 1 - px) / vx
    elif vx < 0:
        t_max_x = (gx - px) / vx
    else:
        t_max_x = inf
    if vy > 0:
        t_max_y = (gy + 1 - py) / vy
    elif vy < 0:
        t_max_y = (gy - py) / vy
    else:
        t_max_y = inf
    t_dx = 1.0 / abs(vx) if vx != 0 else inf
    t_dy = 1.0 / abs(vy) if vy != 0 else inf

    best = inf
    best_j = -1
    best_kx = 0
    best_ky = 0
    cells = 0
    while True:
        s_exit = min(t_max_x, t_max_y)
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                kx = gx + dx
                ky = gy + dy
                for j in range(m):
                    if j == i0 and kx == 0 and ky == 0:
                        continue
                    fx = px - (cx[j] + kx)
                    fy = py - (cy[j] + ky)
                    b = fx * vx + fy * vy
                    if b >= 0.0:
                        continue
                    c = fx * fx + fy * fy - rad[j] * rad[j]
                    disc = b * b - c
                    if disc < 0.0:
                        continue
                    s = -b - math.sqrt(disc)
                    if s > HIT_EPS and s < best:
                        best = s
                        best_j = j
                        best_kx = kx
                        best_ky = ky
        if best <= s_exit:
            break
        cells += 1
        if cells > cap:
            return -1, 0, 0, 0.0, 0.0, s_exit, CAPPED
        if t_max_x < t_max_y:
            gx += step_x
            t_max_x += t_dx
        else:
            gy += step_y
            t_max_y += t_dy

    hx = (px + best * vx - (cx[best_j] + best_kx)) / rad[best_j]
    hy = (py + best * vy - (cy[best_j] + best_ky)) / rad[best_j]
    theta1 = math.atan2(hy, hx)
    nx = math.cos(theta1)
    ny = math.sin(theta1)
    dot = vx * nx + vy * ny
    wx = vx - 2.0 * dot * nx
    wy = vy - 2.0 * dot * ny
    phi1 = math.atan2(nx * wy - ny * wx, nx * wx + ny * wy)
    status = TANGENT if abs(math.cos(phi1)) < TANGENT_TOL else OK
    return best_j, best_kx, best_ky, theta1, phi1, best, status


@njit(cache=True, parallel=True)
def _advance_batch(
    cx, cy, rad, obst, theta, phi, n, cap, out_obst, out_theta, out_phi, disp, status
):
    for b in prange(obst.shape[0]):
        i = obst[b]
        th = theta[b]
        ph = phi[b]
        sx = 0
        sy = 0
        st = OK
        for _ in range(n):
            j, kx, ky, th1, ph1, _s, st = _free_flight(cx, cy, rad, i, th, ph, cap)
            if st == CAPPED:
                break
            sx += kx
            sy += ky
            i = j
            th = th1
            ph = ph1
            if st == TANGENT:
                break
        out_obst[b] = i
        out_theta[b] = th
        out_phi[b] = ph
        disp[b, 0] = sx
        disp[b, 1] = sy
        status[b] = st


@njit(cache=True, parallel=True)
def _trace_batch(
    cx, cy, rad, obst, theta, phi, n, cap, t_obst, t_theta, t_phi, kappa, flight, status
):
    for b in prange(obst.shape[0]):
        i = obst[b]
        th = theta[b]
        ph = phi[b]
        t_obst[b, 0] = i
        t_theta[b, 0] = th
        t_phi[b, 0] = ph
        st = OK
        for k in range(n):
            j, kx, ky, th1, ph1, s, st = _free_flight(cx, cy, rad, i, th, ph, cap)
            if st == CAPPED:
                break
            kappa[b, k, 0] = kx
            kappa[b, k, 1] = ky
            flight[b, k] = s
            i = j
            th = th1
            ph = ph1
            t_obst[b, k + 1] = i
            t_theta[b, k + 1] = th
            t_phi[b, k + 1] = ph
            if st == TANGENT:
                break
        status[b] = st


def _raise_for_status(status: int, state: PhaseState | None = None) -> None:
    if status == CAPPED:
        raise UnboundedFlightError(f"flight crossed more cells than the cap from {state}")
    if status == TANGENT:
        raise TangentCollision(f"tangent collision reached from {state}")


def next_collision(table: BilliardTable, state: PhaseState) -> tuple[PhaseState, np.ndarray]:
    """One step of the collision map: the next state and its cell displacement κ."""
    if abs(math.cos(state.reflect_angle)) < TANGENT_TOL:
        raise TangentCollision(f"tangent initial state {state}")
    j, kx, ky, th, ph, _s, status = _free_flight(
        table.cx,
        table.cy,
        table.radii,
        state.obstacle_id,
        state.boundary_angle,
        state.reflect_angle,
        table.flight_cap,
    )
    _raise_for_status(status, state)
    kappa = np.array([kx, ky], dtype=np.int64)
    cell = (state.cell[0] + kx, state.cell[1] + ky)
    return PhaseState(int(j), float(th), float(ph), cell), kappa


# ── Orbits ───────────────────────────────────────────────────────────────


@dataclass
class OrbitRecord:
    initial: PhaseState
    final: PhaseState
    steps: int
    displacement: np.ndarray
    kappas: np.ndarray | None = None
    cells: np.ndarray | None = None
    flights: np.ndarray | None = None
    states: StateBatch | None = None


def orbit(table: BilliardTable, state: PhaseState, n: int, trace: bool = False) -> OrbitRecord:
    """Iterate the collision map n times, accumulating S_n."""
    if n < 0:
        raise ValueError("orbit length must be >= 0")
    if not trace:
        batch, disp, status = advance(table, StateBatch.from_states([state]), n)
        _raise_for_status(int(status[0]), state)
        return OrbitRecord(state, batch.state(0), n, disp[0])
    tr = trace_batch(table, StateBatch.from_states([state]), n)
    _raise_for_status(int(tr.status[0]), state)
    kappas = tr.kappa[0]
    cells = np.vstack([np.zeros((1, 2), dtype=np.int64), np.cumsum(kappas, axis=0)])
    cells += np.asarray(state.cell, dtype=np.int64)
    final = PhaseState(
        int(tr.obstacle[0, n]),
        float(tr.theta[0, n]),
        float(tr.phi[0, n]),
        (int(cells[-1, 0]), int(cells[-1, 1])),
    )
    states = StateBatch(tr.obstacle[0], tr.theta[0], tr.phi[0], cells)
    return OrbitRecord(state, final, n, kappas.sum(axis=0), kappas, cells, tr.flight[0], states)


def advance(table: BilliardTable, batch: StateBatch, n: int):
    """Run every state of a batch n steps. Returns (end states, S_n, status codes).

    A trajectory that hits a tangency stops there with status TANGENT;
    one that exceeds the flight cap stops with status CAPPED.
    """
    size = len(batch)
    out_obst = np.empty(size, dtype=np.int64)
    out_theta = np.empty(size)
    out_phi = np.empty(size)
    disp = np.zeros((size, 2), dtype=np.int64)
    status = np.zeros(size, dtype=np.int64)
    _advance_batch(
        table.cx,
        table.cy,
        table.radii,
        np.ascontiguousarray(batch.obstacle, dtype=np.int64),
        np.ascontiguousarray(batch.theta, dtype=np.float64),
        np.ascontiguousarray(batch.phi, dtype=np.float64),
        int(n),
        table.flight_cap,
        out_obst,
        out_theta,
        out_phi,
        disp,
        status,
    )
    end = StateBatch(out_obst, out_theta, out_phi, batch.cell + disp)
    return end, disp, status


@dataclass
class BatchTrace:
    """Per-step record of a batch: states at times 0..n, κ and flight lengths at 0..n-1."""

    obstacle: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    kappa: np.ndarray
    flight: np.ndarray
    status: np.ndarray

    @property
    def steps(self) -> int:
        return self.kappa.shape[1]

    def displacement(self) -> np.ndarray:
        return self.kappa.sum(axis=1)


def trace_batch(table: BilliardTable, batch: StateBatch, n: int) -> BatchTrace:
    size = len(batch)
    t_obst = np.zeros((size, n + 1), dtype=np.int64)
    t_theta = np.zeros((size, n + 1))
    t_phi = np.zeros((size, n + 1))
    kappa = np.zeros((size, n, 2), dtype=np.int64)
    flight = np.zeros((size, n))
    status = np.zeros(size, dtype=np.int64)
    _trace_batch(
        table.cx,
        table.cy,
        table.radii,
        np.ascontiguousarray(batch.obstacle, dtype=np.int64),
        np.ascontiguousarray(batch.theta, dtype=np.float64),
        np.ascontiguousarray(batch.phi, dtype=np.float64),
        int(n),
        table.flight_cap,
        t_obst,
        t_theta,
        t_phi,
        kappa,
        flight,
        status,
    )
    return BatchTrace(t_obst, t_theta, t_phi, kappa, flight, status)


# ── Base observables ─────────────────────────────────────────────────────


def base_mean(table: BilliardTable, tag: str) -> float:
    """Exact invariant mean of a tagged base observable."""
    if tag == "one":
        return 1.0
    if tag == "cos_phi":
        return math.pi / 4
    if tag.startswith("obstacle:"):
        i = _index_of(tag, table.n_obstacles)
        return float(table.radii[i] / table.radii.sum())
    if tag.startswith("kappa:"):
        _index_of(tag, 2)
        return 0.0
    if tag.startswith("centered:"):
        base_mean(table, tag.removeprefix("centered:"))
        return 0.0
    raise ConfigError(f"unknown base observable '{tag}'")


def _index_of(tag: str, bound: int) -> int:
    try:
        i = int(tag.split(":", 1)[1])
    except ValueError as e:
        raise ConfigError(f"bad index in observable '{tag}'") from e
    if not 0 <= i < bound:
        raise ConfigError(f"observable '{tag}': index out of range 0..{bound - 1}")
    return i


def evaluate_base(
    table: BilliardTable,
    tag: str,
    obstacle: np.ndarray,
    phi: np.ndarray,
    kappa: np.ndarray | None = None,
) -> np.ndarray:
    """Values of a tagged base observable on arrays of states.

    `kappa` is the displacement of the step leaving each state; only the
    `kappa:<j>` tags read it.
    """
    if tag.startswith("centered:"):
        inner = tag.removeprefix("centered:")
        return evaluate_base(table, inner, obstacle, phi, kappa) - base_mean(table, inner)
    if tag == "one":
        return np.ones(np.shape(phi))
    if tag == "cos_phi":
        return np.cos(phi)
    if tag.startswith("obstacle:"):
        return (obstacle == _index_of(tag, table.n_obstacles)).astype(np.float64)
    if tag.startswith("kappa:"):
        j = _index_of(tag, 2)
        if kappa is None:
            raise ValueError(f"observable '{tag}' needs the outgoing displacement")
        return kappa[..., j].astype(np.float64)
    raise ConfigError(f"unknown base observable '{tag}'")


# ── Trace cache and CSV export ───────────────────────────────────────────


TRACE_MAGIC = b"ZDMX"
TRACE_VERSION = 1
_TRACE_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u2"),
        ("width", "<u2"),
        ("table", "S32"),
        ("seed", "<u8"),
        ("steps", "<u8"),
        ("count", "<u8"),
    ]
)


@dataclass
class TraceCache:
    table_hash: str
    seed: int
    kappa: np.ndarray = field(repr=False)

    @property
    def steps(self) -> int:
        return self.kappa.shape[1]


def save_trace_cache(path: str | Path, table: BilliardTable, seed: int, kappa: np.ndarray) -> Path:
    """Write per-step κ of a batch as a flat binary file.

    Body is signed 8-bit pairs; a batch with a displacement outside int8
    range is stored with 32-bit pairs and the header says so.
    """
    kappa = np.asarray(kappa, dtype=np.int64)
    if kappa.ndim != 3 or kappa.shape[2] != 2:
        raise ValueError("kappa must have shape (trajectories, steps, 2)")
    fits = kappa.size == 0 or np.abs(kappa).max() <= 127
    body = kappa.astype("<i1" if fits else "<i4")
    header = np.array(
        [
            (
                TRACE_MAGIC,
                TRACE_VERSION,
                body.itemsize,
                table_hash(table)[:32].encode(),
                seed,
                kappa.shape[1],
                kappa.shape[0],
            )
        ],
        dtype=_TRACE_HEADER,
    )
    path = Path(path)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(body.tobytes())
    logger.debug("wrote trace cache %s (%d x %d, width %d)", path, *kappa.shape[:2], body.itemsize)
    return path


def load_trace_cache(path: str | Path, table: BilliardTable | None = None) -> TraceCache:
    raw = Path(path).read_bytes()
    if len(raw) < _TRACE_HEADER.itemsize:
        raise ValueError(f"{path}: truncated trace cache")
    header = np.frombuffer(raw[: _TRACE_HEADER.itemsize], dtype=_TRACE_HEADER)[0]
    if header["magic"] != TRACE_MAGIC or header["version"] != TRACE_VERSION:
        raise ValueError(f"{path}: not a zdmix trace cache")
    stored = header["table"].decode()
    if table is not None and stored != table_hash(table)[:32]:
        raise ValueError(f"{path}: cache was written for a different table")
    dtype = {1: "<i1", 4: "<i4"}[int(header["width"])]
    steps, count = int(header["steps"]), int(header["count"])
    body = np.frombuffer(raw[_TRACE_HEADER.itemsize :], dtype=dtype)
    if body.size != count * steps * 2:
        raise ValueError(f"{path}: body size does not match header")
    return TraceCache(stored, int(header["seed"]), body.reshape(count, steps, 2).astype(np.int64))


ORBIT_CSV_COLUMNS = [
    "trajectory",
    "step",
    "obstacle",
    "theta",
    "phi",
    "cell_x",
    "cell_y",
    "kappa_x",
    "kappa_y",
    "flight",
]


def write_orbit_csv(records: Sequence[OrbitRecord], path: str | Path) -> Path:
    """One row per (trajectory, step) of traced orbits; the last state has empty κ."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ORBIT_CSV_COLUMNS)
        for t, rec in enumerate(records):
            if rec.states is None or rec.kappas is None or rec.flights is None:
                raise ValueError("write_orbit_csv needs orbits recorded with trace=True")
            for k in range(rec.steps + 1):
                last = k == rec.steps
                state = rec.states.state(k)
                w.writerow(
                    [
                        t,
                        k,
                        state.obstacle_id,
                        repr(state.boundary_angle),
                        repr(state.reflect_angle),
                        state.cell[0],
                        state.cell[1],
                        "" if last else int(rec.kappas[k, 0]),
                        "" if last else int(rec.kappas[k, 1]),
                        "" if last else repr(float(rec.flights[k])),
                    ]
                )
    return path
