"""Point-mass corridor mazes.

A maze is a chain of axis-aligned corridors laid end to end. Corridor ``i``
runs from waypoint ``p_i`` to ``p_{i+1}`` and its free space is that segment
thickened by half the corridor width in every direction, so consecutive
corridors overlap in a width x width corner cell. The union of those closed
rectangles is the free space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..errors import InvalidInputError

DIRECTIONS = {"N": (0, 1), "S": (0, -1), "E": (1, 0), "W": (-1, 0)}
_EPS = 1e-9


@dataclass(frozen=True)
class MazeParams:
    drag: float = 0.1
    accel: float = 0.1
    v_max: float = 0.5
    action_cost: float = 0.01
    goal_bonus: float = 10.0
    jitter: float = 0.25

    @property
    def reward_bound(self) -> float:
        # progress per step is at most v_max plus a width-sized jump where
        # corridor rectangles overlap; the action cost is at most 2*action_cost
        return self.goal_bonus + self.v_max + 4.0 + 2.0 * self.action_cost


@dataclass(frozen=True)
class MazeLayout:
    corridors: tuple[tuple[str, int], ...]
    cell_length: float = 4.0
    width: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "corridors", tuple((str(d), int(n)) for d, n in self.corridors))
        if not self.corridors:
            raise InvalidInputError("maze needs at least one corridor")
        for d, n in self.corridors:
            if d not in DIRECTIONS or n < 1:
                raise InvalidInputError(f"bad corridor {d}{n}")
        for (d0, _), (d1, _) in zip(self.corridors[:-1], self.corridors[1:]):
            if DIRECTIONS[d0][0] * DIRECTIONS[d1][0] + DIRECTIONS[d0][1] * DIRECTIONS[d1][1] != 0:
                raise InvalidInputError(f"consecutive corridors {d0},{d1} must be perpendicular")
        rects = self.rects
        for i in range(len(rects)):
            for j in range(i + 2, len(rects)):
                if _rects_touch(rects[i], rects[j]):
                    raise InvalidInputError(f"corridors {i} and {j} intersect")

    @classmethod
    def parse(cls, text: str, **kw) -> "MazeLayout":
        """Parse the ``E4 N3 W2`` encoding."""
        parts = text.replace(",", " ").split()
        return cls(tuple((p[0].upper(), int(p[1:])) for p in parts), **kw)

    def encode(self) -> str:
        return " ".join(f"{d}{n}" for d, n in self.corridors)

    @property
    def half_width(self) -> float:
        return 0.5 * self.width

    @cached_property
    def waypoints(self) -> np.ndarray:
        pts = [(0.0, 0.0)]
        for d, n in self.corridors:
            dx, dy = DIRECTIONS[d]
            x, y = pts[-1]
            pts.append((x + dx * n * self.cell_length, y + dy * n * self.cell_length))
        return np.array(pts)

    @cached_property
    def rects(self) -> tuple[tuple[float, float, float, float], ...]:
        """(xmin, xmax, ymin, ymax) per corridor."""
        hw = self.half_width
        w = self.waypoints
        out = []
        for i in range(len(self.corridors)):
            (x0, y0), (x1, y1) = w[i], w[i + 1]
            out.append((min(x0, x1) - hw, max(x0, x1) + hw, min(y0, y1) - hw, max(y0, y1) + hw))
        return tuple(out)

    @cached_property
    def remaining_after(self) -> tuple[float, ...]:
        """Path length from waypoint i+1 to the goal, per corridor i."""
        lengths = [n * self.cell_length for _, n in self.corridors]
        return tuple(float(sum(lengths[i + 1:])) for i in range(len(lengths)))

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0].copy()

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1].copy()

    @cached_property
    def diameter(self) -> float:
        xs = [r[0] for r in self.rects] + [r[1] for r in self.rects]
        ys = [r[2] for r in self.rects] + [r[3] for r in self.rects]
        return math.hypot(max(xs) - min(xs), max(ys) - min(ys))

    # -- geometry queries ---------------------------------------------------

    def containing(self, x: float, y: float) -> list[int]:
        return [i for i, (a, b, c, d) in enumerate(self.rects)
                if a - _EPS <= x <= b + _EPS and c - _EPS <= y <= d + _EPS]

    def contains(self, x: float, y: float) -> bool:
        return bool(self.containing(x, y))

    def reach(self, x: float, y: float, axis: int, sign: int) -> float:
        """Farthest coordinate reachable from (x, y) moving along one axis."""
        if axis == 0:
            spans = [(a, b) for a, b, c, d in self.rects if c - _EPS <= y <= d + _EPS]
            cur = x
        else:
            spans = [(c, d) for a, b, c, d in self.rects if a - _EPS <= x <= b + _EPS]
            cur = y
        changed = True
        while changed:
            changed = False
            for lo, hi in spans:
                if sign > 0 and lo - _EPS <= cur < hi:
                    cur, changed = hi, True
                elif sign < 0 and lo < cur <= hi + _EPS:
                    cur, changed = lo, True
        return cur

    def lidar(self, position) -> np.ndarray:
        """Distances to the nearest wall along +x, -x, +y, -y."""
        x, y = float(position[0]), float(position[1])
        if not self.contains(x, y):
            raise InvalidInputError(f"position ({x}, {y}) is outside the maze")
        return np.array([
            self.reach(x, y, 0, 1) - x,
            x - self.reach(x, y, 0, -1),
            self.reach(x, y, 1, 1) - y,
            y - self.reach(x, y, 1, -1),
        ])

    def path_remaining(self, x: float, y: float) -> float:
        """Distance to the goal waypoint measured along the corridor chain."""
        best = math.inf
        w = self.waypoints
        for i in self.containing(x, y):
            dx, dy = DIRECTIONS[self.corridors[i][0]]
            ex, ey = w[i + 1]
            best = min(best, self.remaining_after[i] + (ex - x) * dx + (ey - y) * dy)
        return best

    def manhattan_to_goal(self, x: float, y: float) -> float:
        return max(0.0, self.path_remaining(x, y) - self.half_width)

    def in_goal(self, x: float, y: float) -> bool:
        gx, gy = self.waypoints[-1]
        hw = self.half_width
        return abs(x - gx) <= hw + _EPS and abs(y - gy) <= hw + _EPS

    def region(self, x: float, y: float) -> frozenset[str]:
        return frozenset(self.corridors[i][0] for i in self.containing(x, y))

    def directions(self) -> frozenset[str]:
        return frozenset(d for d, _ in self.corridors)


def _rects_touch(r, s) -> bool:
    return not (r[1] < s[0] or s[1] < r[0] or r[3] < s[2] or s[3] < r[2])


@dataclass
class PointMazeState:
    position: np.ndarray
    velocity: np.ndarray
    steps_elapsed: int = 0

    def copy(self) -> "PointMazeState":
        return PointMazeState(self.position.copy(), self.velocity.copy(), self.steps_elapsed)


def maze_step(layout: MazeLayout, state: PointMazeState, action, horizon: int,
              params: MazeParams = MazeParams()):
    """Advance one step. Returns (next_state, reward, done, info)."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    x, y = float(state.position[0]), float(state.position[1])
    vx = float(state.velocity[0]) * (1.0 - params.drag) + float(a[0]) * params.accel
    vy = float(state.velocity[1]) * (1.0 - params.drag) + float(a[1]) * params.accel
    speed = math.hypot(vx, vy)
    if speed > params.v_max:
        vx *= params.v_max / speed
        vy *= params.v_max / speed

    # axis-wise projection: blocked axes stop at the wall and lose velocity
    if vx != 0.0:
        lim = layout.reach(x, y, 0, 1 if vx > 0 else -1)
        nx = x + vx
        if (vx > 0 and nx > lim) or (vx < 0 and nx < lim):
            nx, vx = lim, 0.0
        x = nx
    if vy != 0.0:
        lim = layout.reach(x, y, 1, 1 if vy > 0 else -1)
        ny = y + vy
        if (vy > 0 and ny > lim) or (vy < 0 and ny < lim):
            ny, vy = lim, 0.0
        y = ny

    before = layout.path_remaining(float(state.position[0]), float(state.position[1]))
    after = layout.path_remaining(x, y)
    success = layout.in_goal(x, y)
    reward = (before - after) - params.action_cost * float(a @ a)
    if success:
        reward += params.goal_bonus
    nxt = PointMazeState(np.array([x, y]), np.array([vx, vy]), state.steps_elapsed + 1)
    truncated = (not success) and nxt.steps_elapsed >= horizon
    info = {"success": success, "terminal": success, "truncated": truncated}
    return nxt, reward, success or truncated, info


def region_tags(layout: MazeLayout, state: PointMazeState) -> frozenset[str]:
    """Labels used by model-primitive region predicates and evaluation."""
    x, y = float(state.position[0]), float(state.position[1])
    idx = layout.containing(x, y)
    tags = {f"touch:{layout.corridors[i][0]}" for i in idx}
    primary = layout.corridors[max(idx)][0]
    first = layout.corridors[min(idx)][0]
    tags.add(f"corridor:{primary}")
    tags.add(f"first:{first}")
    tags.add("axis:H" if primary in "EW" else "axis:V")
    vx, vy = abs(float(state.velocity[0])), abs(float(state.velocity[1]))
    if vx >= vy:
        tags.add("moving:H")
    if vy >= vx:
        tags.add("moving:V")
    return frozenset(tags)


@dataclass
class PointMazeEnv:
    """Stateful wrapper holding one maze episode at a time."""

    layout: MazeLayout
    horizon: int
    seed: int = 0
    params: MazeParams = field(default_factory=MazeParams)

    kind = "maze"
    obs_dim = 9
    act_dim = 2

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.step_calls = 0
        self.state: PointMazeState | None = None
        s = 0.1
        self.obs_scale = np.array([s, s, 2.0, 2.0, s, s, s, s, s])
        # subpolicies see only the local features (velocity, wall distances),
        # so a directional skill does not depend on where the corridor is
        self.policy_obs_scale = self.obs_scale * np.array([0, 0, 1, 1, 1, 1, 1, 1, 0])

    def reset(self) -> np.ndarray:
        j = self.params.jitter
        pos = self.layout.start + self.rng.uniform(-j, j, size=2)
        self.state = PointMazeState(pos, np.zeros(2), 0)
        return self.observe(self.state)

    def observe(self, state: PointMazeState) -> np.ndarray:
        x, y = float(state.position[0]), float(state.position[1])
        return np.concatenate([
            state.position, state.velocity, self.layout.lidar(state.position),
            [self.layout.manhattan_to_goal(x, y)],
        ])

    def step(self, action):
        if self.state is None:
            raise RuntimeError("step called before reset")
        self.step_calls += 1
        self.state, reward, done, info = maze_step(self.layout, self.state, action, self.horizon, self.params)
        return self.observe(self.state), reward, done, info

    def tags(self, state: PointMazeState | None = None) -> frozenset[str]:
        return region_tags(self.layout, state or self.state)

    def sample_free_state(self, rng: np.random.Generator) -> PointMazeState:
        rects = self.layout.rects
        areas = np.array([(b - a) * (d - c) for a, b, c, d in rects])
        i = int(rng.choice(len(rects), p=areas / areas.sum()))
        a, b, c, d = rects[i]
        pos = np.array([rng.uniform(a, b), rng.uniform(c, d)])
        ang = rng.uniform(0, 2 * np.pi)
        vel = rng.uniform(0, self.params.v_max) * np.array([np.cos(ang), np.sin(ang)])
        return PointMazeState(pos, vel, 0)

    def set_state(self, state: PointMazeState) -> np.ndarray:
        self.state = state.copy()
        return self.observe(self.state)


def ground_truth_region(env, state=None):
    """Maze: set of corridor directions at the state (two at corners).
    Stage chain: the active stage label, e.g. ``"B1:grasp"``."""
    state = state if state is not None else env.state
    if env.kind == "maze":
        return env.layout.region(float(state.position[0]), float(state.position[1]))
    return env.stage_label(state)
