"""Continuous point-maze environment and scripted demonstrator.

Dynamics
--------
The agent is a point ball in a grid maze.  Positions are continuous (row, col)
coordinates in cell units; the cell containing position p is floor(p), and
cells marked '#' are walls.  Per step, with dt = 1:

    velocity <- clamp(velocity + action * dt, +-V_MAX)   (per component)
    position <- position + velocity * dt

Wall collisions are resolved axis by axis: the row move is applied first and
clipped to the wall face (with a small margin) if it would enter a wall cell,
zeroing the row velocity; then the column move likewise, checked against the
updated row.  Since V_MAX * dt < 1 cell, only the adjacent cell can be entered
per axis, so a single-cell check is exact.

Reward is sparse: 1 (and done) when the ball is within GOAL_RADIUS of the goal
at either end of the step, else 0.  Observations are position + velocity (4D);
the goal is intentionally not observable.

Layout files are UTF-8 text grids, '#' = wall, '.' = free, one row per line.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError

DT = 1.0
V_MAX = 0.5
GOAL_RADIUS = 0.5
WALL_MARGIN = 1e-3

# Toy analogs of the classic point-maze layouts.
BUILTIN_LAYOUTS = {
    "umaze-toy": (
        "#####\n"
        "#...#\n"
        "###.#\n"
        "#...#\n"
        "#####\n"
    ),
    "medium-toy": (
        "########\n"
        "#..##..#\n"
        "#..#...#\n"
        "##...###\n"
        "#..#...#\n"
        "#.#..#.#\n"
        "#...#..#\n"
        "########\n"
    ),
    "large-toy": (
        "############\n"
        "#....#.....#\n"
        "#.##.#.#.#.#\n"
        "#......#...#\n"
        "#.####.###.#\n"
        "#..#.#.....#\n"
        "##.#.#.#.###\n"
        "#......#...#\n"
        "############\n"
    ),
}


@dataclass(frozen=True)
class MazeLayout:
    """Rectangular occupancy grid; True = wall.  Boundary cells are walls."""

    grid: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", g)
        if g.ndim != 2:
            raise ValidationError("layout grid must be 2D")
        if not (g[0, :].all() and g[-1, :].all() and g[:, 0].all() and g[:, -1].all()):
            raise ValidationError("layout boundary must be all walls")
        if (~g).sum() < 2:
            raise ValidationError("layout needs at least two free cells")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def is_wall(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        if r < 0 or c < 0 or r >= self.grid.shape[0] or c >= self.grid.shape[1]:
            return True
        return bool(self.grid[r, c])

    def free_cells(self) -> list[tuple[int, int]]:
        rs, cs = np.nonzero(~self.grid)
        return [(int(r), int(c)) for r, c in zip(rs, cs)]

    def to_text(self) -> str:
        return "\n".join("".join("#" if w else "." for w in row) for row in self.grid) + "\n"

    def __eq__(self, other):
        return isinstance(other, MazeLayout) and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash((self.grid.shape, self.grid.tobytes()))


@dataclass
class EnvState:
    """Ball state: continuous position/velocity plus the (hidden) goal."""

    position: np.ndarray  # (2,) cell units
    velocity: np.ndarray  # (2,) cells/step
    goal: np.ndarray  # (2,)


@dataclass
class Episode:
    """One rollout: N+1 observations, N actions/rewards."""

    observations: np.ndarray  # (N+1, 4) position + velocity
    actions: np.ndarray  # (N, 2)
    rewards: np.ndarray  # (N,)
    terminated: bool = False

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.observations) - 1
        if len(self.actions) != n or len(self.rewards) != n:
            raise ValidationError(
                f"episode needs len(actions) == len(rewards) == len(obs)-1, "
                f"got {len(self.actions)}/{len(self.rewards)}/{len(self.observations)}"
            )

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


def parse_layout(text: str, name: str = "custom") -> MazeLayout:
    """Parse a text grid, reporting the offending line/column on bad input."""
    lines = text.splitlines()
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValidationError("layout text is empty")
    width = len(lines[0])
    rows = []
    for i, line in enumerate(lines):
        if len(line) != width:
            raise ValidationError(f"layout line {i + 1}: ragged row (length {len(line)}, expected {width})")
        row = []
        for j, ch in enumerate(line):
            if ch == "#":
                row.append(True)
            elif ch == ".":
                row.append(False)
            else:
                raise ValidationError(f"layout line {i + 1}, column {j + 1}: unknown character {ch!r}")
        rows.append(row)
    return MazeLayout(grid=np.array(rows, dtype=bool), name=name)


def load_layout(name_or_path: str | Path) -> MazeLayout:
    """Load a built-in layout by name or parse a layout file."""
    key = str(name_or_path)
    if key in BUILTIN_LAYOUTS:
        return parse_layout(BUILTIN_LAYOUTS[key], name=key)
    path = Path(name_or_path)
    if not path.exists():
        raise ValidationError(f"unknown layout {key!r} (not a built-in name or readable file)")
    return parse_layout(path.read_text(encoding="utf-8"), name=path.stem)


def save_layout(layout: MazeLayout, path: str | Path) -> None:
    Path(path).write_text(layout.to_text(), encoding="utf-8")


class PointMaze:
    """The environment: step dynamics, resets, and observation packing.

    ``step`` is a pure function of the passed state; the instance only tracks
    the out-of-range-action warning counter.
    """

    def __init__(self, layout: MazeLayout, dt: float = DT, v_max: float = V_MAX,
                 goal_radius: float = GOAL_RADIUS):
        self.layout = layout
        self.dt = dt
        self.v_max = v_max
        self.goal_radius = goal_radius
        self.n_clamped_actions = 0

    # -- resets ------------------------------------------------------------

    def sample_free_position(self, rng: np.random.Generator, margin: float = 0.1) -> np.ndarray:
        """Uniform position inside a uniformly chosen free cell."""
        cells = self.layout.free_cells()
        r, c = cells[rng.integers(len(cells))]
        return np.array(
            [r + margin + (1 - 2 * margin) * rng.random(),
             c + margin + (1 - 2 * margin) * rng.random()]
        )

    def reset(self, rng: np.random.Generator, start=None, goal=None,
              min_goal_distance: float = 1.0) -> EnvState:
        """Fresh state with zero velocity; start/goal sampled unless given."""
        position = np.asarray(start, dtype=float) if start is not None else self.sample_free_position(rng)
        if goal is not None:
            goal_pos = np.asarray(goal, dtype=float)
        else:
            while True:
                goal_pos = self.sample_free_position(rng)
                if np.linalg.norm(goal_pos - position) >= min_goal_distance:
                    break
        return EnvState(position=position, velocity=np.zeros(2), goal=goal_pos)

    def observe(self, state: EnvState) -> np.ndarray:
        return np.concatenate([state.position, state.velocity])

    # -- dynamics ----------------------------------------------------------

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        """Advance one step; returns (new state, reward, done)."""
        action = np.asarray(action, dtype=float)
        if action.shape != (2,):
            raise ValidationError(f"action must have shape (2,), got {action.shape}")
        if np.any(np.abs(action) > 1.0):
            self.n_clamped_actions += 1
            action = np.clip(action, -1.0, 1.0)

        at_goal_before = np.linalg.norm(state.position - state.goal) < self.goal_radius

        v = np.clip(state.velocity + action * self.dt, -self.v_max, self.v_max)
        p = state.position.copy()

        for axis in range(2):
            target = p[axis] + v[axis] * self.dt
            cell = [int(np.floor(p[0])), int(np.floor(p[1]))]
            new_cell = cell.copy()
            new_cell[axis] = int(np.floor(target))
            if new_cell[axis] != cell[axis] and self.layout.is_wall(tuple(new_cell)):
                # Clip to the wall face and kill the normal velocity component.
                if v[axis] > 0:
                    p[axis] = cell[axis] + 1 - WALL_MARGIN
                else:
                    p[axis] = cell[axis] + WALL_MARGIN
                v[axis] = 0.0
            else:
                p[axis] = target

        new_state = EnvState(position=p, velocity=v, goal=state.goal.copy())
        reached = at_goal_before or np.linalg.norm(p - state.goal) < self.goal_radius
        reward = 1.0 if reached else 0.0
        return new_state, reward, bool(reached)


class WaypointController:
    """Scripted demonstrator: BFS over cells, PD steering to the next waypoint.

    With kp = 0.5, kd = 1.0 and dt = 1 the unclamped update is deadbeat
    (velocity becomes half the remaining error each step), which converges
    without overshoot and keeps demonstrations smooth.
    """

    def __init__(self, layout: MazeLayout, kp: float = 0.5, kd: float = 1.0):
        self.layout = layout
        self.kp = kp
        self.kd = kd
        self._path_cache: dict[tuple[tuple[int, int], tuple[int, int]], list[tuple[int, int]]] = {}

    def shortest_path(self, start_cell: tuple[int, int], goal_cell: tuple[int, int]):
        """BFS cell path from start to goal, inclusive; None if unreachable."""
        key = (start_cell, goal_cell)
        if key in self._path_cache:
            return self._path_cache[key]
        if self.layout.is_wall(start_cell) or self.layout.is_wall(goal_cell):
            self._path_cache[key] = None
            return None
        prev = {start_cell: None}
        queue = deque([start_cell])
        while queue:
            cell = queue.popleft()
            if cell == goal_cell:
                break
            r, c = cell
            for nxt in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if nxt not in prev and not self.layout.is_wall(nxt):
                    prev[nxt] = cell
                    queue.append(nxt)
        if goal_cell not in prev:
            self._path_cache[key] = None
            return None
        path = [goal_cell]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        path.reverse()
        self._path_cache[key] = path
        return path

    def action(self, state: EnvState) -> np.ndarray:
        cell = (int(np.floor(state.position[0])), int(np.floor(state.position[1])))
        goal_cell = (int(np.floor(state.goal[0])), int(np.floor(state.goal[1])))
        path = self.shortest_path(cell, goal_cell)
        if path is None or len(path) <= 1:
            waypoint = state.goal
        else:
            waypoint = np.array(path[1], dtype=float) + 0.5  # next cell center
        err = waypoint - state.position
        a = self.kp * err - self.kd * state.velocity
        return np.clip(a, -1.0, 1.0)


def rollout_to_goal(env: PointMaze, controller: WaypointController, state: EnvState,
                    max_steps: int) -> Episode:
    """Drive toward state.goal until reached or out of steps."""
    obs = [env.observe(state)]
    actions, rewards = [], []
    terminated = False
    for _ in range(max_steps):
        a = controller.action(state)
        state, r, done = env.step(state, a)
        obs.append(env.observe(state))
        actions.append(a)
        rewards.append(r)
        if done:
            terminated = True
            break
    return Episode(observations=np.array(obs), actions=np.array(actions),
                   rewards=np.array(rewards), terminated=terminated)


def generate_dataset(layout: MazeLayout | str, n_steps: int, seed: int,
                     episode_len: int = 400, goal_timeout: int = 300) -> list[Episode]:
    """Undirected demonstrations: episodes of fixed length in which the
    scripted controller chases uniformly resampled goals.

    The goal is resampled whenever it is reached or the controller times out
    (unreached within ``goal_timeout`` steps); the episode itself runs for the
    full ``episode_len`` regardless, so every episode is long enough to host
    sizable jump-schedule spans.  Episodes accumulate until at least
    ``n_steps`` transitions exist.  Deterministic given the seed.
    """
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    if isinstance(layout, str):
        layout = load_layout(layout)
    env = PointMaze(layout)
    controller = WaypointController(layout)
    rng = np.random.default_rng(seed)

    episodes: list[Episode] = []
    total = 0
    n_timeouts = 0
    while total < n_steps:
        state = env.reset(rng)
        obs = [env.observe(state)]
        actions, rewards = [], []
        steps_on_goal = 0
        for _ in range(episode_len):
            a = controller.action(state)
            state, r, done = env.step(state, a)
            obs.append(env.observe(state))
            actions.append(a)
            rewards.append(r)
            steps_on_goal += 1
            if done or steps_on_goal >= goal_timeout:
                if not done:
                    n_timeouts += 1
                state = replace(state, goal=_fresh_goal(env, rng, state.position))
                steps_on_goal = 0
        episodes.append(Episode(observations=np.array(obs), actions=np.array(actions),
                                rewards=np.array(rewards), terminated=False))
        total += episode_len
    return episodes


def _fresh_goal(env: PointMaze, rng: np.random.Generator, position: np.ndarray,
                min_distance: float = 1.0) -> np.ndarray:
    while True:
        goal = env.sample_free_position(rng)
        if np.linalg.norm(goal - position) >= min_distance:
            return goal
