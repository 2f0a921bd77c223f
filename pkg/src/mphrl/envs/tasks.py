"""Task and taskset descriptions, generators, and the taskset text format.

Taskset files hold one tab-separated ``key=value`` record per task, e.g.::

    kind=maze	layout=E2 N3 W2	seed=0	H=180	threshold=0.8	budget=200000
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import GenerationError, InvalidInputError
from .maze import DIRECTIONS, MazeLayout, MazeParams, PointMazeEnv
from .stagechain import StageChainEnv, StageChainParams, StageChainSpec

Layout = Union[MazeLayout, StageChainSpec]

MAZE_STEPS_PER_CORRIDOR = 60
STAGECHAIN_STEPS_PER_ASSIGNMENT = 100

# the eight assignment orders of the pick-and-place lifelong taskset
PICKPLACE_8 = (
    "B1>T1 B2>T2", "B2>T1 B1>T2 B1>T3", "B2>T1 B2>T2", "B1>T1 B1>T2 B2>T3",
    "B1>T1 B2>T2 B2>T3", "B1>T1 B1>T2 B1>T3", "B2>T1 B1>T2", "B2>T1 B1>T2 B1>T3",
)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    layout: Layout
    horizon: int
    seed: int = 0
    gamma: float = 0.99
    jitter: float | None = None
    reward_id: str = "progress"
    success_id: str = "goal"

    def __post_init__(self):
        if self.horizon <= 0:
            raise InvalidInputError("horizon must be positive")
        if self.kind not in ("maze", "stagechain"):
            raise InvalidInputError(f"unknown environment kind {self.kind!r}")


@dataclass(frozen=True)
class TasksetSpec:
    tasks: tuple[TaskSpec, ...]
    seed: int = 0
    threshold: float = 0.8
    budget: int = 2_000_000

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise InvalidInputError("taskset must contain at least one task")
        if self.budget <= 0:
            raise InvalidInputError("per-task budget must be positive")
        if not 0.0 < self.threshold <= 1.0:
            raise InvalidInputError("threshold must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.tasks)

    def prefix(self, n: int) -> tuple[TaskSpec, ...]:
        return self.tasks[:n]


def maze_task(layout: MazeLayout | str, seed: int = 0, gamma: float = 0.99) -> TaskSpec:
    if isinstance(layout, str):
        layout = MazeLayout.parse(layout)
    return TaskSpec("maze", layout, MAZE_STEPS_PER_CORRIDOR * len(layout.corridors), seed, gamma)


def stagechain_task(spec: StageChainSpec | str, seed: int = 0, gamma: float = 0.99) -> TaskSpec:
    if isinstance(spec, str):
        spec = StageChainSpec.parse(spec)
    return TaskSpec("stagechain", spec, STAGECHAIN_STEPS_PER_ASSIGNMENT * len(spec.assignments), seed, gamma)


def make_env(task: TaskSpec, seed: int):
    if task.kind == "maze":
        params = MazeParams() if task.jitter is None else MazeParams(jitter=task.jitter)
        return PointMazeEnv(task.layout, task.horizon, seed, params)
    params = StageChainParams() if task.jitter is None else StageChainParams(jitter=task.jitter)
    return StageChainEnv(task.layout, task.horizon, seed, params)


_PERP = {"N": "EW", "S": "EW", "E": "NS", "W": "NS"}


def _random_layout(rng: np.random.Generator, n_corridors: int, min_len: int, max_len: int,
                   allowed: str = "NSEW", tries: int = 200) -> MazeLayout:
    for _ in range(tries):
        dirs = [str(rng.choice(list(allowed)))]
        for _ in range(n_corridors - 1):
            options = [d for d in _PERP[dirs[-1]] if d in allowed]
            if not options:
                break
            dirs.append(str(rng.choice(options)))
        if len(dirs) < n_corridors:
            continue
        lengths = rng.integers(min_len, max_len + 1, size=n_corridors)
        try:
            return MazeLayout(tuple(zip(dirs, (int(n) for n in lengths))))
        except InvalidInputError:
            continue
    raise GenerationError(f"could not place {n_corridors} non-intersecting corridors")


def generate_maze_taskset(seed: int, n_tasks: int, corridors_per_maze: int, *,
                          variant: str = "standard", min_len: int = 2, max_len: int = 3,
                          threshold: float = 0.8, budget: int = 2_000_000,
                          gamma: float = 0.99, max_attempts: int = 1000) -> TasksetSpec:
    """Seeded family of random corridor mazes.

    ``standard``: all four directions appear across the taskset, and in the
    first task too whenever it has at least four corridors.
    ``v2``: the first task only uses one axis pair's worth of turns, so it
    cannot exercise every direction the later tasks need.
    """
    if n_tasks < 1 or corridors_per_maze < 2:
        raise GenerationError("need n_tasks >= 1 and corridors_per_maze >= 2")
    if variant not in ("standard", "v2"):
        raise GenerationError(f"unknown maze variant {variant!r}")
    if variant == "v2" and n_tasks < 2:
        raise GenerationError("v2 variant needs at least two tasks")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        layouts = []
        for i in range(n_tasks):
            if i == 0 and variant == "v2":
                first = str(rng.choice(list("NSEW")))
                allowed = first + str(rng.choice(list(_PERP[first])))
                layouts.append(_random_layout(rng, corridors_per_maze, min_len, max_len, allowed))
            else:
                layouts.append(_random_layout(rng, corridors_per_maze, min_len, max_len))
        covered = frozenset().union(*(lay.directions() for lay in layouts))
        if len(covered) < 4:
            continue
        first_dirs = layouts[0].directions()
        if variant == "standard" and corridors_per_maze >= 4 and len(first_dirs) < 4:
            continue
        if variant == "v2" and len(first_dirs) >= 4:
            continue
        tasks = tuple(TaskSpec("maze", lay, MAZE_STEPS_PER_CORRIDOR * corridors_per_maze,
                               seed * 1000 + i, gamma) for i, lay in enumerate(layouts))
        return TasksetSpec(tasks, seed, threshold, budget)
    raise GenerationError("could not satisfy direction coverage constraints")


def generate_stagechain_taskset(seed: int, n_tasks: int, *, threshold: float = 0.75,
                                budget: int = 2_000_000, gamma: float = 0.99) -> TasksetSpec:
    """Random assignment orders; the first ``min(n_tasks, 8)`` follow PICKPLACE_8
    order after a seeded shuffle of tasks 2..8."""
    rng = np.random.default_rng(seed)
    order = [0] + [int(i) for i in rng.permutation(np.arange(1, len(PICKPLACE_8)))]
    texts = [PICKPLACE_8[i] for i in order]
    while len(texts) < n_tasks:
        n = int(rng.integers(2, 4))
        parts, where = [], {}
        while len(parts) < n:
            b, t = int(rng.integers(2)), int(rng.integers(3))
            if any(t == tt and bb != b for bb, tt in where.items()):
                continue
            where[b] = t
            parts.append(f"B{b + 1}>T{t + 1}")
        texts.append(" ".join(parts))
    tasks = tuple(stagechain_task(t, seed * 1000 + i, gamma) for i, t in enumerate(texts[:n_tasks]))
    return TasksetSpec(tasks, seed, threshold, budget)


# --------------------------------------------------------------------------
# text serialization


def dump_taskset(ts: TasksetSpec) -> str:
    lines = [f"# taskset seed={ts.seed}"]
    for t in ts.tasks:
        rec = [f"kind={t.kind}", f"layout={t.layout.encode()}", f"seed={t.seed}", f"H={t.horizon}",
               f"threshold={ts.threshold}", f"budget={ts.budget}", f"gamma={t.gamma}"]
        lines.append("\t".join(rec))
    return "\n".join(lines) + "\n"


def parse_taskset(text: str) -> TasksetSpec:
    tasks, threshold, budget, seed = [], 0.8, 2_000_000, 0
    for raw in text.splitlines():
        line = raw.strip()
        if line.startswith("# taskset"):
            for part in line.split()[2:]:
                k, v = part.split("=")
                if k == "seed":
                    seed = int(v)
            continue
        if not line or line.startswith("#"):
            continue
        rec = dict(part.split("=", 1) for part in raw.rstrip("\n").split("\t"))
        kind = rec["kind"]
        layout = MazeLayout.parse(rec["layout"]) if kind == "maze" else StageChainSpec.parse(rec["layout"])
        tasks.append(TaskSpec(kind, layout, int(rec["H"]), int(rec.get("seed", 0)),
                              float(rec.get("gamma", 0.99))))
        threshold = float(rec.get("threshold", threshold))
        budget = int(rec.get("budget", budget))
    return TasksetSpec(tuple(tasks), seed, threshold, budget)


def save_taskset(ts: TasksetSpec, path: str | Path) -> None:
    Path(path).write_text(dump_taskset(ts))


def load_taskset(path: str | Path) -> TasksetSpec:
    return parse_taskset(Path(path).read_text())


__all__ = [
    "DIRECTIONS", "PICKPLACE_8", "TaskSpec", "TasksetSpec", "dump_taskset", "generate_maze_taskset",
    "generate_stagechain_taskset", "load_taskset", "make_env", "maze_task", "parse_taskset",
    "save_taskset", "stagechain_task",
]
