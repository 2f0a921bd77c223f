"""Kinematic 2-D pick-and-place chain (x horizontal, z height).

A gripper carries two boxes to target slots in a prescribed order. Each
(box, target) assignment walks through six geometric sub-stages; the active
stage only ever advances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError

STAGES = ("reach-above", "lower-to", "grasp", "pick-up", "carry", "drop")
BOX_HOME = np.array([[-0.7, 0.0], [-0.35, 0.0]])
TARGETS = np.array([[0.3, 0.0], [0.55, 0.0], [0.8, 0.0]])
GRIPPER_HOME = np.array([0.0, 0.8])


@dataclass(frozen=True)
class StageChainParams:
    step_size: float = 0.05
    above: float = 0.3
    grip_offset: float = 0.05
    carry_height: float = 0.5
    tol: float = 0.04
    grasp_eps: float = 0.08
    progress_scale: float = 10.0
    stage_bonus: float = 1.0
    final_bonus: float = 5.0
    jitter: float = 0.05

    @property
    def reward_bound(self) -> float:
        return self.progress_scale * self.step_size * np.sqrt(2.0) + self.stage_bonus + self.final_bonus


@dataclass(frozen=True)
class StageChainSpec:
    """Ordered (box, target) assignments; 0-based indices, at most 3."""

    assignments: tuple[tuple[int, int], ...]
    n_boxes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple((int(b), int(t)) for b, t in self.assignments))
        if not 1 <= len(self.assignments) <= 3:
            raise InvalidInputError("stage chain needs 1 to 3 assignments")
        where: dict[int, int] = {}  # box -> target it currently sits on
        for b, t in self.assignments:
            if not (0 <= b < self.n_boxes and 0 <= t < len(TARGETS)):
                raise InvalidInputError(f"bad assignment B{b + 1}->T{t + 1}")
            if any(t == tt and bb != b for bb, tt in where.items()):
                raise InvalidInputError(f"target T{t + 1} already holds another box")
            where[b] = t

    @classmethod
    def parse(cls, text: str) -> "StageChainSpec":
        """Parse ``B1>T1 B2>T2`` (1-based labels)."""
        out = []
        for part in text.replace(",", " ").split():
            b, t = part.upper().split(">")
            out.append((int(b.lstrip("B")) - 1, int(t.lstrip("T")) - 1))
        return cls(tuple(out))

    def encode(self) -> str:
        return " ".join(f"B{b + 1}>T{t + 1}" for b, t in self.assignments)

    def boxes_used(self) -> frozenset[int]:
        return frozenset(b for b, _ in self.assignments)


@dataclass
class StageChainState:
    gripper: np.ndarray
    boxes: np.ndarray
    holding: bool = False
    assignment: int = 0
    stage: int = 0
    steps_elapsed: int = 0
    complete: bool = False

    def copy(self) -> "StageChainState":
        return StageChainState(self.gripper.copy(), self.boxes.copy(), self.holding,
                               self.assignment, self.stage, self.steps_elapsed, self.complete)


def stage_goal(spec: StageChainSpec, state: StageChainState, p: StageChainParams) -> np.ndarray:
    """Gripper waypoint the active stage is steering toward."""
    b, t = spec.assignments[min(state.assignment, len(spec.assignments) - 1)]
    box = state.boxes[b]
    target = TARGETS[t]
    s = state.stage
    if s == 0:
        return box + np.array([0.0, p.above])
    if s in (1, 2):
        return box + np.array([0.0, p.grip_offset])
    if s == 3:
        return np.array([state.gripper[0], p.carry_height + p.grip_offset])
    if s == 4:
        return np.array([target[0], p.carry_height + p.grip_offset])
    return target + np.array([0.0, p.grip_offset])


def stagechain_step(spec: StageChainSpec, state: StageChainState, action, horizon: int,
                    params: StageChainParams = StageChainParams()):
    """Advance one step. Returns (next_state, reward, done, info)."""
    p = params
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    nxt = state.copy()
    nxt.steps_elapsed += 1
    if state.complete:
        return nxt, 0.0, True, {"success": True, "terminal": True, "truncated": False}

    goal_before = stage_goal(spec, state, p)
    d_before = float(np.linalg.norm(state.gripper - goal_before))
    nxt.gripper = np.clip(state.gripper + a[:2] * p.step_size, [-1.0, 0.0], [1.0, 1.0])
    b, t = spec.assignments[state.assignment]
    if nxt.holding:
        nxt.boxes[b] = nxt.gripper - np.array([0.0, p.grip_offset])
    d_after = float(np.linalg.norm(nxt.gripper - goal_before))
    reward = p.progress_scale * (d_before - d_after)

    grip = a[2] > 0.5
    near = d_after < p.tol
    s = state.stage
    advance = False
    if s in (0, 1, 4):
        advance = near
    elif s == 2:
        if grip and np.linalg.norm(nxt.gripper - goal_before) < p.grasp_eps:
            nxt.holding = True
            nxt.boxes[b] = nxt.gripper - np.array([0.0, p.grip_offset])
            advance = True
    elif s == 3:
        advance = nxt.gripper[1] >= p.carry_height + p.grip_offset - p.tol
    elif s == 5:
        if near and not grip:
            nxt.holding = False
            nxt.boxes[b] = TARGETS[t].copy()
            advance = True

    if advance:
        reward += p.stage_bonus
        if s == len(STAGES) - 1:
            if state.assignment + 1 >= len(spec.assignments):
                nxt.complete = True
                reward += p.final_bonus
            else:
                nxt.assignment += 1
                nxt.stage = 0
        else:
            nxt.stage = s + 1

    success = nxt.complete
    truncated = (not success) and nxt.steps_elapsed >= horizon
    info = {"success": success, "terminal": success, "truncated": truncated}
    return nxt, reward, success or truncated, info


def stage_label(spec: StageChainSpec, state: StageChainState) -> str:
    b, _ = spec.assignments[min(state.assignment, len(spec.assignments) - 1)]
    return f"B{b + 1}:{STAGES[state.stage]}"


@dataclass
class StageChainEnv:
    spec: StageChainSpec
    horizon: int
    seed: int = 0
    params: StageChainParams = field(default_factory=StageChainParams)

    kind = "stagechain"
    obs_dim = 26
    act_dim = 3

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.step_calls = 0
        self.state: StageChainState | None = None
        self.obs_scale = np.ones(self.obs_dim)
        self.policy_obs_scale = self.obs_scale

    def reset(self) -> np.ndarray:
        j = self.params.jitter
        g = GRIPPER_HOME + self.rng.uniform(-j, j, size=2)
        self.state = StageChainState(g, BOX_HOME.copy())
        return self.observe(self.state)

    def observe(self, state: StageChainState) -> np.ndarray:
        b, t = self.spec.assignments[min(state.assignment, len(self.spec.assignments) - 1)]
        stage = np.zeros(len(STAGES))
        stage[state.stage] = 1.0
        progress = np.zeros(3)
        progress[min(state.assignment, 2)] = 1.0
        return np.concatenate([
            state.gripper, [1.0 if state.holding else 0.0], state.boxes.ravel(), TARGETS.ravel(),
            state.gripper - state.boxes[b], state.boxes[b] - TARGETS[t], stage, progress,
        ])

    def step(self, action):
        if self.state is None:
            raise RuntimeError("step called before reset")
        self.step_calls += 1
        self.state, reward, done, info = stagechain_step(self.spec, self.state, action, self.horizon, self.params)
        return self.observe(self.state), reward, done, info

    def stage_label(self, state: StageChainState | None = None) -> str:
        return stage_label(self.spec, state or self.state)

    def tags(self, state: StageChainState | None = None) -> frozenset[str]:
        label = self.stage_label(state)
        box, stage = label.split(":")
        return frozenset({f"stage:{label}", f"box:{box}", f"action:{stage}"})

    def sample_free_state(self, rng: np.random.Generator) -> StageChainState:
        n = len(self.spec.assignments)
        assignment = int(rng.integers(n))
        stage = int(rng.integers(len(STAGES)))
        boxes = BOX_HOME.copy()
        for b, t in self.spec.assignments[:assignment]:
            boxes[b] = TARGETS[t]
        gripper = np.array([rng.uniform(-1, 1), rng.uniform(0, 1)])
        holding = stage >= 3
        b, _ = self.spec.assignments[assignment]
        if holding:
            gripper[1] = max(gripper[1], self.params.grip_offset)
            boxes[b] = gripper - np.array([0.0, self.params.grip_offset])
        return StageChainState(gripper, boxes, holding, assignment, stage)

    def set_state(self, state: StageChainState) -> np.ndarray:
        self.state = state.copy()
        return self.observe(self.state)


def scripted_action(spec: StageChainSpec, state: StageChainState,
                    params: StageChainParams = StageChainParams()) -> np.ndarray:
    """Greedy expert: head for the stage waypoint, close the grip at grasp."""
    goal = stage_goal(spec, state, params)
    delta = (goal - state.gripper) / params.step_size
    delta = np.clip(delta, -1.0, 1.0)
    grip = 1.0 if state.stage in (2, 3, 4) else -1.0
    return np.array([delta[0], delta[1], grip])
