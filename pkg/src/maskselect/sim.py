"""Deterministic 2-D pick-and-place world and its scripted expert."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tokenizer import ACTION_DIM, HORIZON, MAX_GRIP, MAX_MOVE, ActionChunk

GOALS = np.array([[0.2, 0.8], [0.8, 0.8]])
GOAL_RADIUS = 0.05
GRASP_TOL = 0.02
MIN_SEPARATION = 0.15
SPAWN_LOW, SPAWN_HIGH = 0.1, 0.9
MAX_STEPS = 96
MAX_CHUNKS = MAX_STEPS // HORIZON

EXPERT_MAX_STEP = 0.08
EXPERT_NOISE = 0.005
RELEASE_TOL = GOAL_RADIUS / 2
# the expert only toggles the gripper on this step of a chunk
GRIP_EVENT_STEP = HORIZON - 1

# gripper command thresholds: close above, open below, hold in between
CLOSE_ABOVE = 0.5
OPEN_BELOW = -0.5

NO_OBJECT = -1
N_TASKS = 4


def task_object(instruction: int) -> int:
    return int(instruction) // 2


def task_goal(instruction: int) -> int:
    return int(instruction) % 2


@dataclass(frozen=True)
class WorldState:
    gripper: tuple[float, float]
    objects: tuple[tuple[float, float], tuple[float, float]]
    held: int = NO_OBJECT
    steps: int = 0
    clamped: int = 0

    @property
    def grasp(self) -> int:
        return int(self.held != NO_OBJECT)

    def observation(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.objects), GOALS.ravel()])

    def proprio(self) -> np.ndarray:
        return np.array([self.gripper[0], self.gripper[1], float(self.grasp)])


def reset(rng: np.random.Generator) -> tuple[WorldState, int]:
    """Gripper and both objects uniform in the spawn box, pairwise >= MIN_SEPARATION apart."""
    while True:
        pts = rng.uniform(SPAWN_LOW, SPAWN_HIGH, size=(3, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if d[np.triu_indices(3, 1)].min() >= MIN_SEPARATION:
            break
    instruction = int(rng.integers(N_TASKS))
    state = WorldState(
        gripper=tuple(pts[0]),
        objects=(tuple(pts[1]), tuple(pts[2])),
    )
    return state, instruction


def step(state: WorldState, action) -> WorldState:
    a = np.asarray(action, dtype=np.float64)
    clamped = np.clip(a, [-MAX_MOVE, -MAX_MOVE, -MAX_GRIP], [MAX_MOVE, MAX_MOVE, MAX_GRIP])
    n_clamped = state.clamped + int(np.any(clamped != a))
    dx, dy, g = clamped
    gx = float(np.clip(state.gripper[0] + dx, 0.0, 1.0))
    gy = float(np.clip(state.gripper[1] + dy, 0.0, 1.0))
    objects = [tuple(o) for o in state.objects]
    held = state.held

    if held != NO_OBJECT:
        objects[held] = (gx, gy)
        if g < OPEN_BELOW:
            held = NO_OBJECT
    elif g > CLOSE_ABOVE:
        dists = [np.hypot(o[0] - gx, o[1] - gy) for o in objects]
        nearest = int(np.argmin(dists))
        if dists[nearest] <= GRASP_TOL:
            held = nearest
            objects[held] = (gx, gy)

    return WorldState(
        gripper=(gx, gy),
        objects=(objects[0], objects[1]),
        held=held,
        steps=state.steps + 1,
        clamped=n_clamped,
    )


def is_success(state: WorldState, instruction: int) -> bool:
    obj = np.asarray(state.objects[task_object(instruction)])
    goal = GOALS[task_goal(instruction)]
    return state.held == NO_OBJECT and bool(np.linalg.norm(obj - goal) <= GOAL_RADIUS)


def _move_toward(pos, target) -> np.ndarray:
    return np.clip(np.asarray(target) - np.asarray(pos), -EXPERT_MAX_STEP, EXPERT_MAX_STEP)


def expert_action(state: WorldState, instruction: int, may_toggle: bool = True) -> np.ndarray:
    """Noise-free single-step expert command (dx, dy, g).

    Gripper events are only issued when ``may_toggle``; otherwise the
    controller keeps tracking its current target.
    """
    if is_success(state, instruction):
        return np.zeros(ACTION_DIM)
    target = task_object(instruction)
    pos = np.asarray(state.gripper)
    if state.held == target:
        goal = GOALS[task_goal(instruction)]
        if may_toggle and np.linalg.norm(goal - pos) <= RELEASE_TOL:
            return np.array([0.0, 0.0, -1.0])
        return np.append(_move_toward(pos, goal), 0.0)
    if state.held != NO_OBJECT:
        return np.array([0.0, 0.0, -1.0 if may_toggle else 0.0])
    obj = np.asarray(state.objects[target])
    if may_toggle and np.linalg.norm(obj - pos) <= GRASP_TOL / 2:
        return np.array([0.0, 0.0, 1.0])
    return np.append(_move_toward(pos, obj), 0.0)


def expert_chunk(state: WorldState, instruction: int, rng: np.random.Generator | None,
                 noise: float = EXPERT_NOISE) -> ActionChunk:
    """Plan the next HORIZON steps by rolling the controller on a private copy.

    Grasp and release happen only on the last step of a chunk, so the
    gripper command always has the same spectral signature; until then the
    controller keeps tracking its target.
    """
    rows = []
    sim = state
    for k in range(HORIZON):
        a = expert_action(sim, instruction, may_toggle=k == GRIP_EVENT_STEP)
        if noise > 0 and rng is not None and not is_success(sim, instruction):
            a[:2] += rng.normal(0.0, noise, size=2)
        a[:2] = np.clip(a[:2], -MAX_MOVE, MAX_MOVE)
        rows.append(a)
        sim = step(sim, a)
    return ActionChunk(np.array(rows))


def execute(state: WorldState, chunk: ActionChunk) -> WorldState:
    for a in chunk.values:
        if state.steps >= MAX_STEPS:
            break
        state = step(state, a)
    return state


def in_workspace(state: WorldState) -> bool:
    pts = np.array([state.gripper, *state.objects])
    ok = bool(np.all((pts >= 0.0) & (pts <= 1.0)))
    if state.held != NO_OBJECT:
        ok = ok and tuple(state.objects[state.held]) == tuple(state.gripper)
    return ok


def with_gripper(state: WorldState, x: float, y: float) -> WorldState:
    return replace(state, gripper=(float(x), float(y)))
