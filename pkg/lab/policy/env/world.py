"""
Tabletop World
A planar workspace [0, 1]^2 holding 2-5 colored disks/squares and two target
zones, manipulated by a gripper that moves in (x, y, z, yaw) and opens or
closes. Objects sit on integer height layers; grasping lifts the nearest top
object, releasing drops it onto whatever lies beneath.

Everything here is a pure function of (seed, actions): `step` never mutates its
input state.
"""
import copy
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..exceptions import UnknownTaskError, UnreachableTaskError

# ==================== GEOMETRY ====================

OBJECT_RADIUS = 0.04
GRIPPER_RADIUS = 0.015
CONTACT = 0.055          # gripper-to-object center distance while pushing
GRASP_RADIUS = 0.03
LAYER_H = 0.05
LAYER_TOL = 0.02
LIFT_Z = 0.12
TRAVEL_Z = 0.1
PICK_SUCCESS_Z = 0.1
Z_MAX = 0.15
PUSH_Z = 0.02

MAX_DXY = 0.05
MAX_DZ = 0.05
MAX_DYAW = 0.3

YAW_TOL = 0.15
STACK_TOL = 0.02
SPAWN_MARGIN = 0.12
ZONE_SIZE = 0.18
ZONE_SEPARATION = 0.3
MIN_SPAWN_DISTANCE = 0.1
STEP_LIMIT = 120

MAX_GRASP_LAYER = 2
MAX_STACK_BASE_LAYER = 1

# ==================== VOCABULARY ====================

SHAPES = ("disk", "square")
OBJECT_COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
ZONE_COLORS = ("gray", "brown")

TASK_KINDS = ("pick", "place", "pick_place", "stack", "rotate_insert", "push")
CHAIN_KINDS = ("pick_place", "stack", "rotate_insert", "push")
CHAIN = "chain"
CHAIN_LENGTH = 5

TEMPLATES = {
    "pick": "pick up the {color} {shape}",
    "place": "place the {color} {shape} in the {zone} zone",
    "pick_place": "move the {color} {shape} to the {zone} zone",
    "stack": "stack the {color} {shape} on the {target_color} {target_shape}",
    "rotate_insert": "insert the {color} {shape} into the {zone} slot",
    "push": "push the {color} {shape} to the {zone} zone",
}


def instruction_vocabulary() -> List[str]:
    """Every word any template can produce."""
    words = set(OBJECT_COLORS) | set(SHAPES) | set(ZONE_COLORS)
    for template in TEMPLATES.values():
        for word in template.split():
            if not word.startswith("{"):
                words.add(word)
    return sorted(words)


def wrap_angle(a: float) -> float:
    """Map to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


# ==================== STATE ====================

@dataclass
class ObjectState:
    id: int
    shape: str
    color: int
    x: float
    y: float
    yaw: float
    layer: int = 0

    @property
    def color_name(self) -> str:
        return OBJECT_COLORS[self.color]

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class GripperState:
    x: float = 0.5
    y: float = 0.5
    z: float = TRAVEL_Z
    yaw: float = 0.0
    closed: bool = False
    held: Optional[int] = None
    held_yaw_offset: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class Zone:
    id: int
    color: int
    cx: float
    cy: float
    slot_yaw: float
    size: float = ZONE_SIZE

    @property
    def color_name(self) -> str:
        return ZONE_COLORS[self.color]

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def contains(self, x: float, y: float) -> bool:
        half = self.size / 2.0
        return abs(x - self.cx) <= half and abs(y - self.cy) <= half


@dataclass
class EnvState:
    objects: List[ObjectState]
    gripper: GripperState
    zones: List[Zone]
    step_count: int = 0

    def object(self, object_id: int) -> ObjectState:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise UnreachableTaskError(f"no object with id {object_id} in the scene")

    def zone(self, zone_id: int) -> Zone:
        for zone in self.zones:
            if zone.id == zone_id:
                return zone
        raise UnreachableTaskError(f"no zone with id {zone_id} in the scene")

    def is_top(self, obj: ObjectState) -> bool:
        """Nothing rests on obj."""
        return not any(
            other.id != obj.id and other.id != self.gripper.held
            and other.layer == obj.layer + 1
            and math.hypot(other.x - obj.x, other.y - obj.y) <= OBJECT_RADIUS
            for other in self.objects
        )

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)

    def to_json(self) -> dict:
        return {
            "objects": [vars(o).copy() for o in self.objects],
            "gripper": vars(self.gripper).copy(),
            "zones": [vars(z).copy() for z in self.zones],
            "step_count": self.step_count,
        }


@dataclass
class TaskSpec:
    kind: str
    object_id: int
    instruction: str
    zone_id: Optional[int] = None
    target_id: Optional[int] = None
    yaw_tol: float = YAW_TOL
    stack_tol: float = STACK_TOL

    def to_json(self) -> dict:
        return vars(self).copy()


@dataclass
class StepResult:
    state: EnvState
    success: bool
    done: bool
    info: dict = field(default_factory=dict)


# ==================== RESET ====================

def _spawn_zones(rng: np.random.Generator) -> List[Zone]:
    lo, hi = SPAWN_MARGIN, 1.0 - SPAWN_MARGIN
    while True:
        centers = rng.uniform(lo, hi, size=(2, 2))
        if np.linalg.norm(centers[0] - centers[1]) >= ZONE_SEPARATION:
            break
    slots = rng.uniform(-math.pi, math.pi, size=2)
    return [
        Zone(id=i, color=i, cx=float(c[0]), cy=float(c[1]), slot_yaw=float(s))
        for i, (c, s) in enumerate(zip(centers, slots))
    ]


def _spawn_objects(rng: np.random.Generator, zones: List[Zone], n: int) -> List[ObjectState]:
    lo, hi = SPAWN_MARGIN, 1.0 - SPAWN_MARGIN
    keep_out = ZONE_SIZE / 2.0 + OBJECT_RADIUS
    colors = rng.permutation(len(OBJECT_COLORS))[:n]
    objects: List[ObjectState] = []
    while len(objects) < n:
        x, y = rng.uniform(lo, hi, size=2)
        if any(max(abs(x - z.cx), abs(y - z.cy)) < keep_out for z in zones):
            continue
        if any(math.hypot(x - o.x, y - o.y) < MIN_SPAWN_DISTANCE for o in objects):
            continue
        objects.append(ObjectState(
            id=len(objects),
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=int(colors[len(objects)]),
            x=float(x), y=float(y),
            yaw=float(rng.uniform(-math.pi, math.pi)),
        ))
    return objects


def spawn_scene(rng: np.random.Generator) -> EnvState:
    zones = _spawn_zones(rng)
    n = int(rng.integers(2, 6))
    return EnvState(objects=_spawn_objects(rng, zones, n), gripper=GripperState(), zones=zones)


def describe(kind: str, state: EnvState, object_id: int, zone_id=None, target_id=None) -> str:
    obj = state.object(object_id)
    fields = {"color": obj.color_name, "shape": obj.shape}
    if zone_id is not None:
        fields["zone"] = state.zone(zone_id).color_name
    if target_id is not None:
        target = state.object(target_id)
        fields.update(target_color=target.color_name, target_shape=target.shape)
    return TEMPLATES[kind].format(**fields)


def push_standoff(obj_xy: np.ndarray, zone: Zone) -> np.ndarray:
    """Where the gripper descends before pushing obj toward the zone center."""
    u = zone.center - obj_xy
    u = u / max(np.linalg.norm(u), 1e-9)
    return obj_xy - u * (CONTACT + 0.02)


def _feasible(kind: str, state: EnvState, obj: ObjectState, zone=None, target=None) -> bool:
    held = state.gripper.held
    if obj.id == held:
        return kind == "place"
    if kind == "place":
        return False
    if not state.is_top(obj) or obj.layer > MAX_GRASP_LAYER:
        return False
    if zone is not None and zone.contains(obj.x, obj.y):
        return False
    if kind == "push":
        if obj.layer != 0:
            return False
        p = push_standoff(obj.xy, zone)
        return bool(np.all(p >= 0.0) and np.all(p <= 1.0))
    if kind == "stack":
        return (target.id != obj.id and target.id != held and state.is_top(target)
                and target.layer <= MAX_STACK_BASE_LAYER)
    return True


def sample_task(state: EnvState, kind: str, rng: np.random.Generator) -> TaskSpec:
    """Draw a feasible task of the given kind for the current scene."""
    if kind not in TASK_KINDS:
        raise UnknownTaskError(f"unknown task kind: {kind!r} (expected one of {', '.join(TASK_KINDS)})")

    candidates = []
    for obj in state.objects:
        if kind in ("pick",):
            if _feasible(kind, state, obj):
                candidates.append((obj.id, None, None))
        elif kind == "stack":
            for target in state.objects:
                if _feasible(kind, state, obj, target=target):
                    candidates.append((obj.id, None, target.id))
        else:
            for zone in state.zones:
                if _feasible(kind, state, obj, zone=zone):
                    candidates.append((obj.id, zone.id, None))
    if not candidates:
        raise UnreachableTaskError(f"no feasible {kind} task in this scene")
    object_id, zone_id, target_id = candidates[int(rng.integers(len(candidates)))]
    return TaskSpec(
        kind=kind, object_id=object_id, zone_id=zone_id, target_id=target_id,
        instruction=describe(kind, state, object_id, zone_id, target_id),
    )


def _grab(state: EnvState, obj: ObjectState) -> None:
    g = state.gripper
    g.closed = True
    g.held = obj.id
    g.held_yaw_offset = wrap_angle(obj.yaw - g.yaw)
    obj.x, obj.y = g.x, g.y


def reset_scene(seed: int, kind: str):
    """Deterministic (state, task) for a seed. `place` starts with the object already held."""
    if kind not in TASK_KINDS and kind != CHAIN:
        raise UnknownTaskError(f"unknown task kind: {kind!r}")
    rng = np.random.default_rng(seed)
    state = spawn_scene(rng)
    if kind == CHAIN:
        return state, sample_task(state, CHAIN_KINDS[int(rng.integers(len(CHAIN_KINDS)))], rng), rng
    if kind == "place":
        obj = state.objects[int(rng.integers(len(state.objects)))]
        state.gripper.x, state.gripper.y = obj.x, obj.y
        _grab(state, obj)
    return state, sample_task(state, kind, rng), rng


def next_chain_task(state: EnvState, rng: np.random.Generator) -> TaskSpec:
    """Sample the next chain subtask from the scene as it is now."""
    kinds = list(CHAIN_KINDS)
    order = rng.permutation(len(kinds))
    for i in order:
        try:
            return sample_task(state, kinds[int(i)], rng)
        except UnreachableTaskError:
            continue
    raise UnreachableTaskError("no feasible chain subtask left in this scene")


# ==================== DYNAMICS ====================

def clip_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).copy()
    a[0:2] = np.clip(a[0:2], -MAX_DXY, MAX_DXY)
    a[2] = np.clip(a[2], -MAX_DZ, MAX_DZ)
    a[5] = np.clip(a[5], -MAX_DYAW, MAX_DYAW)
    return a


def _push(state: EnvState, before: np.ndarray, after: np.ndarray) -> List[int]:
    """Move every free table-level object the gripper swept into contact with."""
    moved = []
    for obj in state.objects:
        if obj.layer != 0 or obj.id == state.gripper.held:
            continue
        d_before = float(np.linalg.norm(obj.xy - before))
        d_after = float(np.linalg.norm(obj.xy - after))
        if not (d_after < CONTACT and d_before > GRASP_RADIUS and d_after < d_before):
            continue
        direction = (obj.xy - after) / max(d_after, 1e-9)
        new_xy = np.clip(after + direction * CONTACT, 0.0, 1.0)
        shift = new_xy - obj.xy
        riders = [o for o in state.objects
                  if o.layer > 0 and o.id != state.gripper.held
                  and math.hypot(o.x - obj.x, o.y - obj.y) <= OBJECT_RADIUS]
        for o in [obj] + riders:
            o.x = float(np.clip(o.x + shift[0], 0.0, 1.0))
            o.y = float(np.clip(o.y + shift[1], 0.0, 1.0))
        moved.append(obj.id)
    return moved


def _try_grasp(state: EnvState) -> Optional[int]:
    g = state.gripper
    best, best_d = None, GRASP_RADIUS
    for obj in state.objects:
        d = math.hypot(obj.x - g.x, obj.y - g.y)
        if d > best_d or abs(g.z - obj.layer * LAYER_H) > LAYER_TOL:
            continue
        if not state.is_top(obj):
            continue
        best, best_d = obj, d
    if best is None:
        g.closed = True
        return None
    _grab(state, best)
    return best.id


def _release(state: EnvState) -> None:
    g = state.gripper
    if g.held is not None:
        obj = state.object(g.held)
        supports = [o.layer for o in state.objects
                    if o.id != obj.id and math.hypot(o.x - obj.x, o.y - obj.y) <= OBJECT_RADIUS]
        obj.layer = max(supports) + 1 if supports else 0
    g.closed = False
    g.held = None
    g.held_yaw_offset = 0.0


def task_success(state: EnvState, task: TaskSpec) -> bool:
    obj = state.object(task.object_id)
    held = state.gripper.held == obj.id
    if task.kind == "pick":
        return held and state.gripper.z >= PICK_SUCCESS_Z
    if held:
        return False
    if task.kind == "stack":
        target = state.object(task.target_id)
        return (obj.layer == target.layer + 1
                and math.hypot(obj.x - target.x, obj.y - target.y) <= task.stack_tol)
    zone = state.zone(task.zone_id)
    if not zone.contains(obj.x, obj.y):
        return False
    if task.kind == "rotate_insert":
        return abs(wrap_angle(obj.yaw - zone.slot_yaw)) <= task.yaw_tol
    return True


def step(state: EnvState, action, task: Optional[TaskSpec] = None,
         step_limit: int = STEP_LIMIT) -> StepResult:
    """Integrate one 7-D command. Roll and pitch are accepted but inert."""
    nxt = state.copy()
    a = clip_action(action)
    g = nxt.gripper
    before = g.xy

    g.x = float(np.clip(g.x + a[0], 0.0, 1.0))
    g.y = float(np.clip(g.y + a[1], 0.0, 1.0))
    g.z = float(np.clip(g.z + a[2], 0.0, Z_MAX))
    g.yaw = wrap_angle(g.yaw + a[5])

    pushed = []
    if not g.closed and a[6] < 0.5 and g.z <= PUSH_Z:
        pushed = _push(nxt, before, g.xy)

    grasped = None
    close = a[6] >= 0.5
    if close and not g.closed:
        grasped = _try_grasp(nxt)
    elif not close and g.closed:
        _release(nxt)

    if g.held is not None:
        obj = nxt.object(g.held)
        obj.x, obj.y = g.x, g.y
        obj.yaw = wrap_angle(g.yaw + g.held_yaw_offset)

    nxt.step_count += 1
    success = task_success(nxt, task) if task is not None else False
    done = success or nxt.step_count >= step_limit
    return StepResult(state=nxt, success=success, done=done,
                      info={"pushed": pushed, "grasped": grasped})
