"""
Scripted Expert
A stateless waypoint controller: every call looks at the current scene and
returns the next 7-D command, so it can be rolled out from any state.
"""
import math

import numpy as np

from ..exceptions import UnreachableTaskError
from .world import (
    CONTACT,
    GRASP_RADIUS,
    LAYER_H,
    LIFT_Z,
    MAX_DXY,
    MAX_DYAW,
    MAX_DZ,
    OBJECT_RADIUS,
    PUSH_Z,
    TRAVEL_Z,
    EnvState,
    TaskSpec,
    push_standoff,
    wrap_angle,
)

XY_TOL = 1e-6
Z_TOL = 1e-6
YAW_ALIGN_TOL = 1e-6
PUSH_LINE_TOL = 0.01

OPEN = 0.0
CLOSE = 1.0


def _command(dxy=(0.0, 0.0), dz=0.0, dyaw=0.0, grip=OPEN) -> np.ndarray:
    return np.array([dxy[0], dxy[1], dz, 0.0, 0.0, dyaw, grip], dtype=np.float64)


def _toward_xy(current: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Straight-line step, scaled so neither component exceeds the clip."""
    delta = target - current
    largest = float(np.max(np.abs(delta)))
    if largest > MAX_DXY:
        delta = delta * (MAX_DXY / largest)
    return delta


def _toward_z(z: float, target: float) -> float:
    return float(np.clip(target - z, -MAX_DZ, MAX_DZ))


def _landing_layer(state: EnvState, xy: np.ndarray, moving_id: int) -> int:
    layers = [o.layer for o in state.objects
              if o.id != moving_id and math.hypot(o.x - xy[0], o.y - xy[1]) <= OBJECT_RADIUS]
    return max(layers) + 1 if layers else 0


def _fetch(state: EnvState, obj) -> np.ndarray:
    """Approach from travel height, descend onto obj, close."""
    g = state.gripper
    if g.closed:
        return _command(dz=_toward_z(g.z, TRAVEL_Z), grip=OPEN)
    if np.max(np.abs(obj.xy - g.xy)) > XY_TOL:
        if g.z < TRAVEL_Z - Z_TOL:
            return _command(dz=_toward_z(g.z, TRAVEL_Z))
        return _command(dxy=_toward_xy(g.xy, obj.xy))
    grasp_z = obj.layer * LAYER_H
    if abs(g.z - grasp_z) > Z_TOL:
        return _command(dz=_toward_z(g.z, grasp_z))
    return _command(grip=CLOSE)


def _deliver(state: EnvState, task: TaskSpec, obj) -> np.ndarray:
    """Carry the held object to its destination, align yaw if asked, lower, open."""
    g = state.gripper
    if task.kind == "stack":
        target_xy = state.object(task.target_id).xy
    else:
        target_xy = state.zone(task.zone_id).center

    dyaw = 0.0
    aligned = True
    if task.kind == "rotate_insert":
        desired = state.zone(task.zone_id).slot_yaw - g.held_yaw_offset
        error = wrap_angle(desired - g.yaw)
        dyaw = float(np.clip(error, -MAX_DYAW, MAX_DYAW))
        aligned = abs(error) <= YAW_ALIGN_TOL

    if np.max(np.abs(target_xy - g.xy)) > XY_TOL:
        if g.z < TRAVEL_Z - Z_TOL:
            return _command(dz=_toward_z(g.z, TRAVEL_Z), dyaw=dyaw, grip=CLOSE)
        return _command(dxy=_toward_xy(g.xy, target_xy), dyaw=dyaw, grip=CLOSE)
    if not aligned:
        return _command(dyaw=dyaw, grip=CLOSE)
    release_z = _landing_layer(state, target_xy, obj.id) * LAYER_H
    if abs(g.z - release_z) > Z_TOL:
        return _command(dz=_toward_z(g.z, release_z), grip=CLOSE)
    return _command(grip=OPEN)


def _push(state: EnvState, task: TaskSpec, obj) -> np.ndarray:
    g = state.gripper
    zone = state.zone(task.zone_id)
    if g.closed:
        return _command(dz=_toward_z(g.z, TRAVEL_Z), grip=OPEN)

    u = zone.center - obj.xy
    u = u / max(float(np.linalg.norm(u)), 1e-9)
    rel = g.xy - obj.xy
    along = float(rel @ u)
    perp = float(np.linalg.norm(rel - along * u))

    if g.z <= PUSH_Z + Z_TOL:
        on_line = -(CONTACT + 0.03) <= along < -GRASP_RADIUS and perp <= PUSH_LINE_TOL
        if on_line:
            goal = zone.center - u * CONTACT
            return _command(dxy=_toward_xy(g.xy, goal))
        return _command(dz=_toward_z(g.z, TRAVEL_Z))

    standoff = push_standoff(obj.xy, zone)
    if np.max(np.abs(standoff - g.xy)) > XY_TOL:
        if g.z < TRAVEL_Z - Z_TOL:
            return _command(dz=_toward_z(g.z, TRAVEL_Z))
        return _command(dxy=_toward_xy(g.xy, standoff))
    return _command(dz=_toward_z(g.z, 0.0))


def expert_action(state: EnvState, task: TaskSpec) -> np.ndarray:
    """Next command for the task, in physical units and inside the clip bounds."""
    obj = state.object(task.object_id)
    if task.zone_id is not None:
        state.zone(task.zone_id)
    if task.kind == "stack" and (task.target_id is None or task.target_id == task.object_id):
        raise UnreachableTaskError("a stack task needs a distinct target object")

    if task.kind == "push":
        if obj.layer != 0:
            raise UnreachableTaskError(f"object {obj.id} is not on the table and cannot be pushed")
        return _push(state, task, obj)

    if state.gripper.held != obj.id:
        return _fetch(state, obj)
    if task.kind == "pick":
        return _command(dz=_toward_z(state.gripper.z, LIFT_Z), grip=CLOSE)
    return _deliver(state, task, obj)
