"""
Kinematic follow-the-leader model of a coaxial catheter and angled-tip guidewire
inside a rigid-walled vessel tree.

Both devices share one traced tip path starting at the insertion point. Each
device occupies the first `insertion_length` mm of that path; whichever is
inserted further is the leader and extends the path when it advances past the
end. Wall contacts are resolved by radial clamping with a linear spring force.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from vessel import VesselTree

logger = logging.getLogger(__name__)

MAX_TRANSLATION_SPEED = 40.0        # mm/s
MAX_ROTATION_SPEED = math.pi        # rad/s (180°/s)
CONTROL_DT = 0.135                  # s per control step (200 steps ≈ 27 s)
SUBSTEP = 1.0                       # mm, trace resolution
PROTRUSION = 3.0                    # mm of guidewire pushed out on reset
TRACKING_SPACING = 2.0              # mm between tracking points
PENETRATION_CAP = 0.75              # fraction of device radius

REFERENCE_NORMAL = np.array([0.0, 0.0, 1.0])
FALLBACK_NORMAL = np.array([1.0, 0.0, 0.0])


class PlacementError(ValueError):
    """Insertion point lies outside the vessel lumen."""


class Device(str, Enum):
    GUIDEWIRE = "guidewire"
    CATHETER = "catheter"


@dataclass(frozen=True)
class DeviceParams:
    outer_diameter: float
    tip_bend_angle: float = 0.0
    tip_segment_length: float = 3.0
    wall_stiffness: float = 2.0
    tangent_blend: float = 0.3
    max_translation_speed: float = MAX_TRANSLATION_SPEED
    max_rotation_speed: float = MAX_ROTATION_SPEED

    def __post_init__(self):
        if self.outer_diameter <= 0:
            raise ValueError(f"outer_diameter must be > 0, got {self.outer_diameter}")
        if not (0.0 <= self.tip_bend_angle < math.pi / 2):
            raise ValueError(f"tip_bend_angle must be in [0, π/2), got {self.tip_bend_angle}")
        if self.wall_stiffness <= 0:
            raise ValueError(f"wall_stiffness must be > 0, got {self.wall_stiffness}")
        if not (0.0 <= self.tangent_blend <= 1.0):
            raise ValueError(f"tangent_blend must be in [0, 1], got {self.tangent_blend}")
        if self.max_translation_speed != MAX_TRANSLATION_SPEED or self.max_rotation_speed != MAX_ROTATION_SPEED:
            raise ValueError("device speed limits are fixed at 40 mm/s and 180°/s")

    @property
    def radius(self) -> float:
        return self.outer_diameter / 2.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DeviceParams':
        return cls(**data)


def default_guidewire() -> DeviceParams:
    """0.035" guidewire with a 30° angled tip."""
    return DeviceParams(outer_diameter=0.89, tip_bend_angle=math.radians(30.0))


def default_catheter() -> DeviceParams:
    """Straight-tip guide catheter sized for a 0.0441" lumen."""
    return DeviceParams(outer_diameter=1.7, tip_bend_angle=0.0)


@dataclass
class DeviceState:
    insertion_length: float = 0.0
    roll: float = 0.0


@dataclass(frozen=True)
class ContactSample:
    force: np.ndarray
    penetration: float
    location: np.ndarray
    step: int

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.force))


@dataclass
class StepOutcome:
    tracking_points: np.ndarray
    contacts: List[ContactSample]
    tip_displacement: float


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def bend_direction(heading: np.ndarray, roll: float) -> np.ndarray:
    """Unit vector perpendicular to heading: the reference normal rotated about heading by roll."""
    ref = REFERENCE_NORMAL - np.dot(REFERENCE_NORMAL, heading) * heading
    if np.linalg.norm(ref) < 1e-9:
        ref = FALLBACK_NORMAL - np.dot(FALLBACK_NORMAL, heading) * heading
    ref = _unit(ref)
    return math.cos(roll) * ref + math.sin(roll) * np.cross(heading, ref)


def resolve_wall_contact(tree: VesselTree, candidate: np.ndarray, device_radius: float,
                         stiffness: float, step: int
                         ) -> Tuple[np.ndarray, Optional[ContactSample], Optional[np.ndarray]]:
    """
    Clamp a candidate tip position into the lumen.

    Returns (position, contact, outward normal); contact and normal are None
    when the device fits at the candidate.
    """
    query = tree.lumen_query(candidate)
    overshoot = device_radius - query.clearance
    if overshoot <= 0:
        return candidate, None, None
    allowed = max(query.radius - device_radius, 0.0)
    clamped = query.foot + allowed * query.normal
    penetration = min(overshoot, PENETRATION_CAP * device_radius)
    force = -stiffness * penetration * query.normal
    contact = ContactSample(force, float(penetration), clamped.copy(), step)
    return clamped, contact, query.normal


@dataclass
class SimState:
    guidewire: DeviceState
    catheter: DeviceState
    trace: List[np.ndarray]
    trace_arcs: List[float]
    end_heading: np.ndarray
    guidewire_params: DeviceParams = field(default_factory=default_guidewire)
    catheter_params: DeviceParams = field(default_factory=default_catheter)
    step_index: int = 0
    contacts: List[ContactSample] = field(default_factory=list)

    def device(self, which: Device) -> DeviceState:
        return self.guidewire if which == Device.GUIDEWIRE else self.catheter

    def params(self, which: Device) -> DeviceParams:
        return self.guidewire_params if which == Device.GUIDEWIRE else self.catheter_params

    def leader(self) -> Device:
        if self.catheter.insertion_length > self.guidewire.insertion_length:
            return Device.CATHETER
        return Device.GUIDEWIRE

    def point_at_arc(self, s: float) -> np.ndarray:
        arcs = self.trace_arcs
        s = min(max(s, 0.0), arcs[-1])
        i = bisect.bisect_right(arcs, s) - 1
        if i >= len(arcs) - 1:
            return self.trace[-1].copy()
        f = (s - arcs[i]) / (arcs[i + 1] - arcs[i])
        return self.trace[i] + f * (self.trace[i + 1] - self.trace[i])

    def tip_position(self, which: Device = Device.GUIDEWIRE) -> np.ndarray:
        return self.point_at_arc(self.device(which).insertion_length)

    def tip_heading(self, which: Device = Device.GUIDEWIRE) -> np.ndarray:
        s = self.device(which).insertion_length
        if s >= self.trace_arcs[-1] - 1e-12 or len(self.trace) < 2:
            return self.end_heading.copy()
        i = bisect.bisect_right(self.trace_arcs, s) - 1
        return _unit(self.trace[i + 1] - self.trace[i])

    def traced_path(self, which: Device) -> np.ndarray:
        """Path occupied by the device body, proximal end first."""
        s = self.device(which).insertion_length
        i = bisect.bisect_right(self.trace_arcs, s)
        points = self.trace[:i]
        if self.trace_arcs[i - 1] < s:
            points = points + [self.point_at_arc(s)]
        return np.array(points)

    def tracking_points(self) -> np.ndarray:
        """Guidewire points 0, 2 and 4 mm back from the tip (clamped at the insertion point)."""
        tip = self.guidewire.insertion_length
        return np.array([self.point_at_arc(tip - k * TRACKING_SPACING) for k in range(3)])

    def copy(self) -> 'SimState':
        return SimState(
            guidewire=DeviceState(**asdict(self.guidewire)),
            catheter=DeviceState(**asdict(self.catheter)),
            trace=[p.copy() for p in self.trace],
            trace_arcs=list(self.trace_arcs),
            end_heading=self.end_heading.copy(),
            guidewire_params=self.guidewire_params,
            catheter_params=self.catheter_params,
            step_index=self.step_index,
            contacts=list(self.contacts),
        )

    # ------------------------------------------------------------------
    # Motion
    # ------------------------------------------------------------------

    def _truncate_ghost(self):
        """Drop retracted trace beyond the leading tip."""
        s = max(self.guidewire.insertion_length, self.catheter.insertion_length)
        if s >= self.trace_arcs[-1] - 1e-12:
            return
        heading = self.tip_heading(self.leader())
        tip = self.point_at_arc(s)
        i = bisect.bisect_left(self.trace_arcs, s)
        del self.trace[i:]
        del self.trace_arcs[i:]
        if not self.trace_arcs or self.trace_arcs[-1] < s:
            self.trace.append(tip)
            self.trace_arcs.append(s)
        self.end_heading = heading

    def _extend(self, tree: VesselTree, params: DeviceParams, roll: float,
                length: float) -> List[ContactSample]:
        contacts: List[ContactSample] = []
        p = self.trace[-1]
        h = self.end_heading
        beta = params.tip_bend_angle
        d = _unit(math.cos(beta) * h + math.sin(beta) * bend_direction(h, roll))
        last_dir = None
        remaining = length
        while remaining > 1e-12:
            ell = min(SUBSTEP, remaining)
            remaining -= ell
            new, contact, normal = resolve_wall_contact(
                tree, p + ell * d, params.radius, params.wall_stiffness, self.step_index
            )
            moved = float(np.linalg.norm(new - p))
            if moved > ell:
                # Clamping may not lengthen the substep (speed cap)
                shortened = p + (new - p) * (ell / moved)
                if tree.contains(shortened):
                    new, moved = shortened, ell
                else:
                    new, moved = p, 0.0
            if moved > 1e-12:
                last_dir = (new - p) / moved
                self.trace.append(new)
                self.trace_arcs.append(self.trace_arcs[-1] + moved)
                p = new
            if contact is not None:
                contacts.append(contact)
                slide = d - np.dot(d, normal) * normal
                if np.linalg.norm(slide) < 1e-9:
                    break
                d = _unit(slide)
        if last_dir is not None:
            t = tree.nearest_lumen_point(p).tangent
            if np.dot(t, last_dir) < 0:
                t = -t
            lam = params.tangent_blend
            self.end_heading = _unit((1.0 - lam) * last_dir + lam * t)
        return contacts

    def _advance(self, tree: VesselTree, which: Device, delta: float) -> List[ContactSample]:
        state = self.device(which)
        if delta <= 0:
            state.insertion_length = max(0.0, state.insertion_length + delta)
            return []
        target = state.insertion_length + delta
        end = self.trace_arcs[-1]
        if target <= end:
            state.insertion_length = target
            return []
        contacts = self._extend(tree, self.params(which), state.roll, target - end)
        state.insertion_length = self.trace_arcs[-1]
        return contacts


def reset_devices(tree: VesselTree, insertion_point: Sequence[float], initial_heading: Sequence[float],
                  guidewire: Optional[DeviceParams] = None,
                  catheter: Optional[DeviceParams] = None) -> SimState:
    """Collapse both devices to the insertion point and push out the guidewire tip."""
    p = np.asarray(insertion_point, dtype=float)
    if not tree.contains(p):
        clearance = tree.lumen_query(p).clearance
        raise PlacementError(f"insertion point {p.tolist()} is outside the lumen (clearance {clearance:.3f} mm)")
    sim = SimState(
        guidewire=DeviceState(),
        catheter=DeviceState(),
        trace=[p.copy()],
        trace_arcs=[0.0],
        end_heading=_unit(np.asarray(initial_heading, dtype=float)),
        guidewire_params=guidewire or default_guidewire(),
        catheter_params=catheter or default_catheter(),
    )
    straight = DeviceParams(
        outer_diameter=sim.guidewire_params.outer_diameter,
        wall_stiffness=sim.guidewire_params.wall_stiffness,
        tangent_blend=sim.guidewire_params.tangent_blend,
    )
    sim.contacts = sim._extend(tree, straight, 0.0, PROTRUSION)
    sim.guidewire.insertion_length = sim.trace_arcs[-1]
    logger.debug("devices reset at %s, protrusion %.3f mm, %d contacts",
                 p.round(3).tolist(), sim.guidewire.insertion_length, len(sim.contacts))
    return sim


def clamp_action(action: Sequence[float]) -> np.ndarray:
    """Clamp (v_gw, ω_gw, v_cath, ω_cath) to the device speed limits."""
    a = np.asarray(action, dtype=float)
    limits = np.array([MAX_TRANSLATION_SPEED, MAX_ROTATION_SPEED] * 2)
    return np.clip(a, -limits, limits)


def sim_step(sim: SimState, tree: VesselTree, action: Sequence[float], dt: float = CONTROL_DT) -> StepOutcome:
    """Advance the simulation by one control step; mutates sim."""
    v_gw, w_gw, v_cath, w_cath = clamp_action(action)
    before = sim.tip_position(Device.GUIDEWIRE)

    sim.guidewire.roll += w_gw * dt
    sim.catheter.roll += w_cath * dt
    if w_gw != 0.0:
        sim._truncate_ghost()

    contacts = sim._advance(tree, Device.GUIDEWIRE, v_gw * dt)
    contacts += sim._advance(tree, Device.CATHETER, v_cath * dt)

    after = sim.tip_position(Device.GUIDEWIRE)
    sim.step_index += 1
    return StepOutcome(
        tracking_points=sim.tracking_points(),
        contacts=contacts,
        tip_displacement=float(np.linalg.norm(after - before)),
    )


def tip_force_norm(contacts: Sequence[ContactSample]) -> float:
    """Largest contact force magnitude in a step (0 when there was no contact)."""
    if not contacts:
        return 0.0
    return max(c.magnitude for c in contacts)
