"""World mechanics: jaw closing with object displacement, lift evaluation, rendering.

Frames: gripper yaw phi gives the finger-face direction t = (cos phi, sin phi)
and the jaw closing direction n = (-sin phi, cos phi).  Finger faces are
segments of width FINGER_WIDTH along t at offsets +/- aperture/2 along n; the
gripper z coordinate is the bottom edge of the finger faces.  The "left"
finger sits on the -n side, "right" on +n.

Tactile grids index row 0 at the finger bottom: floor-standing prisms always
contact from the finger bottom upward, so a shallow top-edge grasp produces a
thin band confined to the low-index (upper) half of the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from regrasp.core import (
    ARENA_HALF,
    FORCE_MAX,
    FORCE_MIN,
    MAX_HEIGHT,
    TACTILE_SIZE,
    VISION_SIZE,
    Action,
    GraspState,
    Pose,
    clamp_action,
    normalize_angle,
)
from regrasp.simworld.geometry import (
    Circle,
    min_enclosing_circle,
    point_in_convex,
    transform,
)
from regrasp.simworld.objects import ObjectSpec

FINGER_WIDTH = 0.024
FINGER_HEIGHT = 0.018
FINGER_THICKNESS = 0.006
OPEN_APERTURE = 0.11

GRAVITY = 9.81
TAU_COEF = 0.8
TAU_CAP = 2.0
NOISE_BAND = (0.9, 1.1)
NOISE_FLIP_PROB = 0.2
EJECT_FORCE = 15.0
EJECT_EDGE_FRACTION = 0.15
EJECT_PROB = 0.5
ALIGN_MAX = 0.45  # rad; steeper misalignments jam instead of rotating flat

VISION_PITCH = 2.0 * ARENA_HALF / VISION_SIZE
TACTILE_PRESSURE_SCALE = 1500.0  # N per metre of contact length at saturation

_MIN_PATCH_WIDTH = 1e-4
_RASTER_DECIMALS = 4

_SALT_SPAWN = 11
_SALT_STEP = 23
_SALT_LIFT = 37


class InvalidTrialError(RuntimeError):
    """The commanded grasp cannot be executed; the trial should be resampled."""


@dataclass(frozen=True)
class Cylinder:
    """Vertical bounding cylinder of a footprint at its current pose."""

    center: tuple[float, float]
    radius: float
    height: float

    def __post_init__(self) -> None:
        if self.radius <= 0.0 or self.height <= 0.0:
            raise ValueError("cylinder radius and height must be positive")


@dataclass(frozen=True)
class FingerContact:
    """Contact patch on one finger face, in face-local coordinates.

    t_lo/t_hi span the patch along the face (|t| <= FINGER_WIDTH/2), v_lo/v_hi
    the vertical band measured up from the finger bottom, center is the patch
    midpoint in world xy, corner marks a near-vertex contact.
    """

    contacted: bool
    t_lo: float = 0.0
    t_hi: float = 0.0
    v_lo: float = 0.0
    v_hi: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    corner: bool = False

    @property
    def width(self) -> float:
        return self.t_hi - self.t_lo


_NO_CONTACT = FingerContact(contacted=False)


@dataclass(frozen=True)
class WorldState:
    """Full simulator ground truth; a value, never mutated in place."""

    object: ObjectSpec
    object_pose: tuple[float, float, float]
    gripper: Pose
    aperture: float
    commanded_force: float
    contact_left: FingerContact
    contact_right: FingerContact
    rng_seed: int
    rng_counter: int = 0

    def __post_init__(self) -> None:
        if self.aperture < 0.0:
            raise ValueError("aperture must be >= 0")
        if not (FORCE_MIN <= self.commanded_force <= FORCE_MAX):
            raise ValueError(f"commanded_force {self.commanded_force} outside range")

    @property
    def in_contact(self) -> bool:
        """True when both fingers touch the object (a liftable grip)."""
        return self.contact_left.contacted and self.contact_right.contacted

    def footprint_world(self) -> np.ndarray:
        x, y, yaw = self.object_pose
        return transform(self.object.vertices, x, y, yaw)

    def com_world(self) -> np.ndarray:
        x, y, yaw = self.object_pose
        c = transform(np.array([self.object.com[:2]]), x, y, yaw)[0]
        return c


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn_scene(spec: ObjectSpec, seed: int) -> WorldState:
    """Place the object uniformly at random inside the arena, fingers open."""
    if not isinstance(spec, ObjectSpec):
        raise TypeError("spawn_scene expects an ObjectSpec")
    margin = spec.circumradius() + 0.005
    bound = ARENA_HALF - margin
    if bound <= 0.0:
        raise ValueError(f"object {spec.name!r} too large for the arena")
    rng = _rng(seed, _SALT_SPAWN)
    x = rng.uniform(-bound, bound)
    y = rng.uniform(-bound, bound)
    yaw = rng.uniform(-math.pi, math.pi)
    return WorldState(
        object=spec,
        object_pose=(float(x), float(y), float(normalize_angle(yaw))),
        gripper=Pose(0.0, 0.0, MAX_HEIGHT, 0.0),
        aperture=OPEN_APERTURE,
        commanded_force=10.0,
        contact_left=_NO_CONTACT,
        contact_right=_NO_CONTACT,
        rng_seed=int(seed),
        rng_counter=0,
    )


def replace_object(w: WorldState, rng: np.random.Generator) -> WorldState:
    """Move the object to a fresh random pose (post-success reset), fingers open."""
    margin = w.object.circumradius() + 0.005
    bound = ARENA_HALF - margin
    x = rng.uniform(-bound, bound)
    y = rng.uniform(-bound, bound)
    yaw = rng.uniform(-math.pi, math.pi)
    return replace(
        w,
        object_pose=(float(x), float(y), float(normalize_angle(yaw))),
        aperture=OPEN_APERTURE,
        contact_left=_NO_CONTACT,
        contact_right=_NO_CONTACT,
    )


def fit_bounding_cylinder(w: WorldState) -> Cylinder:
    """Minimal enclosing circle of the posed footprint, extruded to object height."""
    c = min_enclosing_circle(w.footprint_world())
    return Cylinder(center=(c.cx, c.cy), radius=c.r, height=w.object.height)


def release(w: WorldState) -> WorldState:
    """Open the fingers without moving the gripper."""
    return replace(
        w, aperture=OPEN_APERTURE, contact_left=_NO_CONTACT, contact_right=_NO_CONTACT
    )


def apply_action(w: WorldState, a: Action) -> WorldState:
    """Open fingers, move by the (clamped) action, then close with the new force.

    Relative motion saturates at the workspace limits, matching how the force
    and per-axis deltas saturate; any action is executable, good or bad.
    """
    a = clamp_action(a, w.commanded_force)
    g = w.gripper
    nx = min(ARENA_HALF, max(-ARENA_HALF, g.x + a.dx))
    ny = min(ARENA_HALF, max(-ARENA_HALF, g.y + a.dy))
    nz = min(max(g.z + a.dz, 0.0), MAX_HEIGHT)
    pose = Pose(nx, ny, nz, g.yaw + a.dyaw)
    return _close_at(w, pose, w.commanded_force + a.dforce)


def place_gripper(w: WorldState, pose: Pose, force: float, close: bool = True) -> WorldState:
    """Teleport the gripper to an absolute pose; optionally close the jaws."""
    if abs(pose.x) > ARENA_HALF or abs(pose.y) > ARENA_HALF:
        raise InvalidTrialError(f"gripper pose outside arena: ({pose.x:.3f}, {pose.y:.3f})")
    if not (FORCE_MIN <= force <= FORCE_MAX):
        raise ValueError(f"force {force} outside [{FORCE_MIN}, {FORCE_MAX}]")
    if pose.z > MAX_HEIGHT:
        pose = Pose(pose.x, pose.y, MAX_HEIGHT, pose.yaw)
    if close:
        return _close_at(w, pose, force)
    return replace(
        w,
        gripper=pose,
        commanded_force=float(force),
        aperture=OPEN_APERTURE,
        contact_left=_NO_CONTACT,
        contact_right=_NO_CONTACT,
    )


# --- jaw-closing mechanics ---------------------------------------------------


def _frame_axes(yaw: float) -> tuple[np.ndarray, np.ndarray]:
    t = np.array([math.cos(yaw), math.sin(yaw)])
    n = np.array([-math.sin(yaw), math.cos(yaw)])
    return t, n


def _local_coords(verts_world: np.ndarray, g: Pose) -> np.ndarray:
    """Footprint vertices in the gripper frame: columns (t, n)."""
    t_ax, n_ax = _frame_axes(g.yaw)
    rel = verts_world - np.array([g.x, g.y])
    return np.stack([rel @ t_ax, rel @ n_ax], axis=1)


def _fold_half(a: float) -> float:
    """Wrap an angle into (-pi/2, pi/2] (edge directions are mod pi)."""
    a = math.fmod(a, math.pi)
    if a > math.pi / 2:
        a -= math.pi
    elif a <= -math.pi / 2:
        a += math.pi
    return a


@dataclass(frozen=True)
class _Touch:
    depth: float        # distance from jaw centreline toward the probing finger
    t: float            # face coordinate of the touch point
    u: float            # parameter along the original edge
    edge: int
    align: float        # rotation (rad) that would lay the edge flat on the face
    corner: bool


def _deepest_touch(local: np.ndarray, sign: float) -> _Touch | None:
    """Deepest slab-restricted boundary point toward the finger at sign*n.

    Works on original edges rather than the clipped polygon so the touch point
    keeps its edge identity (needed for the corner test and alignment angle).
    """
    half = FINGER_WIDTH / 2.0
    m = len(local)
    best: _Touch | None = None
    for i in range(m):
        ta, na = local[i]
        tb, nb = local[(i + 1) % m]
        dt = tb - ta
        if abs(dt) < 1e-12:
            if abs(ta) > half:
                continue
            u0, u1 = 0.0, 1.0
        else:
            ua = (-half - ta) / dt
            ub = (half - ta) / dt
            u0, u1 = max(0.0, min(ua, ub)), min(1.0, max(ua, ub))
            if u0 >= u1:
                continue
        dn = nb - na
        flat = abs(dn) < 1e-12
        if flat:
            u_star = 0.5 * (u0 + u1)
        else:
            u_star = u1 if sign * dn > 0 else u0
        depth = sign * (na + u_star * dn)
        t_star = ta + u_star * dt
        align = _fold_half(-math.atan2(dn, dt))
        corner = min(u_star, 1.0 - u_star) < EJECT_EDGE_FRACTION
        cand = _Touch(depth, float(t_star), float(u_star), i, float(align), bool(corner))
        if best is None or depth > best.depth + 1e-9:
            best = cand
        elif abs(depth - best.depth) <= 1e-9:
            # ties: prefer flat/straighter contact as the load-bearing edge
            if abs(cand.align) < abs(best.align):
                best = cand
    return best


def _slab_extent(local: np.ndarray) -> tuple[float, float] | None:
    """Slab-restricted extents toward the right (+n) and left (-n) fingers."""
    up = _deepest_touch(local, +1.0)
    dn = _deepest_touch(local, -1.0)
    if up is None or dn is None:
        return None
    return up.depth, dn.depth


def _rotate_pose_about(
    pose: tuple[float, float, float], pivot: np.ndarray, beta: float
) -> tuple[float, float, float]:
    x, y, yaw = pose
    c, s = math.cos(beta), math.sin(beta)
    dx, dy = x - pivot[0], y - pivot[1]
    return (
        float(pivot[0] + c * dx - s * dy),
        float(pivot[1] + s * dx + c * dy),
        float(normalize_angle(yaw + beta)),
    )


def _patch(local: np.ndarray, sign: float, depth: float, delta: float,
           g: Pose, v_lo: float, v_hi: float) -> FingerContact:
    """Contact patch on the finger at sign*n: slab boundary within delta of the face."""
    half = FINGER_WIDTH / 2.0
    lo, hi = math.inf, -math.inf
    m = len(local)
    for i in range(m):
        ta, na = local[i]
        tb, nb = local[(i + 1) % m]
        da, db = depth - sign * na, depth - sign * nb
        ina, inb = da <= delta, db <= delta
        if not (ina or inb):
            continue
        pts = []
        if ina:
            pts.append((ta, na))
        if inb:
            pts.append((tb, nb))
        if ina != inb:
            u = (delta - da) / (db - da)
            pts.append((ta + u * (tb - ta), na + u * (nb - na)))
        for (tt, _) in pts:
            tt = min(half, max(-half, tt))
            lo, hi = min(lo, tt), max(hi, tt)
    if not math.isfinite(lo):
        lo = hi = 0.0
    touch = _deepest_touch(local, sign)
    corner = touch.corner if touch is not None else False
    t_ax, n_ax = _frame_axes(g.yaw)
    mid = np.array([g.x, g.y]) + 0.5 * (lo + hi) * t_ax + sign * depth * n_ax
    return FingerContact(
        contacted=True,
        t_lo=float(lo),
        t_hi=float(hi),
        v_lo=float(v_lo),
        v_hi=float(v_hi),
        center=(float(mid[0]), float(mid[1])),
        corner=bool(corner),
    )


def _close_at(w: WorldState, pose: Pose, force: float) -> WorldState:
    """Close the jaws at an absolute pose: push/rotate/eject/centre the object."""
    force = min(FORCE_MAX, max(FORCE_MIN, float(force)))
    rng = _rng(w.rng_seed, w.rng_counter, _SALT_STEP)
    obj_pose = w.object_pose
    spec = w.object

    def geometry(p: tuple[float, float, float]) -> np.ndarray:
        x, y, yaw = p
        return _local_coords(transform(spec.vertices, x, y, yaw), pose)

    contact_possible = pose.z < spec.height
    local = geometry(obj_pose)
    ext = _slab_extent(local) if contact_possible else None

    if ext is not None:
        h_plus, h_minus = ext
        if max(h_plus, h_minus) > OPEN_APERTURE / 2.0:
            # the object sticks out past a fully open finger: the jaws jam on
            # its side and never wrap around it, so the close grips nothing
            return replace(
                w,
                gripper=pose,
                commanded_force=force,
                aperture=OPEN_APERTURE,
                contact_left=_NO_CONTACT,
                contact_right=_NO_CONTACT,
                rng_counter=w.rng_counter + 1,
            )
        # the deeper side touches first; exact ties (perfectly centred grasps)
        # resolve to the plus side, where the same alignment torque applies
        sign = 1.0 if h_plus >= h_minus else -1.0
        touch = _deepest_touch(local, sign)
        # rotation toward edge alignment, attenuated by friction
        beta = (1.0 - spec.friction) * touch.align
        if abs(touch.align) <= ALIGN_MAX and abs(beta) > 1e-9:
            t_ax, n_ax = _frame_axes(pose.yaw)
            pivot = (
                np.array([pose.x, pose.y])
                + touch.t * t_ax
                + sign * touch.depth * n_ax
            )
            obj_pose = _rotate_pose_about(obj_pose, pivot, beta)
            local = geometry(obj_pose)
            ext = _slab_extent(local)
        touch = _deepest_touch(local, sign) if ext is not None else None
        if (
            touch is not None
            and touch.corner
            and force > EJECT_FORCE
            and rng.uniform() < EJECT_PROB
        ):
            # squeezing a near-vertex contact flicks the object away while the
            # jaws snap shut; the close ends with nothing between the fingers
            ang = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(0.03, 0.06)
            spin = rng.uniform(-0.6, 0.6)
            bound = ARENA_HALF - spec.circumradius() - 0.005
            x, y, yaw = obj_pose
            x = min(bound, max(-bound, x + dist * math.cos(ang)))
            y = min(bound, max(-bound, y + dist * math.sin(ang)))
            obj_pose = (float(x), float(y), float(normalize_angle(yaw + spin)))
            ext = None

    if ext is None or not contact_possible:
        return replace(
            w,
            gripper=pose,
            commanded_force=force,
            object_pose=obj_pose,
            aperture=0.0,
            contact_left=_NO_CONTACT,
            contact_right=_NO_CONTACT,
            rng_counter=w.rng_counter + 1,
        )

    # centre the object between the closing jaws
    h_plus, h_minus = ext
    shift = 0.5 * (h_plus - h_minus)
    if abs(shift) > 1e-15:
        _, n_ax = _frame_axes(pose.yaw)
        x, y, yaw = obj_pose
        obj_pose = (float(x - shift * n_ax[0]), float(y - shift * n_ax[1]), yaw)
        local = geometry(obj_pose)
        ext = _slab_extent(local)
        h_plus, h_minus = ext

    aperture = max(h_plus + h_minus, 0.0)
    v_hi = min(FINGER_HEIGHT, spec.height - pose.z)
    delta = 0.0005 + 0.003 * spec.compliance
    right = _patch(local, +1.0, h_plus, delta, pose, 0.0, v_hi)
    left = _patch(local, -1.0, h_minus, delta, pose, 0.0, v_hi)
    return replace(
        w,
        gripper=pose,
        commanded_force=force,
        object_pose=obj_pose,
        aperture=float(aperture),
        contact_left=left,
        contact_right=right,
        rng_counter=w.rng_counter + 1,
    )


# --- lift evaluation ---------------------------------------------------------


def tau_penalty(w: WorldState) -> float:
    """Torque penalty: patch-centroid-to-COM offset over patch half-extent, capped."""
    cl, cr = w.contact_left, w.contact_right
    centroid = 0.5 * (np.array(cl.center) + np.array(cr.center))
    d = float(np.hypot(*(centroid - w.com_world())))
    width = max(0.5 * (cl.width + cr.width), _MIN_PATCH_WIDTH)
    v = max(cl.v_hi - cl.v_lo, _MIN_PATCH_WIDTH)
    half_extent = 0.5 * math.sqrt(width * v)
    return min(TAU_COEF * d / half_extent, TAU_CAP)


def lift_margin(w: WorldState) -> tuple[float, float, float]:
    """(friction capacity, load demand, tau penalty) for the current grasp."""
    tau = tau_penalty(w)
    capacity = 2.0 * w.object.friction * w.commanded_force
    demand = w.object.mass * GRAVITY * (1.0 + tau)
    return capacity, demand, tau


def attempt_lift(w: WorldState, noise: bool = True) -> int:
    """Binary lift outcome from the static friction/torque capacity check.

    Any state without a two-finger grip (open, jammed, or empty jaws) simply
    fails.  Pure: does not advance the world RNG counter; the marginal-grasp
    noise draw is keyed off (rng_seed, rng_counter) of the supplied state.
    """
    cl, cr = w.contact_left, w.contact_right
    if not (cl.contacted and cr.contacted):
        return 0
    capacity, demand, _ = lift_margin(w)
    success = capacity >= demand
    if noise:
        ratio = capacity / demand
        if NOISE_BAND[0] <= ratio <= NOISE_BAND[1]:
            rng = _rng(w.rng_seed, w.rng_counter, _SALT_LIFT)
            if rng.uniform() < NOISE_FLIP_PROB:
                success = not success
    return int(success)


# --- rendering ---------------------------------------------------------------


def _pixel_centers() -> tuple[np.ndarray, np.ndarray]:
    xs = -ARENA_HALF + (np.arange(VISION_SIZE) + 0.5) * VISION_PITCH
    ys = ARENA_HALF - (np.arange(VISION_SIZE) + 0.5) * VISION_PITCH
    return xs, ys


def rasterize_polygons(polys: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    """Paint convex polygons (vertices, intensity) onto the top-down grid in order."""
    grid = np.zeros((VISION_SIZE, VISION_SIZE))
    if not polys:
        return grid
    xs, ys = _pixel_centers()
    px, py = np.meshgrid(xs, ys)
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    for verts, value in polys:
        mask = point_in_convex(pts, verts).reshape(VISION_SIZE, VISION_SIZE)
        grid[mask] = value
    return grid


def _finger_quads(w: WorldState) -> list[np.ndarray]:
    g = w.gripper
    t_ax, n_ax = _frame_axes(g.yaw)
    origin = np.array([g.x, g.y])
    quads = []
    for sign in (-1.0, 1.0):
        inner = sign * w.aperture / 2.0
        outer = inner + sign * FINGER_THICKNESS
        c = []
        for nn in (inner, outer):
            for tt in (-FINGER_WIDTH / 2.0, FINGER_WIDTH / 2.0):
                c.append(origin + tt * t_ax + nn * n_ax)
        quad = np.array([c[0], c[1], c[3], c[2]])
        quads.append(quad)
    return quads


def render_vision(w: WorldState) -> np.ndarray:
    """64x64 top-down grayscale: object intensity encodes height, fingers are 1.0."""
    obj_value = 0.25 + 0.65 * min(w.object.height / MAX_HEIGHT, 1.0)
    polys: list[tuple[np.ndarray, float]] = [(w.footprint_world(), obj_value)]
    polys += [(q, 1.0) for q in _finger_quads(w)]
    return np.round(rasterize_polygons(polys), _RASTER_DECIMALS)


def _blur_passes(grid: np.ndarray, passes: int) -> np.ndarray:
    kernel = np.array([0.25, 0.5, 0.25])
    for _ in range(passes):
        grid = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 0, grid)
        grid = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, grid)
    return grid


def _tactile_one(w: WorldState, contact: FingerContact) -> np.ndarray:
    grid = np.zeros((TACTILE_SIZE, TACTILE_SIZE))
    if not contact.contacted:
        return grid
    half = FINGER_WIDTH / 2.0
    c0 = int(math.floor((contact.t_lo + half) / FINGER_WIDTH * TACTILE_SIZE))
    c1 = int(math.ceil((contact.t_hi + half) / FINGER_WIDTH * TACTILE_SIZE))
    c0 = min(max(c0, 0), TACTILE_SIZE - 1)
    c1 = min(max(c1, c0 + 1), TACTILE_SIZE)
    r0 = int(math.floor(contact.v_lo / FINGER_HEIGHT * TACTILE_SIZE))
    r1 = int(math.ceil(contact.v_hi / FINGER_HEIGHT * TACTILE_SIZE))
    r0 = min(max(r0, 0), TACTILE_SIZE - 1)
    r1 = min(max(r1, r0 + 1), TACTILE_SIZE)
    width = max(contact.width, _MIN_PATCH_WIDTH)
    intensity = min(w.commanded_force / (width * TACTILE_PRESSURE_SCALE), 1.0)
    grid[r0:r1, c0:c1] = intensity
    passes = int(round(w.object.compliance * 3.0))
    if passes:
        grid = _blur_passes(grid, passes)
    return grid


def render_tactile(w: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Per-finger 32x32 contact imprints; background-subtracted, so no contact = 0."""
    left = np.round(_tactile_one(w, w.contact_left), _RASTER_DECIMALS)
    right = np.round(_tactile_one(w, w.contact_right), _RASTER_DECIMALS)
    return left, right


def observe(w: WorldState) -> GraspState:
    """Bundle current renders with the proprioceptive pose and force."""
    left, right = render_tactile(w)
    return GraspState(
        vision=render_vision(w),
        tactile_left=left,
        tactile_right=right,
        pose=w.gripper,
        force=w.commanded_force,
    )
