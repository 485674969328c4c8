"""2.5-D tabletop world: convex prisms, a parallel-jaw gripper, rendered observations."""

from regrasp.simworld.geometry import (
    Circle,
    clip_halfplane,
    ensure_ccw,
    is_convex_ccw,
    min_enclosing_circle,
    polygon_area,
    polygon_centroid,
)
from regrasp.simworld.objects import ObjectSpec, builtin_library, load_library, save_library
from regrasp.simworld.world import (
    ARENA_HALF,
    FINGER_HEIGHT,
    FINGER_THICKNESS,
    FINGER_WIDTH,
    GRAVITY,
    OPEN_APERTURE,
    TACTILE_PRESSURE_SCALE,
    VISION_PITCH,
    Cylinder,
    FingerContact,
    InvalidTrialError,
    WorldState,
    apply_action,
    attempt_lift,
    fit_bounding_cylinder,
    lift_margin,
    observe,
    place_gripper,
    rasterize_polygons,
    release,
    render_tactile,
    render_vision,
    replace_object,
    spawn_scene,
    tau_penalty,
)

__all__ = [
    "Circle",
    "clip_halfplane",
    "ensure_ccw",
    "is_convex_ccw",
    "min_enclosing_circle",
    "polygon_area",
    "polygon_centroid",
    "ObjectSpec",
    "builtin_library",
    "load_library",
    "save_library",
    "ARENA_HALF",
    "FINGER_HEIGHT",
    "FINGER_THICKNESS",
    "FINGER_WIDTH",
    "GRAVITY",
    "OPEN_APERTURE",
    "TACTILE_PRESSURE_SCALE",
    "VISION_PITCH",
    "Cylinder",
    "FingerContact",
    "InvalidTrialError",
    "WorldState",
    "apply_action",
    "attempt_lift",
    "fit_bounding_cylinder",
    "lift_margin",
    "observe",
    "place_gripper",
    "rasterize_polygons",
    "release",
    "render_tactile",
    "render_vision",
    "replace_object",
    "spawn_scene",
    "tau_penalty",
]
