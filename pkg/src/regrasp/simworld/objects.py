"""Parametric prism library: training shapes plus held-out easy/hard test sets.

Hold-out is by object, not by physics: every test shape is unseen, but the
training set spans the same friction/mass/compliance regimes the test sets
occupy.  Friction and density are not directly observable, so a predictor can
only transfer to new objects through appearance (footprint, height-coded
intensity, imprint blur); each physics regime therefore needs training
look-alikes.  Easy test objects are high-friction light regular shapes, hard
ones are low-friction heavy, irregular, compliant, or offset-COM shapes.
Masses follow density * footprint area * height.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from regrasp.core import MAX_HEIGHT
from regrasp.simworld.geometry import (
    ensure_ccw,
    is_convex_ccw,
    point_in_convex,
    polygon_area,
    polygon_centroid,
)


@dataclass(frozen=True, eq=False)
class ObjectSpec:
    """A convex prism: footprint polygon, height, mass, COM, friction, compliance."""

    name: str
    vertices: np.ndarray
    height: float
    mass: float
    com: tuple[float, float, float]
    friction: float
    compliance: float

    def __post_init__(self) -> None:
        v = ensure_ccw(np.asarray(self.vertices, dtype=float))
        if not is_convex_ccw(v):
            raise ValueError(f"object {self.name!r}: footprint must be a convex polygon")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "com", tuple(float(c) for c in self.com))
        if not (0.0 < self.height <= MAX_HEIGHT):
            raise ValueError(f"object {self.name!r}: height must be in (0, {MAX_HEIGHT}]")
        if self.mass <= 0.0:
            raise ValueError(f"object {self.name!r}: mass must be positive")
        if self.friction <= 0.0:
            raise ValueError(f"object {self.name!r}: friction must be positive")
        if not (0.0 <= self.compliance <= 1.0):
            raise ValueError(f"object {self.name!r}: compliance must be in [0, 1]")
        cx, cy, cz = self.com
        if not (0.0 <= cz <= self.height):
            raise ValueError(f"object {self.name!r}: com.z outside [0, height]")
        if not bool(point_in_convex(np.array([[cx, cy]]), v, tol=1e-9)[0]):
            raise ValueError(f"object {self.name!r}: com.xy outside footprint")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObjectSpec):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.vertices, other.vertices)
            and (self.height, self.mass, self.com, self.friction, self.compliance)
            == (other.height, other.mass, other.com, other.friction, other.compliance)
        )

    def circumradius(self) -> float:
        """Largest vertex distance from the object-frame origin."""
        return float(np.max(np.hypot(self.vertices[:, 0], self.vertices[:, 1])))

    def to_obj(self) -> dict:
        return {
            "name": self.name,
            "vertices": [[float(x), float(y)] for x, y in self.vertices],
            "height": self.height,
            "mass": self.mass,
            "com": list(self.com),
            "friction": self.friction,
            "compliance": self.compliance,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ObjectSpec":
        return cls(
            name=obj["name"],
            vertices=np.array(obj["vertices"], dtype=float),
            height=float(obj["height"]),
            mass=float(obj["mass"]),
            com=tuple(obj["com"]),
            friction=float(obj["friction"]),
            compliance=float(obj["compliance"]),
        )


def save_library(path: str | Path, specs: Sequence[ObjectSpec]) -> None:
    with Path(path).open("w") as fh:
        json.dump([s.to_obj() for s in specs], fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_library(path: str | Path) -> list[ObjectSpec]:
    with Path(path).open() as fh:
        return [ObjectSpec.from_obj(o) for o in json.load(fh)]


def _box(w: float, d: float) -> np.ndarray:
    return np.array(
        [[-w / 2, -d / 2], [w / 2, -d / 2], [w / 2, d / 2], [-w / 2, d / 2]]
    )


def _ngon(n: int, r: float, phase: float = 0.0) -> np.ndarray:
    ang = phase + 2.0 * math.pi * np.arange(n) / n
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def _make(
    name: str,
    verts: np.ndarray,
    height: float,
    density: float,
    mu: float,
    compliance: float,
    com_xy: tuple[float, float] | None = None,
    com_z: float | None = None,
) -> ObjectSpec:
    verts = ensure_ccw(verts)
    area = polygon_area(verts)
    mass = round(density * area * height, 4)
    cx, cy = polygon_centroid(verts) if com_xy is None else com_xy
    cz = height / 2.0 if com_z is None else com_z
    return ObjectSpec(
        name=name,
        vertices=verts,
        height=height,
        mass=mass,
        com=(float(cx), float(cy), float(cz)),
        friction=mu,
        compliance=compliance,
    )


# Hand-laid irregular convex hulls (object frame, metres).
_IRR_A = np.array(
    [[0.042, 0.000], [0.015, 0.034], [-0.030, 0.026], [-0.038, -0.010], [-0.002, -0.032]]
)
_IRR_B = np.array(
    [[0.036, 0.004], [0.020, 0.028], [-0.012, 0.033], [-0.034, 0.012], [-0.030, -0.016],
     [0.006, -0.030]]
)
_IRR_C = np.array(
    [[0.040, 0.000], [0.028, 0.024], [0.002, 0.036], [-0.024, 0.028], [-0.038, 0.004],
     [-0.028, -0.022], [0.004, -0.034]]
)
_HARD_IRR_1 = np.array(
    [[0.044, -0.004], [0.020, 0.032], [-0.022, 0.030], [-0.040, -0.006], [-0.004, -0.034]]
)
_HARD_IRR_2 = np.array(
    [[0.046, 0.002], [0.030, 0.026], [0.004, 0.038], [-0.026, 0.030], [-0.042, 0.006],
     [-0.034, -0.020], [-0.002, -0.036]]
)
_HARD_SLIVER = np.array(
    [[-0.050, -0.014], [0.050, -0.014], [0.006, 0.028]]
)


def builtin_library() -> dict[str, tuple[ObjectSpec, ...]]:
    """Deterministic object sets: 26 training shapes, 6 easy and 8 hard held-out."""
    # The mid-friction core is tuned so the borderline force mg(1+tau)/(2 mu)
    # lands inside the commanded range; success then hinges on the chosen
    # force, not just on making contact.  Around that core sit look-alikes of
    # both test regimes: light grippy shapes (easy-like), light slippery
    # compliant shapes, and heavy slippery shapes (hard-like), so appearance
    # carries physics the predictor can transfer to the held-out sets.
    train = (
        _make("box_small", _box(0.040, 0.040), 0.040, 2200, 0.50, 0.05),
        _make("box_wide", _box(0.070, 0.045), 0.030, 3200, 0.40, 0.10),
        _make("box_tall", _box(0.045, 0.045), 0.110, 2400, 0.48, 0.05),
        _make("box_slab", _box(0.080, 0.056), 0.022, 4200, 0.34, 0.00),
        _make("box_heavy", _box(0.060, 0.050), 0.060, 3200, 0.32, 0.05),
        _make("tri_equilateral", _ngon(3, 0.032), 0.050, 1250, 0.24, 0.55),
        _make(
            "tri_right",
            np.array([[-0.030, -0.020], [0.040, -0.020], [-0.030, 0.035]]),
            0.045, 2800, 0.40, 0.15,
        ),
        _make(
            "tri_sliver",
            np.array([[-0.045, -0.012], [0.045, -0.012], [0.000, 0.024]]),
            0.035, 2200, 0.45, 0.05,
        ),
        _make("hex_small", _ngon(6, 0.024), 0.045, 600, 0.73, 0.10),
        _make("hex_large", _ngon(6, 0.040), 0.050, 2600, 0.21, 0.05),
        _make("pent_mid", _ngon(5, 0.033), 0.065, 2600, 0.50, 0.25),
        _make("oct_round", _ngon(8, 0.036), 0.040, 700, 0.75, 0.20),
        _make("bar_long", _box(0.088, 0.024), 0.035, 4000, 0.36, 0.05),
        _make("bar_thin", _box(0.078, 0.016), 0.050, 5200, 0.30, 0.00),
        _make(
            "wedge",
            np.array([[-0.040, -0.025], [0.040, -0.025], [0.040, 0.010], [-0.040, 0.025]]),
            0.040, 3000, 0.55, 0.10,
        ),
        _make("irr_a", _IRR_A, 0.055, 2400, 0.24, 0.30),
        _make("irr_b", _IRR_B, 0.030, 3800, 0.27, 0.10),
        _make("irr_c", _IRR_C, 0.075, 2100, 0.22, 0.20),
        _make("box_offset_com", _box(0.064, 0.048), 0.048, 3000, 0.33, 0.05,
              com_xy=(0.010, 0.005)),
        _make("tri_offset_com", _ngon(3, 0.040), 0.060, 2800, 0.46, 0.15,
              com_xy=(-0.008, 0.009)),
        _make("tower_narrow", _box(0.030, 0.030), 0.130, 3400, 0.50, 0.20),
        _make("puck_low", _ngon(8, 0.042), 0.018, 1450, 0.21, 0.00),
        _make("soft_box", _box(0.056, 0.044), 0.065, 1350, 0.23, 0.60),
        _make("soft_oct", _ngon(8, 0.031), 0.055, 1250, 0.22, 0.50),
        _make("block_offcom_low", _box(0.068, 0.050), 0.058, 2400, 0.24, 0.15,
              com_xy=(0.012, 0.006)),
        _make("box_light", _box(0.048, 0.042), 0.040, 750, 0.74, 0.05),
    )
    test_easy = (
        _make("easy_box", _box(0.050, 0.040), 0.045, 600, 0.78, 0.05),
        _make("easy_hex", _ngon(6, 0.030), 0.050, 550, 0.74, 0.10),
        _make("easy_cyl", _ngon(10, 0.026), 0.080, 500, 0.80, 0.05),
        _make("easy_bar", _box(0.070, 0.030), 0.035, 700, 0.72, 0.00),
        _make("easy_cube", _box(0.044, 0.044), 0.044, 800, 0.76, 0.10),
        _make("easy_tri", _ngon(3, 0.036), 0.055, 650, 0.73, 0.15),
    )
    # Five of these outweigh a 10 N pinch at their friction (mg > 2*mu*10) yet
    # stay liftable by a well-centred 25 N grasp; the other three are light
    # enough for any centred grip.
    test_hard = (
        _make("hard_block", _box(0.066, 0.052), 0.066, 2800, 0.22, 0.10),
        _make("hard_hex", _ngon(6, 0.038), 0.058, 2600, 0.20, 0.05),
        _make("hard_irr1", _HARD_IRR_1, 0.070, 2400, 0.23, 0.30),
        _make("hard_irr2", _HARD_IRR_2, 0.050, 2600, 0.21, 0.20),
        _make("hard_soft", _box(0.058, 0.046), 0.072, 1400, 0.24, 0.60),
        _make("hard_soft2", _ngon(8, 0.034), 0.060, 1300, 0.22, 0.55),
        _make("hard_offcom", _box(0.070, 0.048), 0.060, 2700, 0.23, 0.15,
              com_xy=(0.020, 0.010)),
        _make("hard_sliver", _HARD_SLIVER, 0.075, 1500, 0.21, 0.10),
    )
    return {"train": train, "test_easy": test_easy, "test_hard": test_hard}
