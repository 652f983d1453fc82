"""Procedural voxel shapes built from axis-aligned cuboids.

Grids are indexed ``[y, x, z]``: ``y`` points up (index 0 is the floor),
``x`` runs left to right and ``z`` runs away from a viewer at azimuth 0.
Recipe parameters are fractions of the grid resolution.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import VxError

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

CHAIR = "chair"
TABLE = "table"
BOX = "box"
CATEGORIES = (CHAIR, TABLE, BOX)

DEFAULT_RESOLUTION = 16

#: Bounds for each recipe parameter, as fractions of the resolution.
PARAMETER_BOUNDS = {
    CHAIR: {
        "seat_height": (0.3, 0.5),
        "seat_width": (0.45, 0.8),
        "seat_depth": (0.45, 0.8),
        "seat_thickness": (0.08, 0.16),
        "back_height": (0.25, 0.45),
        "back_thickness": (0.08, 0.16),
        "leg_thickness": (0.08, 0.16),
    },
    TABLE: {
        "top_height": (0.45, 0.7),
        "top_width": (0.6, 0.95),
        "top_depth": (0.5, 0.9),
        "top_thickness": (0.08, 0.16),
        "leg_thickness": (0.08, 0.16),
    },
    BOX: {
        "y0": (0.0, 1.0),
        "y1": (0.0, 1.0),
        "x0": (0.0, 1.0),
        "x1": (0.0, 1.0),
        "z0": (0.0, 1.0),
        "z1": (0.0, 1.0),
    },
}

# Random boxes keep their lower faces in the first half of each axis.
_RANDOM_BOX_LOWER = (0.1, 0.4)
_RANDOM_BOX_UPPER = (0.6, 0.9)

_THINNEST_PART = min(
    low
    for category in (CHAIR, TABLE)
    for low, _ in PARAMETER_BOUNDS[category].values()
)

#: The smallest grid on which every chair and table part spans more than one
#: voxel before rounding, so no part rounds away.
MIN_RESOLUTION = math.floor(1 / _THINNEST_PART) + 1

# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeRecipe:
    category: str
    params: dict = field(default_factory=dict, hash=False)
    seed: int = 0


class Cuboid(NamedTuple):
    """Half-open voxel bounds ``[y0, y1) x [x0, x1) x [z0, z1)``."""

    y0: int
    y1: int
    x0: int
    x1: int
    z0: int
    z1: int

    @property
    def volume(self):
        return (self.y1 - self.y0) * (self.x1 - self.x0) * (self.z1 - self.z0)

    def intersection(self, other):
        bounds = (
            max(self.y0, other.y0),
            min(self.y1, other.y1),
            max(self.x0, other.x0),
            min(self.x1, other.x1),
            max(self.z0, other.z0),
            min(self.z1, other.z1),
        )
        if bounds[0] >= bounds[1] or bounds[2] >= bounds[3]:
            return None
        if bounds[4] >= bounds[5]:
            return None
        return Cuboid(*bounds)


# -----------------------------------------------------------------------------


def _index(fraction, resolution):
    return int(round(fraction * resolution))


def _cuboid(name, resolution, y0, y1, x0, x1, z0, z1):
    cuboid = Cuboid(
        *(_index(value, resolution) for value in (y0, y1, x0, x1, z0, z1))
    )
    if min(cuboid) < 0 or max(cuboid) > resolution:
        raise VxError.data(
            "invalid_value.recipe",
            f"{name} {tuple(cuboid)} lies outside a grid of resolution "
            f"{resolution}",
            part=name,
        )
    extents = (
        cuboid.y1 - cuboid.y0,
        cuboid.x1 - cuboid.x0,
        cuboid.z1 - cuboid.z0,
    )
    if min(extents) < 1:
        raise VxError.data(
            "invalid_value.recipe",
            f"{name} is empty at resolution {resolution}",
            part=name,
        )
    return cuboid


def _legs(resolution, height, x0, x1, z0, z1, thickness):
    return [
        _cuboid(f"leg {i}", resolution, 0.0, height, lx0, lx1, lz0, lz1)
        for i, (lx0, lx1, lz0, lz1) in enumerate(
            (
                (x0, x0 + thickness, z0, z0 + thickness),
                (x1 - thickness, x1, z0, z0 + thickness),
                (x0, x0 + thickness, z1 - thickness, z1),
                (x1 - thickness, x1, z1 - thickness, z1),
            )
        )
    ]


def _chair_parts(p, resolution):
    x0 = 0.5 - p["seat_width"] / 2
    x1 = 0.5 + p["seat_width"] / 2
    z0 = 0.5 - p["seat_depth"] / 2
    z1 = 0.5 + p["seat_depth"] / 2
    seat_bottom = p["seat_height"] - p["seat_thickness"]

    seat = _cuboid(
        "seat", resolution, seat_bottom, p["seat_height"], x0, x1, z0, z1
    )
    back = _cuboid(
        "back",
        resolution,
        p["seat_height"],
        p["seat_height"] + p["back_height"],
        x0,
        x1,
        z1 - p["back_thickness"],
        z1,
    )
    legs = _legs(resolution, seat_bottom, x0, x1, z0, z1, p["leg_thickness"])
    return [seat, back] + legs


def _table_parts(p, resolution):
    x0 = 0.5 - p["top_width"] / 2
    x1 = 0.5 + p["top_width"] / 2
    z0 = 0.5 - p["top_depth"] / 2
    z1 = 0.5 + p["top_depth"] / 2
    top_bottom = p["top_height"] - p["top_thickness"]

    top = _cuboid(
        "top", resolution, top_bottom, p["top_height"], x0, x1, z0, z1
    )
    legs = _legs(resolution, top_bottom, x0, x1, z0, z1, p["leg_thickness"])
    return [top] + legs


def _box_parts(p, resolution):
    return [
        _cuboid(
            "box",
            resolution,
            p["y0"],
            p["y1"],
            p["x0"],
            p["x1"],
            p["z0"],
            p["z1"],
        )
    ]


_PART_BUILDERS = {CHAIR: _chair_parts, TABLE: _table_parts, BOX: _box_parts}


def _check_recipe(recipe):
    if recipe.category not in PARAMETER_BOUNDS:
        raise VxError.data(
            "invalid_value.category",
            f"unknown category {recipe.category!r}; choose from {CATEGORIES}",
        )

    bounds = PARAMETER_BOUNDS[recipe.category]
    missing = sorted(set(bounds) - set(recipe.params))
    if missing:
        raise VxError.data(
            "invalid_value.recipe", f"recipe is missing {missing}"
        )
    for name, (low, high) in bounds.items():
        value = recipe.params[name]
        if not low <= value <= high:
            raise VxError.data(
                "invalid_value.recipe",
                f"{name}={value} is outside [{low}, {high}]",
                parameter=name,
            )


def shape_parts(recipe, resolution=DEFAULT_RESOLUTION):
    """Return the cuboids whose union is the shape.

    :raises VxError: If a parameter is out of bounds or a part is empty or
        leaves the grid.
    """
    _check_recipe(recipe)
    return _PART_BUILDERS[recipe.category](recipe.params, resolution)


def generate_shape(recipe, resolution=DEFAULT_RESOLUTION):
    """Voxelize a recipe into a binary ``(D, D, D)`` grid."""
    grid = np.zeros((resolution,) * 3)
    for part in shape_parts(recipe, resolution):
        grid[part.y0 : part.y1, part.x0 : part.x1, part.z0 : part.z1] = 1.0
    return grid


def random_recipe(category, seed):
    """Draw a recipe uniformly within its category's bounds."""
    if category not in PARAMETER_BOUNDS:
        raise VxError.data(
            "invalid_value.category",
            f"unknown category {category!r}; choose from {CATEGORIES}",
        )

    rng = np.random.default_rng(seed)
    if category == BOX:
        params = {}
        for axis in ("y", "x", "z"):
            params[f"{axis}0"] = float(rng.uniform(*_RANDOM_BOX_LOWER))
            params[f"{axis}1"] = float(rng.uniform(*_RANDOM_BOX_UPPER))
    else:
        params = {
            name: float(rng.uniform(low, high))
            for name, (low, high) in PARAMETER_BOUNDS[category].items()
        }
    return ShapeRecipe(category, params, seed)
