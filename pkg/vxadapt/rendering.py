"""Depth renders of voxel grids and the sketch-like real-style transform."""

import logging
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import VxError

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

SYNTH = "synth"
REAL = "real"
DOMAINS = (SYNTH, REAL)

#: Minimum step between neighbouring pixels that counts as an edge.
EDGE_THRESHOLD = 0.02
#: Step between neighbouring ink pixels that the density statistic counts.
DENSITY_THRESHOLD = 0.15

STROKE_INTENSITY = (0.35, 1.0)
SPECKLE_PROBABILITY = 0.15
SPECKLE_INTENSITY = (0.1, 0.4)

# -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ImageSample:
    """A single-channel image with its domain and provenance.

    `shape_id` links a synthesized render to its voxel grid. Real-style
    training images carry no link.
    """

    pixels: np.ndarray
    domain: str
    azimuth: float
    shape_id: int = None
    item_id: int = None
    view: int = None


# -----------------------------------------------------------------------------


def rotate_grid(grid, azimuth):
    """Rotate a ``[y, x, z]`` grid about its vertical axis.

    Each output voxel takes the value of the nearest source voxel; voxels
    rotated in from outside the grid are empty. An azimuth of 0 returns an
    exact copy.
    """
    resolution = grid.shape[1]
    center = (resolution - 1) / 2.0
    theta = np.deg2rad(azimuth)
    cos, sin = np.cos(theta), np.sin(theta)

    offsets = np.arange(resolution) - center
    x_out, z_out = np.meshgrid(offsets, offsets, indexing="ij")
    x_src = np.rint(cos * x_out + sin * z_out + center).astype(int)
    z_src = np.rint(-sin * x_out + cos * z_out + center).astype(int)

    valid = (
        (x_src >= 0)
        & (x_src < resolution)
        & (z_src >= 0)
        & (z_src < resolution)
    )
    rotated = np.zeros_like(grid)
    rotated[:, valid] = grid[:, x_src[valid], z_src[valid]]
    return rotated


def depth_map(grid, azimuth):
    """Orthographic depth shading at the grid's own resolution.

    Rays run along ``z`` from index 0. A first hit at depth ``l`` shades the
    pixel ``1 - l / D``; rays that hit nothing leave it at 0. Row 0 is the
    top of the grid.
    """
    resolution = grid.shape[2]
    occupied = rotate_grid(grid, azimuth) > 0.5

    hit = occupied.any(axis=2)
    first = occupied.argmax(axis=2)
    shading = np.where(hit, 1.0 - first / resolution, 0.0)
    return shading[::-1]


def render_view(grid, azimuth, size):
    """Render a grid from an azimuth into a `size` x `size` image.

    :param grid: Occupancy grid of shape ``(D, D, D)``; voxels above 0.5
        count as occupied.
    :param float azimuth: Degrees; taken modulo 360.
    :param int size: Image side; the depth map is resampled to it with
        nearest-neighbour lookup.
    :rtype: ImageSample
    """
    azimuth = float(azimuth) % 360.0
    shading = depth_map(grid, azimuth)

    resolution = shading.shape[0]
    index = (np.arange(size) * resolution) // size
    pixels = shading[np.ix_(index, index)]
    return ImageSample(pixels, SYNTH, azimuth)


# -----------------------------------------------------------------------------


def edge_map(pixels, threshold=EDGE_THRESHOLD):
    """Mark both pixels of every 4-neighbour pair differing by more than
    `threshold`.
    """
    edges = np.zeros(pixels.shape, dtype=bool)

    vertical = np.abs(np.diff(pixels, axis=0)) > threshold
    edges[1:, :] |= vertical
    edges[:-1, :] |= vertical

    horizontal = np.abs(np.diff(pixels, axis=1)) > threshold
    edges[:, 1:] |= horizontal
    edges[:, :-1] |= horizontal
    return edges


def dilate(mask):
    """Binary dilation by a 3 x 3 square."""
    padded = np.pad(mask, 1)
    height, width = mask.shape
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= padded[dy : dy + height, dx : dx + width]
    return out


def _sketch(pixels, rng):
    height, width = pixels.shape
    ys, xs = np.nonzero(edge_map(pixels))

    jitter = rng.integers(-1, 2, size=(len(ys), 2))
    ys = np.clip(ys + jitter[:, 0], 0, height - 1)
    xs = np.clip(xs + jitter[:, 1], 0, width - 1)

    strokes = np.zeros(pixels.shape, dtype=bool)
    strokes[ys, xs] = True
    band = dilate(strokes)

    ink = band * rng.uniform(*STROKE_INTENSITY, size=pixels.shape)
    speckle = (
        (rng.random(pixels.shape) < SPECKLE_PROBABILITY)
        * rng.uniform(*SPECKLE_INTENSITY, size=pixels.shape)
        * band
    )
    return np.clip(ink + speckle, 0.0, 1.0)


def stylize(image, style, seed):
    """Restyle a synthesized render.

    The synthesized style returns the pixels unchanged. The real style turns
    the render into a sketch: edges are detected, each edge pixel is jittered
    by up to one pixel, strokes are thickened by one pixel and speckled with
    noise that stays on the strokes.

    :param ImageSample image: A render.
    :param str style: ``"synth"`` or ``"real"``.
    :param int seed: Seeds the jitter and the noise.
    :rtype: ImageSample
    """
    if style == SYNTH:
        return replace(image, pixels=image.pixels.copy(), domain=SYNTH)
    if style != REAL:
        raise VxError.data(
            "invalid_value.style", f"style must be one of {DOMAINS}"
        )

    rng = np.random.default_rng(seed)
    return replace(image, pixels=_sketch(image.pixels, rng), domain=REAL)


def edge_density(pixels, threshold=DENSITY_THRESHOLD):
    """Fraction of neighbouring ink-pixel pairs that differ by more than
    `threshold`.

    Depth renders change smoothly inside a silhouette while sketches do not,
    so this separates the two domains. Images with no neighbouring ink pairs
    have density 0.
    """
    ink = pixels > 0

    pairs = 0
    steps = 0
    for axis in (0, 1):
        both = np.logical_and(
            np.take(ink, range(1, ink.shape[axis]), axis=axis),
            np.take(ink, range(ink.shape[axis] - 1), axis=axis),
        )
        step = np.abs(np.diff(pixels, axis=axis)) > threshold
        pairs += both.sum()
        steps += (both & step).sum()

    return float(steps / pairs) if pairs else 0.0
