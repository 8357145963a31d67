"""Binary mask morphology: disk dilate/erode, thinning, contours, arc sampling."""

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _zhang_thin

from .errors import ParameterError, ShapeError
from .seeding import rng_from

# 8-neighborhood, fixed scan order used for contour traversal.
_NEIGHBORS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def as_binary(grid) -> np.ndarray:
    g = np.asarray(grid)
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise ShapeError(f"expected 2-D binary grid, got shape {g.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ShapeError("grid cells must be exactly 0 or 1")
    return g.astype(np.uint8)


def disk_offsets(radius: int):
    """Euclidean disk {(dy, dx) : dy^2 + dx^2 <= radius^2}, origin included."""
    if radius < 1:
        raise ParameterError(f"radius must be >= 1, got {radius}")
    r = int(radius)
    return [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= r * r
    ]


def disk_footprint(radius: int) -> np.ndarray:
    offsets = disk_offsets(radius)
    r = int(radius)
    fp = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    for dy, dx in offsets:
        fp[dy + r, dx + r] = True
    return fp


def dilate(grid, radius: int) -> np.ndarray:
    g = as_binary(grid)
    out = ndimage.binary_dilation(g.astype(bool), structure=disk_footprint(radius))
    return out.astype(np.uint8)


def erode(grid, radius: int) -> np.ndarray:
    # border_value=0: cells outside the image count as 0.
    g = as_binary(grid)
    out = ndimage.binary_erosion(
        g.astype(bool), structure=disk_footprint(radius), border_value=0
    )
    return out.astype(np.uint8)


def skeletonize(grid) -> np.ndarray:
    g = as_binary(grid)
    return _zhang_thin(g.astype(bool), method="zhang").astype(np.uint8)


def contour_pixels(grid) -> np.ndarray:
    """Cells that are 1 with at least one zero 8-neighbor.

    Out-of-image neighbors take the cell's own value (edge padding), so the
    image frame never creates contours.
    """
    g = as_binary(grid)
    padded = np.pad(g, 1, mode="edge")
    has_zero_neighbor = np.zeros_like(g, dtype=bool)
    h, w = g.shape
    for dy, dx in _NEIGHBORS:
        has_zero_neighbor |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] == 0
    return ((g == 1) & has_zero_neighbor).astype(np.uint8)


def _traverse(component_pixels: set) -> list:
    """Deterministic walk visiting every pixel, following 8-adjacency greedily.

    Starts at the lexicographically smallest pixel; on dead ends jumps to the
    smallest unvisited pixel, so the order is total even for branchy contours.
    """
    order = []
    unvisited = set(component_pixels)
    cur = min(unvisited)
    while True:
        order.append(cur)
        unvisited.discard(cur)
        if not unvisited:
            return order
        nxt = None
        for dy, dx in _NEIGHBORS:
            cand = (cur[0] + dy, cur[1] + dx)
            if cand in unvisited:
                nxt = cand
                break
        cur = nxt if nxt is not None else min(unvisited)


def sample_contour_fraction(contour, proportion: float, rng_seed: int) -> np.ndarray:
    """Contiguous arc of ceil(proportion * length) pixels per contour component.

    The arc start is seeded per component and does not depend on proportion,
    so arcs are nested: p1 <= p2 (same seed) implies arc(p1) subset arc(p2).
    """
    if not 0.0 < proportion <= 1.0:
        raise ParameterError(f"proportion must be in (0, 1], got {proportion}")
    g = as_binary(contour)
    out = np.zeros_like(g)
    labels, n_comp = ndimage.label(g, structure=np.ones((3, 3)))
    for comp in range(1, n_comp + 1):
        ys, xs = np.nonzero(labels == comp)
        order = _traverse(set(zip(ys.tolist(), xs.tolist())))
        length = len(order)
        take = int(np.ceil(proportion * length))
        start = int(rng_from(rng_seed, comp).integers(length))
        for i in range(take):
            y, x = order[(start + i) % length]
            out[y, x] = 1
    return out
