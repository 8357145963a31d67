"""Weak trinary masks from dense binary masks: points, grid, scribbles, skeleton.

A weak mask carries {0 negative, 1 positive, UNKNOWN}; only labeled pixels
reach the loss. All styles end with an integrity fix that turns any label
disagreeing with the dense mask into UNKNOWN, then verify both classes are
still represented.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InfeasibleSparsityError, ParameterError, ShapeError
from .morphology import (
    as_binary,
    contour_pixels,
    dilate,
    erode,
    sample_contour_fraction,
    skeletonize,
)
from .seeding import derive_seed, rng_from

UNKNOWN = 2

STYLES = ("points", "grid", "scribbles", "skeleton")

# Per-style parameter ranges: train draws uniformly, test enumerates a grid.
TRAIN_RANGES = {
    "points": {"n_pix": (1, 20), "radius": (1, 5)},
    "grid": {"spacing": (12, 20), "radius": (1, 5)},
    "scribbles": {"proportion": (0.1, 1.0), "radius": (1, 8)},
    "skeleton": {"radius": (1, 8)},
}
TEST_GRIDS = {
    "points": [{"n_pix": n, "radius": r} for n in (1, 5, 10) for r in (1, 2, 3)],
    "grid": [{"spacing": s, "radius": r} for s in (20, 16, 12) for r in (1, 2, 3)],
    "scribbles": [
        {"proportion": p, "radius": r} for p in (0.1, 0.25, 0.5, 1.0) for r in (1, 2, 4, 8)
    ],
    "skeleton": [{"radius": r} for r in (1, 2, 4, 8)],
}


@dataclass(frozen=True)
class SparsityParams:
    style: str
    seed: int = 0
    n_pix: int | None = None
    radius: int | None = None  # None skips the final dilation
    spacing: int | None = None
    proportion: float | None = None

    def __post_init__(self):
        if self.style not in STYLES:
            raise ParameterError(f"unknown style {self.style!r}")
        if self.style == "points" and (self.n_pix is None or self.n_pix < 1):
            raise ParameterError("points style needs n_pix >= 1")
        if self.style == "grid" and (self.spacing is None or self.spacing < 1):
            raise ParameterError("grid style needs spacing >= 1")
        if self.style == "scribbles" and (
            self.proportion is None or not 0.0 < self.proportion <= 1.0
        ):
            raise ParameterError("scribbles style needs proportion in (0, 1]")
        if self.radius is not None and self.radius < 1:
            raise ParameterError("radius must be >= 1 when given")


def fix_integrity(dense, weak) -> np.ndarray:
    """Turn labels that contradict the dense mask into UNKNOWN."""
    d = as_binary(dense)
    w = np.asarray(weak)
    if w.shape != d.shape:
        raise ShapeError(f"dense {d.shape} vs weak {w.shape}")
    if not np.isin(w, (0, 1, UNKNOWN)).all():
        raise ShapeError("weak mask values must be 0, 1 or UNKNOWN")
    out = w.astype(np.uint8).copy()
    out[(d == 0) & (out == 1)] = UNKNOWN
    out[(d == 1) & (out == 0)] = UNKNOWN
    return out


def dilate_weak(weak, radius) -> np.ndarray:
    """Grow both labeled classes by a disk; original labels always survive.

    Negative growth is written first, positive second (the construction order
    of the sparsifiers), so contested previously-unknown pixels go positive;
    the integrity fix downstream resolves any resulting disagreement.
    """
    w = np.asarray(weak, dtype=np.uint8)
    if radius is None:
        return w.copy()
    pos = dilate((w == 1).astype(np.uint8), radius).astype(bool)
    neg = dilate((w == 0).astype(np.uint8), radius).astype(bool)
    out = np.full_like(w, UNKNOWN)
    out[neg] = 0
    out[pos] = 1
    out[w == 0] = 0
    out[w == 1] = 1
    return out


def _finish(dense, weak, params):
    out = fix_integrity(dense, dilate_weak(weak, params.radius))
    for c in (0, 1):
        if not (out == c).any():
            raise InfeasibleSparsityError(
                f"{params.style}: class {c} has no labeled pixel left"
            )
    return out


def weak_points(dense, params: SparsityParams) -> np.ndarray:
    d = as_binary(dense)
    n = params.n_pix
    rng = rng_from(params.seed)
    w = np.full_like(d, UNKNOWN)
    for c in (0, 1):
        flat = np.flatnonzero(d == c)
        if flat.size < n:
            raise InfeasibleSparsityError(f"class {c} has {flat.size} < {n} pixels")
        # permutation independent of n -> point sets nest across n_pix
        chosen = rng.permutation(flat)[:n]
        w.flat[chosen] = c
    return _finish(d, w, params)


def weak_grid(dense, params: SparsityParams) -> np.ndarray:
    d = as_binary(dense)
    spc = params.spacing
    w = np.full_like(d, UNKNOWN)
    w[::spc, ::spc] = d[::spc, ::spc]
    return _finish(d, w, params)


def _outer_contour(d):
    # Clip away contour pixels that sit on the positive region (diagonal
    # boundary steps of the r=1 disk); they could only ever be integrity-
    # clipped, and as seeds they would shadow valid positive growth.
    return contour_pixels(dilate(d, 1)) & (d == 0)


def weak_scribbles(dense, params: SparsityParams) -> np.ndarray:
    d = as_binary(dense)
    if d.sum() == 0:
        raise InfeasibleSparsityError("empty positive region")
    inner_shape = erode(d, 1)
    if inner_shape.sum() == 0:
        raise InfeasibleSparsityError("erosion emptied the positive region")
    inner = contour_pixels(inner_shape)
    p = params.proportion
    w = np.full_like(d, UNKNOWN)
    w[sample_contour_fraction(_outer_contour(d), p, derive_seed(params.seed, 0)) == 1] = 0
    w[sample_contour_fraction(inner, p, derive_seed(params.seed, 1)) == 1] = 1
    return _finish(d, w, params)


def weak_skeleton(dense, params: SparsityParams) -> np.ndarray:
    d = as_binary(dense)
    if d.sum() == 0:
        raise InfeasibleSparsityError("empty positive region")
    w = np.full_like(d, UNKNOWN)
    w[_outer_contour(d) == 1] = 0
    w[skeletonize(d) == 1] = 1
    return _finish(d, w, params)


_STYLE_FNS = {
    "points": weak_points,
    "grid": weak_grid,
    "scribbles": weak_scribbles,
    "skeleton": weak_skeleton,
}


def sparsify(dense, params: SparsityParams) -> np.ndarray:
    return _STYLE_FNS[params.style](dense, params)


def sparsity_test_grid(style, seed: int = 0) -> list[SparsityParams]:
    """Enumerated test-phase grid points, in table order."""
    if style not in STYLES:
        raise ParameterError(f"unknown style {style!r}")
    return [SparsityParams(style=style, seed=seed, **pt) for pt in TEST_GRIDS[style]]


def sample_sparsity_params(style, phase, rng_seed) -> SparsityParams:
    if style not in STYLES:
        raise ParameterError(f"unknown style {style!r}")
    if phase not in ("train", "test"):
        raise ParameterError(f"unknown phase {phase!r}")
    rng = rng_from(rng_seed, "sparsity", style, phase)
    inner_seed = int(rng.integers(1 << 62))
    if phase == "test":
        grid = sparsity_test_grid(style, seed=inner_seed)
        return grid[int(rng.integers(len(grid)))]
    fields = {}
    for name, (lo, hi) in TRAIN_RANGES[style].items():
        if name == "proportion":
            fields[name] = float(rng.uniform(lo, hi))
        else:
            fields[name] = int(rng.integers(lo, hi + 1))
    return SparsityParams(style=style, seed=inner_seed, **fields)


def reseeded(params: SparsityParams, *parts) -> SparsityParams:
    """Same sparsity point, fresh per-shot randomness."""
    return replace(params, seed=derive_seed(params.seed, *parts))
