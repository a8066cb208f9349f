"""Loss evaluated on a 2-D plane through three weight vectors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamVector, evaluate

MIN_ANGLE = 1e-6


@dataclass
class Plane:
    origin: ParamVector
    u: np.ndarray
    v: np.ndarray
    annotations: dict

    def point(self, a: float, b: float) -> ParamVector:
        return self.origin.replace(self.origin.values + a * self.u + b * self.v)

    def coords(self, w) -> tuple[float, float]:
        d = np.asarray(getattr(w, "values", w)) - self.origin.values
        return float(d @ self.u), float(d @ self.v)

    def default_extent(self, margin: float = 1.5) -> tuple[float, float, float, float]:
        """Bounding box of the annotated points, scaled about its centre."""
        pts = np.array(list(self.annotations.values()))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        centre, half = (lo + hi) / 2, (hi - lo) / 2 * margin
        return (centre[0] - half[0], centre[0] + half[0], centre[1] - half[1], centre[1] + half[1])


def plane_from_points(w0: ParamVector, w1: ParamVector, w2: ParamVector) -> Plane:
    """Orthonormal plane with origin ``w0`` and first axis towards ``w1``."""
    d1 = w1.values - w0.values
    d2 = w2.values - w0.values
    n1 = np.linalg.norm(d1)
    if n1 == 0:
        raise ValueError("w1 coincides with w0")
    u = d1 / n1
    r = d2 - (d2 @ u) * u
    # one more Gram-Schmidt pass keeps |u.v| at rounding level
    r -= (r @ u) * u
    nr = np.linalg.norm(r)
    n2 = np.linalg.norm(d2)
    if n2 == 0 or nr / n2 < np.sin(MIN_ANGLE):
        raise ValueError("points are collinear; cannot span a plane")
    v = r / nr
    annotations = {"w0": (0.0, 0.0), "w1": (float(n1), 0.0), "w2": (float(d2 @ u), float(d2 @ v))}
    return Plane(w0, u, v, annotations)


def grid_axes(extent, resolution):
    a_min, a_max, b_min, b_max = extent
    na, nb = resolution
    if na < 2 or nb < 2:
        raise ValueError("grid resolution must be at least 2x2")
    return np.linspace(a_min, a_max, na), np.linspace(b_min, b_max, nb)


def grid_eval(model, plane: Plane, extent, resolution, data) -> np.ndarray:
    """Mean data loss at ``origin + a*u + b*v`` over the lattice, shape ``(na, nb)``."""
    a_axis, b_axis = grid_axes(extent, resolution)
    fn = model.loss_fn(data.X, data.y)
    out = np.empty((a_axis.size, b_axis.size))
    for i, a in enumerate(a_axis):
        for j, b in enumerate(b_axis):
            out[i, j] = evaluate(fn, plane.point(a, b))
    return out


def write_grid_csv(path, plane: Plane, extent, resolution, grid: np.ndarray) -> None:
    a_axis, b_axis = grid_axes(extent, resolution)
    lines = ["a,b,loss"]
    for i, a in enumerate(a_axis):
        for j, b in enumerate(b_axis):
            lines.append(f"{a:.17g},{b:.17g},{grid[i, j]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def plane_metadata(plane: Plane, extent, resolution) -> dict:
    return {
        "dim": int(plane.u.size),
        "extent": [float(x) for x in extent],
        "resolution": [int(x) for x in resolution],
        "points": {k: [float(c) for c in v] for k, v in plane.annotations.items()},
        "u_dot_v": float(plane.u @ plane.v),
    }


def write_plane_json(path, plane: Plane, extent, resolution) -> None:
    Path(path).write_text(json.dumps(plane_metadata(plane, extent, resolution), indent=2, sort_keys=True))
