"""Deterministic stand-in vision: tiny rasterizer plus a frozen encoder.

Three fixed virtual cameras view the planar scene through distinct
affine maps (a straight-on view, a tilted view, and a zoomed view of
the workspace). Each renders a 32x32 grayscale image: table line, arm
links, gripper jaws whose spread tracks the gripper command, and cubes
filled with a per-index shade so identity survives the projection.

The encoder is a fixed random projection followed by tanh: one matrix
per view, drawn once from a named seed. Same scene, same seed: same
latents, bit for bit.
"""

from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from .sim import CUBE_SHADES, EnvConfig, EnvState, fk_points
from .utils import make_rng

RES = 32
VIEW_NAMES = ("view1", "view2", "view3")

# world -> pixel affines, one per camera: p = A @ (x, y) + b,
# row = RES-1 - p_y, col = p_x
_VIEW_A = (
    np.array([[22.0, 0.0], [0.0, 22.0]]),
    np.array([[20.0, 6.0], [-3.0, 21.0]]),
    np.array([[32.0, -4.0], [4.0, 33.0]]),
)
_VIEW_B = (
    np.array([2.2, 2.2]),
    np.array([3.0, 3.5]),
    np.array([-5.5, 0.5]),
)

_TABLE_SHADE = 0.25
_ARM_SHADE = 0.8
_JAW_SHADE = 1.0


def _paint(canvas: np.ndarray, pts: np.ndarray, shade: float,
           A: np.ndarray, b: np.ndarray) -> None:
    # max blend keeps painting order irrelevant
    px = pts @ A.T + b
    col = np.rint(px[:, 0]).astype(np.int64)
    row = np.rint(RES - 1 - px[:, 1]).astype(np.int64)
    ok = (col >= 0) & (col < RES) & (row >= 0) & (row < RES)
    np.maximum.at(canvas, (row[ok], col[ok]), shade)


def _segment_points(p0, p1, density: float = 90.0) -> np.ndarray:
    n = max(2, int(math.ceil(float(np.hypot(*(np.asarray(p1) - p0))) * density)))
    ts = np.linspace(0.0, 1.0, n)[:, None]
    return np.asarray(p0) + ts * (np.asarray(p1) - np.asarray(p0))


def _square_points(center, size: float, theta: float, grid: int = 7) -> np.ndarray:
    u = np.linspace(-0.5, 0.5, grid) * size
    xx, yy = np.meshgrid(u, u)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + np.asarray(center)


def render_scene(state: EnvState, cfg: EnvConfig, view: int) -> np.ndarray:
    """One camera's 32x32 grayscale frame of the current state."""
    A, b = _VIEW_A[view], _VIEW_B[view]
    canvas = np.zeros((RES, RES), dtype=np.float64)
    _paint(canvas, _segment_points((-0.1, 0.0), (1.3, 0.0)), _TABLE_SHADE, A, b)
    pts = fk_points(state.joints, cfg.links)
    for i in range(3):
        _paint(canvas, _segment_points(pts[i], pts[i + 1]), _ARM_SHADE, A, b)
    ee = pts[-1]
    spread = 0.012 + 0.05 * (1.0 - state.grip)
    jaws = np.array([[ee[0] - spread, ee[1]], [ee[0] + spread, ee[1]]])
    _paint(canvas, jaws, _JAW_SHADE, A, b)
    for i in range(state.cube_xy.shape[0]):
        _paint(canvas,
               _square_points(state.cube_xy[i], cfg.cube_size, state.cube_theta[i]),
               CUBE_SHADES[i % len(CUBE_SHADES)], A, b)
    return canvas.astype(np.float32)


def render_all_views(state: EnvState, cfg: EnvConfig) -> List[np.ndarray]:
    return [render_scene(state, cfg, v) for v in range(len(VIEW_NAMES))]


class ViewEncoder:
    """Frozen random projection per view: latent = tanh(P @ flatten(img))."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = int(dim)
        self.seed = int(seed)
        gain = 4.0 / math.sqrt(RES * RES)
        self._proj = []
        for name in VIEW_NAMES:
            rng = make_rng("vision-encoder", self.seed, name)
            P = (rng.standard_normal((self.dim, RES * RES)) * gain).astype(np.float32)
            self._proj.append(P)

    def encode_view(self, render: np.ndarray, view: int) -> np.ndarray:
        flat = np.asarray(render, dtype=np.float32).reshape(-1)
        return np.tanh(self._proj[view] @ flat)

    def encode_views(self, renders: List[np.ndarray]) -> np.ndarray:
        """(3, dim) latent block for one timestep."""
        return np.stack([self.encode_view(r, v) for v, r in enumerate(renders)])

    def encode_state(self, state: EnvState, cfg: EnvConfig) -> np.ndarray:
        return self.encode_views(render_all_views(state, cfg))


_DEFAULT: Optional[ViewEncoder] = None


def default_encoder(dim: int = 64, seed: int = 0) -> ViewEncoder:
    """Shared encoder instance; rebuilt only when dim or seed change."""
    global _DEFAULT
    if _DEFAULT is None or _DEFAULT.dim != dim or _DEFAULT.seed != seed:
        _DEFAULT = ViewEncoder(dim, seed)
    return _DEFAULT
