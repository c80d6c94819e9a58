"""Toy kinematic arm environment with scripted manipulation policies.

A 3-link planar arm operates in a vertical plane (x right, y up) above a
table at y=0. Up to three cubes sit on the table; the arm can grasp the
nearest cube when its gripper closes within the grasp radius, carry it,
and release it, at which point the cube falls and settles on the table
or on top of another cube.

Actions are absolute joint-position targets plus a gripper command,
executed by a rate-limited controller (one tick = one control step).
Scripted policies plan end-effector waypoints, convert them to joint
targets with damped least-squares IK, and hold each target until the
controller converges. Four task scripts: pick, bin_pick (cluttered,
noisy grasps, failures retained), stack, destack.

Everything is deterministic given (task, seed, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import SceneError
from .utils import make_rng

TASKS = ("pick", "bin_pick", "stack", "destack")

# rendering shade per cube index; identity must be visible to the
# stand-in encoder, so the mover cube is always the bright one
CUBE_SHADES = (0.9, 0.6, 0.45)


@dataclass(frozen=True)
class EnvConfig:
    links: Tuple[float, float, float] = (0.5, 0.4, 0.3)
    joint_lo: Tuple[float, float, float] = (0.05, -2.7, -2.7)
    joint_hi: Tuple[float, float, float] = (3.09, 2.7, 2.7)
    home: Tuple[float, float, float] = (1.4, -1.0, -0.8)
    cube_size: float = 0.08
    grasp_radius: float = 0.07
    max_joint_step: float = 0.12
    max_grip_step: float = 0.25
    grip_close_at: float = 0.6
    grip_open_at: float = 0.4
    hover: float = 0.22          # approach height above a grasp point
    lift_y: float = 0.55         # carry height after a grasp
    lift_threshold: float = 0.42  # pick verifier: cube this high counts
    capture_frac: float = 0.6    # |dx| <= frac*size captures onto a cube
    max_steps: int = 240
    cube_x_lo: float = 0.35
    cube_x_hi: float = 0.95
    bin_x_lo: float = 0.55
    bin_x_hi: float = 0.85
    reach_lo: float = 0.30
    reach_hi: float = 1.15
    scene_attempts: int = 50
    grasp_noise: float = 0.035   # bin_pick grasp-point jitter (std, per axis)


@dataclass
class EnvState:
    joints: np.ndarray            # (3,) float64 radians
    grip: float                   # [0, 1], 1 = closed
    cube_xy: np.ndarray           # (K, 2) float64 centers
    cube_theta: np.ndarray        # (K,) float64 tilt, rendering only
    held: int = -1                # cube index or -1
    t: int = 0


def fk_points(joints: np.ndarray, links) -> np.ndarray:
    """Base, two elbows, end effector as a (4, 2) array."""
    pts = np.zeros((4, 2))
    a = 0.0
    for i, L in enumerate(links):
        a += joints[i]
        pts[i + 1] = pts[i] + (L * math.cos(a), L * math.sin(a))
    return pts


def ee_position(joints: np.ndarray, links) -> np.ndarray:
    return fk_points(joints, links)[-1]


def _jacobian(joints: np.ndarray, links) -> np.ndarray:
    pts = fk_points(joints, links)
    ee = pts[-1]
    J = np.zeros((2, 3))
    for i in range(3):
        r = ee - pts[i]
        J[:, i] = (-r[1], r[0])
    return J


def solve_ik(target_xy, start: np.ndarray, cfg: EnvConfig,
             iters: int = 120, tol: float = 1e-4) -> Tuple[np.ndarray, bool]:
    """Damped least-squares IK from a warm start. Returns (joints, ok)."""
    q = np.asarray(start, dtype=np.float64).copy()
    lo = np.asarray(cfg.joint_lo)
    hi = np.asarray(cfg.joint_hi)
    target = np.asarray(target_xy, dtype=np.float64)
    lam2 = 0.01
    for _ in range(iters):
        err = target - ee_position(q, cfg.links)
        if float(np.hypot(*err)) < tol:
            return q, True
        J = _jacobian(q, cfg.links)
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(2), err)
        q = np.clip(q + np.clip(dq, -0.3, 0.3), lo, hi)
    ok = float(np.hypot(*(target - ee_position(q, cfg.links)))) < 10 * tol
    return q, ok


def reachable(x: float, y: float, cfg: EnvConfig) -> bool:
    # usable workspace is the front (positive-x) annulus; behind-the-base
    # targets would need the shoulder against its limit
    r = math.hypot(x, y)
    return cfg.reach_lo <= r <= cfg.reach_hi and y >= 0.0 and x >= 0.1


def settle_height(x: float, cube_xy: np.ndarray, exclude: int,
                  cfg: EnvConfig) -> float:
    """Resting center height for a cube dropped at x: table or pile top."""
    half = cfg.cube_size / 2.0
    top = 0.0
    for j in range(cube_xy.shape[0]):
        if j == exclude:
            continue
        if abs(cube_xy[j, 0] - x) <= cfg.capture_frac * cfg.cube_size:
            top = max(top, cube_xy[j, 1] + half)
    return top + half


class ToyEnv:
    """Steppable environment; reset builds a deterministic seeded scene."""

    def __init__(self, cfg: Optional[EnvConfig] = None):
        self.cfg = cfg or EnvConfig()
        self.state: Optional[EnvState] = None
        self.task: Optional[str] = None
        self.seed: Optional[int] = None
        self._prev_grip = 0.0

    # -------------------------------------------------------- scenes

    def reset(self, task: str, seed: int) -> EnvState:
        if task not in TASKS:
            raise SceneError(f"unknown task '{task}'")
        cfg = self.cfg
        rng = make_rng("scene", task, int(seed))
        for _ in range(cfg.scene_attempts):
            built = self._try_scene(task, rng)
            if built is not None:
                cube_xy, cube_theta = built
                self.state = EnvState(
                    joints=np.asarray(cfg.home, dtype=np.float64).copy(),
                    grip=0.0, cube_xy=cube_xy, cube_theta=cube_theta)
                self.task = task
                self.seed = int(seed)
                self._prev_grip = 0.0
                return self.state
        raise SceneError(
            f"no feasible scene for task '{task}' seed {seed} "
            f"after {cfg.scene_attempts} attempts")

    def _try_scene(self, task: str, rng) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        cfg = self.cfg
        half = cfg.cube_size / 2.0
        if task == "pick":
            k = int(rng.integers(1, 4))
            xs = self._spaced_xs(k, rng, 2.0 * cfg.cube_size)
            if xs is None:
                return None
            xy = np.stack([xs, np.full(k, half)], axis=1)
            if not self._waypoints_ok(xs[0], half):
                return None
        elif task == "bin_pick":
            k = 3
            xs = cfg.bin_x_lo + rng.random(k) * (cfg.bin_x_hi - cfg.bin_x_lo)
            xy = np.zeros((k, 2))
            for i in range(k):  # drop cubes in order; piles may form
                xy[i] = (xs[i], settle_height(xs[i], xy[:i], -1, cfg))
            top = int(np.argmax(xy[:, 1] + 1e-9 * xy[:, 0]))
            if not self._waypoints_ok(xy[top, 0], xy[top, 1]):
                return None
        elif task == "stack":
            xs = self._spaced_xs(2, rng, 2.5 * cfg.cube_size)
            if xs is None:
                return None
            xy = np.stack([xs, np.full(2, half)], axis=1)
            # mover waypoints plus the place approach over the base cube
            if not (self._waypoints_ok(xs[0], half)
                    and self._waypoints_ok(xs[1], half + cfg.cube_size)):
                return None
        else:  # destack
            base_x = cfg.cube_x_lo + rng.random() * (cfg.cube_x_hi - cfg.cube_x_lo)
            jitter = (rng.random() * 2.0 - 1.0) * 0.4 * cfg.capture_frac * cfg.cube_size
            top_x = base_x + jitter
            free_x = self._free_spot(base_x, rng)
            if free_x is None:
                return None
            xy = np.array([[top_x, half + cfg.cube_size], [base_x, half]])
            if not (self._waypoints_ok(top_x, half + cfg.cube_size)
                    and self._waypoints_ok(free_x, half)):
                return None
            self._destack_free_x = free_x
        theta = (rng.random(xy.shape[0]) * 2.0 - 1.0) * 0.25
        return xy, theta

    def _spaced_xs(self, k: int, rng, min_sep: float) -> Optional[np.ndarray]:
        cfg = self.cfg
        for _ in range(40):
            xs = cfg.cube_x_lo + rng.random(k) * (cfg.cube_x_hi - cfg.cube_x_lo)
            if k == 1 or np.min(np.diff(np.sort(xs))) >= min_sep:
                return xs
        return None

    def _free_spot(self, base_x: float, rng) -> Optional[float]:
        cfg = self.cfg
        for _ in range(40):
            x = cfg.cube_x_lo + rng.random() * (cfg.cube_x_hi - cfg.cube_x_lo)
            if abs(x - base_x) >= 2.5 * cfg.cube_size:
                return x
        return None

    def _waypoints_ok(self, x: float, y: float) -> bool:
        # grasp/place point, its hover approach, and the carry height
        cfg = self.cfg
        return (reachable(x, y, cfg)
                and reachable(x, y + cfg.hover, cfg)
                and reachable(x, cfg.lift_y, cfg))

    # -------------------------------------------------------- dynamics

    def ee(self) -> np.ndarray:
        return ee_position(self.state.joints, self.cfg.links)

    def step(self, action) -> EnvState:
        cfg = self.cfg
        s = self.state
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        targets = np.clip(a[:3], cfg.joint_lo, cfg.joint_hi)
        s.joints += np.clip(targets - s.joints,
                            -cfg.max_joint_step, cfg.max_joint_step)
        gt = float(np.clip(a[3], 0.0, 1.0))
        s.grip += float(np.clip(gt - s.grip, -cfg.max_grip_step, cfg.max_grip_step))

        ee = self.ee()
        if s.held >= 0:
            s.cube_xy[s.held] = ee
            if self._prev_grip > cfg.grip_open_at >= s.grip:
                self._release()
        elif self._prev_grip < cfg.grip_close_at <= s.grip:
            self._attach(ee)
        self._prev_grip = s.grip
        s.t += 1
        return s

    def _attach(self, ee: np.ndarray) -> None:
        s, cfg = self.state, self.cfg
        d = np.hypot(*(s.cube_xy - ee).T)
        i = int(np.argmin(d))
        if d[i] <= cfg.grasp_radius:
            s.held = i
            s.cube_xy[i] = ee

    def _release(self) -> None:
        s, cfg = self.state, self.cfg
        i = s.held
        s.held = -1
        s.cube_xy[i, 1] = settle_height(s.cube_xy[i, 0], s.cube_xy, i, cfg)
        s.cube_theta[i] = 0.0


def verify_success(task: str, state: EnvState, cfg: EnvConfig) -> bool:
    """Geometric task verifiers on the final state."""
    size = cfg.cube_size
    half = size / 2.0
    xy = state.cube_xy
    if task in ("pick", "bin_pick"):
        held_high = state.held >= 0 and xy[state.held, 1] >= cfg.lift_threshold
        return bool(held_high)
    if task == "stack":
        if state.held >= 0:
            return False
        for i in range(xy.shape[0]):
            for j in range(xy.shape[0]):
                if i == j:
                    continue
                dx = abs(xy[i, 0] - xy[j, 0])
                dy = xy[i, 1] - xy[j, 1]
                if dx < cfg.capture_frac * size and abs(dy - size) < 0.25 * size:
                    return True
        return False
    # destack: every cube rests on the table, no two overlap
    if state.held >= 0:
        return False
    on_table = np.all(np.abs(xy[:, 1] - half) < 0.01)
    xs = np.sort(xy[:, 0])
    separated = xs.size < 2 or np.min(np.diff(xs)) >= size
    return bool(on_table and separated)


# ------------------------------------------------------------ policies

@dataclass
class _Segment:
    joints: np.ndarray   # absolute joint target
    grip: float
    dwell: int           # ticks to hold after convergence
    max_ticks: int


class ScriptedPolicy:
    """Waypoint script for one task, compiled to joint targets at reset.

    Call `action(env)` once per tick; it returns the current absolute
    target (3 joints + gripper) and advances to the next segment when
    the controller has converged and the dwell has elapsed. `done`
    flips after the final segment completes.
    """

    def __init__(self, env: ToyEnv, task: str, seed: int):
        self.cfg = env.cfg
        self.done = False
        self._idx = 0
        self._ticks_in_seg = 0
        self._dwelled = 0
        rng = make_rng("policy", task, int(seed))
        self.segments = self._plan(env, task, rng)

    # ------------------------------------------------------ planning

    def _plan(self, env: ToyEnv, task: str, rng) -> List[_Segment]:
        cfg = self.cfg
        s = env.state
        half = cfg.cube_size / 2.0
        segs: List[_Segment] = []
        q = s.joints.copy()

        def goto(xy, grip, dwell=0, max_ticks=40):
            nonlocal q
            q, _ = solve_ik(xy, q, cfg)
            segs.append(_Segment(q.copy(), grip, dwell, max_ticks))

        def grasp_at(x, y):
            goto((x, y + cfg.hover), 0.0)
            goto((x, y), 0.0, dwell=1)
            segs.append(_Segment(q.copy(), 1.0, 3, 12))  # close in place
            goto((x, cfg.lift_y), 1.0)

        def place_at(x, y):
            goto((x, y + cfg.hover), 1.0)
            goto((x, y), 1.0, dwell=1)
            segs.append(_Segment(q.copy(), 0.0, 3, 12))  # open in place
            goto((x, y + cfg.hover), 0.0)

        if task == "pick":
            x, y = s.cube_xy[0]
            grasp_at(x, y)
        elif task == "bin_pick":
            top = int(np.argmax(s.cube_xy[:, 1] + 1e-9 * s.cube_xy[:, 0]))
            gx = s.cube_xy[top, 0] + rng.normal() * cfg.grasp_noise
            gy = s.cube_xy[top, 1] + rng.normal() * cfg.grasp_noise
            grasp_at(gx, max(gy, half * 0.5))
        elif task == "stack":
            mover, base = s.cube_xy[0], s.cube_xy[1]
            grasp_at(mover[0], mover[1])
            place_at(base[0], base[1] + cfg.cube_size)
        else:  # destack
            top = s.cube_xy[0]
            grasp_at(top[0], top[1])
            place_at(env._destack_free_x, half)
        return segs

    # ------------------------------------------------------ execution

    def action(self, env: ToyEnv) -> np.ndarray:
        seg = self.segments[self._idx]
        s = env.state
        self._ticks_in_seg += 1
        converged = (np.max(np.abs(s.joints - seg.joints)) < 0.02
                     and abs(s.grip - seg.grip) < 0.05)
        if converged:
            self._dwelled += 1
        advance = ((converged and self._dwelled > seg.dwell)
                   or self._ticks_in_seg >= seg.max_ticks)
        out = np.concatenate([seg.joints, [seg.grip]]).astype(np.float32)
        if advance:
            if self._idx + 1 < len(self.segments):
                self._idx += 1
                self._ticks_in_seg = 0
                self._dwelled = 0
            else:
                self.done = True
        return out
