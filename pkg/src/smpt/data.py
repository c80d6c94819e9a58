"""Trajectory generation, binary dataset files, context windows.

A trajectory is the per-tick record of one scripted episode: three view
latents, the proprioceptive state (3 joints + gripper), and the action
taken (absolute joint targets + gripper command), plus task tag, seed,
and the verifier's success flag.

Dataset files ("RPTD"): little-endian, magic + version, a dimension
header (J, D_v, D_p, D_a, count), then per trajectory a small header
and the raw f32 step payload in token order (view1, view2, view3,
proprio, action per step).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import FormatError, SceneError
from .sim import TASKS, EnvConfig, ScriptedPolicy, ToyEnv, verify_success
from .utils import make_rng
from .vision import ViewEncoder, default_encoder

MAGIC = b"RPTD"
VERSION = 1

_TASK_CODE = {t: i for i, t in enumerate(TASKS)}


@dataclass
class StepRecord:
    views: np.ndarray    # (3, D_v) float32
    proprio: np.ndarray  # (D_p,) float32
    action: np.ndarray   # (D_a,) float32


@dataclass
class Trajectory:
    task: str
    seed: int
    success: bool
    views: np.ndarray    # (T, 3, D_v) float32
    proprio: np.ndarray  # (T, D_p) float32
    actions: np.ndarray  # (T, D_a) float32

    def __post_init__(self):
        if len(self.views) == 0:
            raise FormatError("empty trajectory")
        if not (len(self.views) == len(self.proprio) == len(self.actions)):
            raise FormatError("step arrays disagree on length")

    def __len__(self) -> int:
        return self.views.shape[0]

    def step(self, i: int) -> StepRecord:
        return StepRecord(self.views[i], self.proprio[i], self.actions[i])


@dataclass
class ContextWindow:
    """T consecutive steps cut from one trajectory."""
    views: np.ndarray    # (T, 3, D_v)
    proprio: np.ndarray  # (T, D_p)
    actions: np.ndarray  # (T, D_a)
    offset: int
    task: str
    seed: int

    def __len__(self) -> int:
        return self.views.shape[0]


def generate_trajectory(task: str, seed: int,
                        env_config: Optional[EnvConfig] = None,
                        encoder: Optional[ViewEncoder] = None) -> Trajectory:
    """Run the scripted policy closed-loop and record every tick."""
    cfg = env_config or EnvConfig()
    enc = encoder or default_encoder()
    env = ToyEnv(cfg)
    env.reset(task, seed)
    policy = ScriptedPolicy(env, task, seed)

    views, proprio, actions = [], [], []
    for _ in range(cfg.max_steps):
        views.append(enc.encode_state(env.state, cfg))
        proprio.append(np.concatenate([env.state.joints, [env.state.grip]])
                       .astype(np.float32))
        act = policy.action(env)
        actions.append(np.asarray(act, dtype=np.float32))
        env.step(act)
        if policy.done:
            break

    return Trajectory(
        task=task, seed=int(seed), success=verify_success(task, env.state, cfg),
        views=np.stack(views), proprio=np.stack(proprio),
        actions=np.stack(actions))


def generate_dataset(task: str, count: int, base_seed: int,
                     env_config: Optional[EnvConfig] = None,
                     encoder: Optional[ViewEncoder] = None) -> List[Trajectory]:
    """`count` trajectories at seeds base_seed..base_seed+count-1.

    Infeasible scenes are skipped by advancing the seed, so the result
    always holds `count` trajectories.
    """
    out: List[Trajectory] = []
    seed = int(base_seed)
    attempts = 0
    while len(out) < count:
        if attempts > 10 * count + 100:
            raise SceneError(f"too many infeasible scenes for task '{task}'")
        try:
            out.append(generate_trajectory(task, seed, env_config, encoder))
        except SceneError:
            pass
        seed += 1
        attempts += 1
    return out


# ------------------------------------------------------------ file io

def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated dataset file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_dataset(trajectories: Sequence[Trajectory], path) -> None:
    """Write trajectories; an empty list produces a valid count-0 file."""
    if trajectories:
        d_v = trajectories[0].views.shape[2]
        d_p = trajectories[0].proprio.shape[1]
        d_a = trajectories[0].actions.shape[1]
        for tr in trajectories:
            if (tr.views.shape[1] != 3 or tr.views.shape[2] != d_v
                    or tr.proprio.shape[1] != d_p or tr.actions.shape[1] != d_a):
                raise FormatError("trajectories disagree on dimensions")
            if tr.task not in _TASK_CODE:
                raise FormatError(f"unknown task tag '{tr.task}'")
    else:
        d_v, d_p, d_a = 64, 4, 4
    j = d_p - 1

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<5I", j, d_v, d_p, d_a, len(trajectories)))
        for tr in trajectories:
            f.write(struct.pack("<B", _TASK_CODE[tr.task]))
            f.write(struct.pack("<Q", tr.seed))
            f.write(struct.pack("<B", 1 if tr.success else 0))
            f.write(struct.pack("<I", len(tr)))
            steps = np.concatenate(
                [tr.views.reshape(len(tr), -1), tr.proprio, tr.actions], axis=1)
            f.write(np.ascontiguousarray(steps, dtype="<f4").tobytes())
    os.replace(tmp, str(path))


def read_dataset(path) -> List[Trajectory]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise FormatError("bad magic bytes: not a dataset file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        j, d_v, d_p, d_a, count = struct.unpack("<5I", _read_exact(f, 20))
        if d_p != j + 1 or d_a != j + 1:
            raise FormatError(
                f"dimension header mismatch: J={j} but D_p={d_p}, D_a={d_a}")
        row = 3 * d_v + d_p + d_a
        out: List[Trajectory] = []
        for _ in range(count):
            (code,) = struct.unpack("<B", _read_exact(f, 1))
            if code >= len(TASKS):
                raise FormatError(f"unknown task code {code}")
            (seed,) = struct.unpack("<Q", _read_exact(f, 8))
            (succ,) = struct.unpack("<B", _read_exact(f, 1))
            (steps,) = struct.unpack("<I", _read_exact(f, 4))
            if steps == 0:
                raise FormatError("empty trajectory in file")
            flat = np.frombuffer(_read_exact(f, steps * row * 4), dtype="<f4")
            flat = flat.reshape(steps, row)
            out.append(Trajectory(
                task=TASKS[code], seed=int(seed), success=bool(succ),
                views=flat[:, :3 * d_v].reshape(steps, 3, d_v).copy(),
                proprio=flat[:, 3 * d_v:3 * d_v + d_p].copy(),
                actions=flat[:, 3 * d_v + d_p:].copy()))
        if f.read(1):
            raise FormatError("trailing bytes after last trajectory")
    return out


# ------------------------------------------------------------ windows

def sample_window(trajectory: Trajectory, T: int, rng: np.random.Generator) -> ContextWindow:
    """Uniformly random contiguous window of T steps."""
    n = len(trajectory)
    if T < 1 or T > n:
        raise FormatError(f"window of {T} steps from a {n}-step trajectory")
    offset = int(rng.integers(0, n - T + 1))
    return ContextWindow(
        views=trajectory.views[offset:offset + T],
        proprio=trajectory.proprio[offset:offset + T],
        actions=trajectory.actions[offset:offset + T],
        offset=offset, task=trajectory.task, seed=trajectory.seed)


def cold_start_window(trajectory: Trajectory, T: int, pad: int) -> ContextWindow:
    """Episode-start window with `pad` fabricated slots, mirroring the
    rollout history buffer exactly: the first observation is repeated
    into the padded slots, padded actions are zero (they get masked),
    and the last slot's action is zero because it is the one being
    predicted. offset is 0 by construction."""
    n = len(trajectory)
    if not 1 <= pad < T:
        raise FormatError(f"cold pad must lie in [1, {T}), got {pad}")
    take = T - pad
    if take > n:
        raise FormatError(f"window of {take} real steps from a {n}-step trajectory")
    views = np.empty((T,) + trajectory.views.shape[1:], dtype=np.float32)
    proprio = np.empty((T,) + trajectory.proprio.shape[1:], dtype=np.float32)
    actions = np.zeros((T,) + trajectory.actions.shape[1:], dtype=np.float32)
    views[:pad] = trajectory.views[0]
    proprio[:pad] = trajectory.proprio[0]
    views[pad:] = trajectory.views[:take]
    proprio[pad:] = trajectory.proprio[:take]
    if take > 1:
        actions[pad:T - 1] = trajectory.actions[:take - 1]
    return ContextWindow(views=views, proprio=proprio, actions=actions,
                         offset=0, task=trajectory.task, seed=trajectory.seed)


def window_at(trajectory: Trajectory, offset: int, T: int) -> ContextWindow:
    n = len(trajectory)
    if offset < 0 or offset + T > n:
        raise FormatError(f"window [{offset}, {offset + T}) out of range for {n} steps")
    return ContextWindow(
        views=trajectory.views[offset:offset + T],
        proprio=trajectory.proprio[offset:offset + T],
        actions=trajectory.actions[offset:offset + T],
        offset=offset, task=trajectory.task, seed=trajectory.seed)
