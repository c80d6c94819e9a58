"""Closed-loop evaluation in the toy simulator.

A policy is queried once per tick with the current observation (three
view latents plus proprioception) and the live environment. The model
policy keeps a rolling context window, predicts a horizon of actions,
and executes `execute_k` of them open-loop before replanning; the
oracle policy replays the scripted expert; the random policy samples
uniform actions. Every episode records a trace that can be re-simulated
step for step, and the evaluator writes deterministic report files with
wall-clock timing kept in a separate sidecar.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import Trajectory, write_dataset
from .errors import ConfigError, SceneError
from .model import ModelConfig, action_forward, init_params, transfer_mask
from .sim import EnvConfig, EnvState, ScriptedPolicy, ToyEnv, verify_success
from .utils import ensure_dir, make_rng
from .vision import ViewEncoder, default_encoder, render_all_views


# ------------------------------------------------------- history buffer

class HistoryBuffer:
    """Rolling context for the model policy.

    Holds the last T observations and the actions taken at them. Until
    T real steps exist the window is left-padded by repeating the first
    observation with zero actions, and those fabricated action tokens
    are masked out, as is the current step's (not yet chosen) action.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.reset()

    def reset(self):
        self._views: List[np.ndarray] = []
        self._proprio: List[np.ndarray] = []
        self._actions: List[np.ndarray] = []

    def observe(self, view_latents: np.ndarray, proprio: np.ndarray):
        if len(self._views) != len(self._actions):
            raise ConfigError("observe() called twice without record_action()")
        self._views.append(np.asarray(view_latents, dtype=np.float32))
        self._proprio.append(np.asarray(proprio, dtype=np.float32))

    def record_action(self, action: np.ndarray):
        if len(self._views) != len(self._actions) + 1:
            raise ConfigError("record_action() without a pending observation")
        self._actions.append(np.asarray(action, dtype=np.float32))

    def window(self):
        """(views, proprio, actions, mask) for the current decision."""
        cfg = self.config
        T = cfg.context
        n = len(self._views)
        if n == 0 or n != len(self._actions) + 1:
            raise ConfigError("window() needs a pending observation")
        pad = max(0, T - n)
        take = min(n, T)
        views = np.empty((T, 3, cfg.d_v), dtype=np.float32)
        proprio = np.empty((T, cfg.d_p), dtype=np.float32)
        actions = np.zeros((T, cfg.d_a), dtype=np.float32)
        views[:pad] = self._views[0]
        proprio[:pad] = self._proprio[0]
        views[pad:] = np.stack(self._views[-take:])
        proprio[pad:] = np.stack(self._proprio[-take:])
        # actions of fully played-out steps are known; the last slot is
        # the current step, whose action is being predicted
        past = self._actions[-(take - 1):] if take > 1 else []
        if past:
            actions[pad:T - 1] = np.stack(past)
        return views, proprio, actions, transfer_mask(cfg, cold_pad=pad)


# -------------------------------------------------------------- policies

class ModelPolicy:
    """Autoregressive controller around a trained action head.

    Predicts H actions per model call and executes the first
    `execute_k` before replanning; k=1 replans every tick, k=H runs the
    whole horizon open-loop. `last_decision_seconds` holds the forward
    time of the most recent call, or None on ticks served from the plan.
    """

    def __init__(self, params, config: ModelConfig,
                 execute_k: Optional[int] = None):
        self.params = params
        self.config = config
        self.execute_k = config.horizon if execute_k is None else int(execute_k)
        if not 1 <= self.execute_k <= config.horizon:
            raise ConfigError(
                f"execute_k must lie in [1, {config.horizon}], got {self.execute_k}")
        self.buffer = HistoryBuffer(config)
        self._queue: List[np.ndarray] = []
        self.last_decision_seconds: Optional[float] = None
        self.decisions = 0
        self.done = False

    def reset(self, task: str, seed: int, env: ToyEnv):
        self.buffer.reset()
        self._queue = []
        self.last_decision_seconds = None
        self.decisions = 0

    def act(self, obs, env: ToyEnv) -> np.ndarray:
        latents, proprio = obs
        self.buffer.observe(latents, proprio)
        self.last_decision_seconds = None
        if not self._queue:
            t0 = time.perf_counter()
            views, prop, actions, mask = self.buffer.window()
            pred = action_forward(views[None], prop[None], actions[None],
                                  mask, self.params, self.config)
            self.last_decision_seconds = time.perf_counter() - t0
            self.decisions += 1
            plan = np.asarray(pred.data[0], dtype=np.float32)
            self._queue = [plan[i] for i in range(self.execute_k)]
        action = self._queue.pop(0)
        self.buffer.record_action(action)
        return action


class OraclePolicy:
    """The scripted expert, wrapped in the policy interface."""

    def __init__(self):
        self._script: Optional[ScriptedPolicy] = None
        self.last_decision_seconds: Optional[float] = None
        self.decisions = 0

    @property
    def done(self) -> bool:
        return self._script.done if self._script else False

    def reset(self, task: str, seed: int, env: ToyEnv):
        self._script = ScriptedPolicy(env, task, seed)

    def act(self, obs, env: ToyEnv) -> np.ndarray:
        return self._script.action(env)


class RandomPolicy:
    """Uniform actions inside the joint and gripper bounds."""

    def __init__(self):
        self._rng = None
        self._cfg: Optional[EnvConfig] = None
        self.last_decision_seconds: Optional[float] = None
        self.decisions = 0
        self.done = False

    def reset(self, task: str, seed: int, env: ToyEnv):
        self._rng = make_rng("random-policy", task, int(seed))
        self._cfg = env.cfg

    def act(self, obs, env: ToyEnv) -> np.ndarray:
        lo = np.asarray(self._cfg.joint_lo)
        hi = np.asarray(self._cfg.joint_hi)
        joints = self._rng.uniform(lo, hi)
        grip = self._rng.uniform(0.0, 1.0)
        return np.concatenate([joints, [grip]]).astype(np.float32)


# -------------------------------------------------------------- rollout

@dataclass
class EpisodeResult:
    task: str
    seed: int
    success: bool
    steps: int
    decisions: int
    nonfinite_abort: bool
    trace: Trajectory
    final_state: EnvState
    decision_seconds: List[float] = field(default_factory=list)


def rollout(policy, task: str, seed: int, env_config: Optional[EnvConfig] = None,
            encoder: Optional[ViewEncoder] = None,
            max_steps: Optional[int] = None) -> EpisodeResult:
    """One closed-loop episode; stops at success, policy completion,
    a non-finite action, or the step limit."""
    cfg = env_config or EnvConfig()
    enc = encoder or default_encoder()
    env = ToyEnv(cfg)
    env.reset(task, seed)
    policy.reset(task, seed, env)
    limit = cfg.max_steps if max_steps is None else int(max_steps)

    views, proprio, actions, decision_s = [], [], [], []
    success = False
    aborted = False
    for _ in range(limit):
        t0 = time.perf_counter()
        latents = enc.encode_state(env.state, cfg)
        prop = np.concatenate([env.state.joints, [env.state.grip]]).astype(np.float32)
        encode_seconds = time.perf_counter() - t0
        action = np.asarray(policy.act((latents, prop), env), dtype=np.float32)
        if policy.last_decision_seconds is not None:
            decision_s.append(encode_seconds + policy.last_decision_seconds)
        views.append(latents)
        proprio.append(prop)
        actions.append(action)
        if not np.isfinite(action).all():
            aborted = True
            break
        env.step(action)
        if verify_success(task, env.state, cfg):
            success = True
            break
        if getattr(policy, "done", False):
            break

    trace = Trajectory(task=task, seed=int(seed), success=success,
                       views=np.stack(views), proprio=np.stack(proprio),
                       actions=np.stack(actions))
    return EpisodeResult(task=task, seed=int(seed), success=success,
                         steps=len(actions), decisions=getattr(policy, "decisions", 0),
                         nonfinite_abort=aborted, trace=trace,
                         final_state=env.state, decision_seconds=decision_s)


def replay(trace: Trajectory, env_config: Optional[EnvConfig] = None):
    """Re-simulate a recorded episode; returns (success, final state).

    The simulator is deterministic in (task, seed, action sequence), so
    ending early on success must land in exactly the recorded state.
    """
    cfg = env_config or EnvConfig()
    env = ToyEnv(cfg)
    env.reset(trace.task, trace.seed)
    success = False
    for i in range(len(trace)):
        if not np.isfinite(trace.actions[i]).all():
            break
        env.step(trace.actions[i])
        if verify_success(trace.task, env.state, cfg):
            success = True
            break
    return success, env.state


# ------------------------------------------------------------- evaluate

@dataclass
class EvalReport:
    task: str
    seeds: Tuple[int, ...]
    successes: Tuple[bool, ...]
    steps: Tuple[int, ...]
    decisions: Tuple[int, ...]
    fingerprint: str = ""
    latency_mean_s: float = 0.0
    latency_p95_s: float = 0.0

    @property
    def episodes(self) -> int:
        return len(self.seeds)

    @property
    def success_rate(self) -> float:
        return sum(self.successes) / len(self.seeds) if self.seeds else 0.0

    @property
    def mean_steps(self) -> float:
        return float(np.mean(self.steps)) if self.steps else 0.0


def evaluate(policy, task: str, episodes: int, base_seed: int = 0,
             env_config: Optional[EnvConfig] = None,
             encoder: Optional[ViewEncoder] = None,
             max_steps: Optional[int] = None, fingerprint: str = "",
             traces_path=None) -> Tuple[EvalReport, List[EpisodeResult]]:
    """Run `episodes` rollouts on consecutive feasible seeds."""
    if episodes < 1:
        raise ConfigError("evaluate needs at least one episode")
    cfg = env_config or EnvConfig()
    enc = encoder or default_encoder()
    results: List[EpisodeResult] = []
    seed = int(base_seed)
    attempts = 0
    while len(results) < episodes:
        if attempts > 10 * episodes + 100:
            raise SceneError(f"too many infeasible scenes for task '{task}'")
        attempts += 1
        try:
            results.append(rollout(policy, task, seed, cfg, enc, max_steps))
        except SceneError:
            pass
        seed += 1
    all_lat = [s for r in results for s in r.decision_seconds]
    report = EvalReport(
        task=task,
        seeds=tuple(r.seed for r in results),
        successes=tuple(r.success for r in results),
        steps=tuple(r.steps for r in results),
        decisions=tuple(r.decisions for r in results),
        fingerprint=fingerprint,
        latency_mean_s=float(np.mean(all_lat)) if all_lat else 0.0,
        latency_p95_s=float(np.percentile(all_lat, 95)) if all_lat else 0.0)
    if traces_path:
        write_dataset([r.trace for r in results], traces_path)
    return report, results


def write_eval_report(report: EvalReport, out_dir) -> None:
    """report.csv and episodes.csv are deterministic; wall-clock timing
    goes to the timing.csv sidecar only."""
    out = ensure_dir(out_dir)
    with open(out / "report.csv", "w") as f:
        f.write("task,episodes,successes,success_rate,mean_steps,fingerprint\n")
        f.write(f"{report.task},{report.episodes},{sum(report.successes)},"
                f"{report.success_rate:.6f},{report.mean_steps:.4f},"
                f"{report.fingerprint}\n")
    with open(out / "episodes.csv", "w") as f:
        f.write("seed,success,steps,decisions\n")
        for i in range(report.episodes):
            f.write(f"{report.seeds[i]},{int(report.successes[i])},"
                    f"{report.steps[i]},{report.decisions[i]}\n")
    with open(out / "timing.csv", "w") as f:
        f.write("metric,value\n")
        f.write(f"latency_mean_s,{report.latency_mean_s:.6f}\n")
        f.write(f"latency_p95_s,{report.latency_p95_s:.6f}\n")


# ---------------------------------------------------------------- bench

def hardware_fingerprint() -> str:
    return (f"{platform.machine()}/{platform.system()}"
            f"/python{platform.python_version()}/numpy{np.__version__}")


def bench_latency(config: ModelConfig, contexts: Sequence[int] = (1, 16),
                  calls: int = 50, warmup: int = 5, seed: int = 0) -> List[dict]:
    """Per-decision latency (view encoding + model forward + action
    head) at each context length, on freshly initialized weights."""
    if calls < 1:
        raise ConfigError("bench needs at least one call")
    env_cfg = EnvConfig()
    env = ToyEnv(env_cfg)
    env.reset("pick", seed)
    renders = render_all_views(env.state, env_cfg)
    prop = np.concatenate([env.state.joints, [env.state.grip]]).astype(np.float32)
    enc = default_encoder(config.d_v)
    rows = []
    for T in contexts:
        cfg = replace(config, context=int(T))
        params = init_params(cfg, seed=seed)
        mask = transfer_mask(cfg)
        actions = np.zeros((cfg.context, cfg.d_a), dtype=np.float32)
        samples = []
        for i in range(warmup + calls):
            t0 = time.perf_counter()
            latents = enc.encode_views(renders)
            views = np.broadcast_to(latents, (cfg.context, 3, cfg.d_v))
            proprio = np.broadcast_to(prop, (cfg.context, cfg.d_p))
            action_forward(np.ascontiguousarray(views)[None],
                           np.ascontiguousarray(proprio)[None],
                           actions[None], mask, params, cfg)
            if i >= warmup:
                samples.append(time.perf_counter() - t0)
        arr = np.asarray(samples)
        rows.append({
            "context": int(T),
            "calls": int(calls),
            "mean_ms": float(arr.mean() * 1e3),
            "p50_ms": float(np.percentile(arr, 50) * 1e3),
            "p95_ms": float(np.percentile(arr, 95) * 1e3),
            "max_ms": float(arr.max() * 1e3),
            "fingerprint": hardware_fingerprint(),
        })
    return rows
