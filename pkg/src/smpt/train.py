"""Masked pre-training and behavior-cloning transfer.

Pre-training minimizes the masked-token MSE over windows sampled from
a trajectory dataset: every epoch draws one fresh window and one fresh
mask per trajectory, shuffles, and chunks into batches. The learning
rate warms up linearly from zero, then decays to zero on a cosine.

Transfer trains the H-step action head by behavior cloning on expert
demos, with three modes: full fine-tuning (everything except the
unused reconstruction heads), partial fine-tuning (the top-k blocks
plus final norm plus action head), and linear probing (action head
only). The from-scratch baseline is full fine-tuning from random
initialization. All loops are deterministic given their seeds; loss,
learning rate, and gradient norm stream to an append-only CSV.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import ContextWindow, Trajectory, cold_start_window, sample_window
from .errors import ConfigError, NumericsError, TrainingDiverged
from .masking import sample_mask_from_range
from .model import (
    ModelConfig,
    action_forward,
    action_loss,
    encode_sequence,
    init_params,
    masked_mse,
    reconstruct,
    save_model,
    transfer_mask,
    transformer_forward,
)
from .optim import AdamW, clip_grads, grad_global_norm
from .tensor import Tape, Tensor
from .utils import ensure_dir, make_rng


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    warmup_epochs: int = 50
    lr: float = 4e-4
    weight_decay: float = 0.01
    strategy: str = "token"
    ratio_range: Tuple[float, float] = (0.7, 0.9)
    seed: int = 0
    grad_clip: float = 0.0           # 0 disables clipping
    checkpoint_every: int = 0        # epochs; 0 = final checkpoint only
    masked_context: bool = False     # mask-augmented fine-tuning inputs
    cold_fraction: float = 0.25      # transfer windows drawn as episode starts

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.cold_fraction <= 1.0:
            raise ConfigError("cold_fraction must lie in [0, 1]")


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0, cosine decay to 0 afterwards."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class MetricsWriter:
    """Append-only training log; epoch wall time on epoch-final rows."""

    HEADER = "step,epoch,loss,lr,grad_norm,epoch_seconds"

    def __init__(self, path):
        self.path = path
        self._f = open(path, "w") if path else None
        if self._f:
            self._f.write(self.HEADER + "\n")

    def log(self, step, epoch, loss, lr, grad_norm, epoch_seconds=None):
        if not self._f:
            return
        tail = f"{epoch_seconds:.3f}" if epoch_seconds is not None else ""
        self._f.write(f"{step},{epoch},{loss:.8f},{lr:.8f},{grad_norm:.6f},{tail}\n")
        self._f.flush()

    def close(self):
        if self._f:
            self._f.close()
            self._f = None


# ------------------------------------------------------------ batching

def _usable(trajectories: Sequence[Trajectory], T: int) -> List[Trajectory]:
    usable = [t for t in trajectories if len(t) >= T]
    if not usable:
        raise ConfigError(f"no trajectory long enough for context T={T}")
    return usable


def _stack_windows(windows: Sequence[ContextWindow]):
    views = np.stack([w.views for w in windows])
    proprio = np.stack([w.proprio for w in windows])
    actions = np.stack([w.actions for w in windows])
    return views, proprio, actions


def _pretrain_targets(views, proprio, actions) -> Dict[str, np.ndarray]:
    return {"view1": views[:, :, 0], "view2": views[:, :, 1],
            "view3": views[:, :, 2], "proprio": proprio, "action": actions}


def bc_targets(traj: Trajectory, offset: int, T: int, H: int):
    """Action targets a_t..a_{t+H-1} for a window ending at step t,
    zero-padded past the trajectory end with a validity mask."""
    start = offset + T - 1
    avail = len(traj) - start
    k = min(H, avail)
    target = np.zeros((H, traj.actions.shape[1]), dtype=np.float32)
    validity = np.zeros(H, dtype=np.float32)
    target[:k] = traj.actions[start:start + k]
    validity[:k] = 1.0
    return target, validity


# ------------------------------------------------------- transfer modes

def parse_mode(mode: str) -> Tuple[str, int]:
    """'full' | 'partial:<k>' | 'probe' -> (kind, k)."""
    if mode == "full":
        return "full", -1
    if mode == "probe":
        return "probe", 0
    if mode.startswith("partial:"):
        try:
            k = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad transfer mode '{mode}'") from None
        if k < 0:
            raise ConfigError(f"partial:{k}: block count must be >= 0")
        return "partial", k
    raise ConfigError(f"unknown transfer mode '{mode}' "
                      "(expected full, partial:<k>, or probe)")


def trainable_names(params: Dict[str, Tensor], mode: str,
                    model_config: ModelConfig) -> List[str]:
    """Parameters updated in the given transfer mode.

    full: everything except the (unused) reconstruction heads.
    partial:k: top-k blocks counted from the output, final norm, action
    head; encoders, mask tokens, positional table stay frozen.
    probe: action head only (equivalent to partial:0).
    """
    kind, k = parse_mode(mode)
    names: List[str] = []
    n = model_config.blocks
    if kind == "partial" and k > n:
        raise ConfigError(f"partial:{k} exceeds the {n} blocks of this model")
    for name in params:
        if name.startswith("meta.") or name.startswith("recon."):
            continue
        if name.startswith("head.action"):
            names.append(name)
            continue
        if kind == "full":
            names.append(name)
            continue
        if kind == "partial" and k > 0:
            if name.startswith("ln_f."):
                names.append(name)
                continue
            if name.startswith("blocks."):
                idx = int(name.split(".")[1])
                if idx >= n - k:
                    names.append(name)
    return names


def pretrain_trainable(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """Everything the masked objective reaches (no action head)."""
    return {k: v for k, v in params.items()
            if v.requires_grad and not k.startswith("head.action")}


# ------------------------------------------------------------ pretrain

def pretrain(trajectories: Sequence[Trajectory], model_config: ModelConfig,
             train_config: TrainConfig, out_checkpoint=None,
             metrics_path=None, checkpoints_dir=None,
             init_seed: Optional[int] = None) -> Tuple[Dict[str, Tensor], float]:
    """Masked pre-training; returns (params, final epoch mean loss)."""
    tc, mc = train_config, model_config
    trajs = _usable(trajectories, mc.context)
    params = init_params(mc, seed=tc.seed if init_seed is None else init_seed)
    opt = AdamW(pretrain_trainable(params), lr=tc.lr, weight_decay=tc.weight_decay)
    n = len(trajs)
    steps_per_epoch = max(1, math.ceil(n / tc.batch_size))
    total_steps = tc.epochs * steps_per_epoch
    warmup_steps = tc.warmup_epochs * steps_per_epoch
    layout = mc.layout()
    writer = MetricsWriter(metrics_path)
    if checkpoints_dir:
        ensure_dir(checkpoints_dir)

    step = 0
    epoch_loss = 0.0
    try:
        for epoch in range(tc.epochs):
            t_epoch = time.perf_counter()
            order = make_rng("pretrain", tc.seed, "order", epoch).permutation(n)
            losses = []
            for lo in range(0, n, tc.batch_size):
                idxs = order[lo:lo + tc.batch_size]
                windows, masks = [], []
                for i in idxs:
                    wrng = make_rng("pretrain", tc.seed, "window", epoch, int(i))
                    windows.append(sample_window(trajs[i], mc.context, wrng))
                    mrng = make_rng("pretrain", tc.seed, "mask", epoch, int(i))
                    spec = sample_mask_from_range(layout, tc.strategy,
                                                  tc.ratio_range, mrng)
                    masks.append(spec.mask_bool(layout.length))
                views, proprio, actions = _stack_windows(windows)
                mask = np.stack(masks)
                lr = lr_at(step, total_steps, warmup_steps, tc.lr)
                opt.zero_grad()
                with Tape() as tape:
                    try:
                        tokens = encode_sequence(views, proprio, actions,
                                                 mask, params, mc)
                        hidden = transformer_forward(tokens, params, mc)
                        preds = reconstruct(hidden, params, mc)
                        loss, _ = masked_mse(
                            preds, _pretrain_targets(views, proprio, actions),
                            mask, mc, params)
                        loss_val = loss.item()
                    except NumericsError:
                        loss_val = math.nan
                    if not math.isfinite(loss_val):
                        _abort_diverged(params, checkpoints_dir, step)
                    tape.backward(loss)
                if tc.grad_clip > 0:
                    clip_grads(opt.params, tc.grad_clip)
                gnorm = grad_global_norm(opt.params)
                opt.step(lr=lr)
                losses.append(loss_val)
                step += 1
                writer.log(step, epoch, loss_val, lr, gnorm,
                           epoch_seconds=(time.perf_counter() - t_epoch
                                          if lo + tc.batch_size >= n else None))
            epoch_loss = float(np.mean(losses))
            if (tc.checkpoint_every and checkpoints_dir
                    and (epoch + 1) % tc.checkpoint_every == 0):
                save_model(f"{checkpoints_dir}/epoch_{epoch + 1:04d}.rptc", params)
    finally:
        writer.close()
    if out_checkpoint:
        save_model(out_checkpoint, params)
    return params, epoch_loss


def _abort_diverged(params, checkpoints_dir, step):
    last_good = None
    if checkpoints_dir:
        ensure_dir(checkpoints_dir)
        last_good = f"{checkpoints_dir}/last_good.rptc"
        save_model(last_good, params)
    raise TrainingDiverged(
        f"non-finite loss at step {step}"
        + (f"; parameters before the step saved to {last_good}" if last_good else ""))


# ------------------------------------------------------------ transfer

def _clone_params(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
            for k, v in params.items()}


def finetune(params: Dict[str, Tensor], demos: Sequence[Trajectory], mode: str,
             model_config: ModelConfig, train_config: TrainConfig,
             metrics_path=None) -> Tuple[Dict[str, Tensor], float]:
    """Behavior-clone the action head (and mode's trainable set) onto
    demos. Returns a new parameter dict; the input is left untouched.
    """
    tc, mc = train_config, model_config
    if not demos:
        raise ConfigError("finetune needs at least one demo trajectory")
    bad = sum(1 for d in demos if not d.success)
    if bad:
        raise ConfigError(f"finetune expects successful demos; {bad} failed ones given")
    demos = _usable(demos, mc.context)
    params = _clone_params(params)
    names = trainable_names(params, mode, mc)
    opt = AdamW({k: params[k] for k in names}, lr=tc.lr,
                weight_decay=tc.weight_decay)

    n = len(demos)
    steps_per_epoch = max(1, math.ceil(n / tc.batch_size))
    total_steps = tc.epochs * steps_per_epoch
    warmup_steps = tc.warmup_epochs * steps_per_epoch
    layout = mc.layout()
    base_mask = transfer_mask(mc)
    writer = MetricsWriter(metrics_path)

    step = 0
    epoch_loss = 0.0
    try:
        for epoch in range(tc.epochs):
            t_epoch = time.perf_counter()
            order = make_rng("finetune", tc.seed, "order", epoch).permutation(n)
            losses = []
            for lo in range(0, n, tc.batch_size):
                idxs = order[lo:lo + tc.batch_size]
                windows, targets, valids, masks = [], [], [], []
                for i in idxs:
                    wrng = make_rng("finetune", tc.seed, "window", epoch, int(i))
                    # rollouts start with a padded history; train on that
                    # distribution too or the first T-1 ticks of every
                    # episode are out of distribution
                    pad = 0
                    if (tc.cold_fraction > 0.0 and mc.context > 1
                            and wrng.random() < tc.cold_fraction):
                        pad = int(wrng.integers(1, mc.context))
                        w = cold_start_window(demos[i], mc.context, pad)
                    else:
                        w = sample_window(demos[i], mc.context, wrng)
                    windows.append(w)
                    tgt, val = bc_targets(demos[i], w.offset - pad,
                                          mc.context, mc.horizon)
                    targets.append(tgt)
                    valids.append(val)
                    mask_i = transfer_mask(mc, cold_pad=pad) if pad else base_mask
                    if tc.masked_context:
                        mrng = make_rng("finetune", tc.seed, "mask", epoch, int(i))
                        extra = sample_mask_from_range(layout, tc.strategy,
                                                       tc.ratio_range, mrng)
                        masks.append(mask_i | extra.mask_bool(layout.length))
                    else:
                        masks.append(mask_i)
                views, proprio, actions = _stack_windows(windows)
                mask = np.stack(masks)
                lr = lr_at(step, total_steps, warmup_steps, tc.lr)
                opt.zero_grad()
                with Tape() as tape:
                    try:
                        pred = action_forward(views, proprio, actions, mask,
                                              params, mc)
                        loss = action_loss(pred, np.stack(targets),
                                           np.stack(valids), params)
                        loss_val = loss.item()
                    except NumericsError:
                        loss_val = math.nan
                    if not math.isfinite(loss_val):
                        _abort_diverged(params, None, step)
                    tape.backward(loss)
                if tc.grad_clip > 0:
                    clip_grads(opt.params, tc.grad_clip)
                gnorm = grad_global_norm(opt.params)
                opt.step(lr=lr)
                losses.append(loss_val)
                step += 1
                writer.log(step, epoch, loss_val, lr, gnorm,
                           epoch_seconds=(time.perf_counter() - t_epoch
                                          if lo + tc.batch_size >= n else None))
            epoch_loss = float(np.mean(losses))
    finally:
        writer.close()
    return params, epoch_loss


def train_from_scratch(demos: Sequence[Trajectory], model_config: ModelConfig,
                       train_config: TrainConfig, metrics_path=None,
                       init_seed: Optional[int] = None) -> Tuple[Dict[str, Tensor], float]:
    """Full-mode behavior cloning from random initialization."""
    seed = train_config.seed if init_seed is None else init_seed
    params = init_params(model_config, seed=seed)
    return finetune(params, demos, "full", model_config, train_config,
                    metrics_path=metrics_path)


# ------------------------------------------------------------- overfit

def overfit(windows: Sequence[ContextWindow], masks: np.ndarray,
            model_config: ModelConfig, steps: int = 2000, lr: float = 4e-4,
            seed: int = 0) -> List[float]:
    """Drive the masked objective into the floor on a fixed tiny batch.

    Fixed windows, fixed realized masks, constant data; returns the
    per-step loss curve. Capacity check: the default model should reach
    loss < 1e-3 well within 2,000 steps.
    """
    mc = model_config
    params = init_params(mc, seed=seed)
    opt = AdamW(pretrain_trainable(params), lr=lr, weight_decay=0.0)
    views, proprio, actions = _stack_windows(windows)
    targets = _pretrain_targets(views, proprio, actions)
    curve: List[float] = []
    warmup = 100
    for step in range(steps):
        opt.zero_grad()
        with Tape() as tape:
            tokens = encode_sequence(views, proprio, actions, masks, params, mc)
            hidden = transformer_forward(tokens, params, mc)
            preds = reconstruct(hidden, params, mc)
            loss, _ = masked_mse(preds, targets, masks, mc, params)
            tape.backward(loss)
        opt.step(lr=lr * min(1.0, (step + 1) / warmup))
        curve.append(loss.item())
        if curve[-1] < 1e-4:
            break
    return curve
