"""Sensorimotor sequence model over interleaved tokens.

Each timestep contributes five tokens (three view latents, proprio,
action), linearly encoded into a shared width. Masked positions are
replaced by a learned per-modality mask token, then every token gets
the positional embedding of its timestep (one learned vector per step,
shared across the step's five tokens). A pre-norm bidirectional
Transformer produces hidden states; linear heads decode each token
back to its native dimension for the masked-MSE objective, and a
separate action head reads the last action token to predict the next
H actions for behavior cloning.

Parameter names are stable and flat (enc.view1.weight, mask.proprio,
pos.table, blocks.2.attn.qkv.weight, ln_f.weight, recon.action.bias,
head.action.weight) so checkpoints, transfer-mode freezing, and the
finite-difference checker can all address tensors by name. The scalar
`meta.heads` rides along in checkpoints so the architecture can be
rebuilt from shapes alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, MaskingError, NumericsError, ShapeError
from .masking import MODALITIES, TOKENS_PER_STEP, MaskSpec, TokenLayout
from .tensor import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    multiply,
    reshape,
    slice_,
    softmax,
    sum_,
    transpose,
    trunc_normal,
)
from .utils import make_rng

_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 192
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    context: int = 16
    d_v: int = 64
    d_p: int = 4
    d_a: int = 4
    horizon: int = 16
    loss_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden width {self.hidden} not divisible by {self.heads} heads")
        for name in ("hidden", "blocks", "heads", "mlp_ratio", "context",
                     "d_v", "d_p", "d_a", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config field {name} must be positive")
        if len(self.loss_weights) != TOKENS_PER_STEP:
            raise ConfigError("need one loss weight per modality stream")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss weights must be non-negative")

    @property
    def modality_dims(self) -> Dict[str, int]:
        return {"view1": self.d_v, "view2": self.d_v, "view3": self.d_v,
                "proprio": self.d_p, "action": self.d_a}

    def layout(self) -> TokenLayout:
        return TokenLayout(timesteps=self.context)


# --------------------------------------------------------------- params

def init_params(config: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Fresh parameters in a fixed, checkpoint-stable order."""
    rng = make_rng("model-init", int(seed))
    d = config.hidden
    p: Dict[str, Tensor] = {}

    def weight(name, shape):
        p[name] = Tensor(trunc_normal(shape, _INIT_STD, rng), requires_grad=True)

    def zeros(name, shape):
        p[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(name, shape):
        p[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    for m in MODALITIES:
        weight(f"enc.{m}.weight", (config.modality_dims[m], d))
        zeros(f"enc.{m}.bias", (d,))
    for m in MODALITIES:
        weight(f"mask.{m}", (d,))
    weight("pos.table", (config.context, d))
    for i in range(config.blocks):
        b = f"blocks.{i}"
        ones(f"{b}.ln1.weight", (d,))
        zeros(f"{b}.ln1.bias", (d,))
        weight(f"{b}.attn.qkv.weight", (d, 3 * d))
        zeros(f"{b}.attn.qkv.bias", (3 * d,))
        weight(f"{b}.attn.proj.weight", (d, d))
        zeros(f"{b}.attn.proj.bias", (d,))
        ones(f"{b}.ln2.weight", (d,))
        zeros(f"{b}.ln2.bias", (d,))
        weight(f"{b}.mlp.fc1.weight", (d, config.mlp_ratio * d))
        zeros(f"{b}.mlp.fc1.bias", (config.mlp_ratio * d,))
        weight(f"{b}.mlp.fc2.weight", (config.mlp_ratio * d, d))
        zeros(f"{b}.mlp.fc2.bias", (d,))
    ones("ln_f.weight", (d,))
    zeros("ln_f.bias", (d,))
    for m in MODALITIES:
        weight(f"recon.{m}.weight", (d, config.modality_dims[m]))
        zeros(f"recon.{m}.bias", (config.modality_dims[m],))
    weight("head.action.weight", (d, config.horizon * config.d_a))
    zeros("head.action.bias", (config.horizon * config.d_a,))
    p["meta.heads"] = Tensor(np.asarray(float(config.heads), dtype=np.float32))
    return p


def config_from_params(params: Dict[str, Tensor],
                       loss_weights: Optional[Tuple[float, ...]] = None) -> ModelConfig:
    """Rebuild the architecture from parameter shapes."""
    d = params["enc.view1.weight"].shape[1]
    n = 1 + max(int(k.split(".")[1]) for k in params if k.startswith("blocks."))
    d_a = params["enc.action.weight"].shape[0]
    return ModelConfig(
        hidden=d,
        blocks=n,
        heads=int(params["meta.heads"].data),
        mlp_ratio=params["blocks.0.mlp.fc1.weight"].shape[1] // d,
        context=params["pos.table"].shape[0],
        d_v=params["enc.view1.weight"].shape[0],
        d_p=params["enc.proprio.weight"].shape[0],
        d_a=d_a,
        horizon=params["head.action.weight"].shape[1] // d_a,
        loss_weights=tuple(loss_weights) if loss_weights else (1.0,) * 5)


def save_model(path, params: Dict[str, Tensor]) -> None:
    from .checkpoint import save_tensors
    save_tensors(path, {k: v.data for k, v in params.items()})


def load_model(path) -> Tuple[Dict[str, Tensor], ModelConfig]:
    from .checkpoint import load_tensors
    arrays = load_tensors(path)
    params = {k: Tensor(v, requires_grad=not k.startswith("meta."))
              for k, v in arrays.items()}
    return params, config_from_params(params)


def _dtype(params: Dict[str, Tensor]):
    return params["pos.table"].dtype


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def _ln(x: Tensor, params, prefix: str) -> Tensor:
    return add(multiply(layer_norm(x), params[f"{prefix}.weight"]),
               params[f"{prefix}.bias"])


# --------------------------------------------------------------- encode

def _as_batch(arr, name: str, want_ndim: int) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == want_ndim - 1:
        a = a[None]
    if a.ndim != want_ndim:
        raise ShapeError(f"{name}: expected {want_ndim}D batch, got shape {a.shape}")
    return a


def encode_sequence(views, proprio, actions, mask_bool, params,
                    config: ModelConfig) -> Tensor:
    """Token matrix (B, 5T, d): encode, substitute mask tokens, add pos.

    `views` is (B, T, 3, D_v); `proprio` (B, T, D_p); `actions`
    (B, T, D_a); `mask_bool` (B, 5T) or (5T,) marks masked positions.
    Masked inputs never reach the output: their encoder term is zeroed
    and the modality's mask token substituted before positions are
    added, so the result is independent of masked-out content.
    """
    dt = _dtype(params)
    T, d = config.context, config.hidden
    views = _as_batch(views, "views", 4)
    proprio = _as_batch(proprio, "proprio", 3)
    actions = _as_batch(actions, "actions", 3)
    B = views.shape[0]
    if views.shape[1:] != (T, 3, config.d_v):
        raise ShapeError(f"views: expected {(B, T, 3, config.d_v)}, got {views.shape}")
    if proprio.shape != (B, T, config.d_p):
        raise ShapeError(f"proprio: expected {(B, T, config.d_p)}, got {proprio.shape}")
    if actions.shape != (B, T, config.d_a):
        raise ShapeError(f"actions: expected {(B, T, config.d_a)}, got {actions.shape}")
    L = TOKENS_PER_STEP * T
    mb = np.asarray(mask_bool, dtype=bool)
    if mb.ndim == 1 and mb.shape[0] == L:
        mb = np.broadcast_to(mb, (B, L))
    if mb.shape != (B, L):
        raise ShapeError(f"mask: expected {(B, L)}, got {mb.shape}")

    streams = [views[:, :, 0], views[:, :, 1], views[:, :, 2], proprio, actions]
    encoded = [
        _linear(Tensor(np.ascontiguousarray(s, dtype=dt)), params, f"enc.{m}")
        for s, m in zip(streams, MODALITIES)]
    tokens = reshape(concat(encoded, axis=-1), (B, L, d))

    mask_rows = concat([reshape(params[f"mask.{m}"], (1, d)) for m in MODALITIES],
                       axis=0)
    mask_rows = concat([mask_rows] * T, axis=0)  # (L, d), step-major
    keep = Tensor((~mb).astype(dt).reshape(B, L, 1))
    drop = Tensor(mb.astype(dt).reshape(B, L, 1))
    tokens = add(multiply(tokens, keep), multiply(mask_rows, drop))

    pos = reshape(params["pos.table"], (T, 1, d))
    pos = reshape(concat([pos] * TOKENS_PER_STEP, axis=1), (L, d))
    return add(tokens, pos)


# ------------------------------------------------------------ transformer

def _attention(xn: Tensor, params, prefix: str, config: ModelConfig) -> Tensor:
    B, L, d = xn.shape
    h = config.heads
    dh = d // h
    qkv = _linear(xn, params, f"{prefix}.qkv")
    parts = []
    for j in range(3):
        part = slice_(qkv, (slice(None), slice(None), slice(j * d, (j + 1) * d)))
        part = transpose(reshape(part, (B, L, h, dh)), (0, 2, 1, 3))
        parts.append(part)
    q, k, v = parts
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(dh))
    out = matmul(softmax(scores), v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (B, L, d))
    return _linear(out, params, f"{prefix}.proj")


def transformer_forward(tokens: Tensor, params, config: ModelConfig) -> Tensor:
    """Pre-norm bidirectional encoder; hidden states after a final norm.

    Attention is always bidirectional; the causal masking variant only
    changes which tokens are masked, never the attention pattern.
    """
    if not np.isfinite(tokens.data).all():
        raise NumericsError("non-finite values in input tokens")
    x = tokens
    for i in range(config.blocks):
        b = f"blocks.{i}"
        x = add(x, _attention(_ln(x, params, f"{b}.ln1"), params, f"{b}.attn", config))
        mid = gelu(_linear(_ln(x, params, f"{b}.ln2"), params, f"{b}.mlp.fc1"))
        x = add(x, _linear(mid, params, f"{b}.mlp.fc2"))
        if not np.isfinite(x.data).all():
            raise NumericsError(f"non-finite activations after block {i}")
    return _ln(x, params, "ln_f")


# ---------------------------------------------------------- reconstruction

def reconstruct(hidden: Tensor, params, config: ModelConfig) -> Dict[str, Tensor]:
    """Per-modality reconstructions, each (B, T, D_m)."""
    B, L, d = hidden.shape
    T = L // TOKENS_PER_STEP
    grid = reshape(hidden, (B, T, TOKENS_PER_STEP, d))
    out = {}
    for j, m in enumerate(MODALITIES):
        tok = reshape(slice_(grid, (slice(None), slice(None), slice(j, j + 1))),
                      (B, T, d))
        out[m] = _linear(tok, params, f"recon.{m}")
    return out


def masked_mse(preds: Dict[str, Tensor], targets: Dict[str, np.ndarray],
               mask_bool, config: ModelConfig, params) -> Tuple[Tensor, Dict[str, float]]:
    """Masked-token loss: per-modality mean over masked tokens and their
    dimensions, then a weighted sum over modalities. Unmasked positions
    contribute exactly nothing.
    """
    dt = _dtype(params)
    first = next(iter(preds.values()))
    B, T = first.shape[0], first.shape[1]
    mb = np.asarray(mask_bool, dtype=bool)
    if mb.ndim == 1:
        mb = np.broadcast_to(mb, (B, TOKENS_PER_STEP * T))
    mb = mb.reshape(B, T, TOKENS_PER_STEP)
    if not mb.any():
        raise MaskingError("masked_mse needs a non-empty mask")

    loss = None
    components: Dict[str, float] = {}
    for j, m in enumerate(MODALITIES):
        w = config.loss_weights[j]
        stream_mask = mb[:, :, j]
        n = int(stream_mask.sum())
        if n == 0 or w == 0.0:
            components[m] = 0.0
            continue
        d_m = config.modality_dims[m]
        target = Tensor(np.ascontiguousarray(targets[m], dtype=dt))
        diff = preds[m] - target
        gate = Tensor(stream_mask.astype(dt).reshape(B, T, 1))
        term = sum_(multiply(multiply(diff, diff), gate)) * (1.0 / (n * d_m))
        components[m] = float(term.data)
        weighted = term * w
        loss = weighted if loss is None else add(loss, weighted)
    return loss, components


# ------------------------------------------------------------- actions

def last_action_hidden(hidden: Tensor) -> Tensor:
    """Hidden state at the final action-token position, (B, d)."""
    B, L, d = hidden.shape
    return reshape(slice_(hidden, (slice(None), slice(L - 1, L))), (B, d))


def action_forward(views, proprio, actions, mask_bool, params,
                   config: ModelConfig) -> Tensor:
    """Transfer-mode forward: predicted next actions, (B, H, D_a).

    The mask must cover the last timestep's action token; the action
    head reads that token's hidden state and all reconstruction heads
    stay untouched.
    """
    layout = config.layout()
    mb = np.asarray(mask_bool, dtype=bool)
    last = layout.action_token(config.context - 1)
    if not np.all(mb.reshape(-1, layout.length)[:, last]):
        raise MaskingError(
            "transfer mode requires the last action token to be masked")
    tokens = encode_sequence(views, proprio, actions, mask_bool, params, config)
    hidden = transformer_forward(tokens, params, config)
    flat = add(matmul(last_action_hidden(hidden), params["head.action.weight"]),
               params["head.action.bias"])
    B = flat.shape[0]
    return reshape(flat, (B, config.horizon, config.d_a))


def predict_actions(window, params, config: ModelConfig) -> np.ndarray:
    """Single-window convenience: (H, D_a) numpy actions, standard
    transfer mask (only the last action token masked)."""
    layout = config.layout()
    mb = np.zeros(layout.length, dtype=bool)
    mb[layout.action_token(config.context - 1)] = True
    pred = action_forward(window.views[None], window.proprio[None],
                          window.actions[None], mb, params, config)
    return np.asarray(pred.data[0])


def transfer_mask(config: ModelConfig, cold_pad: int = 0) -> np.ndarray:
    """Boolean mask for transfer: last action token, plus the action
    tokens of `cold_pad` left-padded steps at a cold start."""
    layout = config.layout()
    mb = np.zeros(layout.length, dtype=bool)
    mb[layout.action_token(config.context - 1)] = True
    for t in range(min(cold_pad, config.context)):
        mb[layout.action_token(t)] = True
    return mb


def action_loss(pred: Tensor, target: np.ndarray, validity: np.ndarray,
                params) -> Tensor:
    """MSE over valid (in-horizon) action entries."""
    dt = _dtype(params)
    B, H, d_a = pred.shape
    v = np.asarray(validity, dtype=dt).reshape(B, H, 1)
    n = float(v.sum())
    if n == 0:
        raise ShapeError("action_loss: no valid targets")
    diff = pred - Tensor(np.ascontiguousarray(target, dtype=dt))
    gated = multiply(multiply(diff, diff), Tensor(v))
    return sum_(gated) * (1.0 / (n * d_a))


def count_params(params: Dict[str, Tensor]) -> int:
    return sum(int(np.prod(t.shape)) for k, t in params.items()
               if not k.startswith("meta."))
