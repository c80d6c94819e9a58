"""Flat key=value run configuration.

One registry declares every key with its type, default, and help line.
Files hold `key = value` assignments, blank lines, and # comments;
anything else is a hard error naming the offending line. A config's
canonical text lists every registry key in sorted order with stable
value formatting, and its sha256 is the run fingerprint used for
ablation bookkeeping and report stamping.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Tuple

from .errors import ConfigError
from .masking import STRATEGIES
from .model import ModelConfig
from .sim import TASKS
from .train import TrainConfig
from .utils import sha256_text

_TRANSFER_MODES = ("full", "probe")  # plus partial:<k>


@dataclass(frozen=True)
class Entry:
    kind: str       # int | float | str | bool
    default: object
    help: str


REGISTRY: Dict[str, Entry] = {
    "model.hidden": Entry("int", 192, "token width of the transformer"),
    "model.blocks": Entry("int", 4, "number of transformer blocks"),
    "model.heads": Entry("int", 4, "attention heads per block"),
    "model.mlp_ratio": Entry("int", 2, "MLP width as a multiple of hidden"),
    "model.context": Entry("int", 16, "timesteps per context window"),
    "model.d_v": Entry("int", 64, "vision latent dimension per view"),
    "model.d_p": Entry("int", 4, "proprioception dimension"),
    "model.d_a": Entry("int", 4, "action dimension"),
    "model.horizon": Entry("int", 16, "actions predicted per decision"),
    "train.epochs": Entry("int", 300, "training epochs"),
    "train.batch_size": Entry("int", 256, "windows per optimizer step"),
    "train.warmup_epochs": Entry("int", 50, "linear warmup length"),
    "train.lr": Entry("float", 4e-4, "peak learning rate"),
    "train.weight_decay": Entry("float", 0.01, "decoupled weight decay"),
    "train.strategy": Entry("str", "token", "masking strategy: "
                            + ", ".join(STRATEGIES)),
    "train.ratio_lo": Entry("float", 0.7, "lower bound of the mask ratio"),
    "train.ratio_hi": Entry("float", 0.9, "upper bound of the mask ratio"),
    "train.seed": Entry("int", 0, "training seed (init, shuffling, masks)"),
    "train.grad_clip": Entry("float", 0.0, "global grad-norm clip, 0 = off"),
    "train.checkpoint_every": Entry("int", 0, "epochs between checkpoints, "
                                    "0 = final only"),
    "train.masked_context": Entry("bool", False, "mask-augment fine-tune inputs"),
    "train.cold_fraction": Entry("float", 0.25, "transfer windows drawn as "
                                 "padded episode starts"),
    "data.task": Entry("str", "pick", "task family: " + ", ".join(TASKS)
                       + ", or all"),
    "data.count": Entry("int", 100, "trajectories to generate"),
    "data.base_seed": Entry("int", 0, "first scene seed"),
    "transfer.mode": Entry("str", "full", "full, partial:<k>, or probe"),
    "transfer.demos": Entry("int", 50, "demo trajectories for transfer"),
    "transfer.demo_seed": Entry("int", 100000, "first demo scene seed"),
    "eval.task": Entry("str", "pick", "task family to evaluate"),
    "eval.episodes": Entry("int", 16, "evaluation episodes"),
    "eval.base_seed": Entry("int", 1000, "first evaluation scene seed"),
    "eval.execute_k": Entry("int", 1, "actions executed per model call"),
    "eval.max_steps": Entry("int", 0, "episode tick limit, 0 = simulator default"),
}


def default_config() -> Dict[str, object]:
    return {k: e.default for k, e in REGISTRY.items()}


def _parse_value(key: str, raw: str, lineno: int):
    entry = REGISTRY[key]
    raw = raw.strip()
    try:
        if entry.kind == "int":
            return int(raw)
        if entry.kind == "float":
            return float(raw)
        if entry.kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if "\n" in raw or not raw:
            raise ValueError
        return raw
    except ValueError:
        raise ConfigError(
            f"line {lineno}: bad {entry.kind} value '{raw}' for key '{key}'"
        ) from None


def parse_config(text: str, source: str = "<config>") -> Dict[str, object]:
    """Parse assignments over the registry defaults. Unknown keys,
    malformed lines, bad values, and duplicates all fail loudly with
    their line numbers."""
    cfg = default_config()
    seen: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected key=value, "
                              f"got '{stripped}'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in REGISTRY:
            raise ConfigError(f"{source}: line {lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{source}: line {lineno}: duplicate key '{key}' "
                              f"(first set on line {seen[key]})")
        seen[key] = lineno
        try:
            cfg[key] = _parse_value(key, raw, lineno)
        except ConfigError as err:
            raise ConfigError(f"{source}: {err}") from None
    validate(cfg)
    return cfg


def load_config(path) -> Dict[str, object]:
    with open(path) as f:
        return parse_config(f.read(), source=str(path))


def validate(cfg: Dict[str, object]) -> None:
    unknown = set(cfg) - set(REGISTRY)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if cfg["train.strategy"] not in STRATEGIES:
        raise ConfigError(f"train.strategy must be one of {STRATEGIES}")
    if cfg["data.task"] not in TASKS + ("all",):
        raise ConfigError(f"data.task must be one of {TASKS} or all")
    if cfg["eval.task"] not in TASKS:
        raise ConfigError(f"eval.task must be one of {TASKS}")
    mode = cfg["transfer.mode"]
    if mode not in _TRANSFER_MODES and not (
            isinstance(mode, str) and mode.startswith("partial:")
            and mode.split(":", 1)[1].isdigit()):
        raise ConfigError("transfer.mode must be full, probe, or partial:<k>")
    if not 0.0 < cfg["train.ratio_lo"] <= cfg["train.ratio_hi"] < 1.0:
        raise ConfigError("need 0 < train.ratio_lo <= train.ratio_hi < 1")
    if not 0.0 <= cfg["train.cold_fraction"] <= 1.0:
        raise ConfigError("train.cold_fraction must lie in [0, 1]")


def _format_value(key: str, value) -> str:
    entry = REGISTRY[key]
    if entry.kind == "bool":
        return "true" if value else "false"
    if entry.kind == "float":
        return repr(float(value))
    return str(value)


def canonical_text(cfg: Dict[str, object]) -> str:
    """Every key in sorted order; byte-stable for fingerprinting."""
    validate(cfg)
    lines = [f"{k}={_format_value(k, cfg[k])}" for k in sorted(REGISTRY)]
    return "\n".join(lines) + "\n"


def config_fingerprint(cfg: Dict[str, object]) -> str:
    return sha256_text(canonical_text(cfg))


def save_config(cfg: Dict[str, object], path) -> None:
    with open(path, "w") as f:
        f.write(canonical_text(cfg))


def describe_registry() -> str:
    width = max(len(k) for k in REGISTRY)
    lines = []
    for k in sorted(REGISTRY):
        e = REGISTRY[k]
        lines.append(f"{k:<{width}}  {e.kind:<5} default={_format_value(k, e.default)}"
                     f"  {e.help}")
    return "\n".join(lines)


# ------------------------------------------------------------ adapters

def model_config(cfg: Dict[str, object]) -> ModelConfig:
    return ModelConfig(
        hidden=cfg["model.hidden"], blocks=cfg["model.blocks"],
        heads=cfg["model.heads"], mlp_ratio=cfg["model.mlp_ratio"],
        context=cfg["model.context"], d_v=cfg["model.d_v"],
        d_p=cfg["model.d_p"], d_a=cfg["model.d_a"],
        horizon=cfg["model.horizon"])


def train_config(cfg: Dict[str, object]) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        warmup_epochs=cfg["train.warmup_epochs"], lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"], strategy=cfg["train.strategy"],
        ratio_range=(cfg["train.ratio_lo"], cfg["train.ratio_hi"]),
        seed=cfg["train.seed"], grad_clip=cfg["train.grad_clip"],
        checkpoint_every=cfg["train.checkpoint_every"],
        masked_context=cfg["train.masked_context"],
        cold_fraction=cfg["train.cold_fraction"])


# ------------------------------------------------------------ ablation

def parse_grid(text: str, source: str = "<grid>") -> List[Dict[str, object]]:
    """Grid file: registry keys with comma-separated value lists. The
    result is the cartesian product as override dicts; an empty file
    yields an empty grid."""
    axes: List[Tuple[str, List[object]]] = []
    seen: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected "
                              f"key=v1,v2,..., got '{stripped}'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in REGISTRY:
            raise ConfigError(f"{source}: line {lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{source}: line {lineno}: duplicate key '{key}'")
        seen[key] = lineno
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        if not parts:
            raise ConfigError(f"{source}: line {lineno}: no values for '{key}'")
        try:
            values = [_parse_value(key, p, lineno) for p in parts]
        except ConfigError as err:
            raise ConfigError(f"{source}: {err}") from None
        axes.append((key, values))
    if not axes:
        return []
    keys = [k for k, _ in axes]
    combos = []
    for values in itertools.product(*(vals for _, vals in axes)):
        combos.append(dict(zip(keys, values)))
    return combos
