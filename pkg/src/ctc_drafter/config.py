"""Flat ``key = value`` run configuration shared by every CLI subcommand."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .decoding import DecodeConfig
from .models import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "greedy"
    k: int = 3
    beam: int = 16
    slots: int = 5
    label_horizon: int = 3
    loss: str = "ctc"
    collapse: bool = True
    draft_head: str = "transformer"
    temperature: float = 1.0
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    lr: float = 3e-5
    base_lr: float = 3e-4
    clip: float = 0.5
    epochs: int = 1
    base_epochs: int = 1
    batch_size: int = 4
    max_len: int = 0
    schedule: str = "constant"
    anchor_stride: int = 1
    max_new_tokens: int = 64
    parallel: int = 1

    def model_config(self, vocab_size: int = 259) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, max_seq_len=self.max_seq_len, draft_slots=self.slots,
                           label_horizon=self.label_horizon, draft_head=self.draft_head)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, base_lr=self.base_lr, clip_threshold=self.clip, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, loss_mode=self.loss,
                           max_len=self.max_len, anchor_stride=self.anchor_stride,
                           schedule=self.schedule)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(mode=self.mode, k=self.k, beam=self.beam, collapse=self.collapse,
                            temperature=self.temperature, seed=self.seed)


_BOOL = {"on": True, "true": True, "yes": True, "1": True, "off": False, "false": False, "no": False, "0": False}


def _coerce(name: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if typ is bool or typ == "bool":
            return _BOOL[raw.strip().lower()]
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value {raw!r} for {name}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then non-None ``overrides`` (CLI flags)."""
    values: dict = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, known[k], v) for k, v in values.items()})
