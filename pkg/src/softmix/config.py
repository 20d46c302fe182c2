"""Run configuration: a flat ``key = value`` text file, overridable from the command line."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import FormatError, UsageError
from .lm import LMConfig, PretrainConfig
from .mixture import TUNE_MODES, TrainConfig

# Key -> default. The type of the default decides how strings are parsed.
DEFAULTS: dict[str, object] = {
    # synthetic world
    "n_entities": 600,
    "n_facts": 400,
    "repetitions": 4,
    "distractor_rate": 0.2,
    "strict": False,
    "split_regime": "random_80_10_10",
    "n_mined": 6,
    "n_paraphrase": 6,
    "min_count": 10,
    # LM
    "d": 32,
    "layers": 2,
    "heads": 2,
    "ffn_dim": 64,
    "max_len": 16,
    "tie_head": True,
    "init_std": 0.1,
    "pretrain_epochs": 40,
    "pretrain_lr": 3e-3,
    "pretrain_batch": 64,
    "heldout_fraction": 0.05,
    # prompt training
    "init": "mined",
    "tune_mode": ["both"],
    "optimizer": "adam",
    "weighting": "static",
    "batch_size": 64,
    "patience": 4,
    "max_epochs": 16,
    "lr": 1e-2,
    "relations": [],
    # evaluation
    "part": "test",
    "resamples": 10000,
    # paths
    "world": "",
    "lm": "",
    "prompts": "",
    "split": "",
    "mixture": "",
    "run_a": "",
    "run_b": "",
    "seed": 0,
}

LIST_KEYS = {"tune_mode", "relations"}
PATH_KEYS = {"world", "lm", "prompts", "split", "mixture", "run_a", "run_b"}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if key in LIST_KEYS:
        return [item.strip() for item in raw.split(",") if item.strip()]
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise FormatError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_pairs(lines, origin: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise FormatError(f"{origin}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in DEFAULTS:
            raise FormatError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        base = Path(".")
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise UsageError(f"config file not found: {path}")
            values.update(parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path)))
            base = path.parent
        for key, raw in (overrides or {}).items():
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
        cfg = cls(values, base)
        for mode in cfg["tune_mode"]:
            if mode != "untuned" and mode not in TUNE_MODES:
                raise UsageError(f"unknown tune_mode {mode!r}")
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str, required: bool = True) -> Path | None:
        raw = self.values[key]
        if not raw:
            if required:
                raise UsageError(f"missing required path '{key}' (set it in the config or with --set {key}=...)")
            return None
        p = Path(str(raw))
        return p if p.is_absolute() else self.base_dir / p

    def require_exists(self, *keys: str) -> None:
        for key in keys:
            p = self.path(key)
            if not p.exists():
                raise UsageError(f"{key} path does not exist: {p}")

    def render(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, list):
                value = ", ".join(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def checksum(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()

    def stamp(self) -> str:
        return f"config_sha256={self.checksum()} seed={self['seed']}"

    def lm_config(self, vocab_size: int) -> LMConfig:
        return LMConfig(
            vocab_size=vocab_size,
            d=self["d"],
            layers=self["layers"],
            heads=self["heads"],
            ffn_dim=self["ffn_dim"],
            max_len=self["max_len"],
            tie_head=self["tie_head"],
            init_std=self["init_std"],
            seed=self["seed"],
        )

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self["pretrain_epochs"], batch_size=self["pretrain_batch"], lr=self["pretrain_lr"], seed=self["seed"]
        )

    def train_config(self, tune_mode: str) -> TrainConfig:
        return TrainConfig(
            batch_size=self["batch_size"],
            patience=self["patience"],
            max_epochs=self["max_epochs"],
            optimizer=self["optimizer"],
            tune_mode=tune_mode,
            seed=self["seed"],
            lr=self["lr"],
        )


def train_config_meta(config: TrainConfig) -> dict[str, str]:
    return {f"train.{f.name}": str(getattr(config, f.name)) for f in fields(config)}
