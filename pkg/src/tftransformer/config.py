"""Run configuration: a sectioned key-value file plus command-line overrides.

Every key has a typed default below.  Files and overrides may only set keys
that exist here; anything else is rejected.  ``write`` emits every key, so a
resolved config file reproduces the run it was written by.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .audio_features import FeatureConfig, StftConfig
from .model import CASIA_LABELS, IEMOCAP_LABELS, LabelSet, ModelConfig
from .training import TrainConfig

CONFIG_ENV = "TFT_CONFIG"
RESOLVED_NAME = "resolved_config.ini"

LABEL_PRESETS = {"iemocap": IEMOCAP_LABELS, "casia": CASIA_LABELS}

# section -> key -> (type, default); "float?" allows "none"
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "features": {
        "sample_rate_hz": ("int", 16000),
        "frame_len_samples": ("int", 320),
        "hop_samples": ("int", 160),
        "fft_size": ("int", 512),
        "preemphasis": ("float", 0.97),
        "n_mels": ("int", 80),
        "fmin_hz": ("float", 0.0),
        "fmax_hz": ("float", 8000.0),
        "energy_floor": ("float", 1e-10),
        "segment_frames": ("int", 80),
        "normalize": ("bool", False),
        "labels": ("str", "iemocap"),
    },
    "model": {
        "ablation": ("str", "T+F+TF"),
        "c1": ("int", 64),
        "time_heads": ("int", 2),
        "freq_heads": ("int", 2),
        "fusion_heads": ("int", 4),
        "ff_dim": ("int", 512),
        "fusion_ff_dim": ("int", 1024),
        "n_layers": ("int", 1),
        "positional_encoding": ("bool", False),
        "dropout": ("float", 0.0),
        "bn_momentum": ("float", 0.1),
    },
    "train": {
        "batch_size": ("int", 64),
        "epochs": ("int", 1000),
        "lr": ("float", 0.001),
        "seed": ("int", 0),
        "eval_every": ("int", 0),
        "grad_check_mode": ("bool", False),
        "weight_decay": ("float", 0.0),
        "clip_norm": ("float?", None),
        "lr_decay": ("float", 1.0),
        "class_weighted": ("bool", False),
        "target_train_war": ("float?", None),
    },
    "eval": {
        "mode": ("str", "speaker"),
        "jobs": ("int", 1),
        "only": ("str", ""),
    },
    "io": {
        "force": ("bool", False),
        "log_level": ("str", "INFO"),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def _parse(kind: str, raw: str, where: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float?":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.rstrip('?')}") from None
    return raw


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(
        default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    )

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def set(self, section: str, key: str, raw: str | Any, where: str = "override") -> None:
        if section not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]; expected one of {list(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {section}.{key}; expected one of {list(SCHEMA[section])}")
        kind = SCHEMA[section][key][0]
        self.values[section][key] = _parse(kind, raw, f"{where} {section}.{key}") if isinstance(raw, str) else raw

    # ------------------------------------------------------------------

    def labels(self) -> LabelSet:
        spec = self.get("features", "labels")
        names = LABEL_PRESETS.get(spec.lower()) or [n.strip() for n in spec.split(",") if n.strip()]
        return LabelSet(names)

    def feature_config(self) -> FeatureConfig:
        g = lambda k: self.get("features", k)
        return FeatureConfig(
            stft=StftConfig(g("frame_len_samples"), g("hop_samples"), g("fft_size"), g("preemphasis")),
            sample_rate_hz=g("sample_rate_hz"),
            n_mels=g("n_mels"),
            fmin_hz=g("fmin_hz"),
            fmax_hz=g("fmax_hz"),
            energy_floor=g("energy_floor"),
            segment_frames=g("segment_frames"),
            normalize=g("normalize"),
        )

    def model_config(self) -> ModelConfig:
        g = lambda k: self.get("model", k)
        cfg = ModelConfig.build(
            f=self.get("features", "n_mels"),
            d=self.get("features", "segment_frames"),
            c1=g("c1"),
            ff_dim=g("ff_dim"),
            fusion_ff_dim=g("fusion_ff_dim"),
            heads=(g("time_heads"), g("freq_heads"), g("fusion_heads")),
            n_classes=len(self.labels()),
            n_layers=g("n_layers"),
            positional_encoding=g("positional_encoding"),
            dropout=g("dropout"),
            bn_momentum=g("bn_momentum"),
        ).with_ablation(g("ablation"))
        cfg.validate()
        return cfg

    def train_config(self, checkpoint_dir: str | None = None) -> TrainConfig:
        cfg = TrainConfig(**self.values["train"], checkpoint_dir=checkpoint_dir)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from None
        return cfg

    def only(self) -> list[str]:
        return [s.strip() for s in self.get("eval", "only").split(",") if s.strip()]

    # ------------------------------------------------------------------

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            parser[section] = {k: _format(v) for k, v in keys.items()}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, out_dir: str | os.PathLike) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[tuple[str, str]] = ()) -> RunConfig:
    """Defaults, then the file (``path`` or ``$TFT_CONFIG``), then overrides.

    ``overrides`` are ``("section.key", "value")`` pairs.
    """
    cfg = RunConfig()
    path = path if path is not None else os.environ.get(CONFIG_ENV) or None
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser[section].items():
                cfg.set(section, key, raw, where=str(path))
    for dotted, raw in overrides:
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        cfg.set(section, key, raw)
    return cfg
