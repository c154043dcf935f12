"""Flat ``key = value`` config files covering ModelConfig and TrainConfig."""
from __future__ import annotations

from dataclasses import fields
from importlib import resources
from pathlib import Path

from retts.model import ModelConfig
from retts.training import TrainConfig

ALIASES = {"L_e": "enc_layers", "L_d": "dec_layers", "L_s": "gfe_layers", "c_F": "feature_dim",
           "lambda": "lambda_feat", "alpha1": "alpha_dur", "alpha2": "alpha_pitch",
           "alpha3": "alpha_energy", "alpha4": "alpha_align"}

BUILTIN = ("toy", "gradcheck", "full")


class ConfigError(ValueError):
    pass


def _convert(raw: str, kind):
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = ALIASES.get(key, key)
        kinds = {"int": int, "float": float}
        try:
            if key in model_types:
                model_kw[key] = _convert(value, kinds.get(model_types[key], str))
            elif key in train_types:
                train_kw[key] = _convert(value, kinds.get(train_types[key], str))
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(name_or_path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """Read a config file, or one of the bundled configs by name (``toy``, ``full``...)."""
    path = Path(name_or_path)
    if path.exists():
        return parse_config(path.read_text(encoding="utf-8"), str(path))
    stem = path.name[:-4] if path.name.endswith(".cfg") else path.name
    if stem in BUILTIN:
        text = resources.files("retts").joinpath("configs", f"{stem}.cfg").read_text(encoding="utf-8")
        return parse_config(text, f"{stem}.cfg")
    raise ConfigError(f"config not found: {name_or_path}")


def format_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in model_cfg.to_dict().items()]
    lines += [f"{k} = {v}" for k, v in train_cfg.to_dict().items()]
    return "\n".join(lines) + "\n"
