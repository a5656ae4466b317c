"""Experiment configuration: a flat set of hyperparameters read from
``key = value`` files (sections are for grouping only) plus overrides."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

BENCHMARK_DROP_RATES = (0.0, 0.3, 0.5, 0.7)

# The sweep grid used for the Stocks robustness study.
SWEEP_GRID = (1.0, 0.9, 0.7, 0.5, 0.3, 0.1, 0.09, 0.07, 0.05, 0.03, 0.01,
              0.009, 0.007, 0.005, 0.003, 0.001, 0.0009, 0.0007, 0.0005)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "sines"
    n_samples: int = 10000
    seq_len: int = 24
    n_features: int = 5
    csv_path: str = ""
    # sampling interval for sines; None means 1/seq_len (frequency = cycles per window)
    sines_dt: float | None = None
    pendulum_noise: float = 0.08
    mode: str = "regular"
    drop_rate: float = 0.0
    # model
    latent_dim: int = 16
    enc_hidden: int = 48
    dec_hidden: int = 48
    prior_hidden: int = 48
    enc_layers: int = 1
    dec_layers: int = 1
    ncde_hidden: int = 32
    ncde_width: int = 64
    ncde_depth: int = 2
    ncde_steps: int = 4
    # loss
    alpha: float = 0.009
    beta: float = 0.0009
    gamma_eig: float = 1.0
    eig_targets: tuple[float, ...] = ()
    # optimization
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 10000
    grad_clip: float = 0.0
    checkpoint_every: int = 2000
    # evaluation
    eval_runs: int = 3
    eval_steps: int = 2000
    # seeds / io
    seed: int = 0
    data_seed: int | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    @property
    def resolved_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def validate(self) -> None:
        if self.dataset not in ("sines", "pendulum", "csv"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.mode not in ("regular", "irregular"):
            raise ConfigError(f"mode must be regular or irregular, got {self.mode!r}")
        if self.alpha < 0 or self.beta < 0 or self.gamma_eig < 0:
            raise ConfigError("alpha, beta and gamma_eig must be >= 0")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if self.mode == "regular" and self.drop_rate != 0.0:
            raise ConfigError("regular mode requires drop_rate = 0")
        if len(self.eig_targets) > self.latent_dim:
            raise ConfigError("more eigenvalue targets than latent dimensions")
        if any(c < 0 for c in self.eig_targets):
            raise ConfigError("eigenvalue targets must be >= 0")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        for name in ("n_samples", "seq_len", "n_features", "latent_dim", "enc_hidden", "dec_hidden",
                     "prior_hidden", "batch_size", "steps", "eval_runs", "eval_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sines_dt is not None and self.sines_dt <= 0:
            raise ConfigError("sines_dt must be positive")
        if self.dataset == "pendulum" and (self.seq_len, self.n_features) != (170, 2):
            raise ConfigError("pendulum data is fixed at seq_len = 170 (17 s at 0.1 s) and n_features = 2")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("dataset = csv needs csv_path")

    @property
    def benchmark_parity(self) -> bool:
        return self.drop_rate in BENCHMARK_DROP_RATES

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eig_targets"] = list(self.eig_targets)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "eig_targets" in d:
            d["eig_targets"] = tuple(d["eig_targets"])
        return cls(**d)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    kind = _FIELDS[name].type
    try:
        if name == "eig_targets":
            return tuple(float(v) for v in raw.replace(" ", "").split(",") if v)
        if kind.endswith("| None"):
            if raw.lower() in ("", "none"):
                return None
            kind = kind[: -len("| None")].strip()
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r} ({e})") from None


def builtin_configs() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("kovae.configs").iterdir() if p.name.endswith(".cfg"))


def _read_text(ref: str) -> str:
    path = Path(ref)
    if path.is_file():
        return path.read_text(encoding="utf-8")
    name = ref[:-4] if ref.endswith(".cfg") else ref
    res = resources.files("kovae.configs") / f"{name}.cfg"
    if res.is_file():
        return res.read_text(encoding="utf-8")
    raise ConfigError(f"no config file or built-in config named {ref!r} (built-ins: {', '.join(builtin_configs())})")


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key in values:
                raise ConfigError(f"key {key!r} set twice")
            values[key] = _coerce(key, raw)
    return values


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def load_config(ref: str | None = None, overrides=None, **extra) -> ExperimentConfig:
    values = parse_config_text(_read_text(ref)) if ref else {}
    values.update(parse_overrides(overrides))
    values.update({k: v for k, v in extra.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def dump_config(cfg: ExperimentConfig) -> str:
    groups = {
        "data": ("dataset", "n_samples", "seq_len", "n_features", "csv_path", "sines_dt", "pendulum_noise", "mode",
                 "drop_rate"),
        "model": ("latent_dim", "enc_hidden", "dec_hidden", "prior_hidden", "enc_layers", "dec_layers",
                  "ncde_hidden", "ncde_width", "ncde_depth", "ncde_steps"),
        "loss": ("alpha", "beta", "gamma_eig", "eig_targets"),
        "optim": ("optimizer", "lr", "batch_size", "steps", "grad_clip", "checkpoint_every"),
        "eval": ("eval_runs", "eval_steps"),
        "run": ("seed", "data_seed", "out_dir"),
    }
    lines = []
    for section, keys in groups.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = getattr(cfg, key)
            if key == "eig_targets":
                v = ",".join(repr(c) for c in v)
            elif v is None:
                v = "none"
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)
