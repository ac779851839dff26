"""Hyperparameter dataclass and the INI-style run configuration.

Run configs are flat key=value files with [data]/[model]/[train]/[eval]
sections; unknown keys are rejected and every accepted config re-emits to
an equivalent file (parse(emit(c)) == c).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .cie import AGGREGATORS


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class HyperConfig:
    """Every scalar hyperparameter of the model and optimizer."""

    embed_dim: int = 16
    specific_interests: int = 2
    shared_interests: int = 2
    tau: float = 1.0
    routing_iterations: int = 2
    relation_layers: int = 1
    interaction_layers: int = 1
    attention_heads: int = 2
    aggregator: str = "light"
    leaky_slope: float = 0.2
    time_buckets: int = 4
    time_embedding: bool = True
    alpha: tuple = ()  # per-behavior loss weights; empty means all ones
    beta: float = 0.1
    reg_lambda: float = 1e-5
    learning_rate: float = 1e-3
    decay_rate: float = 0.96
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    patience: int = 20
    deterministic: bool = True
    workers: int = 1
    precision: str = "f64"
    no_cie: bool = False
    no_fbc: bool = False
    no_mi: bool = False
    shared_only: bool = False
    specific_only: bool = False

    def interest_structure(self):
        """(n_specific, n_shared, interest width) after ablation overrides."""
        if self.no_mi:
            return 0, 1, self.embed_dim
        total = self.specific_interests + self.shared_interests
        return self.specific_interests, self.shared_interests, self.embed_dim // total

    @property
    def cie_disabled(self) -> bool:
        """no_mi removes interest extraction entirely (unified vectors)."""
        return self.no_cie or self.no_mi

    @property
    def fbc_disabled(self) -> bool:
        """no_mi also removes routing + attention (plain aggregation)."""
        return self.no_fbc or self.no_mi

    def alphas_for(self, num_behaviors: int) -> tuple:
        if not self.alpha:
            return tuple(1.0 for _ in range(num_behaviors))
        return tuple(self.alpha)

    def validate(self, num_behaviors: int | None = None):
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if self.specific_interests < 0 or self.shared_interests < 0:
            raise ConfigError("interest counts cannot be negative")
        if not self.no_mi:
            total = self.specific_interests + self.shared_interests
            if total < 1:
                raise ConfigError("need at least one interest")
            if self.embed_dim % total != 0:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} is not divisible by the "
                    f"interest count {total}")
        _, _, d_star = self.interest_structure()
        if self.attention_heads < 1 or d_star % self.attention_heads != 0:
            raise ConfigError(
                f"attention heads {self.attention_heads} must divide the "
                f"interest width {d_star}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.routing_iterations < 1:
            raise ConfigError("routing_iterations must be >= 1")
        if self.relation_layers < 0 or self.interaction_layers < 1:
            raise ConfigError("relation_layers >= 0 and interaction_layers >= 1 required")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must sit in (0, 1)")
        if self.time_buckets < 1:
            raise ConfigError("time_buckets must be >= 1")
        if num_behaviors is not None and self.alpha and len(self.alpha) != num_behaviors:
            raise ConfigError(
                f"alpha has {len(self.alpha)} entries for {num_behaviors} behaviors")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha):
            raise ConfigError("alpha weights must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.reg_lambda < 0.0:
            raise ConfigError("reg_lambda cannot be negative")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigError("decay_rate must sit in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0, patience >= 1 required")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.precision not in ("f64", "f32"):
            raise ConfigError("precision must be f64 or f32")
        if self.shared_only and self.specific_only:
            raise ConfigError("shared_only and specific_only exclude each other")
        if self.no_mi and (self.shared_only or self.specific_only):
            raise ConfigError("no_mi already collapses to one interest")
        if self.shared_only and self.shared_interests < 1 and not self.no_mi:
            raise ConfigError("shared_only needs at least one shared interest")
        if self.specific_only and self.specific_interests < 1:
            raise ConfigError("specific_only needs at least one specific interest")


@dataclass
class SynthConfig:
    """[data] synth_* keys; mirrors dataio.GenConfig."""

    users: int = 50
    items: int = 80
    behaviors: int = 2
    relations: int = 2
    shared_prototypes: int = 2
    specific_prototypes: int = 2
    interactions_per_user: int = 10
    correlation: float = 1.0
    relation_degree: int = 2


@dataclass
class RunConfig:
    manifest: str = ""
    synth: SynthConfig = field(default_factory=SynthConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)
    top_n: int = 10
    eval_all_behaviors: bool = False
    out_dir: str = "runs/out"

    def validate(self, num_behaviors: int | None = None):
        self.hyper.validate(num_behaviors)
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")


_BOOL_KEYS = {"time_embedding", "deterministic", "no_cie", "no_fbc", "no_mi",
              "shared_only", "specific_only", "eval_all_behaviors"}
_MODEL_KEYS = ("embed_dim", "specific_interests", "shared_interests", "tau",
               "routing_iterations", "relation_layers", "interaction_layers",
               "attention_heads", "aggregator", "leaky_slope", "time_buckets",
               "time_embedding", "no_cie", "no_fbc", "no_mi", "shared_only",
               "specific_only")
_TRAIN_KEYS = ("alpha", "beta", "reg_lambda", "learning_rate", "decay_rate",
               "batch_size", "epochs", "seed", "patience", "deterministic",
               "workers", "precision")
_SYNTH_KEYS = ("users", "items", "behaviors", "relations", "shared_prototypes",
               "specific_prototypes", "interactions_per_user", "correlation",
               "relation_degree")
_EVAL_KEYS = ("top_n", "eval_all_behaviors")


def _parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "on", "yes", "1"):
        return True
    if v in ("false", "off", "no", "0"):
        return False
    raise ConfigError(f"cannot parse boolean {key}={value!r}")


def _coerce(current, value: str, key: str):
    if key in _BOOL_KEYS:
        return _parse_bool(value, key)
    if isinstance(current, bool):
        return _parse_bool(value, key)
    if isinstance(current, int):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"cannot parse integer {key}={value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"cannot parse float {key}={value!r}") from None
    if isinstance(current, tuple):
        value = value.strip()
        if not value:
            return ()
        try:
            return tuple(float(v) for v in value.split(","))
        except ValueError:
            raise ConfigError(f"cannot parse float list {key}={value!r}") from None
    return value


def parse_run_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    cfg = RunConfig()
    known_sections = {"data", "model", "train", "eval"}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown config section [{section}]")
    hyper_fields = {f.name for f in fields(HyperConfig)}
    synth_fields = {f.name for f in fields(SynthConfig)}
    if parser.has_section("data"):
        for key, value in parser.items("data"):
            if key == "manifest":
                cfg.manifest = value.strip()
            elif key == "out_dir":
                cfg.out_dir = value.strip()
            elif key.startswith("synth_") and key[6:] in synth_fields:
                name = key[6:]
                cur = getattr(cfg.synth, name)
                setattr(cfg.synth, name, _coerce(cur, value, key))
            else:
                raise ConfigError(f"unknown key {key!r} in section [data]")
    if parser.has_section("model"):
        for key, value in parser.items("model"):
            if key not in _MODEL_KEYS or key not in hyper_fields:
                raise ConfigError(f"unknown key {key!r} in section [model]")
            cur = getattr(cfg.hyper, key)
            setattr(cfg.hyper, key, _coerce(cur, value, key))
    if parser.has_section("train"):
        for key, value in parser.items("train"):
            if key not in _TRAIN_KEYS or key not in hyper_fields:
                raise ConfigError(f"unknown key {key!r} in section [train]")
            cur = getattr(cfg.hyper, key)
            setattr(cfg.hyper, key, _coerce(cur, value, key))
    if parser.has_section("eval"):
        for key, value in parser.items("eval"):
            if key not in _EVAL_KEYS:
                raise ConfigError(f"unknown key {key!r} in section [eval]")
            cur = getattr(cfg, key)
            setattr(cfg, key, _coerce(cur, value, key))
    return cfg


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def emit_run_config(cfg: RunConfig) -> str:
    """Serialize so that parse_run_config(emit_run_config(c)) == c."""
    parser = configparser.ConfigParser()
    parser.add_section("data")
    parser.set("data", "manifest", cfg.manifest)
    parser.set("data", "out_dir", cfg.out_dir)
    for key in _SYNTH_KEYS:
        parser.set("data", f"synth_{key}", _format_value(getattr(cfg.synth, key)))
    parser.add_section("model")
    for key in _MODEL_KEYS:
        parser.set("model", key, _format_value(getattr(cfg.hyper, key)))
    parser.add_section("train")
    for key in _TRAIN_KEYS:
        parser.set("train", key, _format_value(getattr(cfg.hyper, key)))
    parser.add_section("eval")
    parser.set("eval", "top_n", _format_value(cfg.top_n))
    parser.set("eval", "eval_all_behaviors", _format_value(cfg.eval_all_behaviors))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def override_run_config(cfg: RunConfig, *, seed=None, workers=None,
                        deterministic=None, top_n=None, out_dir=None) -> RunConfig:
    hyper = cfg.hyper
    if seed is not None:
        hyper = replace(hyper, seed=seed)
    if workers is not None:
        hyper = replace(hyper, workers=workers)
    if deterministic is not None:
        hyper = replace(hyper, deterministic=deterministic)
    out = replace(cfg, hyper=hyper)
    if top_n is not None:
        out.top_n = top_n
    if out_dir is not None:
        out.out_dir = out_dir
    return out
