"""Experiment configuration: a flat INI grammar with strict keys.

Grammar::

    # comment
    [section]
    key = value

Sections are ``experiment``, ``data``, ``model``, ``inference`` and
``optimizer``; every key belongs to exactly one section and key names are
unique across sections, so overrides may use either ``key=value`` or
``section.key=value``. Unknown sections or keys are errors. Lists are
comma separated. ``preset`` (cifar100, stackoverflow, emnist62) fills the
task hyperparameters used for the corresponding benchmark; keys written in
the file and overrides take precedence over the preset.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .datagen import FedClassConfig
from .inference import BACKENDS, InferenceConfig
from .optimizers import OPTIMIZER_KINDS, Optimizer
from .protocol import STRATEGIES

SECTIONS = ("experiment", "data", "model", "inference", "optimizer")
SOURCES = ("toy", "niw-study", "synthetic", "csv")
MODELS = ("logistic", "mlp")


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        prefix = f"{field_name}: " if field_name else ""
        super().__init__(f"{prefix}{message}{where}")
        self.field = field_name
        self.line = line


def _f(default, section: str):
    return field(default=default, metadata={"section": section})


@dataclass(frozen=True)
class ExperimentConfig:
    # experiment
    preset: str = _f("", "experiment")
    strategy: str = _f("fedep", "experiment")
    rounds: int = _f(100, "experiment")
    burn_in: int = _f(0, "experiment")
    clients_per_round: int = _f(10, "experiment")
    damping: float = _f(1.0, "experiment")
    # Damping of FedAvg burn-in rounds; 0 means "same as damping".
    burn_in_damping: float = _f(0.0, "experiment")
    eval_interval: int = _f(1, "experiment")
    seed: int = _f(0, "experiment")
    n_repeats: int = _f(1, "experiment")
    checkpoint_interval: int = _f(0, "experiment")
    output_dir: str = _f("runs/default", "experiment")
    thresholds: tuple = _f((), "experiment")
    horizons: tuple = _f((), "experiment")
    marginal_samples: int = _f(10, "experiment")
    # data
    source: str = _f("synthetic", "data")
    n_clients: int = _f(50, "data")
    examples_per_client: int = _f(100, "data")
    input_dim: int = _f(10, "data")
    num_classes: int = _f(5, "data")
    heterogeneity: float = _f(0.3, "data")
    label_noise: float = _f(0.0, "data")
    class_sep: float = _f(1.0, "data")
    test_size: int = _f(2000, "data")
    data_seed: int = _f(0, "data")
    train_csv: str = _f("", "data")
    test_csv: str = _f("", "data")
    niw_draws: int = _f(200, "data")
    niw_nu: float = _f(7.0, "data")
    niw_lambda: float = _f(0.2, "data")
    # model
    model: str = _f("logistic", "model")
    hidden_dim: int = _f(16, "model")
    prior_precision: float = _f(0.0, "model")
    init_scale: float = _f(0.01, "model")
    # inference
    backend: str = _f("scaled-identity", "inference")
    client_epochs: int = _f(10, "inference")
    client_lr: float = _f(0.01, "inference")
    client_momentum: float = _f(0.9, "inference")
    batch_size: int = _f(32, "inference")
    alpha_cov: float = _f(5e-2, "inference")
    mcmc_shrinkage: float = _f(1e-4, "inference")
    laplace_epochs: int = _f(5, "inference")
    ngvi_epochs: int = _f(5, "inference")
    ngvi_samples: int = _f(5, "inference")
    ngvi_beta: float = _f(0.99, "inference")
    steps_per_epoch: int = _f(50, "inference")
    # optimizer
    server_optim: str = _f("sgd-momentum", "optimizer")
    server_lr: float = _f(1.0, "optimizer")
    server_momentum: float = _f(0.9, "optimizer")
    server_tau: float = _f(1e-5, "optimizer")
    server_beta1: float = _f(0.9, "optimizer")
    server_beta2: float = _f(0.999, "optimizer")
    server_eps: float = _f(1e-8, "optimizer")
    client_state_optim: str = _f("same", "optimizer")

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(
            backend=self.backend,
            epochs=self.client_epochs,
            client_lr=self.client_lr,
            momentum=self.client_momentum,
            batch_size=self.batch_size,
            alpha_cov=self.alpha_cov,
            mcmc_shrinkage=self.mcmc_shrinkage,
            laplace_epochs=self.laplace_epochs,
            ngvi_epochs=self.ngvi_epochs,
            ngvi_samples=self.ngvi_samples,
            ngvi_beta=self.ngvi_beta,
            steps_per_epoch=self.steps_per_epoch,
        )

    def server_optimizer(self) -> Optimizer:
        return Optimizer(
            self.server_optim,
            lr=self.server_lr,
            momentum=self.server_momentum,
            tau=self.server_tau,
            beta1=self.server_beta1,
            beta2=self.server_beta2,
            eps=self.server_eps,
        )

    def client_state_optimizer(self) -> Optimizer:
        """Client site optimizer; ``same`` reuses the server configuration."""
        opt = self.server_optimizer()
        if self.client_state_optim != "same":
            opt = replace(opt, kind=self.client_state_optim)
        return opt

    def fedclass_config(self) -> FedClassConfig:
        return FedClassConfig(
            n_clients=self.n_clients,
            examples_per_client=self.examples_per_client,
            input_dim=self.input_dim,
            num_classes=self.num_classes,
            heterogeneity=self.heterogeneity,
            label_noise=self.label_noise,
            test_size=self.test_size,
            class_sep=self.class_sep,
        )


FIELDS = {f.name: f for f in fields(ExperimentConfig)}
LIST_FIELDS = {"thresholds": float, "horizons": int}

# Task hyperparameters per benchmark. "Server learning rate" is the server
# optimizer's rate; damping stays at its own default.
PRESETS = {
    "cifar100": dict(
        server_optim="sgd-momentum", server_momentum=0.9, server_lr=0.5, client_momentum=0.9,
        clients_per_round=20, client_lr=0.01, client_epochs=10, burn_in=400, alpha_cov=5e-2,
        mcmc_shrinkage=1e-4, laplace_epochs=5, ngvi_epochs=5, ngvi_samples=5, ngvi_beta=0.99,
    ),
    "stackoverflow": dict(
        server_optim="adagrad", server_tau=1e-5, server_lr=5.0, client_momentum=0.9,
        clients_per_round=10, client_lr=50.0, client_epochs=5, burn_in=800, alpha_cov=1e-8,
        mcmc_shrinkage=1e-6, laplace_epochs=5, ngvi_epochs=10, ngvi_samples=10, ngvi_beta=0.99,
    ),
    "emnist62": dict(
        server_optim="sgd-momentum", server_momentum=0.9, server_lr=0.5, client_momentum=0.9,
        clients_per_round=100, client_lr=0.01, client_epochs=20, burn_in=200, alpha_cov=5e-3,
        mcmc_shrinkage=1e-4, laplace_epochs=5, ngvi_epochs=5, ngvi_samples=5, ngvi_beta=0.99,
    ),
}


def _convert(name: str, raw: str):
    raw = raw.strip()
    if name in LIST_FIELDS:
        conv = LIST_FIELDS[name]
        items = [s.strip() for s in raw.split(",") if s.strip()]
        try:
            return tuple(conv(s) for s in items)
        except ValueError:
            raise ConfigError(f"expected a comma-separated list of {conv.__name__}, got {raw!r}", name) from None
    default = FIELDS[name].default
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", name) from None
    return raw


def _resolve_key(key: str) -> str:
    section, _, name = key.rpartition(".")
    if name not in FIELDS:
        raise ConfigError("unknown key", key)
    if section and FIELDS[name].metadata["section"] != section:
        raise ConfigError(f"key belongs to section [{FIELDS[name].metadata['section']}]", key)
    return name


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse and validate a config; ``overrides`` map keys to raw strings."""
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigError(f"parse error: {exc.message.splitlines()[0]}", line=line) from None

    values: dict = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            name = _resolve_key(f"{section}.{key}")
            values[name] = _convert(name, raw)
    for key, raw in (overrides or {}).items():
        name = _resolve_key(key)
        values[name] = _convert(name, raw)

    preset = values.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}", "preset")
        values = {**PRESETS[preset], **values}
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    def need(ok: bool, name: str, message: str):
        if not ok:
            raise ConfigError(message, name)

    need(cfg.strategy != "", "strategy", "must not be empty")
    need(cfg.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
    need(cfg.source in SOURCES, "source", f"must be one of {SOURCES}")
    need(cfg.model in MODELS, "model", f"must be one of {MODELS}")
    need(cfg.backend in BACKENDS, "backend", f"must be one of {BACKENDS}")
    need(cfg.server_optim in OPTIMIZER_KINDS, "server_optim", f"must be one of {OPTIMIZER_KINDS}")
    need(cfg.client_state_optim in OPTIMIZER_KINDS + ("same",), "client_state_optim", "unknown optimizer")
    need(cfg.rounds >= 0, "rounds", "must be >= 0")
    need(cfg.burn_in >= 0, "burn_in", "must be >= 0")
    need(cfg.clients_per_round >= 1, "clients_per_round", "must be >= 1")
    need(0 < cfg.damping <= 1, "damping", "must lie in (0, 1]")
    need(0 <= cfg.burn_in_damping <= 1, "burn_in_damping", "must lie in [0, 1] (0 = same as damping)")
    need(cfg.eval_interval >= 1, "eval_interval", "must be >= 1")
    need(cfg.n_repeats >= 1, "n_repeats", "must be >= 1")
    need(cfg.checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0")
    need(cfg.marginal_samples >= 1, "marginal_samples", "must be >= 1")
    need(cfg.prior_precision >= 0, "prior_precision", "must be >= 0")
    need(cfg.init_scale >= 0, "init_scale", "must be >= 0")
    need(cfg.hidden_dim >= 1, "hidden_dim", "must be >= 1")
    need(cfg.niw_draws >= 1, "niw_draws", "must be >= 1")
    need(cfg.server_lr > 0, "server_lr", "must be > 0")
    need(0 <= cfg.server_momentum < 1, "server_momentum", "must lie in [0, 1)")
    need(all(0 <= t <= 1 for t in cfg.thresholds), "thresholds", "must lie in [0, 1]")
    need(all(h >= 1 for h in cfg.horizons), "horizons", "must be >= 1")
    if cfg.source == "csv":
        need(bool(cfg.train_csv), "train_csv", "required when source = csv")
        need(bool(cfg.test_csv), "test_csv", "required when source = csv")
    if cfg.source == "synthetic":
        try:
            cfg.fedclass_config()
        except ValueError as exc:
            raise ConfigError(str(exc), "data") from None
        need(cfg.clients_per_round <= cfg.n_clients, "clients_per_round", "must not exceed n_clients")
    if cfg.source == "toy":
        need(cfg.clients_per_round <= 2, "clients_per_round", "toy problem has 2 clients")
    try:
        cfg.inference_config()
    except ValueError as exc:
        raise ConfigError(str(exc), "inference") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully-defaulted config text; parses back to an identical config."""
    out = []
    for section in SECTIONS:
        out.append(f"[{section}]")
        for f in fields(cfg):
            if f.metadata["section"] == section:
                out.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
        out.append("")
    return "\n".join(out)
