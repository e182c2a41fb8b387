"""Run configuration: defaults, YAML loading, validation, and assembly.

Every protocol constant appears here as a default, so an empty config file
reproduces the stock setup: three domains sized 0.1x their corpus sizes,
budgets Dreaddit 2.0 / IRF 0.5 / MultiWD 1.5 with 0.1 multiplicative decay,
noise base scales 0.01/0.008/0.005 by depth with kind multipliers 1.2/0.8,
gate factor 0.8, and the domain-aware strategy.

Validation errors raise :class:`ConfigError` naming the offending field.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import yaml

from .data import DEFAULT_ROTATIONS, Dataset, DomainSpec, default_federation_specs, make_domain
from .dp import DEFAULT_BUDGETS, BudgetTable, NoiseCalibration
from .federation import PrivacyStrategy, ServerState
from .linalg import Rng
from .lora import AdapterKind, LayerPosition
from .metrics import METRIC_NAMES
from .trainer import BackboneModel, ClientState, init_adapters

__all__ = [
    "ConfigError",
    "ModelConfig",
    "DomainOverride",
    "DataConfig",
    "BudgetConfig",
    "CalibrationConfig",
    "RunConfig",
    "Experiment",
    "load_config",
    "config_from_dict",
    "build_experiment",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the field."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    input_dim: int = 8
    hidden_dim: int = 16
    rank: int = 4


@dataclass(frozen=True)
class DomainOverride:
    n_train: int | None = None
    n_val: int | None = None
    rotation_angle: float | None = None
    label_noise: float | None = None


@dataclass(frozen=True)
class DataConfig:
    scale: float = 0.1
    label_noise: float = 0.0
    domains: tuple[str, ...] = tuple(sorted(DEFAULT_BUDGETS))
    overrides: Mapping[str, DomainOverride] = field(default_factory=dict)


@dataclass(frozen=True)
class BudgetConfig:
    entries: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    decay_rate: float = 0.1
    floor: float = 0.05
    decay_mode: str = "multiplicative"


@dataclass(frozen=True)
class CalibrationConfig:
    early: float = 0.01
    middle: float = 0.008
    late: float = 0.005
    multiplier_a: float = 1.2
    multiplier_b: float = 0.8
    gate_factor: float = 0.8
    nominal_delta: float = 1e-5
    clip_norm: float | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    rounds: int = 8
    local_epochs: int = 2
    learning_rate: float = 0.25
    batch_size: int = 32
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    strategy: PrivacyStrategy = PrivacyStrategy()
    budgets: BudgetConfig = BudgetConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    thresholds: Mapping[str, float] = field(default_factory=lambda: {"accuracy": 0.8})
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        """Canonical plain-dict echo; feeding it back reproduces this config."""
        out = asdict(self)
        out["data"]["domains"] = list(self.data.domains)
        out["data"]["overrides"] = {
            name: {k: v for k, v in asdict(ov).items() if v is not None}
            for name, ov in self.data.overrides.items()
        }
        out["strategy"] = {
            k: v for k, v in asdict(self.strategy).items() if v is not None
        }
        out["thresholds"] = dict(self.thresholds)
        return out


def _require(mapping: Mapping, context: str) -> None:
    if not isinstance(mapping, Mapping):
        raise ConfigError(f"{context}: expected a mapping, got {type(mapping).__name__}")


def _check_keys(mapping: Mapping, allowed: set[str], context: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _coerce(value, kind, context: str):
    try:
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return int(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except TypeError:
        pass
    raise ConfigError(f"{context}: expected {kind.__name__}, got {value!r}")


def _section(raw: Mapping, key: str) -> Mapping:
    value = raw.get(key, {})
    _require(value, key)
    return value


def config_from_dict(raw: Mapping) -> RunConfig:
    """Build a RunConfig from a (possibly empty) nested mapping of overrides."""
    _require(raw, "config")
    _check_keys(
        raw,
        {
            "seed", "rounds", "local_epochs", "learning_rate", "batch_size",
            "model", "data", "strategy", "budgets", "calibration",
            "thresholds", "output_dir",
        },
        "config",
    )
    defaults = RunConfig()

    model_raw = _section(raw, "model")
    _check_keys(model_raw, {"n_layers", "input_dim", "hidden_dim", "rank"}, "model")
    model = ModelConfig(
        n_layers=_coerce(model_raw.get("n_layers", defaults.model.n_layers), int, "model.n_layers"),
        input_dim=_coerce(model_raw.get("input_dim", defaults.model.input_dim), int, "model.input_dim"),
        hidden_dim=_coerce(model_raw.get("hidden_dim", defaults.model.hidden_dim), int, "model.hidden_dim"),
        rank=_coerce(model_raw.get("rank", defaults.model.rank), int, "model.rank"),
    )
    if not 1 <= model.n_layers:
        raise ConfigError(f"model.n_layers: must be >= 1, got {model.n_layers}")
    if model.rank < 1:
        raise ConfigError(f"model.rank: must be >= 1, got {model.rank}")

    data_raw = _section(raw, "data")
    _check_keys(data_raw, {"scale", "label_noise", "domains", "overrides"}, "data")
    domains = data_raw.get("domains", list(defaults.data.domains))
    if not isinstance(domains, (list, tuple)) or not domains:
        raise ConfigError("data.domains: expected a nonempty list of domain names")
    domains = tuple(_coerce(d, str, "data.domains[]") for d in domains)
    if len(set(domains)) != len(domains):
        raise ConfigError(f"data.domains: duplicate names in {list(domains)}")
    overrides_raw = data_raw.get("overrides", {})
    _require(overrides_raw, "data.overrides")
    overrides = {}
    for name, ov_raw in overrides_raw.items():
        _require(ov_raw, f"data.overrides.{name}")
        _check_keys(
            ov_raw, {"n_train", "n_val", "rotation_angle", "label_noise"},
            f"data.overrides.{name}",
        )
        overrides[name] = DomainOverride(
            n_train=None if "n_train" not in ov_raw
            else _coerce(ov_raw["n_train"], int, f"data.overrides.{name}.n_train"),
            n_val=None if "n_val" not in ov_raw
            else _coerce(ov_raw["n_val"], int, f"data.overrides.{name}.n_val"),
            rotation_angle=None if "rotation_angle" not in ov_raw
            else _coerce(ov_raw["rotation_angle"], float, f"data.overrides.{name}.rotation_angle"),
            label_noise=None if "label_noise" not in ov_raw
            else _coerce(ov_raw["label_noise"], float, f"data.overrides.{name}.label_noise"),
        )
    data = DataConfig(
        scale=_coerce(data_raw.get("scale", defaults.data.scale), float, "data.scale"),
        label_noise=_coerce(
            data_raw.get("label_noise", defaults.data.label_noise), float, "data.label_noise"
        ),
        domains=domains,
        overrides=overrides,
    )
    if data.scale <= 0:
        raise ConfigError(f"data.scale: must be > 0, got {data.scale}")

    strategy_raw = _section(raw, "strategy")
    _check_keys(strategy_raw, {"kind", "eps_glob", "sigma", "tau"}, "strategy")
    try:
        strategy = PrivacyStrategy(
            kind=_coerce(strategy_raw.get("kind", "domain_aware"), str, "strategy.kind"),
            eps_glob=None if strategy_raw.get("eps_glob") is None
            else _coerce(strategy_raw["eps_glob"], float, "strategy.eps_glob"),
            sigma=None if strategy_raw.get("sigma") is None
            else _coerce(strategy_raw["sigma"], float, "strategy.sigma"),
            tau=None if strategy_raw.get("tau") is None
            else _coerce(strategy_raw["tau"], float, "strategy.tau"),
        )
    except ValueError as exc:
        raise ConfigError(f"strategy: {exc}") from exc

    budgets_raw = _section(raw, "budgets")
    _check_keys(budgets_raw, {"entries", "decay_rate", "floor", "decay_mode"}, "budgets")
    entries_raw = budgets_raw.get("entries", dict(defaults.budgets.entries))
    _require(entries_raw, "budgets.entries")
    entries = {
        _coerce(k, str, "budgets.entries key"): _coerce(v, float, f"budgets.entries.{k}")
        for k, v in entries_raw.items()
    }
    budgets = BudgetConfig(
        entries=entries,
        decay_rate=_coerce(
            budgets_raw.get("decay_rate", defaults.budgets.decay_rate), float, "budgets.decay_rate"
        ),
        floor=_coerce(budgets_raw.get("floor", defaults.budgets.floor), float, "budgets.floor"),
        decay_mode=_coerce(
            budgets_raw.get("decay_mode", defaults.budgets.decay_mode), str, "budgets.decay_mode"
        ),
    )

    cal_raw = _section(raw, "calibration")
    _check_keys(
        cal_raw,
        {"early", "middle", "late", "multiplier_a", "multiplier_b",
         "gate_factor", "nominal_delta", "clip_norm"},
        "calibration",
    )
    dc = defaults.calibration
    calibration = CalibrationConfig(
        early=_coerce(cal_raw.get("early", dc.early), float, "calibration.early"),
        middle=_coerce(cal_raw.get("middle", dc.middle), float, "calibration.middle"),
        late=_coerce(cal_raw.get("late", dc.late), float, "calibration.late"),
        multiplier_a=_coerce(cal_raw.get("multiplier_a", dc.multiplier_a), float, "calibration.multiplier_a"),
        multiplier_b=_coerce(cal_raw.get("multiplier_b", dc.multiplier_b), float, "calibration.multiplier_b"),
        gate_factor=_coerce(cal_raw.get("gate_factor", dc.gate_factor), float, "calibration.gate_factor"),
        nominal_delta=_coerce(cal_raw.get("nominal_delta", dc.nominal_delta), float, "calibration.nominal_delta"),
        clip_norm=None if cal_raw.get("clip_norm") is None
        else _coerce(cal_raw["clip_norm"], float, "calibration.clip_norm"),
    )

    thresholds_raw = raw.get("thresholds", dict(defaults.thresholds))
    _require(thresholds_raw, "thresholds")
    thresholds = {}
    for name, tau in thresholds_raw.items():
        name = _coerce(name, str, "thresholds key")
        if name not in METRIC_NAMES:
            raise ConfigError(f"thresholds.{name}: unknown metric; expected one of {METRIC_NAMES}")
        thresholds[name] = _coerce(tau, float, f"thresholds.{name}")

    cfg = RunConfig(
        seed=_coerce(raw.get("seed", defaults.seed), int, "seed"),
        rounds=_coerce(raw.get("rounds", defaults.rounds), int, "rounds"),
        local_epochs=_coerce(raw.get("local_epochs", defaults.local_epochs), int, "local_epochs"),
        learning_rate=_coerce(raw.get("learning_rate", defaults.learning_rate), float, "learning_rate"),
        batch_size=_coerce(raw.get("batch_size", defaults.batch_size), int, "batch_size"),
        model=model,
        data=data,
        strategy=strategy,
        budgets=budgets,
        calibration=calibration,
        thresholds=thresholds,
        output_dir=_coerce(raw.get("output_dir", defaults.output_dir), str, "output_dir"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError(f"seed: must be a 64-bit unsigned integer, got {cfg.seed}")
    if cfg.rounds < 1:
        raise ConfigError(f"rounds: must be >= 1, got {cfg.rounds}")
    if cfg.local_epochs < 0:
        raise ConfigError(f"local_epochs: must be >= 0, got {cfg.local_epochs}")
    if cfg.learning_rate < 0:
        raise ConfigError(f"learning_rate: must be >= 0, got {cfg.learning_rate}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size: must be >= 1, got {cfg.batch_size}")
    if cfg.model.rank > min(cfg.model.hidden_dim, cfg.model.input_dim):
        raise ConfigError(
            f"model.rank: {cfg.model.rank} exceeds "
            f"min(hidden_dim={cfg.model.hidden_dim}, input_dim={cfg.model.input_dim})"
        )
    for name in cfg.data.overrides:
        if name not in cfg.data.domains:
            raise ConfigError(f"data.overrides.{name}: domain not in data.domains")
    if cfg.strategy.kind in ("domain_aware", "utility_threshold"):
        missing = [d for d in cfg.data.domains if d not in cfg.budgets.entries]
        if missing:
            raise ConfigError(
                f"budgets.entries: missing budgets for domains {missing} "
                f"required by strategy {cfg.strategy.kind!r}"
            )
    try:
        BudgetTable.from_initial(
            cfg.budgets.entries, cfg.budgets.decay_rate, cfg.budgets.floor, cfg.budgets.decay_mode
        )
    except ValueError as exc:
        raise ConfigError(f"budgets: {exc}") from exc
    try:
        _calibration_object(cfg.calibration)
    except ValueError as exc:
        raise ConfigError(f"calibration: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse a YAML config file; an empty file yields the stock defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def _calibration_object(cal: CalibrationConfig) -> NoiseCalibration:
    return NoiseCalibration(
        base_scale={
            LayerPosition.EARLY: cal.early,
            LayerPosition.MIDDLE: cal.middle,
            LayerPosition.LATE: cal.late,
        },
        kind_multiplier={AdapterKind.A: cal.multiplier_a, AdapterKind.B: cal.multiplier_b},
        gate_factor=cal.gate_factor,
        nominal_delta=cal.nominal_delta,
        clip_norm=cal.clip_norm,
    )


@dataclass(frozen=True)
class Experiment:
    """Fully assembled run: frozen backbone, clients, and initial server state."""

    config: RunConfig
    backbone: BackboneModel
    clients: tuple[ClientState, ...]
    server: ServerState
    datasets: Mapping[str, Dataset]


def _domain_specs(cfg: RunConfig, rng: Rng) -> list[DomainSpec]:
    specs = default_federation_specs(
        rng, scale=cfg.data.scale, input_dim=cfg.model.input_dim, label_noise=cfg.data.label_noise
    )
    by_name = {s.domain: s for s in specs}
    chosen = []
    for name in cfg.data.domains:
        if name in by_name:
            spec = by_name[name]
        else:
            # Custom domain: same recipe as the stock trio, sized like the mean.
            jitter = rng.derive("weights", name).standard_normal(1, cfg.model.input_dim)[0]
            base = rng.derive("base-weights").standard_normal(1, cfg.model.input_dim)[0]
            w = base / (base**2).sum() ** 0.5 + 0.05 * jitter
            w /= (w**2).sum() ** 0.5
            spec = DomainSpec(
                domain=name,
                n_train=max(1, round(cfg.data.scale * 3452)),
                n_val=max(1, round(0.1 * cfg.data.scale * 3452)),
                input_dim=cfg.model.input_dim,
                true_weights=tuple(w),
                rotation_angle=DEFAULT_ROTATIONS.get(name, 0.0),
                label_noise=cfg.data.label_noise,
            )
        ov = cfg.data.overrides.get(name)
        if ov is not None:
            spec = replace(
                spec,
                n_train=spec.n_train if ov.n_train is None else ov.n_train,
                n_val=spec.n_val if ov.n_val is None else ov.n_val,
                rotation_angle=spec.rotation_angle if ov.rotation_angle is None else ov.rotation_angle,
                label_noise=spec.label_noise if ov.label_noise is None else ov.label_noise,
            )
        chosen.append(spec)
    return chosen


def build_experiment(cfg: RunConfig) -> Experiment:
    """Deterministically materialize data, model, clients, and server state.

    Client ids are assigned by sorted domain name, so declaration order in
    the config can never influence results.
    """
    master = Rng(cfg.seed)
    specs = _domain_specs(cfg, master.derive("specs"))
    specs = sorted(specs, key=lambda s: s.domain)

    datasets = {
        spec.domain: make_domain(spec, master.derive("dataset", spec.domain)) for spec in specs
    }
    backbone = BackboneModel.random(
        master.derive("model"), cfg.model.input_dim, cfg.model.hidden_dim, cfg.model.n_layers
    )
    adapters0 = init_adapters(backbone, cfg.model.rank, master.derive("adapters"))

    clients = tuple(
        ClientState(
            id=i,
            domain=spec.domain,
            data=datasets[spec.domain],
            model=backbone,
            adapters=adapters0,
            learning_rate=cfg.learning_rate,
            local_epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
        )
        for i, spec in enumerate(specs)
    )

    if cfg.strategy.kind == "uniform":
        budgets = BudgetTable.uniform(
            cfg.data.domains,
            cfg.strategy.eps_glob,
            decay_rate=cfg.budgets.decay_rate,
            floor=cfg.budgets.floor,
            decay_mode=cfg.budgets.decay_mode,
        )
    else:
        budgets = BudgetTable.from_initial(
            cfg.budgets.entries, cfg.budgets.decay_rate, cfg.budgets.floor, cfg.budgets.decay_mode
        )

    if cfg.strategy.kind == "utility_threshold":
        thresholds = {m: cfg.strategy.tau for m in METRIC_NAMES}
    else:
        thresholds = dict(cfg.thresholds)

    server = ServerState(
        backbone=backbone,
        global_adapters=adapters0,
        budgets=budgets,
        calibration=_calibration_object(cfg.calibration),
        thresholds=thresholds,
        strategy=cfg.strategy,
        round_index=0,
        rng_seed=cfg.seed,
    )
    return Experiment(cfg, backbone, clients, server, datasets)
