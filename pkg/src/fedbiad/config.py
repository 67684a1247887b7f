"""Run configuration: a flat key=value text format plus flag overrides.

The file format is line-oriented: one ``key=value`` pair per line, blank
lines and ``#`` comments ignored.  Every key has a documented default, so
an empty file is a valid configuration.  Flags override file values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .federation import FedConfig, TimingModel, VariationalSettings
from .metrics import LinkModel

DATASETS = ("synth_images", "mnist", "teacher", "sequences")
PARTITIONS = ("iid", "noniid")
FORMATS = ("csv", "json")


@dataclass(frozen=True)
class RunConfig:
    # round engine
    seed: int = 0
    strategy: str = "fedbiad"
    p: float = 0.2
    K: int = 20
    kappa: float = 0.1
    V: int = 10
    R: int = 60
    R_b: int = 55
    tau: int = 3
    eta: float = 1e-3
    agg_mode: str = "literal"
    # data
    dataset: str = "synth_images"
    n_train: int = 2000
    n_test: int = 1000
    mnist_images: str = ""
    mnist_labels: str = ""
    mnist_test_images: str = ""
    mnist_test_labels: str = ""
    teacher_in_dim: int = 8
    teacher_out_dim: int = 1
    noise_sd: float = 0.0
    vocab: int = 50
    seq_len: int = 8
    partition: str = "iid"
    classes_per_client: int = 2
    # model
    hidden_dim: int = 64
    n_layers: int = 1
    # variational family
    alpha: float = 0.5
    sigma2: float = 1.0
    prior_var: float = 1.0
    s2: str = "auto"
    weight_bound: float = 2.0
    # compression
    topk_fraction: float = 0.0
    # link + timing models
    downlink_mbps: float = 110.6
    uplink_mbps: float = 14.0
    agg_seconds: float = 0.0
    timing: str = "modeled"
    lttr_unit_seconds: float = 2e-5
    # output
    out_dir: str = "runs"
    format: str = "csv"

    def fed_config(self) -> FedConfig:
        return FedConfig(
            K=self.K,
            kappa=self.kappa,
            V=self.V,
            R=self.R,
            R_b=self.R_b,
            tau=self.tau,
            eta=self.eta,
            seed=self.seed,
            strategy=self.strategy,
            agg_mode=self.agg_mode,
            p=self.p,
        )

    def variational(self) -> VariationalSettings:
        s2 = self.s2
        if isinstance(s2, str) and s2 != "auto":
            s2 = float(s2)
        return VariationalSettings(
            alpha=self.alpha,
            sigma2=self.sigma2,
            prior_var=self.prior_var,
            s2=s2,
            weight_bound=self.weight_bound,
        )

    def link(self) -> LinkModel:
        return LinkModel(self.downlink_mbps, self.uplink_mbps, self.agg_seconds)

    def timing_model(self) -> TimingModel:
        return TimingModel(self.timing, self.lttr_unit_seconds)

    def lines(self) -> str:
        """Canonical key=value rendering; re-parsing it reproduces self."""
        return "\n".join(f"{k}={v}" for k, v in asdict(self).items()) + "\n"


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(key: str, raw: str):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value for key '{key}': {raw!r}") from exc


def _validate(cfg: RunConfig) -> RunConfig:
    cfg.fed_config()  # FedConfig owns the cross-field round rules
    cfg.variational()
    cfg.link()
    cfg.timing_model()
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"invalid value for key 'dataset': choose from {DATASETS}")
    if cfg.partition not in PARTITIONS:
        raise ConfigError(f"invalid value for key 'partition': choose from {PARTITIONS}")
    if cfg.format not in FORMATS:
        raise ConfigError(f"invalid value for key 'format': choose from {FORMATS}")
    if not 0.0 <= cfg.topk_fraction <= 1.0:
        raise ConfigError("invalid value for key 'topk_fraction': must lie in [0, 1]")
    if cfg.n_train < cfg.K:
        raise ConfigError(f"n_train ({cfg.n_train}) must cover K ({cfg.K}) clients")
    if cfg.dataset == "mnist":
        for key in ("mnist_images", "mnist_labels", "mnist_test_images", "mnist_test_labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"dataset 'mnist' requires key '{key}'")
    if cfg.s2 != "auto":
        try:
            float(cfg.s2)
        except ValueError as exc:
            raise ConfigError("invalid value for key 's2': number or 'auto'") from exc
    return cfg


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a validated RunConfig from an optional file plus overrides.

    Unknown keys, unparsable values, and cross-field violations raise a
    ConfigError naming the offending key.
    """
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key, raw = key.strip(), raw.strip()
            if key not in _FIELDS:
                raise ConfigError(f"unknown key '{key}'")
            values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key '{key}'")
        values[key] = _convert(key, str(raw))
    return _validate(RunConfig(**values))


def with_value(cfg: RunConfig, key: str, value) -> RunConfig:
    if key not in _FIELDS:
        raise ConfigError(f"unknown key '{key}'")
    return _validate(replace(cfg, **{key: value}))
