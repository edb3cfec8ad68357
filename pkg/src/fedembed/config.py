"""Declarative experiment configuration (JSON).

A config file names a method, a dataset and a seed; every other field has a
default. Unknown keys are rejected, and all validation problems are
collected and reported together.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .data import MNIST_BALANCED, MNIST_IMBALANCED
from .errors import ConfigurationError
from .privacy import SITES, DPConfig

METHOD_NAMES = (
    "global",
    "global+",
    "fedrep",
    "pfedme",
    "pfedkm",
    "fedembed-som",
    "fedembed-personal",
    "fedembed-prototype",
    "fedembed-type",
)

DATA_DIR_ENV = "FEDEMBED_DATA_DIR"


def default_data_dir():
    return os.environ.get(DATA_DIR_ENV, str(Path.home() / ".cache" / "fedembed" / "mnist"))


@dataclass(frozen=True)
class MethodConfig:
    name: str = "fedembed-prototype"
    pfedme_lambda: float = 0.1


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "mnist"
    path: str | None = None
    n_base_styles: int = 8
    num_styles: int = 20
    samples_per_style: int = 200
    noise_scale: float = 0.3
    side: int = 28


@dataclass(frozen=True)
class PopulationConfig:
    preset: str | None = None
    K: int = 10
    proportions: tuple | None = None
    users_per_subpop: int = 30
    total_users: int | None = None
    train_per_user: int = 20
    test_per_user: int = 10


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "small-mlp"
    embed_dim: int = 28
    feature_dim: int = 32
    relu: bool = True


@dataclass(frozen=True)
class ClusteringConfig:
    som_nodes: int | None = None
    som_grid: tuple | None = None
    som_lr0: float = 0.5
    som_rule: str = "best"
    som_broadcast: bool = False
    remap_every: int = 25
    triplet_lr: float = 0.01
    margin: float = 1.0


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 300
    eval_every: int = 10
    participation: float = 1.0
    local_lr: float = 1e-3
    central_lr: float = 0.01
    kway_weight: float = 1.0
    embed_source: str = "global"


@dataclass(frozen=True)
class ExperimentConfig:
    method: MethodConfig = field(default_factory=MethodConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    population: PopulationConfig = field(default_factory=PopulationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dp: DPConfig = field(default_factory=DPConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    output_dir: str | None = None
    name: str | None = None

    @property
    def K(self):
        return self.population.K

    @property
    def proportions(self):
        return self.population.proportions

    @property
    def total_users(self):
        return self.population.total_users


POPULATION_PRESETS = {
    "mnist-balanced": {"K": 10, "proportions": MNIST_BALANCED},
    "mnist-imbalanced": {"K": 10, "proportions": MNIST_IMBALANCED},
    "synthetic-balanced": {"K": 20, "proportions": (0.05,) * 20},
}

SECTIONS = {
    "method": MethodConfig,
    "dataset": DatasetConfig,
    "population": PopulationConfig,
    "model": ModelConfig,
    "dp": DPConfig,
    "clustering": ClusteringConfig,
    "training": TrainingConfig,
}
TOP_LEVEL = {"seed", "output_dir", "name"} | set(SECTIONS)
REQUIRED = ("method", "dataset", "seed")


def _coerce(value, default):
    if isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _section(cls, raw, where, errors):
    if isinstance(raw, str) and cls in (MethodConfig,):
        raw = {"name": raw}
    if isinstance(raw, str) and cls is DatasetConfig:
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected an object")
        return cls()
    names = {f.name: f for f in fields(cls)}
    for key in sorted(set(raw) - set(names)):
        errors.append(f"{where}.{key}: unknown key")
    kwargs = {}
    for key, f in names.items():
        if key in raw:
            default = f.default if f.default is not None else None
            kwargs[key] = _coerce(raw[key], default)
    try:
        return cls(**kwargs)
    except (ConfigurationError, TypeError) as exc:
        errors.append(f"{where}: {exc}")
        return cls()


def _validate(cfg: ExperimentConfig, errors):
    m, d, p, mod, c, t = cfg.method, cfg.dataset, cfg.population, cfg.model, cfg.clustering, cfg.training
    if m.name not in METHOD_NAMES:
        errors.append(f"method.name: unknown method {m.name!r}; choose from {', '.join(METHOD_NAMES)}")
    if m.name == "pfedme" and not m.pfedme_lambda > 0:
        errors.append("method.pfedme_lambda: must be > 0")
    if d.kind not in ("mnist", "synthetic"):
        errors.append(f"dataset.kind: must be 'mnist' or 'synthetic', got {d.kind!r}")
    if d.kind == "synthetic":
        if d.n_base_styles < 2 or d.num_styles < d.n_base_styles:
            errors.append("dataset: need num_styles >= n_base_styles >= 2")
        if d.num_styles != p.K:
            errors.append(f"population.K ({p.K}) must equal dataset.num_styles ({d.num_styles})")
        if d.noise_scale < 0:
            errors.append("dataset.noise_scale: must be >= 0")
    if p.K < 2:
        errors.append("population.K: must be >= 2")
    if p.proportions is not None:
        if len(p.proportions) != p.K:
            errors.append(f"population.proportions: {len(p.proportions)} entries for K={p.K}")
        elif abs(sum(p.proportions) - 1.0) > 1e-9:
            errors.append(f"population.proportions: sum to {sum(p.proportions):.6g}, must be 1")
        elif any(x < 0 for x in p.proportions):
            errors.append("population.proportions: must be non-negative")
    if p.total_users is not None and p.total_users < p.K:
        errors.append("population.total_users: fewer users than sub-populations")
    if p.train_per_user < 2 or p.train_per_user % 2 or p.test_per_user < 2 or p.test_per_user % 2:
        errors.append("population: train_per_user and test_per_user must be even and >= 2")
    if mod.preset not in ("mnist-conv", "small-mlp", "synthetic-conv"):
        errors.append(f"model.preset: unknown preset {mod.preset!r}")
    side = d.side if d.kind == "synthetic" else 28
    if mod.embed_dim != side:
        errors.append(f"model.embed_dim: must equal the image side {side} (diagonal concatenation)")
    if mod.feature_dim < 1:
        errors.append("model.feature_dim: must be >= 1")
    if c.som_rule not in ("best", "mean"):
        errors.append("clustering.som_rule: must be 'best' or 'mean'")
    if c.som_nodes is not None and c.som_nodes < p.K:
        errors.append("clustering.som_nodes: must be >= K")
    if c.som_grid is not None:
        n = c.som_nodes or p.K
        if len(c.som_grid) != 2 or c.som_grid[0] * c.som_grid[1] != n:
            errors.append(f"clustering.som_grid: must be [rows, cols] with rows*cols = {n}")
    if c.remap_every < 1:
        errors.append("clustering.remap_every: must be >= 1")
    if c.margin <= 0:
        errors.append("clustering.margin: must be > 0")
    if t.rounds < 0:
        errors.append("training.rounds: must be >= 0")
    if t.eval_every < 1:
        errors.append("training.eval_every: must be >= 1")
    if not 0 < t.participation <= 1:
        errors.append("training.participation: must be in (0, 1]")
    if t.embed_source not in ("global", "subpop", "global+subpop"):
        errors.append("training.embed_source: must be global, subpop or global+subpop")
    if cfg.dp.site not in SITES:
        errors.append(f"dp.site: must be one of {SITES}")


def from_dict(raw: dict) -> ExperimentConfig:
    errors = []
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    for key in sorted(set(raw) - TOP_LEVEL):
        errors.append(f"{key}: unknown key")
    for key in REQUIRED:
        if key not in raw:
            errors.append(f"{key}: required key missing")
    parts = {name: _section(cls, raw.get(name, {}), name, errors) for name, cls in SECTIONS.items()}
    pop = parts["population"]
    if pop.preset is not None:
        if pop.preset not in POPULATION_PRESETS:
            errors.append(f"population.preset: unknown preset {pop.preset!r}")
        else:
            preset = POPULATION_PRESETS[pop.preset]
            explicit = raw.get("population", {})
            pop = replace(
                pop,
                K=explicit.get("K", preset["K"]),
                proportions=tuple(explicit.get("proportions", preset["proportions"])),
            )
    if pop.proportions is None:
        pop = replace(pop, proportions=(1.0 / pop.K,) * pop.K)
    if pop.total_users is None:
        pop = replace(pop, total_users=pop.users_per_subpop * pop.K)
    parts["population"] = pop
    ds = parts["dataset"]
    if ds.kind == "mnist" and ds.path is None:
        parts["dataset"] = replace(ds, path=default_data_dir())
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errors.append("seed: must be an integer")
        seed = 0
    cfg = ExperimentConfig(
        **parts,
        seed=seed,
        output_dir=raw.get("output_dir"),
        name=raw.get("name"),
    )
    _validate(cfg, errors)
    if errors:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def parse_config(file) -> ExperimentConfig:
    path = Path(file)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: malformed JSON ({exc})") from None
    return from_dict(raw)


def to_dict(cfg) -> dict:
    def clean(v):
        if is_dataclass(v):
            return {k: clean(x) for k, x in asdict(v).items()}
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (tuple, list)):
            return [clean(x) for x in v]
        return v

    return clean(cfg)


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy ``cfg`` with some section fields replaced, e.g. ``training={"rounds": 5}``.

    The result is re-validated.
    """
    raw = to_dict(cfg)
    for name, values in sections.items():
        if isinstance(values, dict) and isinstance(raw.get(name), dict):
            raw[name].update(values)
        else:
            raw[name] = values
    pop = raw["population"]
    pop["preset"] = None
    if "population" in sections and "total_users" not in sections["population"]:
        pop["total_users"] = None
    return from_dict(raw)
