"""Experiment configuration read from `key = value` files with sections.

Example::

    [experiment]
    seed = 0
    corpus = corpus
    output = out
    features = mfcc
    backend = gmm-ubm
    alphas = all

    [gmm]
    components = 64

Relative paths are resolved against the directory holding the config file.
Every section and key is optional; unknown ones are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, VsvError
from .evaluation import DcfConfig
from .frontend import ALPHA_GRID, FrontendConfig, check_alpha
from .neural import TrainConfig

FEATURES = ("mfcc", "spk-bn", "apc-bn")
BACKENDS = ("gmm-ubm", "ivector")


@dataclass(frozen=True)
class CorpusConfig:
    speakers: int = 20
    phrases: int = 5
    enroll_sessions: int = 3
    test_sessions: int = 2
    background_speakers: int = 30
    background_phrases: int = 5
    background_sessions: int = 2
    vtl_min: float = 0.9
    vtl_max: float = 1.1
    phrase_ms: float = 2000.0
    idiosyncrasy: float = 0.05

    def __post_init__(self):
        for name in ("speakers", "phrases", "enroll_sessions", "test_sessions",
                     "background_speakers", "background_phrases", "background_sessions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"corpus.{name} must be >= 1")
        if self.speakers < 2:
            raise ConfigError("corpus.speakers must be >= 2 so imposter trials exist")
        if not 0.8 <= self.vtl_min <= self.vtl_max <= 1.2:
            raise ConfigError("corpus VTL range must satisfy 0.8 <= vtl_min <= vtl_max <= 1.2")
        if not 1500.0 <= self.phrase_ms <= 3000.0:
            raise ConfigError("corpus.phrase_ms must lie in [1500, 3000]")

    @property
    def sessions(self) -> int:
        return self.enroll_sessions + self.test_sessions


@dataclass(frozen=True)
class GmmSettings:
    components: int = 64
    em_iterations: int = 10
    subsample: int = 20000
    relevance_factor: float = 10.0
    map_iterations: int = 3


@dataclass(frozen=True)
class IvectorSettings:
    rank: int = 50
    tv_iterations: int = 10
    plda_iterations: int = 10
    norm_iterations: int = 2


@dataclass(frozen=True)
class NetworkSettings:
    # desk-scale widths; the layer counts, taps and schedules follow the full setup
    mlp_hidden: int = 64
    mlp_layers: int = 7
    context: int = 5
    mlp_epochs: int = 30
    mlp_lr: tuple = (0.8, 0.08)
    mlp_batch: tuple = (256, 512, 1024)
    gru_hidden: int = 64
    gru_layers: int = 3
    apc_shift: int = 5
    apc_epochs: int = 30
    apc_lr: float = 0.001
    apc_batch: int = 32
    apc_crop: int = 200
    spk_tap: int = 4
    apc_tap: int = 3
    pca_dim: int = 57

    def train_config(self, seed: int) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(seed=seed, **{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus_dir: Path = Path("corpus")
    output_dir: Path = Path("out")
    workers: int = 1
    features: tuple = ("mfcc",)
    backend: str = "gmm-ubm"
    alphas: tuple = ALPHA_GRID
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    gmm: GmmSettings = field(default_factory=GmmSettings)
    ivector: IvectorSettings = field(default_factory=IvectorSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    dcf: DcfConfig = field(default_factory=DcfConfig)

    def __post_init__(self):
        bad = [f for f in self.features if f not in FEATURES]
        if bad or not self.features:
            raise ConfigError(f"features must be a non-empty subset of {FEATURES}, got {list(self.features)}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.alphas:
            raise ConfigError("alpha grid is empty")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def digest(self, *parts) -> str:
        """Stable hash of selected config sections, used to stamp stage outputs."""
        blob = json.dumps([_plain(p) for p in parts], sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _section(parser, name: str, cls):
    if not parser.has_section(name):
        return cls()
    fields = {f.name: f.default for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in parser.items(name):
        if key not in fields:
            raise ConfigError(f"unknown key [{name}] {key}")
        values[key] = _coerce(name, key, raw, fields[key])
    try:
        return cls(**values)
    except VsvError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def parse_alphas(raw: str) -> tuple:
    raw = raw.strip().lower()
    if raw == "all":
        return ALPHA_GRID
    try:
        alphas = sorted({check_alpha(float(v)) for v in raw.split(",") if v.strip()})
    except (ValueError, VsvError) as exc:
        raise ConfigError(f"bad alpha list {raw!r}: {exc}") from exc
    return tuple(alphas)


EXPERIMENT_KEYS = {"seed", "corpus", "output", "workers", "features", "backend", "alphas"}
SECTIONS = {"experiment", "corpus", "frontend", "gmm", "ivector", "network", "dcf"}


def load_config(path=None) -> ExperimentConfig:
    """Read a config file; None gives the defaults relative to the working directory."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(parser.sections()) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base = path.resolve().parent
    exp = dict(parser.items("experiment")) if parser.has_section("experiment") else {}
    bad = set(exp) - EXPERIMENT_KEYS
    if bad:
        raise ConfigError(f"unknown key(s) in [experiment]: {sorted(bad)}")
    kwargs = {}
    if "seed" in exp:
        kwargs["seed"] = _coerce("experiment", "seed", exp["seed"], 0)
    if "workers" in exp:
        kwargs["workers"] = _coerce("experiment", "workers", exp["workers"], 0)
    if "corpus" in exp:
        kwargs["corpus_dir"] = base / exp["corpus"]
    else:
        kwargs["corpus_dir"] = base / "corpus"
    if "output" in exp:
        kwargs["output_dir"] = base / exp["output"]
    else:
        kwargs["output_dir"] = base / "out"
    if "features" in exp:
        kwargs["features"] = tuple(v.strip() for v in exp["features"].split(",") if v.strip())
    if "backend" in exp:
        kwargs["backend"] = exp["backend"].strip()
    if "alphas" in exp:
        kwargs["alphas"] = parse_alphas(exp["alphas"])
    kwargs["corpus"] = _section(parser, "corpus", CorpusConfig)
    kwargs["frontend"] = _section(parser, "frontend", FrontendConfig)
    kwargs["gmm"] = _section(parser, "gmm", GmmSettings)
    kwargs["ivector"] = _section(parser, "ivector", IvectorSettings)
    kwargs["network"] = _section(parser, "network", NetworkSettings)
    kwargs["dcf"] = _section(parser, "dcf", DcfConfig)
    return ExperimentConfig(**kwargs)
