"""
Run Configuration - one RunConfig per run
Flat `key = value` files with dotted keys, --set overrides, FLOWBACK_SEED
"""

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Set, Tuple

from flow_blocks import FlowError, ModelGeometry
from optimizer import OptimizerConfig
from alignment import AlignmentConfig, AlignmentError, Strategy, default_sites
import toy_datasets

logger = logging.getLogger(__name__)

SEED_ENV = 'FLOWBACK_SEED'
_IMPLICIT_SECTION = 'run'


class ConfigError(ValueError):
    """Unknown key, unparsable value, or inconsistent settings"""


@dataclass
class TrainSchedule:
    batch: int = 64
    steps: int = 200
    label_dropout: float = 0.1
    mixture_prob: float = 0.5
    mixture_concentration: float = 1.0
    checkpoint_every: int = 0
    workers: int = 1
    log_every: int = 10


@dataclass
class SamplingConfig:
    cfg_scale: float = 1.0
    n: int = 256
    denoise: bool = False


@dataclass
class RunConfig:
    dataset: str = 'gauss2d'
    data_path: Optional[str] = None
    seed: int = 0
    sigma_noise: float = 0.2
    ema_decay: float = 0.9999
    model: ModelGeometry = field(default_factory=ModelGeometry)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def validate(self) -> 'RunConfig':
        try:
            self.model.validate()
            self.align.validate(self.model)
        except (FlowError, AlignmentError) as e:
            raise ConfigError(str(e)) from e
        if self.dataset not in toy_datasets.DATASETS:
            raise ConfigError(f"unknown dataset '{self.dataset}' ({'|'.join(toy_datasets.DATASETS)})")
        if self.dataset == 'file' and not self.data_path:
            raise ConfigError("dataset = file needs data.path")
        if self.align.encoder == 'file' and self.dataset != 'file':
            raise ConfigError("align.encoder = file needs dataset = file (features are looked up by sample id)")
        if self.dataset != 'file':
            tokens, channels = toy_datasets.dataset_geometry(self.dataset, self.model.patch)
            if (tokens, channels) != (self.model.tokens, self.model.channels):
                raise ConfigError(f"dataset {self.dataset} (patch {self.model.patch}) gives {tokens} tokens x "
                                  f"{channels} channels, model has {self.model.tokens} x {self.model.channels}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.sigma_noise < 0:
            raise ConfigError("sigma_noise must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.train.batch < 1 or self.train.steps < 0 or self.train.workers < 1:
            raise ConfigError("train.batch and train.workers must be >= 1, train.steps >= 0")
        if self.train.workers > self.train.batch:
            raise ConfigError("train.workers cannot exceed train.batch")
        if not 0.0 <= self.train.label_dropout <= 1.0:
            raise ConfigError("train.label_dropout must lie in [0, 1]")
        if not 0.0 <= self.train.mixture_prob <= 1.0:
            raise ConfigError("train.mixture_prob must lie in [0, 1]")
        if self.train.mixture_concentration <= 0:
            raise ConfigError("train.mixture_concentration must be > 0")
        if self.sampling.cfg_scale < 1.0:
            raise ConfigError("sample.cfg_scale must be >= 1")
        return self


# ============================================================================
# FLAT KEYS
# ============================================================================
# dotted-key prefix -> RunConfig attribute
_SECTIONS = {'model': 'model', 'optim': 'optimizer', 'train': 'train', 'align': 'align', 'sample': 'sampling'}
_TOP_LEVEL = {'dataset': 'dataset', 'data.path': 'data_path', 'seed': 'seed',
              'sigma_noise': 'sigma_noise', 'ema_decay': 'ema_decay'}
_RENAMED = {('align', 'lambda'): 'lambda_align'}


def _locate(cfg: RunConfig, key: str) -> Tuple[object, str]:
    if key in _TOP_LEVEL:
        return cfg, _TOP_LEVEL[key]
    section, _, name = key.partition('.')
    if section not in _SECTIONS or not name:
        raise ConfigError(f"unknown config key '{key}'")
    target = getattr(cfg, _SECTIONS[section])
    attr = _RENAMED.get((section, name), name)
    if attr not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key '{key}'")
    return target, attr


def _parse_sites(text: str, geometry: ModelGeometry):
    text = text.strip().lower()
    if text in ('', 'none'):
        return ()
    if text == 'default':
        return default_sites(geometry)
    sites = []
    for item in text.split(','):
        t, sep, l = item.strip().partition(':')
        if not sep:
            raise ValueError(f"site '{item.strip()}' is not '<block>:<layer>'")
        sites.append((int(t), int(l)))
    return tuple(sites)


def _parse_value(current, text: str, attr: str, cfg: RunConfig):
    text = text.strip()
    if attr == 'sites':
        return _parse_sites(text, cfg.model)
    if attr == 'strategy':
        return Strategy.parse(text)
    if attr == 'betas':
        b1, b2 = (float(v) for v in text.split(','))
        return (b1, b2)
    if isinstance(current, bool):
        if text.lower() in ('1', 'true', 'yes', 'on'):
            return True
        if text.lower() in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError(f"'{text}' is not a boolean")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if text.lower() in ('', 'none'):
        return None
    return text


def apply_setting(cfg: RunConfig, key: str, value: str):
    target, attr = _locate(cfg, key)
    try:
        parsed = _parse_value(getattr(target, attr), value, attr, cfg)
    except (ValueError, AlignmentError) as e:
        raise ConfigError(f"bad value for '{key}': {value!r} ({e})") from e
    setattr(target, attr, parsed)


def _format_value(value) -> str:
    if isinstance(value, Strategy):
        return value.value
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return 'none'
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ','.join(f"{t}:{l}" for t, l in value)
    if isinstance(value, tuple):
        return ','.join(_format_value(v) for v in value) if value else 'none'
    return str(value)


def to_flat(cfg: RunConfig) -> Dict[str, str]:
    """Every setting as dotted key -> text (floats via repr, so they read back exactly)"""
    flat = {key: _format_value(getattr(cfg, attr)) for key, attr in _TOP_LEVEL.items()}
    for section, attr in _SECTIONS.items():
        target = getattr(cfg, attr)
        for f in dataclasses.fields(target):
            name = next((k[1] for k, v in _RENAMED.items() if k[0] == section and v == f.name), f.name)
            flat[f"{section}.{name}"] = _format_value(getattr(target, f.name))
    return flat


def _read_flat_file(path: Path) -> Dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=('#', ';'),
                                       inline_comment_prefixes=('#',))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_IMPLICIT_SECTION}]\n" + path.read_text(encoding='utf-8'), source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return dict(parser[_IMPLICIT_SECTION])


def _ordered(settings: Dict[str, str]) -> Iterable[Tuple[str, str]]:
    # geometry first so 'align.sites = default' sees the final model shape
    return sorted(settings.items(), key=lambda kv: (not kv[0].startswith('model.'), kv[0] == 'align.sites'))


def from_flat(settings: Dict[str, str], validate: bool = True) -> RunConfig:
    cfg = RunConfig()
    explicit: Set[str] = set(settings)
    for key, value in _ordered(settings):
        apply_setting(cfg, key, value)
    _fill_derived(cfg, explicit)
    return cfg.validate() if validate else cfg


def _fill_derived(cfg: RunConfig, explicit: Set[str]):
    if cfg.dataset in toy_datasets.DATASETS and cfg.dataset != 'file':
        tokens, channels = toy_datasets.dataset_geometry(cfg.dataset, cfg.model.patch)
        if 'model.tokens' not in explicit:
            cfg.model.tokens = tokens
        if 'model.channels' not in explicit:
            cfg.model.channels = channels
    if 'align.sites' not in explicit:
        cfg.align.sites = default_sites(cfg.model)


def parse_overrides(overrides: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in overrides or ():
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"override '{item}' is not 'key=value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: Iterable[str] = (), environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """File settings, then --set overrides, then FLOWBACK_SEED"""
    settings: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        settings.update(_read_flat_file(path))
    settings.update(parse_overrides(overrides))

    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        settings['seed'] = environ[SEED_ENV]
        logger.info(f"⚠️ Seed overridden by {SEED_ENV}={environ[SEED_ENV]}")
    return from_flat(settings)
