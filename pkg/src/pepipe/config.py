"""Run configuration: one INI file holding every hyperparameter of a run.

Sections map onto the library's config dataclasses field by field, so any
field can be overridden from a file.  Two named profiles provide the
defaults: ``desk`` (64 px, minutes on a laptop) and ``paper`` (224 px
classifier, 416 px detector, 10,000 detector iterations).
"""

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .classifier import ClassifierConfig
from .detector import DetectorConfig
from .errors import ConfigError
from .metrics import DEFAULT_THRESHOLDS
from .phantom import PhantomConfig

PROFILES = ("desk", "paper")


@dataclass
class DatasetConfig:
    n_positive: int = 250
    n_negative: int = 250
    val_fraction: float = 0.2
    detection_images: int = 673
    detection_val: int = 100
    pretext_images: int = 600
    pretext_val_fraction: float = 0.2


@dataclass
class EvalConfig:
    iou_thresholds: tuple = DEFAULT_THRESHOLDS
    conf_threshold: float = 0.25


@dataclass
class FusionConfig:
    tau_cls: float = 0.5
    tau_det: float = 0.5


@dataclass
class PathsConfig:
    backbone_checkpoint: str = ""
    classifier_checkpoint: str = ""
    detector_checkpoint: str = ""


@dataclass
class RunConfig:
    seed: int = 7
    profile: str = "desk"
    workers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(iterations=3000))
    eval: EvalConfig = field(default_factory=EvalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    # -- derived component configs (all randomness from the single seed) --------

    def phantom_for(self, purpose):
        offsets = {"classification": 0, "detection": 1, "pretext": 2}
        return replace(self.phantom, seed=self.seed + offsets[purpose])

    def classifier_config(self):
        return replace(self.classifier, augment_config=replace(self.augment, seed=self.seed), seed=self.seed)

    def detector_config(self):
        return replace(self.detector, seed=self.seed)

    # -- INI ----------------------------------------------------------------------

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed), "profile": self.profile, "workers": str(self.workers)}
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name not in SKIP}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_ini())
        return path


SECTIONS = ("dataset", "phantom", "classifier", "augment", "detector", "eval", "fusion", "paths")
SKIP = {"seed", "augment_config", "stride"}


def _format(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_scalar(text, like, key):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _parse(text, like, key):
    if isinstance(like, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        if not like:
            # anchors: flat "w, h, w, h" list
            vals = [float(p) for p in parts]
            if len(vals) % 2:
                raise ConfigError(f"{key}: expected (w, h) pairs")
            return tuple(zip(vals[::2], vals[1::2]))
        proto = like[0]
        return tuple(_parse_scalar(p, proto, key) for p in parts)
    return _parse_scalar(text, like, key)


def profile_defaults(profile):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    cfg = RunConfig(profile=profile)
    if profile == "paper":
        cfg.phantom = replace(cfg.phantom, image_size=416)
        cfg.classifier = replace(cfg.classifier, input_size=224)
        cfg.detector = DetectorConfig(input_size=416, iterations=10_000, eval_every=500)
    return cfg


def _apply_section(obj, section, items):
    known = {f.name: f for f in fields(obj) if f.name not in SKIP}
    updates = {}
    for key, text in items:
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = getattr(obj, key)
        if section == "detector" and key == "anchors":
            updates[key] = _parse(text, (), f"{section}.{key}")
        else:
            updates[key] = _parse(text, default, f"{section}.{key}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def load_run_config(path=None, profile=None, seed=None, workers=None):
    """Profile defaults, then the INI file, then explicit overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    run = dict(cp["run"]) if cp.has_section("run") else {}
    chosen = profile or run.get("profile", "desk")
    cfg = profile_defaults(chosen)
    unknown = set(cp.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    extra = set(run) - {"seed", "profile", "workers"}
    if extra:
        raise ConfigError(f"[run] unknown keys: {sorted(extra)}")
    if "seed" in run:
        cfg.seed = _parse_scalar(run["seed"], 0, "run.seed")
    if "workers" in run:
        cfg.workers = _parse_scalar(run["workers"], 0, "run.workers")
    for name in SECTIONS:
        if cp.has_section(name):
            setattr(cfg, name, _apply_section(getattr(cfg, name), name, cp.items(name)))
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg
