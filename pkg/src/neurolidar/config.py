"""Plain-text run configuration (INI ``key = value`` sections).

Every section maps onto a dataclass; unknown sections or keys and malformed
values raise :class:`ConfigError` naming the offending field, before any
output is written.
"""
import configparser
import dataclasses
from dataclasses import dataclass, field

from .extrap import ExtrapolatorConfig, LossWeights, TrainConfig
from .keyframe import DetectorTrainConfig, KeyframeRuleConfig
from .pipeline import PipelineConfig
from .protocol import FPS_SET
from .scene import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    count: int = 10
    speed_min: float = 0.0
    speed_max: float = 20.0
    max_objects: int = 6

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.max_objects < 1:
            raise ValueError("max_objects must be at least 1")


@dataclass(frozen=True)
class DetectorSection:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    delta_us: int = 20_000
    val_fraction: float = 0.2
    balance_classes: bool = False

    def __post_init__(self):
        _positive(self, "epochs", "batch_size", "lr", "delta_us")
        _fraction(self.val_fraction)


@dataclass(frozen=True)
class ExtrapSection:
    variant: str = "full"
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    bins: int = 5
    widths: tuple = (16, 32, 64)
    bottleneck: int = 128
    fps: tuple = FPS_SET
    repeats: int = 1
    val_fraction: float = 0.2
    lambda_grad: float = 10.0
    lambda_norm: float = 0.01
    lambda_ssim: float = 1.0

    def __post_init__(self):
        _positive(self, "epochs", "batch_size", "lr", "bins", "bottleneck", "repeats")
        _fraction(self.val_fraction)
        if not self.fps:
            raise ValueError("fps list is empty")
        ExtrapolatorConfig.variant(self.variant)
        LossWeights(1.0, self.lambda_grad, self.lambda_norm, self.lambda_ssim)

    def model_config(self, scene, variant=None):
        return ExtrapolatorConfig.variant(variant or self.variant, height=scene.height,
                                          width=scene.width, bins=self.bins,
                                          widths=self.widths, bottleneck=self.bottleneck,
                                          max_range=scene.max_range)

    def train_config(self, seed):
        return TrainConfig(self.epochs, self.batch_size, self.lr, seed,
                           LossWeights(1.0, self.lambda_grad, self.lambda_norm, self.lambda_ssim))


@dataclass(frozen=True)
class EvalSection:
    mode: str = "adaptive"
    fps: tuple = FPS_SET
    repeats: int = 3

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError("mode must be 'adaptive' or 'fixed'")
        if not self.fps:
            raise ValueError("fps list is empty")
        _positive(self, "repeats")


def _positive(obj, *names):
    for n in names:
        if not getattr(obj, n) > 0:
            raise ValueError(f"{n} must be positive")


def _fraction(v):
    if not 0 <= v < 1:
        raise ValueError("val_fraction must be in [0, 1)")


SECTIONS = {
    "scene": SceneConfig,
    "corpus": CorpusConfig,
    "keyframe": KeyframeRuleConfig,
    "detector": DetectorSection,
    "extrapolator": ExtrapSection,
    "eval": EvalSection,
    "pipeline": PipelineConfig,
}


@dataclass
class RunConfig:
    text: str = ""
    seed: int = 0
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        if name in SECTIONS:
            return SECTIONS[name]()
        raise AttributeError(name)


def _convert(raw, default, where):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") \
            from None


def parse_config(text, seed=None):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {}
    run_seed = 0
    for name in parser.sections():
        if name == "run":
            for key, raw in parser.items(name):
                if key != "seed":
                    raise ConfigError(f"run.{key}: unknown key")
                run_seed = _convert(raw, 0, "run.seed")
            continue
        if name not in SECTIONS:
            raise ConfigError(f"[{name}]: unknown section; expected one of "
                              f"{sorted(SECTIONS) + ['run']}")
        cls = SECTIONS[name]
        defaults = {f.name: f.default if f.default is not dataclasses.MISSING
                    else f.default_factory() for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser.items(name):
            if key not in defaults:
                raise ConfigError(f"{name}.{key}: unknown key")
            kwargs[key] = _convert(raw, defaults[key], f"{name}.{key}")
        try:
            sections[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    return RunConfig(text, run_seed if seed is None else seed, sections)


def load_config(path=None, seed=None):
    if path is None:
        return parse_config("", seed)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, seed)
