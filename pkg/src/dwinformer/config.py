"""Run configuration files.

UTF-8 text with ``key = value`` lines under ``[model]``, ``[train]`` and
``[data]`` headers; ``#`` starts a comment line. Unknown sections or keys,
duplicates, missing required keys, multi-line values and out-of-range
numbers are all rejected with :class:`ConfigError`.
"""

import configparser
from dataclasses import dataclass, field

from dwinformer.errors import ConfigError
from dwinformer.model import ModelConfig

REQUIRED = object()


def _int_list(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _heads(text):
    vals = _int_list(text)
    return vals[0] if len(vals) == 1 else vals


# (parser, default, range check)
SCHEMA = {
    "model": {
        "image_size": (int, REQUIRED, lambda v: v >= 32),
        "base_channels": (int, REQUIRED, lambda v: v >= 1),
        "depths": (_int_list, REQUIRED, lambda v: len(v) == 4 and min(v) >= 1),
        "window_size": (int, REQUIRED, lambda v: v >= 1),
        "heads": (_heads, REQUIRED, None),
        "decoder_heads": (int, None, lambda v: v >= 1),
        "max_depth": (float, REQUIRED, lambda v: v > 0),
        "decoder_channels": (str, "toy", lambda v: v in ("toy", "full")),
        "init_seed": (int, 0, lambda v: v >= 0),
    },
    "train": {
        "total_steps": (int, REQUIRED, lambda v: v >= 1),
        "batch_size": (int, 8, lambda v: v >= 1),
        "lr_init": (float, 3e-6, lambda v: v >= 0),
        "lr_peak": (float, 2.5e-5, lambda v: v > 0),
        "warmup_steps": (int, None, lambda v: v >= 0),
        "beta1": (float, 0.9, lambda v: 0 <= v < 1),
        "beta2": (float, 0.999, lambda v: 0 <= v < 1),
        "adam_eps": (float, 1e-8, lambda v: v > 0),
        "si_lambda": (float, 0.85, lambda v: 0 <= v <= 1),
        "si_alpha": (float, 10.0, lambda v: v > 0),
        "log_every": (int, 1, lambda v: v >= 1),
        "ckpt_every": (int, 0, lambda v: v >= 0),
        "seed": (int, 0, lambda v: v >= 0),
        "shuffle": (_bool, True, None),
    },
    "data": {
        "num_samples": (int, REQUIRED, lambda v: v >= 1),
        "seed": (int, REQUIRED, lambda v: v >= 0),
        "flip": (_bool, False, None),
        "near": (float, 2.0, lambda v: v > 0),
        "far": (float, 9.0, lambda v: v > 0),
        "num_rects": (int, 3, lambda v: v >= 0),
        "rect_min": (int, 8, lambda v: v >= 1),
        "rect_max": (int, 32, lambda v: v >= 1),
        "rect_near": (float, 1.0, lambda v: v > 0),
        "rect_far": (float, 7.0, lambda v: v > 0),
        "grid": (int, 4, lambda v: v >= 1),
        "noise": (float, 0.02, lambda v: 0 <= v <= 1),
    },
}


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 8
    lr_init: float = 3e-6
    lr_peak: float = 2.5e-5
    warmup_steps: int = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    si_lambda: float = 0.85
    si_alpha: float = 10.0
    log_every: int = 1
    ckpt_every: int = 0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", self.total_steps // 10)
        if self.warmup_steps > self.total_steps:
            raise ConfigError("train.warmup_steps exceeds train.total_steps")


@dataclass(frozen=True)
class DataConfig:
    num_samples: int
    seed: int
    flip: bool = False
    near: float = 2.0
    far: float = 9.0
    num_rects: int = 3
    rect_min: int = 8
    rect_max: int = 32
    rect_near: float = 1.0
    rect_far: float = 7.0
    grid: int = 4
    noise: float = 0.02

    def scene_kwargs(self, model):
        return dict(height=model.image_size, width=model.image_size, max_depth=model.max_depth,
                    near=self.near, far=self.far, num_rects=self.num_rects, rect_min=self.rect_min,
                    rect_max=self.rect_max, rect_near=self.rect_near, rect_far=self.rect_far,
                    grid=self.grid, noise=self.noise)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    raw: dict = field(default=None, compare=False, repr=False)


def _parser():
    cp = configparser.ConfigParser(
        delimiters=("=",),
        comment_prefixes=("#",),
        inline_comment_prefixes=None,
        strict=True,
        empty_lines_in_values=False,
        interpolation=None,
        default_section="\x00no-defaults",
    )
    cp.optionxform = str
    return cp


def _section_values(cp, name):
    schema = SCHEMA[name]
    out = {}
    for key, text in cp.items(name):
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        if "\n" in text:
            raise ConfigError(f"[{name}] {key}: value spans multiple lines")
        if not text.strip():
            raise ConfigError(f"[{name}] {key}: empty value")
        conv, _, check = schema[key]
        try:
            val = conv(text.strip())
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: cannot parse {text.strip()!r} ({exc})") from None
        if check is not None and not check(val):
            raise ConfigError(f"[{name}] {key}: value {val!r} out of range")
        out[key] = val
    for key, (_, default, _) in schema.items():
        if key not in out:
            if default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{name}]")
            if default is not None:
                out[key] = default
    return out


def parse_config(text):
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: key outside of a [section]") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.ParsingError as exc:
        lines = ", ".join(str(ln) for ln, _ in exc.errors)
        raise ConfigError(f"malformed line(s) {lines}: expected 'key = value'") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
    for sec in SCHEMA:
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]")
    values = {sec: _section_values(cp, sec) for sec in SCHEMA}
    m = dict(values["model"])
    m.pop("init_seed")
    if "decoder_heads" not in m:
        h = m["heads"]
        m["decoder_heads"] = h if isinstance(h, int) else h[0]
    try:
        model = ModelConfig(**m)
        train = TrainConfig(**values["train"])
        data = DataConfig(**values["data"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if data.near > model.max_depth or data.far > model.max_depth or data.rect_far > model.max_depth:
        raise ConfigError("[data] depths must not exceed [model] max_depth")
    return RunConfig(model, train, data, raw=values)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not valid UTF-8") from None
    return parse_config(text)


def init_seed(run):
    return run.raw["model"]["init_seed"] if run.raw else 0
