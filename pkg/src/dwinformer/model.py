"""Encoder, decoder and depth head assembled into image -> depth.

Encoder stage ``j`` (1..4) runs at ``H / 2^(j+1)`` with ``C * 2^(j-1)``
channels. Each block is a local self-attention pair followed by a global
self-attention pair, every attention output and MLP added residually.
Stage outputs (pre-downsample) give E_1..E_3; stage 4 yields E_4 after its
first half of blocks and E_5 after all of them.

The decoder walks levels 5..1 with ``F_i = 2^(i + offset)`` channels
(``offset`` 4 for full-size models, 1 for desk-scale ones). Each level projects
E_i to F_i, runs a local then a global cross-attention pair with decoder
queries and encoder keys/values, then changes scale: a 1x1 projection
between levels 5 and 4 (same resolution), an upsample block otherwise, and
nothing after level 1.
"""

from dataclasses import asdict, dataclass

import numpy as np

from dwinformer import attention as A
from dwinformer import blocks as B
from dwinformer import tensor as T
from dwinformer.errors import CheckpointError, ConfigError
from dwinformer.fileio import read_container, write_container
from dwinformer.params import Initializer, flatten

DECODER_OFFSETS = {"full": 4, "toy": 1}


def _pow2(n):
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    base_channels: int = 16
    depths: tuple = (1, 1, 1, 2)
    window_size: int = 4
    heads: tuple = (2, 2, 2, 2)
    decoder_heads: int = 2
    max_depth: float = 10.0
    decoder_channels: str = "toy"

    def __post_init__(self):
        if isinstance(self.heads, int):
            object.__setattr__(self, "heads", (self.heads,) * 4)
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        self.validate()

    def validate(self):
        h, m = self.image_size, self.window_size
        if not _pow2(h) or h < 32:
            raise ConfigError(f"image_size must be a power of two >= 32, got {h}")
        if not _pow2(m):
            raise ConfigError(f"window_size must be a power of two, got {m}")
        if h < 8 * m:
            raise ConfigError(f"image_size {h} must be at least 8 * window_size ({8 * m})")
        if len(self.depths) != 4 or min(self.depths) < 1:
            raise ConfigError(f"depths must be four positive integers, got {self.depths}")
        if self.depths[3] < 2:
            raise ConfigError("the last stage needs depth >= 2 to provide both E_4 and E_5")
        if len(self.heads) != 4 or min(self.heads) < 1:
            raise ConfigError(f"heads must be four positive integers, got {self.heads}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        for j, (c, nh) in enumerate(zip(self.stage_channels, self.heads), 1):
            if c % nh:
                raise ConfigError(f"stage {j}: {nh} heads do not divide {c} channels")
        if self.decoder_channels not in DECODER_OFFSETS:
            raise ConfigError(f"decoder_channels must be one of {sorted(DECODER_OFFSETS)}")
        for i in range(1, 6):
            if self.decoder_width(i) % self.decoder_heads:
                raise ConfigError(f"decoder level {i}: {self.decoder_heads} heads do not divide "
                                  f"{self.decoder_width(i)} channels")
        if not self.max_depth > 0:
            raise ConfigError("max_depth must be positive")

    @property
    def stage_channels(self):
        return tuple(self.base_channels * 2 ** j for j in range(4))

    @property
    def stage_sizes(self):
        return tuple(self.image_size // 2 ** (j + 2) for j in range(4))

    def stage_window(self, j):
        return min(self.window_size, self.stage_sizes[j])

    def decoder_width(self, level):
        return 2 ** (level + DECODER_OFFSETS[self.decoder_channels])

    def feature_size(self, level):
        return self.stage_sizes[min(level, 4) - 1]

    def feature_channels(self, level):
        return self.stage_channels[min(level, 4) - 1]

    def to_dict(self):
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class EncoderFeatures:
    features: list  # [E_1, ..., E_5]

    def __getitem__(self, level):
        return self.features[level - 1]


@dataclass
class DepthOutput:
    prob: T.Tensor
    depth: T.Tensor


# ---------------------------------------------------------------- init


def _init_pair(init, c, heads, window, size):
    """Parameters for one local + global attention pair; both share a bias table."""
    return {
        "bias": A.init_rel_bias(init, window, heads),
        "local": A.init_attention(init, c, heads),
        "mlp1": {"norm": B.init_norm(init, c), "mlp": B.init_mlp(init, c)},
        "global": A.init_attention(init, c, heads, global_size=size, window=window),
        "mlp2": {"norm": B.init_norm(init, c), "mlp": B.init_mlp(init, c)},
    }


def init_model(config, seed=0, dtype=np.float32, std=None):
    init = Initializer(seed, dtype) if std is None else Initializer(seed, dtype, std)
    cfg = config
    stages = []
    for j in range(4):
        c, size, m = cfg.stage_channels[j], cfg.stage_sizes[j], cfg.stage_window(j)
        stage = {"blocks": [_init_pair(init, c, cfg.heads[j], m, size) for _ in range(cfg.depths[j])]}
        if j < 3:
            stage["down"] = B.init_downsample(init, c)
        stages.append(stage)
    levels = {}
    for i in range(5, 0, -1):
        f, size = cfg.decoder_width(i), cfg.feature_size(i)
        level = {
            "harmonize": B.init_projection(init, cfg.feature_channels(i), f),
            "pair": _init_pair(init, f, cfg.decoder_heads, min(cfg.window_size, size), size),
        }
        if i == 5:
            level["transition"] = B.init_projection(init, f, cfg.decoder_width(4))
        elif i > 1:
            level["transition"] = B.init_upsample(init, f)
        levels[f"level{i}"] = level
    return {
        "stem": B.init_stem(init, cfg.base_channels),
        "stages": stages,
        "decoder": {"init": B.init_projection(init, cfg.feature_channels(5), cfg.decoder_width(5)),
                    "levels": levels},
        "head": B.init_conv(init, 3, 3, cfg.decoder_width(1), 1),
    }


# ---------------------------------------------------------------- forward


def _mlp_residual(x, p):
    return x + B.mlp_block(B.layernorm(x, p["norm"]), p["mlp"])


def dwin_sa_pair(x, p, window, heads, name=""):
    """Local then global window self-attention, each followed by an MLP; all residual."""
    local = A.lwin_sa(x, p["local"], p["bias"], window, heads, name=f"{name}.lwin" if name else None)
    x_l = _mlp_residual(local + x, p["mlp1"])
    glob = A.gwin_sa(x_l, x, p["global"], p["bias"], window, heads, name=f"{name}.gwin" if name else None)
    return _mlp_residual(glob + x_l, p["mlp2"])


def dwin_ca_pair(decoded, encoded, p, window, heads, name=""):
    """Cross-attention counterpart of :func:`dwin_sa_pair`: decoder queries, encoder keys/values."""
    local = A.lwin_ca(decoded, encoded, p["local"], p["bias"], window, heads,
                      name=f"{name}.lwin" if name else None)
    x_l = _mlp_residual(local + decoded, p["mlp1"])
    glob = A.gwin_ca(x_l, encoded, p["global"], p["bias"], window, heads,
                     name=f"{name}.gwin" if name else None)
    return _mlp_residual(glob + x_l, p["mlp2"])


def _check_image(image, config):
    h, w, c = image.shape[-3:]
    if (h, w) != (config.image_size, config.image_size) or c != 3:
        raise ConfigError(f"image of shape {image.shape} does not match configured "
                          f"{config.image_size}x{config.image_size}x3 input")


def encoder_forward(image, params, config):
    _check_image(image, config)
    x = B.stem(image, params["stem"])
    feats = []
    for j, stage in enumerate(params["stages"]):
        m, nh = config.stage_window(j), config.heads[j]
        half = len(stage["blocks"]) // 2
        for b, pair in enumerate(stage["blocks"]):
            x = dwin_sa_pair(x, pair, m, nh, name=f"enc.stage{j + 1}.block{b}")
            if j == 3 and b == half - 1:
                feats.append(x)
        if j < 3:
            feats.append(x)
            x = B.downsample(x, stage["down"])
    feats.append(x)
    return EncoderFeatures(feats)


def decoder_forward(features, params, config):
    dec = params["decoder"]
    d = B.projection(features[5], dec["init"])
    for i in range(5, 0, -1):
        level = dec["levels"][f"level{i}"]
        enc = B.projection(features[i], level["harmonize"])
        m = min(config.window_size, enc.shape[-2])
        d = dwin_ca_pair(d, enc, level["pair"], m, config.decoder_heads, name=f"dec.level{i}")
        if i == 5:
            d = B.projection(d, level["transition"])
        elif i > 1:
            d = B.upsample_block(d, level["transition"])
    return d


def depth_head(decoded, params, config):
    p = params["head"]
    logits = T.conv2d(decoded, p["w"], padding=1, bias=p["b"])
    prob = T.nearest_upsample(T.sigmoid(logits), 4)
    return DepthOutput(prob, T.scale(prob, config.max_depth))


def model_forward(image, params, config):
    if not isinstance(image, T.Tensor):
        dtype = params["head"]["w"].dtype
        image = T.Tensor(np.asarray(image, dtype=dtype), dtype=dtype)
    feats = encoder_forward(image, params, config)
    return depth_head(decoder_forward(feats, params, config), params, config)


def attention_layer_names(config):
    names = []
    for j in range(4):
        for b in range(config.depths[j]):
            names += [f"enc.stage{j + 1}.block{b}.lwin", f"enc.stage{j + 1}.block{b}.gwin"]
    for i in range(5, 0, -1):
        names += [f"dec.level{i}.lwin", f"dec.level{i}.gwin"]
    return names


# ---------------------------------------------------------------- checkpoints


def param_arrays(params, prefix="param."):
    return {prefix + k: t.data.astype(np.float32) for k, t in flatten(params).items()}


def save_weights(params, path, config, extra=None, meta=None):
    """Write parameters (as float32) plus any ``extra`` arrays to a checkpoint container."""
    tensors = param_arrays(params)
    if extra:
        tensors.update(extra)
    m = {"config": config.to_dict()}
    if meta:
        m.update(meta)
    write_container(path, tensors, m)


def load_checkpoint(path):
    """Return ``(config, params, arrays, meta)``; parameters are validated against the stored config."""
    arrays, meta = read_container(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no model config")
    config = ModelConfig.from_dict(meta["config"])
    return config, load_weights(path, config, arrays=arrays), arrays, meta


def load_weights(path, config, arrays=None):
    """Load float32 parameters for ``config``, checking every tensor's shape."""
    if arrays is None:
        arrays, _ = read_container(path)
    params = init_model(config)
    ref = flatten(params)
    for name, t in ref.items():
        key = "param." + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        arr = arrays[key]
        if arr.shape != t.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} != expected {t.shape}")
        t.data = arr.astype(np.float32)
    extra = [k for k in arrays if k.startswith("param.") and k[6:] not in ref]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0][6:]!r}")
    return params
