"""Convolutional and MLP building blocks.

Each block has an ``init_*`` function returning a parameter dict and a
forward function taking ``(x, params)``. Parameter counts, for input
channels ``c`` and SE width ``r = max(1, c // 4)``:

    fused_mbconv      9c + 2cr + c^2
    downsample(c->o)  fused_mbconv(c) + 9co + o + 2o
    stem(C)           (27C + C) + downsample(C->C)
    upsample(c->c/2)  9c(c/2) + c/2 + 2(c/2)
    mlp(c, ratio)     2 ratio c^2 + ratio c + c
"""

from dwinformer import tensor as T
from dwinformer.errors import ConfigError

MLP_RATIO = 4
SE_REDUCTION = 4


def init_linear(init, cin, cout, bias=True):
    p = {"w": init.trunc_normal((cin, cout))}
    if bias:
        p["b"] = init.zeros((cout,))
    return p


def init_norm(init, c):
    return {"g": init.ones((c,)), "b": init.zeros((c,))}


def init_conv(init, kh, kw, cin, cout, bias=True):
    p = {"w": init.trunc_normal((kh, kw, cin, cout))}
    if bias:
        p["b"] = init.zeros((cout,))
    return p


def layernorm(x, p):
    return T.layernorm_lastdim(x, p["g"], p["b"])


def dense(x, p):
    return T.linear(x, p["w"], p.get("b"))


def se_width(c):
    return max(1, c // SE_REDUCTION)


# ---------------------------------------------------------------------------


def init_fused_mbconv(init, c):
    r = se_width(c)
    return {
        "dw": init.trunc_normal((3, 3, 1, c)),
        "se1": init.trunc_normal((c, r)),
        "se2": init.trunc_normal((r, c)),
        "pw": init.trunc_normal((1, 1, c, c)),
    }


def fused_mbconv(x, p):
    """Depthwise 3x3 -> GELU -> squeeze-excitation -> 1x1 conv, added to the input."""
    c = x.shape[-1]
    y = T.gelu(T.conv2d(x, p["dw"], padding=1, groups=c))
    s = T.reduce_mean(y, axis=(-3, -2))
    s = T.sigmoid(T.linear(T.gelu(T.linear(s, p["se1"])), p["se2"]))
    y = y * T.reshape(s, s.shape[:-1] + (1, 1, c))
    y = T.conv2d(y, p["pw"])
    return x + y


def init_downsample(init, c, cout=None):
    cout = 2 * c if cout is None else cout
    return {
        "mb": init_fused_mbconv(init, c),
        "conv": init_conv(init, 3, 3, c, cout),
        "norm": init_norm(init, cout),
    }


def downsample(x, p):
    """Halve the spatial size (and by default double the channels)."""
    h, w = x.shape[-3], x.shape[-2]
    if h % 2 or w % 2:
        raise ConfigError(f"downsample needs even spatial dims, got {h}x{w}")
    x = fused_mbconv(x, p["mb"])
    x = T.conv2d(x, p["conv"]["w"], stride=2, padding=1, bias=p["conv"]["b"])
    return layernorm(x, p["norm"])


def init_stem(init, c):
    return {"conv": init_conv(init, 3, 3, 3, c), "reduce": init_downsample(init, c, c)}


def stem(image, p):
    """Patchify an ``(..., H, W, 3)`` image to ``(..., H/4, W/4, C)``."""
    h, w = image.shape[-3], image.shape[-2]
    if image.shape[-1] != 3:
        raise ConfigError(f"stem expects 3 input channels, got {image.shape[-1]}")
    if h % 4 or w % 4:
        raise ConfigError(f"stem needs H, W divisible by 4, got {h}x{w}")
    x = T.conv2d(image, p["conv"]["w"], stride=2, padding=1, bias=p["conv"]["b"])
    return downsample(x, p["reduce"])


def init_upsample(init, c):
    if c % 2:
        raise ConfigError(f"upsample needs an even channel count, got {c}")
    return {"conv": init_conv(init, 3, 3, c, c // 2), "norm": init_norm(init, c // 2)}


def upsample_block(x, p):
    """Nearest 2x -> 3x3 conv halving channels -> layernorm."""
    if x.shape[-1] % 2:
        raise ConfigError(f"upsample needs an even channel count, got {x.shape[-1]}")
    x = T.nearest_upsample(x, 2)
    x = T.conv2d(x, p["conv"]["w"], padding=1, bias=p["conv"]["b"])
    return layernorm(x, p["norm"])


def init_mlp(init, c, ratio=MLP_RATIO):
    return {"fc1": init_linear(init, c, ratio * c), "fc2": init_linear(init, ratio * c, c)}


def mlp_block(x, p):
    return dense(T.gelu(dense(x, p["fc1"])), p["fc2"])


def init_projection(init, cin, cout):
    """1x1 channel projection."""
    return init_conv(init, 1, 1, cin, cout)


def projection(x, p):
    return T.conv2d(x, p["w"], bias=p["b"])
