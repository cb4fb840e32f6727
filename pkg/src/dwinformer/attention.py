"""Local and global window attention.

Feature maps are split into non-overlapping ``M x M`` windows. Local
attention lets each window attend to itself; global attention lets every
local window attend to one shared ``M x M`` token grid produced by the
global window generator (GWG) from the whole map. Queries always come from
local windows. There is no window shifting and no masking.

Attention parameter dicts hold ``norm`` (query-side layernorm), ``q``,
``k`` (bias-free), ``v``, ``proj`` (linear layers) and, for global variants, ``gwg``
(a list of Fused-MBConv parameter dicts, one per pooling step).
"""

import contextlib
import functools
import math
from dataclasses import dataclass

import numpy as np

from dwinformer import tensor as T
from dwinformer.blocks import dense, fused_mbconv, init_fused_mbconv, init_linear, init_norm, layernorm
from dwinformer.errors import ConfigError, DimensionError

stats = {"gwg_calls": 0}

_recorder = None


@contextlib.contextmanager
def record_attention():
    """Collect post-softmax weights of every named attention call made inside the block.

    Yields a dict mapping layer name to an array of shape
    ``(..., num_windows, heads, M*M, M*M)``.
    """
    global _recorder
    prev = _recorder
    _recorder = {}
    try:
        yield _recorder
    finally:
        _recorder = prev


@dataclass
class WindowSet:
    tokens: T.Tensor  # (..., num_windows, M*M, c)
    source_dims: tuple
    window_size: int

    @property
    def num_windows(self):
        return self.tokens.shape[-3]


def window_partition(x, window):
    *lead, h, w, c = x.shape
    m = int(window)
    if m < 1 or h % m or w % m:
        raise ConfigError(f"window size {window} does not tile a {h}x{w} map")
    lead = tuple(lead)
    nl = len(lead)
    t = T.reshape(x, lead + (h // m, m, w // m, m, c))
    t = T.permute(t, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    t = T.reshape(t, lead + ((h // m) * (w // m), m * m, c))
    return WindowSet(t, (h, w), m)


def window_merge(ws):
    h, w = ws.source_dims
    m = ws.window_size
    *lead, nw, mm, c = ws.tokens.shape
    if h % m or w % m or nw != (h // m) * (w // m) or mm != m * m:
        raise DimensionError(
            f"window tokens {ws.tokens.shape} inconsistent with source dims {h}x{w} and window {m}")
    lead = tuple(lead)
    nl = len(lead)
    t = T.reshape(ws.tokens, lead + (h // m, w // m, m, m, c))
    t = T.permute(t, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return T.reshape(t, lead + (h, w, c))


@functools.lru_cache(maxsize=None)
def rel_pos_index(window):
    """(M*M, M*M) map from token pair to its row in the (2M-1)^2 bias table."""
    m = int(window)
    if m < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    ys, xs = np.divmod(np.arange(m * m), m)
    dy = ys[:, None] - ys[None, :] + m - 1
    dx = xs[:, None] - xs[None, :] + m - 1
    idx = (dy * (2 * m - 1) + dx).astype(np.int64)
    idx.setflags(write=False)
    return idx


def init_rel_bias(init, window, heads):
    return init.trunc_normal(((2 * window - 1) ** 2, heads))


def relative_bias(table, window):
    """Expand a bias table into a (heads, M*M, M*M) additive logit term."""
    if table.shape[0] != (2 * window - 1) ** 2:
        raise DimensionError(f"bias table {table.shape} does not match window {window}")
    return T.permute(T.take(table, rel_pos_index(window)), (2, 0, 1))


def gwg_steps(size, window):
    ratio, rem = divmod(size, window)
    if rem or ratio < 1 or ratio & (ratio - 1):
        raise ConfigError(f"GWG needs size/window to be a power of two, got {size}/{window}")
    return ratio.bit_length() - 1


def init_gwg(init, c, size, window):
    return [init_fused_mbconv(init, c) for _ in range(gwg_steps(size, window))]


def gwg(x, window, params):
    """Shrink a square map to one ``window x window`` grid of global tokens ``(..., M*M, c)``."""
    *lead, h, w, c = x.shape
    if h != w:
        raise ConfigError(f"GWG expects a square map, got {h}x{w}")
    k = gwg_steps(h, window)
    if len(params) != k:
        raise ConfigError(f"GWG on {h}x{h} with window {window} needs {k} stages, got {len(params)}")
    stats["gwg_calls"] += 1
    for p in params:
        x = T.maxpool2d(fused_mbconv(x, p))
    return T.reshape(x, tuple(lead) + (window * window, c))


def init_attention(init, c, heads, global_size=None, window=None):
    if c % heads:
        raise ConfigError(f"{c} channels not divisible by {heads} heads")
    p = {
        "norm": init_norm(init, c),
        "q": init_linear(init, c, c),
        # no key bias: softmax is invariant to it, so it would receive zero gradient
        "k": init_linear(init, c, c, bias=False),
        "v": init_linear(init, c, c),
        "proj": init_linear(init, c, c),
    }
    if global_size is not None:
        p["gwg"] = init_gwg(init, c, global_size, window)
    return p


def _split_heads(x, heads):
    # (..., S, c) -> (..., heads, S, d)
    *lead, s, c = x.shape
    x = T.reshape(x, tuple(lead) + (s, heads, c // heads))
    nl = len(lead)
    return T.permute(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(x):
    *lead, heads, s, d = x.shape
    nl = len(lead)
    x = T.permute(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return T.reshape(x, tuple(lead) + (s, heads * d))


def _swap_last(x):
    n = x.ndim
    return T.permute(x, tuple(range(n - 2)) + (n - 1, n - 2))


def window_attention_core(q_src, kv_tokens, params, heads, bias_table, shared=False, name=None):
    """softmax(Q K^T / sqrt(d) + B) V per window and head, then the output projection.

    ``q_src`` is a :class:`WindowSet` of already-normalized query tokens.
    ``kv_tokens`` is ``(..., num_windows, M*M, c)`` for local attention or,
    with ``shared=True``, ``(..., M*M, c)`` used by every window.
    """
    c = q_src.tokens.shape[-1]
    if heads < 1 or c % heads:
        raise ConfigError(f"{c} channels not divisible by {heads} heads")
    m = q_src.window_size
    if kv_tokens.shape[-2] != m * m or kv_tokens.shape[-1] != c:
        raise DimensionError(f"key/value tokens {kv_tokens.shape} incompatible with window {m} and {c} channels")
    d = c // heads

    q = _split_heads(dense(q_src.tokens, params["q"]), heads)
    k = _split_heads(dense(kv_tokens, params["k"]), heads)
    v = _split_heads(dense(kv_tokens, params["v"]), heads)
    if shared:
        # one key/value set, broadcast over the window axis
        k = T.reshape(k, k.shape[:-3] + (1,) + k.shape[-3:])
        v = T.reshape(v, v.shape[:-3] + (1,) + v.shape[-3:])

    logits = T.scale(T.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d))
    logits = logits + relative_bias(bias_table, m)
    attn = T.softmax_lastdim(logits)
    if name is not None and _recorder is not None:
        _recorder[name] = attn.data.copy()
    out = _merge_heads(T.matmul(attn, v))
    return WindowSet(dense(out, params["proj"]), q_src.source_dims, m)


def _local(q_map, kv_map, params, bias_table, window, heads, name):
    q_src = window_partition(layernorm(q_map, params["norm"]), window)
    kv = window_partition(kv_map, window)
    return window_merge(window_attention_core(q_src, kv.tokens, params, heads, bias_table, name=name))


def _global(q_map, kv_map, params, bias_table, window, heads, name):
    tokens = gwg(kv_map, window, params["gwg"])
    q_src = window_partition(layernorm(q_map, params["norm"]), window)
    out = window_attention_core(q_src, tokens, params, heads, bias_table, shared=True, name=name)
    return window_merge(out)


def _check_pair(decoded, encoded):
    if decoded.shape != encoded.shape:
        raise DimensionError(f"decoded {decoded.shape} and encoded {encoded.shape} features must match")


def lwin_sa(x, params, bias_table, window, heads, name=None):
    """Local window self-attention on ``(..., h, w, c)``."""
    return _local(x, x, params, bias_table, window, heads, name)


def gwin_sa(x, global_src, params, bias_table, window, heads, name=None):
    """Local queries from ``x`` against global keys/values generated from ``global_src``."""
    return _global(x, global_src, params, bias_table, window, heads, name)


def lwin_ca(decoded, encoded, params, bias_table, window, heads, name=None):
    _check_pair(decoded, encoded)
    return _local(decoded, encoded, params, bias_table, window, heads, name)


def gwin_ca(decoded, encoded, params, bias_table, window, heads, name=None):
    _check_pair(decoded, encoded)
    return _global(decoded, encoded, params, bias_table, window, heads, name)
