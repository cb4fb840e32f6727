"""Float64 finite-difference checks over every block and the end-to-end model."""

import time
from dataclasses import dataclass

import numpy as np

from dwinformer import attention as A
from dwinformer import blocks as B
from dwinformer import model as M
from dwinformer import tensor as T
from dwinformer.losses import si_loss
from dwinformer.params import Initializer, flatten

BLOCK_TOL = 1e-6
MODEL_TOL = 1e-5
SI_LOSS_TOL = 1e-8
# steps balancing O(h^2) truncation against rounding noise of order ulp(f)/h
BLOCK_STEP = 2e-5
MODEL_STEP = 1e-4

SCALES = {
    # side, channels, window, heads, coordinates sampled per model tensor
    "tiny": dict(side=4, c=4, window=2, heads=1, model_coords=2),
    "small": dict(side=8, c=8, window=2, heads=2, model_coords=6),
}


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float
    analytic: float = 0.0  # gradient at the worst coordinate
    numeric: float = 0.0

    @property
    def ok(self):
        return self.error < self.tol


def condition(params, seed):
    """Redraw a parameter tree in place into a well-conditioned check point.

    Weights get std ``1/sqrt(fan_in)`` so activations stay O(1) through the
    whole network (no layernorm starving its input of gradient, no saturated
    sigmoid); gains, biases and bias tables get O(0.1-0.5) random values so no
    product of parameters sits at the zero saddle where its gradient vanishes.
    """
    rng = np.random.default_rng(seed)  # also accepts a Generator
    for name, t in flatten(params).items():
        last = name.rsplit(".", 1)[-1]
        if last in ("bias", "t"):
            t.data = 0.5 * rng.standard_normal(t.shape)
        elif t.ndim >= 2:
            fan_in = int(np.prod(t.shape[:-1]))
            t.data = rng.standard_normal(t.shape) / np.sqrt(fan_in)
        elif last == "g":
            t.data = 1.0 + 0.1 * rng.standard_normal(t.shape)
        else:
            t.data = 0.1 * rng.standard_normal(t.shape)
    return params


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)


def _block_cases(side, c, window, heads, seed=0):
    """Yield (name, loss closure, leaves) for each building block."""
    rng = np.random.default_rng(seed)
    init = Initializer(seed, np.float64)
    prng = np.random.default_rng(seed + 2)
    x = _leaf(rng, (1, side, side, c))
    enc = _leaf(rng, (1, side, side, c))
    wrng = np.random.default_rng(seed + 1)

    def case(name, fn, params, inputs):
        condition(params, prng)
        with T.no_grad():
            base = fn().data.copy()
        w = T.Tensor(wrng.standard_normal(base.shape), dtype=np.float64)
        base = T.Tensor(base, dtype=np.float64)
        leaves = list(inputs) + list(flatten(params).values())
        # subtracting the constant base output leaves the gradient unchanged but lets
        # outputs untouched by a perturbation cancel exactly instead of adding rounding noise
        return name, (lambda: T.reduce_sum((fn() - base) * w)), leaves

    p_mb = B.init_fused_mbconv(init, c)
    yield case("fused_mbconv", lambda: B.fused_mbconv(x, p_mb), p_mb, [x])
    p_down = B.init_downsample(init, c)
    yield case("downsample", lambda: B.downsample(x, p_down), p_down, [x])
    # upsample halves channels; feed 2c so its layernorm spans c channels rather than a
    # near-degenerate pair
    x_up = _leaf(rng, (1, side, side, 2 * c))
    p_up = B.init_upsample(init, 2 * c)
    yield case("upsample", lambda: B.upsample_block(x_up, p_up), p_up, [x_up])
    img = _leaf(rng, (1, 2 * side, 2 * side, 3), 0.0, 1.0)
    p_stem = B.init_stem(init, c)
    yield case("stem", lambda: B.stem(img, p_stem), p_stem, [img])
    p_mlp = B.init_mlp(init, c)
    yield case("mlp", lambda: B.mlp_block(x, p_mlp), p_mlp, [x])

    def attn(global_size=None):
        return {"a": A.init_attention(init, c, heads, global_size, window if global_size else None),
                "t": init.trunc_normal(((2 * window - 1) ** 2, heads))}

    pa = [attn(), attn(side), attn(), attn(side)]
    yield case("lwin_sa", lambda: A.lwin_sa(x, pa[0]["a"], pa[0]["t"], window, heads), pa[0], [x])
    yield case("gwin_sa", lambda: A.gwin_sa(x, enc, pa[1]["a"], pa[1]["t"], window, heads), pa[1], [x, enc])
    yield case("lwin_ca", lambda: A.lwin_ca(x, enc, pa[2]["a"], pa[2]["t"], window, heads), pa[2], [x, enc])
    yield case("gwin_ca", lambda: A.gwin_ca(x, enc, pa[3]["a"], pa[3]["t"], window, heads), pa[3], [x, enc])

    cfg = _ToyHead()
    p_head = {"head": B.init_conv(init, 3, 3, c, 1)}
    yield case("depth_head", lambda: M.depth_head(x, p_head, cfg).depth, p_head, [x])

    # a 2x2 map keeps every pixel's gradient well above rounding noise
    pred = _leaf(rng, (1, 2, 2, 1), 0.5, 9.5)
    gt = rng.uniform(0.5, 9.5, pred.shape)
    yield "si_loss", (lambda: si_loss(pred, gt)), [pred]


class _ToyHead:
    max_depth = 10.0


def model_case(seed=0):
    """End-to-end SI loss of the 32x32, C=8, window-2 model."""
    cfg = M.ModelConfig(image_size=32, base_channels=8, depths=(1, 1, 1, 2), window_size=2,
                        heads=1, decoder_heads=1, max_depth=10.0)
    params = condition(M.init_model(cfg, seed=seed, dtype=np.float64), seed + 2)
    rng = np.random.default_rng(seed)
    image = T.Tensor(rng.uniform(0, 1, (1, 32, 32, 3)), dtype=np.float64)
    gt = rng.uniform(1.0, 9.0, (1, 32, 32, 1))

    def f():
        return si_loss(M.model_forward(image, params, cfg).depth, gt)

    return f, list(flatten(params).values())


def run_suite(scale="tiny", seed=0, report=None):
    """Run all checks; ``report`` is called with each :class:`CheckResult` as it finishes."""
    opts = SCALES[scale]
    results = []
    for name, f, leaves in _block_cases(opts["side"], opts["c"], opts["window"], opts["heads"], seed):
        t0 = time.perf_counter()
        tol = SI_LOSS_TOL if name == "si_loss" else BLOCK_TOL
        err, info = T.finite_diff_check(f, leaves, h=BLOCK_STEP, return_details=True)
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0, *info["worst"][2:]))
        if report:
            report(results[-1])
    t0 = time.perf_counter()
    f, leaves = model_case(seed)
    err, info = T.finite_diff_check(f, leaves, h=MODEL_STEP, max_coords=opts["model_coords"], seed=seed,
                                    return_details=True)
    results.append(CheckResult("model", err, MODEL_TOL, time.perf_counter() - t0, *info["worst"][2:]))
    if report:
        report(results[-1])
    return results
