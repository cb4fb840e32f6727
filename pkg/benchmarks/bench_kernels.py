"""Compare the compiled and numpy convolution kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--model]

Times each kernel on shapes from the toy model (batch 8, 64x64 input), checks
both backends agree, and optionally times one full training step per backend.
"""

import argparse
import time

import numpy as np

from dwinformer import kernels

# (name, batch, padded side, channels, kernel, stride)
SHAPES = [
    ("dw 3x3 s2 c3", 8, 66, 3, 3, 2),
    ("dw 3x3 s1 c16", 8, 18, 16, 3, 1),
    ("dw 3x3 s1 c32", 8, 10, 32, 3, 1),
    ("im2col 3x3 s2 c16", 8, 18, 16, 3, 2),
]


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, n, side, c, k, s in SHAPES:
        xpad = rng.standard_normal((n, side, side, c)).astype(np.float32)
        w = rng.standard_normal((k, k, c)).astype(np.float32)
        oh = (side - k) // s + 1
        dy = rng.standard_normal((n, oh, oh, c)).astype(np.float32)
        timings, outputs = {}, {}
        for backend in ("python", "cython"):
            kernels.use_backend(backend)
            if name.startswith("im2col"):
                def fwd():
                    return kernels.im2col(xpad, k, k, s, oh, oh)
                cols = fwd()

                def bwd():
                    return kernels.col2im(cols, side, side, s)
            else:
                def fwd():
                    return kernels.dwconv_forward(xpad, w, s, oh, oh)

                def bwd():
                    return kernels.dwconv_backward(xpad, w, dy, s)
            outputs[backend] = (fwd(), bwd())
            timings[backend] = (_best(fwd, repeat), _best(bwd, repeat))
        f_py, b_py = outputs["python"]
        f_cy, b_cy = outputs["cython"]
        b_py = b_py if isinstance(b_py, tuple) else (b_py,)
        b_cy = b_cy if isinstance(b_cy, tuple) else (b_cy,)
        diff = max([float(np.abs(f_py - f_cy).max())] + [float(np.abs(a - b).max()) for a, b in zip(b_py, b_cy)])
        rows.append((name, timings["python"], timings["cython"], diff))
    return rows


def bench_step(repeat):
    from dwinformer import model as M
    from dwinformer import tensor as T
    from dwinformer.losses import si_loss

    cfg = M.ModelConfig()
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 1, (8, 64, 64, 3)).astype(np.float32)
    depths = rng.uniform(1, 9, (8, 64, 64, 1)).astype(np.float32)
    params = M.init_model(cfg, seed=0)

    def step():
        loss = si_loss(M.model_forward(images, params, cfg).depth, depths)
        T.backward(loss)

    out = {}
    for backend in ("python", "cython"):
        kernels.use_backend(backend)
        step()
        out[backend] = _best(step, repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--model", action="store_true", help="also time a full forward+backward step")
    args = ap.parse_args()
    try:
        kernels.use_backend("cython")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")

    print(f"{'kernel':<20} {'numpy fwd':>10} {'cython fwd':>11} {'numpy bwd':>10} {'cython bwd':>11} "
          f"{'speedup f/b':>12} {'max diff':>9}")
    for name, (pf, pb), (cf, cb), diff in bench_kernels(args.repeat):
        print(f"{name:<20} {pf * 1e3:9.2f}ms {cf * 1e3:10.2f}ms {pb * 1e3:9.2f}ms {cb * 1e3:10.2f}ms "
              f"{pf / cf:5.1f}x/{pb / cb:4.1f}x {diff:9.1e}")
    if args.model:
        t = bench_step(max(1, args.repeat // 10))
        print(f"training step (batch 8, toy config): numpy {t['python']:.3f}s, cython {t['cython']:.3f}s")


if __name__ == "__main__":
    main()
