"""Benchmark the numba kernels against the pure-numpy fallback, and check
that measured wall-clock of the toy forward ranks the decoder modes in the
same order as the analytical FLOP model.

Run:  python benchmarks/bench_backends.py
"""

import time

import numpy as np

from cpdnet import backend
from cpdnet.tensor import Tensor, Tape, backward, conv2d, maxpool2, reduce_sum, upsample_bilinear
from cpdnet.model import CpdModel, ModelConfig, cpd_forward
from cpdnet.costmodel import model_cost


def _time(fn, repeat=5):
    fn()  # warm (JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels():
    rng = np.random.default_rng(0)
    cases = [
        ("conv 3x3 8->16 @64^2", (4, 8, 64, 64), (16, 8, 3, 3), 1),
        ("conv 3x3 32->32 @16^2", (4, 32, 16, 16), (32, 32, 3, 3), 1),
        ("conv 7x7 8->8 @16^2", (4, 8, 16, 16), (8, 8, 7, 7), 1),
        ("conv 3x3 dil7 8->8 @16^2", (4, 8, 16, 16), (8, 8, 3, 3), 7),
    ]
    print(f"{'case':<28} {'backend':>8} {'fwd ms':>9} {'bwd ms':>9} {'fwd GFLOP/s':>12}")
    for name, xs, ws, dil in cases:
        x = Tensor(rng.normal(size=xs).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=ws).astype(np.float32), requires_grad=True)
        pad = dil * (ws[2] - 1) // 2
        flops = 2 * ws[2] * ws[3] * ws[1] * ws[0] * xs[0] * xs[2] * xs[3]
        ref = None
        for bk in backend.available():
            with backend.use(bk):
                def fwd():
                    return conv2d(x, w, padding=(pad, pad, pad, pad), dilation=dil)

                def fwd_bwd():
                    with Tape() as tape:
                        loss = reduce_sum(fwd())
                    x.zero_grad(); w.zero_grad()
                    backward(loss, tape)

                t_f = _time(fwd)
                t_b = _time(fwd_bwd)
                out = fwd().data
                if ref is None:
                    ref = out
                else:
                    err = np.abs(out - ref).max()
                    assert err < 1e-3, f"backend mismatch {err} on {name}"
                print(f"{name:<28} {bk:>8} {t_f * 1e3:>9.3f} {(t_b - t_f) * 1e3:>9.3f} "
                      f"{flops / t_f / 1e9:>12.2f}")

    x = Tensor(rng.normal(size=(4, 8, 32, 32)).astype(np.float32), requires_grad=True)
    for bk in backend.available():
        with backend.use(bk):
            t_p = _time(lambda: maxpool2(x))
            t_u = _time(lambda: upsample_bilinear(x, 4))
            print(f"{'maxpool / upsample x4':<28} {bk:>8} {t_p * 1e3:>9.3f} {t_u * 1e3:>9.3f}")


def bench_modes():
    rng = np.random.default_rng(1)
    img = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    print(f"\n{'mode':<16} {'modeled GFLOP':>14} {'measured ms':>12}")
    results = []
    for mode, opt in (("partial_l3 (cpd)", 3), ("full_decoder", "full")):
        cfg = ModelConfig.toy(opt_level=opt)
        model = CpdModel(cfg, seed=0)
        cost = model_cost(cfg, "cpd_two_branch" if opt == 3 else "full_decoder")
        t = _time(lambda: cpd_forward(model, img), repeat=3)
        results.append((cost.total_flops, t))
        print(f"{mode:<16} {cost.total_flops / 1e9:>14.3f} {t * 1e3:>12.2f}")
    order_model = sorted(range(len(results)), key=lambda i: results[i][0])
    order_clock = sorted(range(len(results)), key=lambda i: results[i][1])
    print("wall-clock ranking matches FLOP ranking:", order_model == order_clock)


if __name__ == "__main__":
    print(f"active backend: {backend.active()}  (available: {backend.available()})\n")
    bench_kernels()
    bench_modes()
