"""Time the compiled convolution kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes mirror the default encoder on 32x32 scenes plus a larger layer. A
final section times one full training step (batch of 8, both losses) under
each backend in a fresh interpreter, since the backend is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dida import _kernels_py

try:
    from dida import _kernels
except ImportError:
    _kernels = None

# (C_in, H, C_out, stride, pad)
SHAPES = [(3, 32, 8, 2, 1), (8, 16, 16, 2, 1), (16, 8, 32, 2, 1), (16, 32, 32, 1, 1)]


def cases(rng):
    for c_in, h, c_out, stride, pad in SHAPES:
        x = rng.normal(size=(c_in, h, h))
        w = rng.normal(size=(c_out, c_in, 3, 3))
        out = (h + 2 * pad - 3) // stride + 1
        g = rng.normal(size=(c_out, out, out))
        label = f"{c_in}x{h}x{h} -> {c_out} s{stride}p{pad}"
        yield label, {
            "forward": lambda m: m.conv_forward(x, w, stride, pad),
            "grad_input": lambda m: m.conv_grad_input(g, w, stride, pad, h, h),
            "grad_weight": lambda m: m.conv_grad_weight(x, g, stride, pad, 3, 3),
        }


def best_of(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


STEP_SCRIPT = """
import time
from dida import kernels, tensor as T
from dida.encoder import EncoderConfig, init_encoder
from dida.scenes import DataConfig, generate_dataset
from dida.train import TrainConfig, batch_objective
enc = init_encoder(EncoderConfig())
batch = generate_dataset(DataConfig(), 8)
cfg = TrainConfig()
best = float("inf")
for step in range(6):
    t0 = time.perf_counter()
    total, _, _ = batch_objective(enc, batch, cfg, step)
    T.backward(total, enc.params)
    best = min(best, time.perf_counter() - t0)
print(kernels.BACKEND, best)
"""


def step_time(pure_python):
    env = dict(os.environ, DIDA_PURE_PYTHON="1" if pure_python else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'shape':<26}{'kernel':<13}{'numpy us':>10}{'cython us':>11}{'speedup':>9}")
    for label, kernels in cases(rng):
        for name, call in kernels.items():
            t_py = best_of(lambda: call(_kernels_py), args.repeat)
            if _kernels is None:
                print(f"{label:<26}{name:<13}{t_py * 1e6:>10.1f}{'-':>11}{'-':>9}")
                continue
            assert np.allclose(call(_kernels_py), call(_kernels), rtol=1e-12, atol=1e-12)
            t_c = best_of(lambda: call(_kernels), args.repeat)
            print(f"{label:<26}{name:<13}{t_py * 1e6:>10.1f}{t_c * 1e6:>11.1f}{t_py / t_c:>8.1f}x")
    print()
    for pure in (True, False):
        backend, seconds = step_time(pure)
        print(f"training step ({backend:>6} backend): {seconds * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
