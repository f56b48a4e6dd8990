"""Timing comparison of the pure numpy and compiled kernel backends.

Kernel-level numbers come from importing both implementations directly.
The end-to-end number reruns a short training loop in a subprocess with
PFRNN_PURE_PYTHON=1, since the backend is fixed at import time.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --rows 640 --cols 96 --repeats 200
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from pfrnn._kernels import pure

try:
    from pfrnn._kernels import _fast as fast
except ImportError:
    fast = None


def bench_kernels(rows, cols, repeats):
    r = np.random.default_rng(0)
    x = r.standard_normal((rows, cols))
    g = r.standard_normal((rows, cols))
    y = pure.sigmoid(x)
    idx = r.integers(0, rows, size=rows)
    dst = np.zeros((rows, cols))

    cases = [
        ("sigmoid", lambda m: m.sigmoid(x)),
        ("sigmoid_grad", lambda m: m.sigmoid_grad(y, g)),
        ("tanh", lambda m: m.tanh(x)),
        ("tanh_grad", lambda m: m.tanh_grad(y, g)),
        ("relu", lambda m: m.relu(x)),
        ("relu_grad", lambda m: m.relu_grad(x, g)),
        ("scatter_add_rows", lambda m: m.scatter_add_rows(dst, idx, g)),
    ]
    print(f"\nkernels on ({rows}, {cols}) float64, best of {repeats}:")
    print(f"{'kernel':<18} {'pure':>10} {'fast':>10} {'speedup':>8}")
    for name, call in cases:
        t_pure = min(timeit.repeat(lambda: call(pure), number=1,
                                   repeat=repeats))
        if fast is None:
            print(f"{name:<18} {t_pure * 1e6:>8.1f}us {'-':>10} {'-':>8}")
            continue
        t_fast = min(timeit.repeat(lambda: call(fast), number=1,
                                   repeat=repeats))
        print(f"{name:<18} {t_pure * 1e6:>8.1f}us {t_fast * 1e6:>8.1f}us "
              f"{t_pure / t_fast:>7.2f}x")


_TRAIN_SNIPPET = """
import time
import numpy as np
import pfrnn
from pfrnn.autodiff import RngStream
from pfrnn.maze import generate_maze, simulate_trajectory
from pfrnn.training import ModelSpec, TrainConfig, build_model, \
    compile_trajectories, train

maze = generate_maze(10, seed=7)
trajs = [simulate_trajectory(maze, 25, RngStream(100 + i)) for i in range(16)]
data = compile_trajectories(trajs, maze.n)
spec = ModelSpec(kind="pf_lstm", hidden=32, n_particles=10,
                 encoder_width=32, map_feat=24)
config = TrainConfig(lr=3e-4, batch_size=8, epochs=2, seed=0)
model = build_model(spec, maze, RngStream(0))
started = time.monotonic()
train(model, data, data, config)
print(f"{pfrnn.kernel_backend} {time.monotonic() - started:.3f}")
"""


def bench_training():
    print("\nend to end, 2 epochs of a small localization model:")
    for env_extra in ({}, {"PFRNN_PURE_PYTHON": "1"}):
        out = subprocess.run([sys.executable, "-c", _TRAIN_SNIPPET],
                             capture_output=True, text=True,
                             env={**os.environ, **env_extra})
        if out.returncode != 0:
            print(out.stderr, file=sys.stderr)
            raise SystemExit(1)
        backend, seconds = out.stdout.split()
        print(f"  {backend:<6} backend: {float(seconds):.3f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=640,
                        help="batch*particles (default 640)")
    parser.add_argument("--cols", type=int, default=96,
                        help="fused gate width (default 96)")
    parser.add_argument("--repeats", type=int, default=100)
    parser.add_argument("--skip-training", action="store_true",
                        help="kernel microbenchmarks only")
    args = parser.parse_args()
    if fast is None:
        print("compiled backend not available; pure numbers only")
    bench_kernels(args.rows, args.cols, args.repeats)
    if not args.skip_training:
        bench_training()


if __name__ == "__main__":
    main()
