"""Compare the numba and numpy im2col/col2im kernels.

Times both kernels on every strided layer shape of the tiny profile, then
(with --step) a full training step per backend in a fresh subprocess, since
the backend is fixed at import time by GROUNDVIEW_BACKEND.

    python3 benchmarks/bench_kernels.py --batch 32 --reps 5 --step
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from groundview import _accel

# (input side, channels) of each stride-2, k=5, pad=2 convolution in the tiny profile
CONV_SHAPES = [(128, 3), (64, 8), (32, 16), (16, 32), (64, 11), (8, 64)]

STEP_SNIPPET = """
import time
from groundview import _accel, scene_synth, training
from groundview.core_types import stack_samples
o, g, _ = stack_samples(scene_synth.make_dataset(1, {batch}, 0.5))
state = training.init_state(training.TrainConfig(batch_size={batch}))
state = training.train_step(state, (o, g))
t0 = time.perf_counter()
for _ in range({reps}):
    state = training.train_step(state, (o, g))
print(_accel.BACKEND, (time.perf_counter() - t0) / {reps})
"""


def timeit(fn, reps):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_kernels(batch, reps):
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"{'layer':<14}" + "".join(f"{b + ' im2col':>16}{b + ' col2im':>16}" for b in backends))
    totals = dict.fromkeys(backends, 0.0)
    for side, c in CONV_SHAPES:
        xp = rng.standard_normal((batch, side + 4, side + 4, c)).astype(np.float32)
        ho = side // 2
        cols = rng.standard_normal((batch, ho, ho, 5, 5, c)).astype(np.float32)
        row = f"{side}x{side}x{c:<6}"
        for b in backends:
            im2col, col2im = _accel.get_kernels(b)
            t_i = timeit(lambda: im2col(xp, 5, 2, ho, ho), reps)
            t_c = timeit(lambda: col2im(cols, side + 4, side + 4, 2), reps)
            totals[b] += t_i + t_c
            row += f"{t_i * 1e3:>13.2f} ms{t_c * 1e3:>13.2f} ms"
        print(row)
    print("total  " + "  ".join(f"{b} {t * 1e3:.1f} ms" for b, t in totals.items()))


def bench_step(batch, reps):
    for backend in ("numpy", "numba"):
        env = dict(os.environ, GROUNDVIEW_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(batch=batch, reps=reps)],
                             env=env, capture_output=True, text=True)
        if res.returncode:
            print(f"{backend}: failed\n{res.stderr}")
            continue
        name, seconds = res.stdout.split()
        print(f"train_step ({name}, batch {batch}): {float(seconds) * 1e3:.0f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full train step per backend")
    args = ap.parse_args()
    bench_kernels(args.batch, args.reps)
    if args.step:
        bench_step(args.batch, args.reps)


if __name__ == "__main__":
    main()
