"""Numba vs numpy timings for the simulator kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--samples 20]

Each kernel is timed through both implementations in this process (numba
after one warm-up call so compilation is excluded).  The end-to-end
``simulate_sample`` comparison runs in two subprocesses, one per value of
``ECHO2DEPTH_NUMBA``, because the backend is fixed at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from echo2depth import kernels
from echo2depth._accel import HAVE_NUMBA
from echo2depth.preprocess import CLIP_LENGTH, synthesize_chirp


def kernel_cases(rng):
    chirp = synthesize_chirp()
    x = rng.normal(size=CLIP_LENGTH + 264)
    templates = rng.normal(size=(200, len(chirp) + 32))
    delays = rng.uniform(0, CLIP_LENGTH - 300, 200)
    gains = rng.uniform(0, 0.1, 200)
    recording = rng.normal(size=20000)
    n = 128 * 128
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.array([2.0, 3.0, 1.5])
    room = np.array([8.0, 7.0, 3.0])
    lo = rng.uniform(0.5, 4.0, (6, 3))
    lo[:, 0] += 3.0
    hi = lo + rng.uniform(0.2, 1.0, (6, 3))
    return {
        "one_pole_lowpass": lambda impl: impl(x, 0.4),
        "scatter_paths": lambda impl: impl(np.zeros(CLIP_LENGTH), templates, delays, gains),
        "normalized_xcorr": lambda impl: impl(recording, np.concatenate([chirp, np.zeros(264)])),
        "raycast_128x128": lambda impl: impl(origin, dirs, room, lo, hi),
    }


def time_call(fn, repeat):
    fn()  # warm-up (numba compile, caches)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


SAMPLE_SNIPPET = """
import json, sys, time
from echo2depth import kernels
from echo2depth.simulate import simulate_sample
n, res = int(sys.argv[1]), int(sys.argv[2])
simulate_sample(0, "train", resolution=res)
t = time.perf_counter()
for s in range(1, n + 1):
    simulate_sample(s, "train", resolution=res)
print(json.dumps({"backend": kernels.BACKEND, "seconds": (time.perf_counter() - t) / n}))
"""


def time_samples(flag, n, res):
    env = dict(os.environ, ECHO2DEPTH_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SAMPLE_SNIPPET, str(n), str(res)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--samples", type=int, default=20)
    ap.add_argument("--resolution", type=int, default=64)
    args = ap.parse_args(argv)

    if not HAVE_NUMBA:
        print("numba unavailable; both columns run the numpy fallback")
    rng = np.random.default_rng(0)
    print(f"{'kernel':20s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, case in kernel_cases(rng).items():
        base = name.split("_128")[0]
        fast = getattr(kernels, base + "_numba")
        slow = getattr(kernels, base + "_numpy")
        t_nb = time_call(lambda: case(fast), args.repeat)
        t_np = time_call(lambda: case(slow), args.repeat)
        print(f"{name:20s} {1e3 * t_nb:10.3f} {1e3 * t_np:10.3f} {t_np / t_nb:7.1f}x")

    nb = time_samples("1", args.samples, args.resolution)
    npy = time_samples("0", args.samples, args.resolution)
    print(f"\nsimulate_sample at {args.resolution}x{args.resolution}, mean of {args.samples}:")
    print(f"  {nb['backend']:6s} {1e3 * nb['seconds']:8.1f} ms")
    print(f"  {npy['backend']:6s} {1e3 * npy['seconds']:8.1f} ms")


if __name__ == "__main__":
    main()
