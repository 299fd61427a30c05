"""Compiled vs numpy LSTM recurrence: forward + backward wall time.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import sys
import time

import numpy as np

from smartglove.nncore import _backend


def bench(kernel, T, B, H, dtype, repeat):
    rng = np.random.default_rng(0)
    xw = rng.normal(0, 0.5, (T, B, 4 * H)).astype(dtype)
    w_h = rng.uniform(-0.1, 0.1, (H, 4 * H)).astype(dtype)
    dhs = rng.normal(size=(T, B, H)).astype(dtype)
    times = []
    for _ in range(repeat + 1):
        t0 = time.perf_counter()
        hs, cs, gates = kernel.lstm_forward(xw, w_h, False)
        kernel.lstm_backward(dhs, hs, cs, gates, w_h, False)
        times.append(time.perf_counter() - t0)
    return float(np.median(times[1:]) * 1e3)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--json")
    args = p.parse_args(argv)
    if "compiled" not in _backend.BACKENDS:
        print("compiled kernel not built; only the fallback is timed", file=sys.stderr)
    rows = []
    print(f"{'dtype':8} {'B':>4} {'H':>4} " + " ".join(f"{k:>12}" for k in _backend.BACKENDS) + "   speedup")
    for dtype in (np.float32, np.float64):
        for B in (1, 16, 64):
            for H in (32, 64):
                ms = {k: bench(m, 40, B, H, dtype, args.repeat) for k, m in _backend.BACKENDS.items()}
                speed = ms["python"] / ms["compiled"] if "compiled" in ms else float("nan")
                rows.append({"dtype": np.dtype(dtype).name, "T": 40, "B": B, "H": H, "ms": ms, "speedup": speed})
                print(f"{np.dtype(dtype).name:8} {B:4d} {H:4d} "
                      + " ".join(f"{v:10.3f}ms" for v in ms.values()) + f"   {speed:6.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
