"""Time the fused LSTM recurrence on both kernel backends.

    python3 benchmarks/bench_lstm.py [--repeat 20]

Also times one training step of a small model and a forward pass at full
input width, since those are what the kernel speeds up in practice.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cmfusion import kernels
from cmfusion.model import CMRobertaModel, ModelConfig
from cmfusion.train import cross_entropy

SHAPES = [  # (batch, steps, hidden)
    (1, 5, 64),
    (32, 10, 16),
    (32, 24, 64),
]


def _best_of(fn, repeat: int) -> float:
    fn()  # warm-up (triggers JIT compilation on the numba backend)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_kernel(B, T, H, repeat):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((B, T, 4 * H))
    w = rng.standard_normal((4 * H, H)) / np.sqrt(H)
    mask = np.ones((B, T))
    mask[B // 2:, T - 2:] = 0.0
    g = rng.standard_normal((B, T, H))

    def step():
        out, cache = kernels.lstm_forward(xp, w, mask, False)
        kernels.lstm_backward(g, w, mask, False, cache)

    return _best_of(step, repeat)


def bench_train_step(repeat):
    model = CMRobertaModel(ModelConfig(d_audio_in=24, d_text_in=16, d_model=32))
    rng = np.random.default_rng(1)
    Xa, Xt = rng.standard_normal((32, 8, 24)), rng.standard_normal((32, 8, 16))
    labels = rng.integers(0, 7, size=(32, 8))

    def step():
        model.zero_grad()
        cross_entropy(model(Xa, Xt), labels).backward()

    return _best_of(step, repeat)


def bench_full_width(repeat):
    model = CMRobertaModel(ModelConfig())
    rng = np.random.default_rng(2)
    Xa, Xt = rng.standard_normal((5, 12696)), rng.standard_normal((5, 4096))
    return _best_of(lambda: model(Xa, Xt), max(1, repeat // 10))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    rows = []
    for B, T, H in SHAPES:
        rows.append((f"lstm fwd+bwd B={B} T={T} h={H}",
                     {b: (kernels.set_backend(b), bench_kernel(B, T, H, args.repeat))[1] for b in backends}))
    rows.append(("train step d_model=32 B=32 T=8",
                 {b: (kernels.set_backend(b), bench_train_step(args.repeat))[1] for b in backends}))
    rows.append(("forward, full input width, T=5",
                 {b: (kernels.set_backend(b), bench_full_width(args.repeat))[1] for b in backends}))
    width = max(len(r[0]) for r in rows)
    print(f"{'case'.ljust(width)}  " + "  ".join(f"{b:>10}" for b in backends) + "   speedup")
    for name, t in rows:
        cells = "  ".join(f"{1e3 * t[b]:>8.3f}ms" for b in backends)
        speed = f"{t['numpy'] / t['numba']:8.1f}x" if "numba" in t else ""
        print(f"{name.ljust(width)}  {cells}  {speed}")


if __name__ == "__main__":
    main()
