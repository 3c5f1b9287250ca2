"""Time the compiled and numpy im2col/col2im kernels on model-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times one forward+backward pass of the desk D4 model under each
backend (the backend is swapped in ``eqdense.tensor`` for the run).
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from eqdense import _kernels
from eqdense import tensor as T
from eqdense.model import PRESETS, build_model

SHAPES = [
    # (N, C, H, W, k): stem, early dense layer, late dense layer
    (64, 3, 96, 96, 3),
    (64, 16, 46, 46, 3),
    (64, 64, 9, 9, 3),
]


def time_call(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(backends: dict, repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'shape':<24}{'op':<8}" + "".join(f"{name:>12}" for name in backends))
    for N, C, H, W, k in SHAPES:
        x = rng.standard_normal((N, C, H, W)).astype(np.float32)
        cols = _kernels.im2col_numpy(x, k, k)
        ref = None
        row_i, row_c = [], []
        for name, (im2col, col2im) in backends.items():
            out = im2col(x, k, k)
            back = col2im(cols, x.shape, k, k)
            if ref is None:
                ref = (out, back)
            else:
                assert np.array_equal(out, ref[0]) and np.allclose(back, ref[1], atol=1e-4), name
            row_i.append(time_call(lambda: im2col(x, k, k), repeat))
            row_c.append(time_call(lambda: col2im(cols, x.shape, k, k), repeat))
        label = f"{N}x{C}x{H}x{W} k{k}"
        print(f"{label:<24}{'im2col':<8}" + "".join(f"{t * 1e3:>10.1f}ms" for t in row_i))
        print(f"{'':<24}{'col2im':<8}" + "".join(f"{t * 1e3:>10.1f}ms" for t in row_c))


def bench_model(backends: dict, repeat: int) -> None:
    model, store = build_model(PRESETS["desk-p4m"])
    x = np.random.default_rng(1).random((16, 3, 96, 96)).astype(np.float32)
    labels = np.arange(16) % 2

    def step():
        params = store.tensors(requires_grad=True)
        out = model(store, x, train=True, params=params, update_stats=False)
        loss = T.bce_loss(T.reshape(out, (16,)), labels)
        T.backward(loss, params)

    saved = (_kernels.im2col, _kernels.col2im)
    try:
        for name, (im2col, col2im) in backends.items():
            _kernels.im2col, _kernels.col2im = im2col, col2im
            print(f"desk-p4m train step, batch 16, {name:<7} {time_call(step, repeat):.3f}s")
    finally:
        _kernels.im2col, _kernels.col2im = saved


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = _kernels.available_backends()
    print(f"import-time backend: {_kernels.BACKEND}; available: {', '.join(backends)}")
    bench_kernels(backends, args.repeat)
    bench_model(backends, max(1, args.repeat // 2))


if __name__ == "__main__":
    main()
