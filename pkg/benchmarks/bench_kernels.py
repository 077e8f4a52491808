"""Compare the compiled and numpy kernel backends.

Times the fused attention kernel on the shapes a desk-scale scan produces and
the 2x2 downsampler on a 640x640 image, then a full merged scan per backend.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import statistics
import time

import numpy as np

from scanformer import kernels
from scanformer import numerics as nx
from scanformer.config import preset
from scanformer.model import ScanFormer
from scanformer.synthgym import make_dataset


def timed(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args()
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    rng = np.random.default_rng(0)
    # (heads, queries, keys, head width): text pass, scale-2 dense, single query
    shapes = [(4, 9, 9, 16), (4, 65, 95, 16), (4, 1, 95, 16), (12, 401, 548, 64)]
    print("kernel,shape,backend,median_ms")
    for g, nq, nk, dh in shapes:
        q = rng.normal(size=(g, nq, dh)).astype(np.float32)
        k = rng.normal(size=(g, nk, dh)).astype(np.float32)
        v = rng.normal(size=(g, nk, dh)).astype(np.float32)
        bias = np.zeros((g, nq, nk), np.float32)
        reps = max(3, args.repeat // (10 if nq > 100 else 1))
        for b in backends:
            ms = timed(lambda: kernels.attention(q, k, v, bias, backend=b), reps)
            print(f"attention,{g}x{nq}x{nk}x{dh},{b},{ms:.4f}")
    img = rng.random((640, 640, 3)).astype(np.float32)
    for b in backends:
        ms = timed(lambda: kernels.downsample2x(img, backend=b), args.repeat)
        print(f"downsample2x,640x640x3,{b},{ms:.4f}")

    model = ScanFormer(preset("desk"))
    data = make_dataset(10, 1_000_000)
    for b in backends:
        with kernels.use_backend(b), nx.no_grad():
            i = iter(range(10 ** 9))

            def scan():
                j = next(i) % len(data)
                model.scan(data.images[j], data.ids[j], mode="eval", merge=True)

            ms = timed(scan, max(5, args.repeat // 5))
        print(f"merged_scan,desk,{b},{ms:.4f}")


if __name__ == "__main__":
    main()
