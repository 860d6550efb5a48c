"""Time the encoder forward+backward on each kernel backend and on the tape.

    python benchmarks/bench_kernels.py [--repeats N] [--csv PATH]

Every backend is first checked against the tape gradient, then timed over
the same seeded images.  One row per backend: mean milliseconds per
forward+backward and the speedup over the numpy fallback.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from cropa import kernels
from cropa import tensor as T
from cropa.data_io import synth_image
from cropa.model import build_model, patchify_array, unpatchify_array, vision_encode
from cropa.tensor import Tensor


def fused_step(impl, model, image, g_pooled):
    patches = np.ascontiguousarray(patchify_array(image, model.arch))
    cache = impl.encoder_forward(patches, model.patch_proj, model.w_q, model.w_k, model.w_v, model.w_o)
    P = model.arch.num_patches
    g_out = np.broadcast_to(g_pooled / P, (P, model.arch.embed_dim))
    gp = impl.encoder_backward(cache, model.patch_proj, model.w_q, model.w_k, model.w_v, model.w_o, g_out)
    return unpatchify_array(gp, model.arch)


def tape_step(model, image, g_pooled):
    fn = lambda x: T.sum(T.mul(vision_encode(model, x).pooled, Tensor(g_pooled)))
    return T.value_and_grad(fn, {"x": Tensor(image, requires_grad=True)})[1]["x"]


def timeit(fn, images, repeats):
    fn(images[0])  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        for img in images:
            fn(img)
    return 1e3 * (time.perf_counter() - t0) / (repeats * len(images))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--csv", default="")
    args = ap.parse_args(argv)

    model = build_model(42)
    images = [synth_image(3000 + i) for i in range(args.images)]
    g = np.random.default_rng(0).standard_normal(model.arch.embed_dim)

    ref = tape_step(model, images[0], g)
    runners = {"tape": lambda img: tape_step(model, img, g)}
    for name, impl in kernels.backends().items():
        err = float(np.max(np.abs(fused_step(impl, model, images[0], g) - ref)))
        if err > 1e-10:
            print(f"{name}: gradient disagrees with tape by {err:.2e}", file=sys.stderr)
            return 1
        runners[name] = lambda img, impl=impl: fused_step(impl, model, img, g)

    times = {name: timeit(fn, images, args.repeats) for name, fn in runners.items()}
    base = times["python"]
    rows = [{"backend": n, "ms_per_step": f"{t:.4f}", "speedup_vs_python": f"{base / t:.2f}",
             "selected": str(n == kernels.BACKEND).lower()} for n, t in times.items()]
    print(f"{'backend':<10}{'ms/step':>10}{'vs python':>11}  selected")
    for r in rows:
        print(f"{r['backend']:<10}{r['ms_per_step']:>10}{r['speedup_vs_python']:>10}x  {r['selected']}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
