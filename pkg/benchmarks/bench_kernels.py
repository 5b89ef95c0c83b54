"""Time the numba and numpy paths of the correlation and warp kernels.

    python benchmarks/bench_kernels.py            # default shapes
    python benchmarks/bench_kernels.py --quick    # tiny shapes, one repeat

Each row reports the best of ``--repeat`` timings per backend and the speedup
of numba over numpy.  Both backends are checked to agree before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from recurflow import _kernels as K

# (batch, channels, height, width, max_disp)
SHAPES = [(4, 16, 16, 16, 2), (4, 32, 32, 32, 2), (8, 32, 64, 64, 4)]
QUICK = [(1, 4, 8, 8, 2)]


def cases(b, c, h, w, d, rng):
    f1, f2 = rng.normal(size=(2, b, c, h, w))
    flow = 2.0 * rng.normal(size=(b, 2, h, w))
    g_corr = rng.normal(size=(b, (2 * d + 1) ** 2, h, w))
    g_warp = rng.normal(size=(b, c, h, w))
    return {
        "corr fwd": ("correlation_forward", (f1, f2, d)),
        "corr bwd": ("correlation_backward", (g_corr, f1, f2, d)),
        "warp fwd": ("warp_forward", (f1, flow)),
        "warp bwd": ("warp_backward", (g_warp, f1, flow)),
    }


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-10)


def run(shapes, repeat: int, number: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for shape in shapes:
        for label, (name, args) in cases(*shape, rng).items():
            np_fn = getattr(K, name + "_np")
            nb_fn = getattr(K, name + "_nb") if K.HAS_NUMBA else None
            row = {"kernel": label, "shape": shape}
            row["numpy"] = min(timeit.repeat(lambda: np_fn(*args), repeat=repeat, number=number)) / number
            if nb_fn is not None:
                nb_fn(*args)  # compile outside the timed region
                if not _agree(np_fn(*args), nb_fn(*args)):
                    raise AssertionError(f"backends disagree on {label} {shape}")
                row["numba"] = min(timeit.repeat(lambda: nb_fn(*args), repeat=repeat, number=number)) / number
            rows.append(row)
    return rows


def format_rows(rows: list[dict]) -> str:
    lines = [f"{'kernel':<10}{'shape (B,C,H,W,d)':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}"]
    for r in rows:
        nb = r.get("numba")
        nb_txt = f"{1e3 * nb:>10.3f}" if nb else f"{'n/a':>10}"
        sp = f"{r['numpy'] / nb:>8.1f}x" if nb else f"{'':>9}"
        lines.append(f"{r['kernel']:<10}{str(r['shape']):<22}{1e3 * r['numpy']:>10.3f}{nb_txt}{sp}")
    return "\n".join(lines)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    args = ap.parse_args(argv)
    if args.quick:
        rows = run(QUICK, repeat=1, number=1)
    else:
        rows = run(SHAPES, args.repeat, args.number)
    print(format_rows(rows))


if __name__ == "__main__":
    main()
