"""Compare the compiled and numpy im2col/col2im backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Reports the best-of-``repeat`` wall time per call for im2col, col2im and a
full conv2d forward + backward, and checks that both backends produce
identical bits on every case before timing it.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from resrep import _kernels_py, tensor
from resrep.tensor import conv2d, conv2d_backward

try:
    from resrep import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

CASES = [
    # (N, C, H, W, k, stride, pad)
    (64, 16, 32, 32, 3, 1, 1),
    (64, 32, 16, 16, 3, 2, 1),
    (64, 64, 8, 8, 3, 1, 1),
    (64, 16, 16, 16, 3, 1, 1),
]


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_case(case, repeat, dtype):
    n, c, h, w, k, s, p = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, w)).astype(dtype)
    kern = rng.standard_normal((c, c, k, k)).astype(dtype)
    cols = _kernels_py.im2col(x, k, k, s, p)
    if _compiled is not None:
        assert np.array_equal(_compiled.im2col(x, k, k, s, p), cols)
        assert np.array_equal(_compiled.col2im(cols, c, h, w, k, k, s, p), _kernels_py.col2im(cols, c, h, w, k, k, s, p))
    row = {"case": "x".join(map(str, (n, c, h, w))) + f" k{k} s{s} p{p}"}
    impls = [("python", _kernels_py)] + ([("compiled", _compiled)] if _compiled is not None else [])
    for name, impl in impls:
        row[f"im2col_{name}"] = best(lambda: impl.im2col(x, k, k, s, p), repeat)
        row[f"col2im_{name}"] = best(lambda: impl.col2im(cols, c, h, w, k, k, s, p), repeat)
        tensor.use_backend(name)
        out = conv2d(x, kern, None, s, p)
        dout = np.ones_like(out)

        def fwd_bwd():
            o, cl = conv2d(x, kern, None, s, p, return_cols=True)
            conv2d_backward(dout, x.shape, kern, cl, s, p)

        row[f"conv_{name}"] = best(fwd_bwd, repeat)
    tensor.use_backend("auto")
    return row


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--json", help="also write the rows here")
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled backend not built; timing the numpy fallback only", file=sys.stderr)
    rows = [bench_case(c, args.repeat, np.dtype(args.dtype)) for c in CASES]
    ops = ("im2col", "col2im", "conv")
    print(f"{'case':<26}" + "".join(f"{op + ' py':>13}{op + ' c':>12}{'x':>7}" for op in ops))
    for r in rows:
        line = f"{r['case']:<26}"
        for op in ops:
            py, cc = r[f"{op}_python"], r.get(f"{op}_compiled", float("nan"))
            line += f"{py * 1e3:>10.2f} ms{cc * 1e3:>9.2f} ms{py / cc:>6.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
