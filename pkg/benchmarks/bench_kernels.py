"""Compiled vs pure-Python kernel timings, plus one end-to-end forward pass.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each row reports the best-of-``repeat`` wall time per call and the speedup of
the compiled extension over the numpy fallback. Outputs of both backends are
checked for agreement before timing.
"""

import argparse
import json
import timeit

import numpy as np

from smoothcert import kernels
from smoothcert.vit import VitConfig, VitModel, predict_logits


def cases(rng):
    # shapes seen by the desk model at batch 256: attention rows and token rows
    att = rng.normal(size=(256 * 4, 65, 65)).astype(np.float32)
    tok = rng.normal(size=(256 * 65, 64)).astype(np.float32)
    hid = rng.normal(size=(256 * 65, 128)).astype(np.float32)
    gy = rng.normal(size=tok.shape).astype(np.float32)
    gain, bias = rng.normal(1, 0.1, 64).astype(np.float32), rng.normal(0, 0.1, 64).astype(np.float32)
    y = kernels.softmax(att)
    _, mean, rstd = kernels.layer_norm(tok, gain, bias, 1e-6)
    return {
        "softmax": lambda: kernels.softmax(att, 0.25),
        "softmax_backward": lambda: kernels.softmax_backward(y, att),
        "layer_norm": lambda: kernels.layer_norm(tok, gain, bias, 1e-6),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(gy, tok, gain, mean, rstd),
        "gelu": lambda: kernels.gelu(hid),
        "gelu_backward": lambda: kernels.gelu_backward(hid, hid),
    }


def flatten(out):
    if isinstance(out, tuple):
        return [np.asarray(o) for o in out]
    return [np.asarray(out)]


def time_call(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    if "compiled" not in kernels.available_backends():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    model = VitModel.create(VitConfig(), seed=0)
    images = rng.random((256, 3, 32, 32)).astype(np.float32)

    results = []
    previous = kernels.backend()
    try:
        for name, fn in cases(rng).items():
            row = {"kernel": name}
            outs = {}
            for be in ("python", "compiled"):
                kernels.use_backend(be)
                outs[be] = flatten(fn())
                row[be] = time_call(fn, args.repeat)
            # relative to each output's largest entry, so summed gradients compare fairly
            row["max_rel_diff"] = max(float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-30))
                                      for a, b in zip(outs["python"], outs["compiled"]))
            results.append(row)
        row = {"kernel": "vit_forward_b256"}
        for be in ("python", "compiled"):
            kernels.use_backend(be)
            row[be] = time_call(lambda: predict_logits(model, images), max(3, args.repeat // 3))
        row["max_rel_diff"] = float("nan")
        results.append(row)
    finally:
        kernels.use_backend(previous)

    print(f"{'kernel':<22}{'python ms':>11}{'compiled ms':>13}{'speedup':>9}{'max rel diff':>14}")
    for r in results:
        print(f"{r['kernel']:<22}{r['python'] * 1e3:>11.2f}{r['compiled'] * 1e3:>13.2f}"
              f"{r['python'] / r['compiled']:>8.2f}x{r['max_rel_diff']:>14.2e}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
