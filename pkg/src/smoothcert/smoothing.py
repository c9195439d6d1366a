"""Randomized smoothing: Monte Carlo votes, confidence bounds and certified radii.

Noise for sample ``j`` of stream ``s`` of example ``i`` is drawn from a Philox
generator whose key comes from ``(seed, i)`` and whose counter starts at
``(0, j // NOISE_BLOCK, s, 0)``. Every sample therefore has fixed noise no
matter how samples are grouped into forward batches or how examples are
spread over workers.
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betaincinv
from scipy.stats import binomtest

ABSTAIN = -1
NOISE_BLOCK = 64
CLAMP = 1e-12
SELECT, ESTIMATE, PREDICT = 0, 1, 2
RESULT_HEADER = ("idx", "label", "predict", "radius", "correct", "time")


# ------------------------------------------------------------ statistics

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def norm_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_ppf(p):
    """Standard normal quantile.

    Acklam's rational approximation (relative error ~1e-9) followed by one
    Halley step against ``erfc``, which brings it to double precision.
    """
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ValueError(f"norm_ppf needs p in [0, 1], got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1))
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1))
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1))
    # Halley step on Phi(x) - p; the upper-tail form keeps precision for p near 1
    if p < 0.5:
        e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    else:
        e = (1 - p) - 0.5 * math.erfc(x / math.sqrt(2))
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def lower_conf_bound(k, n, alpha):
    """One-sided Clopper-Pearson lower bound on a binomial proportion at level 1 - alpha."""
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ValueError(f"trials n must be a positive integer, got {n!r}")
    if not 0 <= k <= n:
        raise ValueError(f"successes k must lie in [0, n={n}], got {k}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if k == 0:
        return 0.0
    return float(betaincinv(k, n - k + 1, alpha))


def radius(sigma, p_a, p_b):
    """``sigma/2 * (Phi^-1(pA) - Phi^-1(pB))``, or 0 when ``pA <= pB``.

    Both probabilities are clamped to ``[1e-12, 1 - 1e-12]`` first.
    """
    p_a = min(max(p_a, CLAMP), 1 - CLAMP)
    p_b = min(max(p_b, CLAMP), 1 - CLAMP)
    if p_a <= p_b:
        return 0.0
    return sigma / 2 * (norm_ppf(p_a) - norm_ppf(p_b))


# ------------------------------------------------------------ parameters

@dataclass(frozen=True)
class SmoothingParams:
    sigma: float = 0.25
    n0: int = 100
    n: int = 1000
    alpha: float = 0.001
    batch: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"smoothing.sigma must be > 0, got {self.sigma}")
        if self.n0 < 1 or self.n < 1:
            raise ValueError("smoothing.n0 and smoothing.n must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError(f"smoothing.alpha must lie in (0, 1), got {self.alpha}")
        if self.batch < 1:
            raise ValueError("smoothing.batch must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class CertifyOutcome:
    prediction: int
    radius: float
    p_a_lower: float
    counts: np.ndarray
    selection_counts: np.ndarray = field(repr=False, default=None)
    wall_time: float = 0.0

    @property
    def abstained(self):
        return self.prediction == ABSTAIN


# ------------------------------------------------------------ sampling

class NoiseStream:
    """Counter-based Gaussian noise for one (seed, example, stream) triple."""

    def __init__(self, seed, example_index, stream=ESTIMATE):
        ss = np.random.SeedSequence(int(seed), spawn_key=(int(example_index),))
        self.key = ss.generate_state(2, np.uint64)
        self.stream = int(stream)

    def block(self, j, shape, dtype=np.float32):
        bitgen = np.random.Philox(key=self.key, counter=[0, j, self.stream, 0])
        return np.random.Generator(bitgen).standard_normal((NOISE_BLOCK,) + tuple(shape), dtype=dtype)

    def samples(self, start, stop, shape, dtype=np.float32):
        """Standard normal noise for sample indices ``[start, stop)``."""
        parts = []
        j = start // NOISE_BLOCK
        while j * NOISE_BLOCK < stop:
            blk = self.block(j, shape, dtype)
            lo = max(start - j * NOISE_BLOCK, 0)
            hi = min(stop - j * NOISE_BLOCK, NOISE_BLOCK)
            parts.append(blk[lo:hi])
            j += 1
        return parts[0] if len(parts) == 1 else np.concatenate(parts)


def _as_classifier(model, batch):
    from smoothcert.vit import ModelClassifier, VitModel

    return ModelClassifier(model, batch) if isinstance(model, VitModel) else model


def _num_classes(classifier, scores):
    return getattr(classifier, "num_classes", None) or scores.shape[1]


def sample_counts(model, x, sigma, k, stream, batch=128, num_classes=None):
    """Class vote counts of ``model(x + delta)`` over ``k`` noise draws."""
    if k < 1:
        raise ValueError(f"sample count must be >= 1, got {k}")
    classifier = _as_classifier(model, batch)
    x = np.asarray(x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
    counts = None
    for s in range(0, k, batch):
        e = min(s + batch, k)
        noisy = stream.samples(s, e, x.shape, dtype)
        noisy *= sigma
        noisy += x
        scores = np.asarray(classifier(noisy))
        if counts is None:
            counts = np.zeros(num_classes or _num_classes(classifier, scores), dtype=np.int64)
        counts += np.bincount(np.argmax(scores, axis=1), minlength=len(counts))[:len(counts)]
    return counts


def certify(model, x, params, example_index=0):
    """Two-phase certificate: select the top class on n0 draws, bound it on n fresh draws."""
    start = time.perf_counter()
    sel = sample_counts(model, x, params.sigma, params.n0,
                        NoiseStream(params.seed, example_index, SELECT), params.batch)
    top = int(np.argmax(sel))
    counts = sample_counts(model, x, params.sigma, params.n,
                           NoiseStream(params.seed, example_index, ESTIMATE), params.batch,
                           num_classes=len(sel))
    p_a = lower_conf_bound(int(counts[top]), params.n, params.alpha)
    if p_a <= 0.5:
        pred, r = ABSTAIN, 0.0
    else:
        pred, r = top, radius(params.sigma, p_a, 1 - p_a)
    return CertifyOutcome(pred, r, p_a, counts, sel, time.perf_counter() - start)


def predict_from_counts(counts, alpha):
    """Top class if an exact two-sided binomial test of top vs runner-up rejects 1/2."""
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    top = int(order[0])
    n_a = int(counts[top])
    n_b = int(counts[order[1]]) if len(counts) > 1 else 0
    if n_a + n_b == 0 or binomtest(n_a, n_a + n_b, 0.5).pvalue > alpha:
        return ABSTAIN
    return top


def predict(model, x, params, example_index=0):
    counts = sample_counts(model, x, params.sigma, params.n,
                           NoiseStream(params.seed, example_index, PREDICT), params.batch)
    return predict_from_counts(counts, params.alpha)


# ------------------------------------------------------------ datasets

def iso_duration(seconds):
    return f"PT{seconds:.3f}S"


def format_row(idx, label, outcome):
    correct = int(outcome.prediction == label)
    return (f"{idx}\t{label}\t{outcome.prediction}\t{outcome.radius:.6f}\t{correct}\t"
            f"{iso_duration(outcome.wall_time)}\n")


def read_results(path):
    """Parse a results TSV into a list of dicts (comment lines skipped)."""
    rows = []
    with open(path) as f:
        lines = [ln for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines or tuple(lines[0].rstrip("\n").split("\t")) != RESULT_HEADER:
        raise ValueError(f"{path}: missing results header")
    for ln in lines[1:]:
        idx, label, pred, rad, correct, _ = ln.rstrip("\n").split("\t")
        rows.append({"idx": int(idx), "label": int(label), "predict": int(pred),
                     "radius": float(rad), "correct": int(correct)})
    return rows


def results_body(path):
    """The deterministic part of a results file: header and rows without the time column."""
    with open(path) as f:
        return "".join("\t".join(ln.rstrip("\n").split("\t")[:5]) + "\n"
                       for ln in f if not ln.startswith("#"))


def certify_dataset(model, dataset, params, skip=1, max_index=None, out=None, workers=1,
                    header_lines=(), resume=True):
    """Certify examples ``0, skip, 2*skip, ...`` below ``max_index``.

    Rows are written to ``out`` in index order as they finish. With ``resume``
    an existing results file keeps its rows and only missing indices are run.
    Returns the list of ``(idx, label, outcome)`` computed in this call.
    """
    if skip < 1:
        raise ValueError(f"skip must be >= 1, got {skip}")
    stop = len(dataset) if max_index is None else min(max_index, len(dataset))
    indices = list(range(0, stop, skip))
    done = set()
    if out is not None and resume and os.path.exists(out) and os.path.getsize(out) > 0:
        done = {r["idx"] for r in read_results(out)}
        mode = "a"
    else:
        mode = "w"
    todo = [i for i in indices if i not in done]
    classifier = _as_classifier(model, params.batch)

    def job(i):
        return i, int(dataset.labels[i]), certify(classifier, dataset.images[i], params, i)

    results = []
    f = open(out, mode) if out is not None else None
    try:
        if f is not None and mode == "w":
            for line in header_lines:
                f.write(f"# {line}\n")
            f.write("\t".join(RESULT_HEADER) + "\n")
        if workers > 1:
            pool = ThreadPoolExecutor(workers)
            stream = pool.map(job, todo)
        else:
            pool, stream = None, map(job, todo)
        try:
            for i, label, outcome in stream:
                results.append((i, label, outcome))
                if f is not None:
                    f.write(format_row(i, label, outcome))
                    f.flush()
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
    finally:
        if f is not None:
            f.close()
    return results
