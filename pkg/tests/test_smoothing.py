import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothcert import smoothing as S
from smoothcert.data import Dataset
from smoothcert.smoothing import (ABSTAIN, NoiseStream, SmoothingParams, certify, certify_dataset,
                                  lower_conf_bound, norm_ppf, predict, predict_from_counts, radius,
                                  read_results, results_body, sample_counts)


def ppf_oracle(p):
    """Bisection on erfc: independent of the rational approximation under test.

    Upper-half points bisect the right tail on q = 1 - p (exact for p >= 0.5),
    which keeps the oracle well conditioned near 1.
    """
    if p > 0.5:
        return -ppf_oracle(1.0 - p)
    lo, hi = -40.0, 0.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if 0.5 * math.erfc(-mid / math.sqrt(2)) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def cp_oracle(k, n, alpha):
    """Bisection for p with P[Beta(k, n-k+1) <= p] = alpha, in 50-digit arithmetic."""
    with mpmath.workdps(50):
        lo, hi = mpmath.mpf(0), mpmath.mpf(1)
        for _ in range(120):
            mid = (lo + hi) / 2
            if mpmath.betainc(k, n - k + 1, 0, mid, regularized=True) < alpha:
                lo = mid
            else:
                hi = mid
        return float((lo + hi) / 2)


def two_sided_binom_pvalue(a, n):
    """Exact two-sided p-value for p=1/2 (symmetric: twice the smaller tail, capped at 1)."""
    tail = sum(math.comb(n, i) for i in range(0, min(a, n - a) + 1)) / 2 ** n
    return min(1.0, 2 * tail)


class Constant:
    num_classes = 3

    def __init__(self, cls):
        self.cls = cls

    def __call__(self, x):
        out = np.zeros((len(x), self.num_classes))
        out[:, self.cls] = 1
        return out


class Linear:
    num_classes = 2

    def __init__(self, w, b):
        self.w, self.b = np.asarray(w, float), float(b)

    def __call__(self, x):
        s = x.reshape(len(x), -1) @ self.w + self.b
        return np.stack([-s, s], axis=1)


class TestNormPpf:
    @pytest.mark.parametrize("p", [1e-12, 1e-9, 1e-4, 0.02425, 0.1, 0.3, 0.5, 0.8, 0.9, 0.97575,
                                   0.999, 1 - 1e-9, 1 - 1e-12])
    def test_against_erf_bisection(self, p):
        assert abs(norm_ppf(p) - ppf_oracle(p)) < 1e-9

    @given(st.floats(1e-10, 1 - 1e-10))
    @settings(max_examples=300, deadline=None)
    def test_random_points(self, p):
        assert abs(norm_ppf(p) - ppf_oracle(p)) < 1e-9

    def test_endpoints(self):
        assert norm_ppf(0.0) == -math.inf and norm_ppf(1.0) == math.inf
        with pytest.raises(ValueError):
            norm_ppf(1.5)


class TestLowerConfBound:
    @pytest.mark.parametrize("n", [1, 10, 100, 1000, 100000])
    def test_all_successes(self, n):
        assert abs(lower_conf_bound(n, n, 0.001) - 0.001 ** (1 / n)) < 1e-9

    def test_no_successes(self):
        assert lower_conf_bound(0, 1000, 0.001) == 0.0

    @pytest.mark.parametrize("k,n,alpha", [(990, 1000, 0.001), (500, 1000, 0.001), (1, 10, 0.05),
                                           (60, 100, 0.01), (99999, 100000, 0.001)])
    def test_against_beta_bisection(self, k, n, alpha):
        assert abs(lower_conf_bound(k, n, alpha) - cp_oracle(k, n, alpha)) < 1e-9

    @pytest.mark.parametrize("args", [(-1, 10, 0.1), (11, 10, 0.1), (1, 0, 0.1), (1, 10, 0.0),
                                      (1, 10, 1.0)])
    def test_domain(self, args):
        with pytest.raises(ValueError):
            lower_conf_bound(*args)

    def test_monotone_in_k(self):
        vals = [lower_conf_bound(k, 200, 0.01) for k in range(201)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_coverage_small(self):
        rng = np.random.default_rng(0)
        p, alpha, trials = 0.9, 0.05, 2000
        ks = rng.binomial(500, p, size=trials)
        over = np.mean([lower_conf_bound(int(k), 500, alpha) > p for k in ks])
        assert over <= alpha + 3 * math.sqrt(alpha * (1 - alpha) / trials)


class TestRadius:
    def test_half(self):
        assert radius(1.0, 0.5, 0.5) == 0.0

    def test_examples(self):
        assert abs(radius(0.5, 0.8, 0.2) - 0.5 * ppf_oracle(0.8)) < 1e-12
        assert abs(radius(0.5, 0.8, 0.2) - 0.42081) < 1e-4
        assert abs(radius(1.0, 0.9, 0.1) - 1.28155) < 1e-4

    def test_no_certificate(self):
        assert radius(1.0, 0.4, 0.6) == 0.0

    def test_clamped_extremes(self):
        r = radius(1.0, 1.0, 0.0)
        expect = (ppf_oracle(1 - 1e-12) - ppf_oracle(1e-12)) / 2
        assert math.isfinite(r) and abs(r - expect) < 1e-9

    @given(st.floats(0.01, 5.0), st.floats(0.01, 10.0), st.floats(0.5001, 0.999999))
    def test_linear_in_sigma(self, sigma, c, p):
        a, b = radius(c * sigma, p, 1 - p), c * radius(sigma, p, 1 - p)
        assert abs(a - b) <= 1e-12 * abs(b)

    def test_monotone_in_p(self):
        ps = np.linspace(0.5001, 0.9999, 500)
        r = [radius(1.0, p, 1 - p) for p in ps]
        assert all(a < b for a, b in zip(r, r[1:]))


class TestSampleCounts:
    def test_constant(self):
        c = sample_counts(Constant(2), np.zeros(4), 0.5, 77, NoiseStream(0, 0))
        assert c.tolist() == [0, 0, 77]

    def test_tiny_sigma(self):
        clf = Linear([1.0, -1.0], 0.1)
        c = sample_counts(clf, np.array([0.3, 0.2]), 1e-9, 200, NoiseStream(0, 0))
        assert c.tolist() == [0, 200]

    def test_linear_oracle(self):
        w, b, x, sigma, k = np.array([0.6, -0.8, 0.0]), 0.1, np.array([0.2, 0.1, 0.5]), 0.5, 20000
        c = sample_counts(Linear(w, b), x, sigma, k, NoiseStream(3, 0), batch=1000)
        p = S.norm_cdf((w @ x + b) / (sigma * np.linalg.norm(w)))
        assert abs(c[1] / k - p) < 3 * math.sqrt(p * (1 - p) / k)

    @pytest.mark.parametrize("batch", [1, 7, 64, 100, 1000])
    def test_batch_size_invariance(self, batch):
        clf = Linear(np.ones(5), -2.5)
        x = np.full(5, 0.5)
        ref = sample_counts(clf, x, 1.0, 300, NoiseStream(1, 4), batch=300)
        assert np.array_equal(sample_counts(clf, x, 1.0, 300, NoiseStream(1, 4), batch=batch), ref)
        assert ref.sum() == 300

    def test_streams_are_distinct(self):
        a = NoiseStream(0, 0, S.SELECT).samples(0, 10, (3,))
        b = NoiseStream(0, 0, S.ESTIMATE).samples(0, 10, (3,))
        c = NoiseStream(0, 1, S.SELECT).samples(0, 10, (3,))
        assert not np.array_equal(a, b) and not np.array_equal(a, c)

    def test_noise_prefix_stable(self):
        s = NoiseStream(5, 2)
        full = s.samples(0, 200, (4,))
        assert np.array_equal(s.samples(60, 130, (4,)), full[60:130])

    def test_noise_moments(self):
        z = NoiseStream(0, 0).samples(0, 4096, (64,), np.float64)
        assert abs(z.mean()) < 3 / math.sqrt(z.size) * 1.5
        assert abs(z.std() - 1) < 0.01

    def test_zero_k(self):
        with pytest.raises(ValueError):
            sample_counts(Constant(0), np.zeros(2), 1.0, 0, NoiseStream(0, 0))


class TestCertify:
    def test_constant_classifier(self):
        p = SmoothingParams(sigma=0.7, n0=10, n=500, alpha=0.001)
        out = certify(Constant(1), np.zeros(3), p)
        assert out.prediction == 1
        assert abs(out.p_a_lower - 0.001 ** (1 / 500)) < 1e-12
        assert abs(out.radius - 0.7 * ppf_oracle(0.001 ** (1 / 500))) < 1e-9

    def test_tie_abstains(self):
        # w.x + b = 0: each class has probability exactly 1/2
        p = SmoothingParams(sigma=1.0, n0=50, n=2000)
        out = certify(Linear([1.0, 0.0], 0.0), np.zeros(2), p)
        assert out.abstained and out.radius == 0.0

    def test_abstain_invariants(self):
        clf = Linear([1.0, 1.0], -0.9)
        for i in range(20):
            out = certify(clf, np.full(2, 0.5), SmoothingParams(sigma=0.5, n0=20, n=200), i)
            if out.abstained:
                assert out.radius == 0 and out.p_a_lower <= 0.5
            else:
                assert out.p_a_lower > 0.5 and out.radius > 0

    def test_selection_tie_lowest_index(self):
        class Even:
            num_classes = 4

            def __call__(self, x):
                return np.tile([0.0, 1.0, 1.0, 0.0], (len(x), 1))
        out = certify(Even(), np.zeros(2), SmoothingParams(n0=5, n=20))
        assert out.prediction in (1, ABSTAIN) and np.argmax(out.selection_counts) == 1

    def test_linear_soundness(self):
        rng = np.random.default_rng(11)
        w, b = rng.normal(size=4), 0.3
        x, sigma = rng.normal(size=4) * 0.3, 0.4
        exact = abs(w @ x + b) / np.linalg.norm(w)
        p = SmoothingParams(sigma=sigma, n0=50, n=500, alpha=0.01)
        bad = sum(certify(Linear(w, b), x, p, i).radius > exact for i in range(300))
        assert bad <= 0.01 * 300 + 3 * math.sqrt(0.01 * 0.99 * 300)


class TestPredict:
    def test_clear_winner(self):
        assert predict_from_counts([100, 0, 0], 0.001) == 0

    def test_sixty_forty(self):
        assert abs(two_sided_binom_pvalue(60, 100) - 0.0569) < 1e-3
        assert predict_from_counts([40, 60], 0.001) == ABSTAIN
        assert predict_from_counts([40, 60], 0.1) == 1

    def test_equal(self):
        assert predict_from_counts([50, 50, 0], 0.5) == ABSTAIN

    def test_end_to_end(self):
        assert predict(Constant(2), np.zeros(3), SmoothingParams(n=100)) == 2


class TestParams:
    @pytest.mark.parametrize("kw", [{"sigma": 0}, {"n0": 0}, {"n": 0}, {"alpha": 0}, {"alpha": 1},
                                    {"batch": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SmoothingParams(**kw)


@pytest.fixture
def linear_data():
    rng = np.random.default_rng(2)
    images = rng.random((12, 1, 2, 2))
    labels = (images.reshape(12, -1).sum(1) > 2).astype(int)
    return Dataset(images, labels, "test", num_classes=2)


class TestCertifyDataset:
    params = SmoothingParams(sigma=0.25, n0=20, n=200, batch=64, seed=3)
    clf = Linear(np.ones(4), -2.0)

    def test_rows_and_format(self, linear_data, tmp_path):
        out = tmp_path / "r.tsv"
        res = certify_dataset(self.clf, linear_data, self.params, out=out)
        lines = out.read_text().splitlines()
        assert lines[0] == "idx\tlabel\tpredict\tradius\tcorrect\ttime"
        assert len(lines) == 1 + len(linear_data) == 1 + len(res)
        f = lines[1].split("\t")
        assert len(f[3].split(".")[1]) == 6 and f[5].startswith("PT") and f[5].endswith("S")

    def test_skip_and_max(self, linear_data):
        res = certify_dataset(self.clf, linear_data, self.params, skip=3, max_index=10)
        assert [r[0] for r in res] == [0, 3, 6, 9]
        with pytest.raises(ValueError):
            certify_dataset(self.clf, linear_data, self.params, skip=0)

    @pytest.mark.parametrize("workers", [1, 3])
    def test_deterministic_across_workers(self, linear_data, tmp_path, workers):
        a, b = tmp_path / "a.tsv", tmp_path / f"b{workers}.tsv"
        certify_dataset(self.clf, linear_data, self.params, out=a)
        certify_dataset(self.clf, linear_data, self.params, out=b, workers=workers)
        assert results_body(a) == results_body(b)

    def test_resume(self, linear_data, tmp_path):
        full, part = tmp_path / "full.tsv", tmp_path / "part.tsv"
        certify_dataset(self.clf, linear_data, self.params, out=full)
        certify_dataset(self.clf, linear_data, self.params, out=part, max_index=5)
        again = certify_dataset(self.clf, linear_data, self.params, out=part)
        assert [r[0] for r in again] == list(range(5, 12))
        assert results_body(full) == results_body(part)

    def test_certified_accuracy_definition(self, linear_data, tmp_path):
        out = tmp_path / "r.tsv"
        certify_dataset(self.clf, linear_data, self.params, out=out)
        rows = read_results(out)
        for r in rows:
            assert r["correct"] == int(r["predict"] == r["label"])
            if r["predict"] == ABSTAIN:
                assert r["radius"] == 0.0
