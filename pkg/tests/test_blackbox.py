import numpy as np
import pytest

from smoothcert import tensor as T
from smoothcert.blackbox import (Coordinator, QueryCounter, QueryError, SpsaSchedule, decorate,
                                 spsa_gradient, spsa_minimize, spsa_train)
from smoothcert.data import Dataset
from smoothcert.vit import ModelClassifier, VitConfig, VitModel

CFG = VitConfig(image_size=8, patch_size=4, embed_dim=16, num_heads=2, depth=2, num_classes=3)


@pytest.fixture(scope="module")
def encoder():
    return VitModel.create(CFG, seed=0)


@pytest.fixture
def images():
    return np.random.default_rng(0).random((6, 3, 8, 8)).astype(np.float32)


class TestCoordinator:
    def test_prompt_shape(self, encoder, images):
        c = Coordinator(encoder, trigger_dim=4, hidden=8)
        h = c.prompt(c.features(images))
        assert h.shape == images.shape and np.abs(h).max() <= 1

    def test_desk_size(self):
        c = Coordinator(VitModel.create(VitConfig(), seed=0))
        assert 9000 <= c.num_parameters <= 11000

    def test_encoder_frozen(self, encoder, images):
        c = Coordinator(encoder)
        h0 = c.encoder.backbone_hash()
        q = ModelClassifier(encoder)
        data = Dataset(images, np.zeros(6, int), num_classes=3)
        spsa_train(c, q, data, SpsaSchedule(), sigma=0.25, steps=3, batch_size=4)
        assert c.encoder.backbone_hash() == h0 == encoder.backbone_hash()

    def test_patch_mapping(self, encoder, images):
        # each patch of the prompt depends only on that patch's token
        c = Coordinator(encoder, trigger_dim=2, hidden=4)
        feats = c.features(images)
        f2 = feats.copy()
        f2[:, 0] += 1.0
        diff = np.abs(c.prompt(f2) - c.prompt(feats)).sum(axis=(0, 1))
        assert diff[:4, :4].sum() > 0 and diff[4:, :].sum() == 0 and diff[:, 4:].sum() == 0

    def test_bad_epsilon(self, encoder):
        with pytest.raises(ValueError):
            Coordinator(encoder, epsilon=1.5)


class TestDecorate:
    def test_identity(self, encoder, images):
        c = Coordinator(encoder, epsilon=0.0)
        assert np.array_equal(decorate(c, images, 0.0, None), images)

    def test_pure_smoothing(self, encoder, images):
        c = Coordinator(encoder, epsilon=0.0)
        noise = np.random.default_rng(1).standard_normal(images.shape)
        out = decorate(c, images, 0.5, np.random.default_rng(1))
        np.testing.assert_allclose(out, images + 0.5 * noise, atol=1e-6)

    def test_clip_before_noise(self, encoder):
        c = Coordinator(encoder, epsilon=1.0)
        x = np.full((2, 3, 8, 8), 0.7, np.float32)
        feats = c.features(x)
        p = c.unpack()
        p["b2"][:] = 10.0  # drives the prompt to +1 everywhere: 0.7 + 1.0 -> clipped to 1.0
        pre = decorate(c, x, 0.0, None, features=feats)
        assert np.all(pre == 1.0)
        noise = np.random.default_rng(3).standard_normal(x.shape)
        noisy = decorate(c, x, 0.3, None, features=feats, noise=noise)
        np.testing.assert_allclose(noisy, 1.0 + 0.3 * noise, atol=1e-6)


class TestSpsaGradient:
    @pytest.mark.parametrize("phi,c", [(0.3, 0.01), (-2.0, 0.5), (5.0, 1e-3)])
    def test_one_d_quadratic_exact(self, phi, c):
        rng = np.random.default_rng(0)
        for _ in range(20):
            g = spsa_gradient(lambda p: float(p[0] ** 2), np.array([phi]), c, rng)
            assert abs(g[0] - 2 * phi) <= 1e-12 * max(1.0, abs(phi))

    def test_constant_loss(self):
        g = spsa_gradient(lambda p: 3.0, np.ones(7), 0.1, np.random.default_rng(0))
        assert np.array_equal(g, np.zeros(7))

    def test_two_queries(self):
        calls = []
        spsa_gradient(lambda p: calls.append(1) or 0.0, np.ones(3), 0.1, np.random.default_rng(0))
        assert len(calls) == 2

    def test_directional_derivative_exact(self):
        # for any quadratic the estimate equals Delta Delta^T grad exactly
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 5))
        h = a @ a.T
        phi = rng.normal(size=5)

        def loss(p):
            return 0.5 * p @ h @ p

        draw = np.random.default_rng(9)
        g = spsa_gradient(loss, phi, 0.05, np.random.default_rng(9))
        delta = draw.choice(np.array([-1.0, 1.0]), size=5)
        np.testing.assert_allclose(g, delta * (delta @ (h @ phi)), rtol=1e-9)

    def test_unbiased_on_bowl(self):
        rng = np.random.default_rng(0)
        phi = rng.normal(size=10)
        draws = np.array([spsa_gradient(lambda p: float(p @ p), phi, 0.01, rng) for _ in range(10000)])
        se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - 2 * phi) < 3 * se + 1e-12)

    def test_bad_c(self):
        with pytest.raises(ValueError):
            spsa_gradient(lambda p: 0.0, np.ones(2), 0.0, np.random.default_rng(0))


class TestSchedule:
    def test_monotone_and_bounded(self):
        s = SpsaSchedule()
        a = [s.step_size(i) for i in range(1000)]
        c = [s.perturbation(i) for i in range(1000)]
        assert all(x >= y > 0 for x, y in zip(a, a[1:]))
        assert all(1 >= x >= y > 0 for x, y in zip(c, c[1:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            SpsaSchedule(c=0)
        with pytest.raises(ValueError):
            SpsaSchedule(beta=1.5)


class TestMinimize:
    def test_zero_steps(self):
        phi0 = np.arange(3.0)
        assert np.array_equal(spsa_minimize(lambda p: 0.0, phi0, SpsaSchedule(), 0), phi0)

    def test_beta_zero_is_plain_descent(self):
        target = np.array([0.5, -0.25])
        sched = SpsaSchedule(a=0.2, beta=0.0)
        loss = lambda p: float(((p - target) ** 2).sum())  # noqa: E731
        rng = np.random.default_rng(0)
        phi = np.zeros(2)
        expect = phi.copy()
        for i in range(3):
            expect = expect - sched.step_size(i) * spsa_gradient(loss, expect, sched.perturbation(i), rng)
        got = spsa_minimize(loss, phi, sched, 3, seed=0)
        np.testing.assert_allclose(got, expect, rtol=0, atol=0)

    def test_beta_zero_converges(self):
        target = np.random.default_rng(1).normal(size=5) * 0.2
        loss = lambda p: float(((p - target) ** 2).sum())  # noqa: E731
        phi = spsa_minimize(loss, np.zeros(5), SpsaSchedule(a=1.0, beta=0.0), 5000)
        assert np.linalg.norm(phi - target) < 1e-2

    @pytest.mark.parametrize("lookahead", [False, True])
    def test_momentum_converges(self, lookahead):
        target = np.random.default_rng(2).normal(size=50)
        loss = lambda p: float(((p - target) ** 2).sum())  # noqa: E731
        phi = spsa_minimize(loss, np.zeros(50), SpsaSchedule(lookahead=lookahead), 5000, seed=3)
        assert np.linalg.norm(phi - target) < 1e-2


class TestQueries:
    def test_query_count_and_no_backward(self, encoder, images):
        c = Coordinator(encoder)
        model = ModelClassifier(encoder)
        grads_before = [t.grad for t in encoder.params.values()]
        q = spsa_train(c, model, Dataset(images, np.arange(6) % 3, num_classes=3), SpsaSchedule(),
                       sigma=0.25, steps=5, batch_size=4)
        assert q.calls == 10
        assert [t.grad for t in encoder.params.values()] == grads_before
        assert all(t.grad is None for t in encoder.params.values())

    def test_noisy_prompt_mode(self, encoder, images):
        seen = []

        def query(x):
            seen.append(x.copy())
            return np.zeros((len(x), 3))
        c = Coordinator(encoder)
        q = spsa_train(c, query, Dataset(images, np.zeros(6, int), num_classes=3), SpsaSchedule(), 0.5,
                       steps=2, batch_size=4, prompt_on="noisy")
        assert q.calls == 4
        # the decorated batch is clipped after the prompt, so no noise is added on top
        assert all(x.min() >= 0 and x.max() <= 1 for x in seen)
        with pytest.raises(ValueError):
            spsa_train(c, query, Dataset(images, np.zeros(6, int), num_classes=3), SpsaSchedule(), 0.5,
                       steps=1, prompt_on="both")

    def test_zero_steps_unchanged(self, encoder, images):
        c = Coordinator(encoder)
        phi0 = c.phi.copy()
        spsa_train(c, ModelClassifier(encoder), Dataset(images, np.zeros(6, int), num_classes=3),
                   SpsaSchedule(), 0.25, steps=0)
        assert np.array_equal(c.phi, phi0)

    def test_retry_then_abort(self):
        state = {"n": 0}

        def flaky(x):
            state["n"] += 1
            if state["n"] < 3:
                raise ConnectionError("down")
            return np.zeros((len(x), 2))
        q = QueryCounter(flaky, retries=2)
        assert q(np.zeros((1, 1))).shape == (1, 2) and q.attempts == 3 and q.calls == 1

        def dead(x):
            raise ConnectionError("down")
        with pytest.raises(QueryError):
            QueryCounter(dead, retries=1)(np.zeros((1, 1)))

    def test_query_only_interface(self, encoder, images):
        # a bare function with no model attributes is enough
        model = ModelClassifier(encoder)
        c = Coordinator(encoder)
        with T.no_grad():
            spsa_train(c, lambda x: model(x), Dataset(images, np.zeros(6, int), num_classes=3),
                       SpsaSchedule(), 0.25, steps=2, batch_size=3)
