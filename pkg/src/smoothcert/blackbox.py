"""Black-box smoothing: a Coordinator trained by SPSA against a query-only classifier.

The Coordinator turns an image into a pixel-space prompt ``h(x)``. Its encoder
is frozen (patch embedding plus the first block of a clean ViT); its decoder
maps every patch token, concatenated with a shared trigger vector, through a
two-layer network back to that patch's pixels. The classifier is only ever
called on batches of images, so training never sees its weights or gradients.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from smoothcert import tensor as T
from smoothcert.vit import encode


class QueryError(RuntimeError):
    """The black-box classifier failed to answer."""


@dataclass(frozen=True)
class SpsaSchedule:
    a: float = 0.01
    big_a: float = 100.0
    alpha: float = 0.602
    c: float = 0.01
    gamma: float = 0.101
    beta: float = 0.9
    lookahead: bool = False

    def __post_init__(self):
        if not (self.a > 0 and 0 < self.c <= 1 and self.big_a >= 0):
            raise ValueError("spsa schedule needs a > 0, 0 < c <= 1 and A >= 0")
        if not (self.alpha >= 0 and self.gamma >= 0 and 0 <= self.beta <= 1):
            raise ValueError("spsa decay exponents must be >= 0 and beta in [0, 1]")

    def step_size(self, i):
        """``a_i = a / (A + i + 1)^alpha`` for the 0-based step ``i``."""
        return self.a / (self.big_a + i + 1) ** self.alpha

    def perturbation(self, i):
        """``c_i = c / (i + 1)^gamma``."""
        return self.c / (i + 1) ** self.gamma

    def to_dict(self):
        return asdict(self)


class Coordinator:
    """Frozen encoder + trainable decoder and trigger.

    Trainable parameters are kept as one flat float64 vector ``phi`` laid out
    as ``[W1, b1, W2, b2, trigger]``.
    """

    def __init__(self, encoder_model, trigger_dim=16, hidden=80, epsilon=0.3, seed=0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
        self.encoder = encoder_model.frozen_copy()
        cfg = self.encoder.config
        self.config = cfg
        self.epsilon = epsilon
        d_in = cfg.embed_dim + trigger_dim
        d_out = cfg.patch_dim
        self.shapes = {"w1": (d_in, hidden), "b1": (hidden,), "w2": (hidden, d_out),
                       "b2": (d_out,), "trigger": (trigger_dim,)}
        rng = np.random.default_rng(seed)
        parts = {
            "w1": rng.normal(0, 1 / math.sqrt(d_in), self.shapes["w1"]),
            "b1": np.zeros(hidden),
            # small output layer: the initial prompt is close to zero
            "w2": rng.normal(0, 0.01 / math.sqrt(hidden), self.shapes["w2"]),
            "b2": np.zeros(d_out),
            "trigger": rng.normal(0, 1.0, trigger_dim),
        }
        self.phi = np.concatenate([parts[k].ravel() for k in self.shapes])

    @property
    def num_parameters(self):
        return self.phi.size

    def unpack(self, phi=None):
        phi = self.phi if phi is None else phi
        out, o = {}, 0
        for k, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[k] = phi[o:o + n].reshape(shape)
            o += n
        return out

    def features(self, images, batch_size=256):
        """Encoder output for the patch tokens: (N, num_patches, d), float32."""
        images = np.asarray(images, dtype=self.encoder.dtype)
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(encode(self.encoder, images[s:s + batch_size], upto=1).data[:, 1:])
        return np.concatenate(out) if out else np.zeros((0, self.config.num_patches,
                                                         self.config.embed_dim), np.float32)

    def prompt(self, features, phi=None):
        """``h(x) = g(z_x, trigger)`` in [-1, 1], shaped like the images."""
        p = self.unpack(phi)
        n, t, _ = features.shape
        trig = np.broadcast_to(p["trigger"], (n, t, p["trigger"].size))
        z = np.concatenate([features, trig], axis=-1)
        h = np.tanh(z @ p["w1"] + p["b1"])
        patches = np.tanh(h @ p["w2"] + p["b2"])
        cfg = self.config
        g, ps = cfg.grid, cfg.patch_size
        img = patches.reshape(n, g, g, cfg.channels, ps, ps).transpose(0, 3, 1, 4, 2, 5)
        return img.reshape(n, cfg.channels, cfg.image_size, cfg.image_size)


def decorate(coordinator, x, sigma, rng, features=None, phi=None, noise=None):
    """``clip(x + eps * h(x), 0, 1) + delta``; the clip happens before the noise."""
    x = np.asarray(x)
    if coordinator.epsilon > 0:
        feats = coordinator.features(x) if features is None else features
        x = np.clip(x + coordinator.epsilon * coordinator.prompt(feats, phi), 0.0, 1.0)
    if sigma > 0:
        if noise is None:
            noise = rng.standard_normal(x.shape)
        x = x + sigma * noise
    return x.astype(np.float32)


def spsa_gradient(loss_fn, phi, c, rng):
    """Two-query simultaneous-perturbation estimate with a Rademacher direction."""
    if c <= 0:
        raise ValueError(f"perturbation size must be > 0, got {c}")
    delta = rng.choice(np.array([-1.0, 1.0]), size=np.shape(phi))
    diff = loss_fn(phi + c * delta) - loss_fn(phi - c * delta)
    return diff / (2 * c) * delta  # 1/delta == delta for +-1 entries


def spsa_minimize(loss_fn, phi0, schedule, steps, seed=0, callback=None):
    """SPSA with momentum.

    ``m <- beta m - a_i g_i``, ``phi <- phi + m``; with ``schedule.lookahead``
    the estimate is taken at ``phi + beta m`` instead of ``phi``.
    """
    rng = np.random.default_rng(seed)
    phi = np.array(phi0, dtype=np.float64)
    m = np.zeros_like(phi)
    for i in range(steps):
        at = phi + schedule.beta * m if schedule.lookahead else phi
        g = spsa_gradient(loss_fn, at, schedule.perturbation(i), rng)
        m = schedule.beta * m - schedule.step_size(i) * g
        phi = phi + m
        if callback is not None:
            callback(i, phi)
    return phi


def cross_entropy(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


class QueryCounter:
    """Wraps a ``batch -> scores`` callable, counting answered queries and retrying failures."""

    def __init__(self, model_query, retries=2):
        self.model_query = model_query
        self.retries = retries
        self.calls = 0
        self.attempts = 0

    def __call__(self, images):
        last = None
        for _ in range(self.retries + 1):
            self.attempts += 1
            try:
                out = np.asarray(self.model_query(images))
            except Exception as e:  # remote endpoints fail in arbitrary ways
                last = e
                continue
            self.calls += 1
            return out
        raise QueryError(f"model query failed after {self.retries + 1} attempts: {last}") from last


def spsa_train(coordinator, model_query, dataset, schedule, sigma, steps, batch_size=64, seed=0,
               retries=2, log=None, prompt_on="clean"):
    """Train the Coordinator's decoder and trigger through the query interface only.

    Each step draws a batch and one noise tensor, then evaluates the
    cross-entropy of the decorated batch at ``phi +- c_i * Delta`` (two queries).
    Returns the :class:`QueryCounter` so callers can inspect the query count.

    ``prompt_on="clean"`` trains on ``clip(x + eps h(x)) + delta``.
    ``prompt_on="noisy"`` trains on ``clip(z + eps h(z))`` with ``z = x + delta``,
    the composition that is certified (the prompt then only ever sees noisy
    inputs, so the smoothing certificate is about ``x`` itself).
    """
    if prompt_on not in ("clean", "noisy"):
        raise ValueError(f"prompt_on must be 'clean' or 'noisy', got {prompt_on!r}")
    query = QueryCounter(model_query, retries)
    feats = coordinator.features(dataset.images) if prompt_on == "clean" else None
    n = len(dataset)
    rng = np.random.default_rng([seed, 17])
    state = {"losses": []}

    def loss(phi):
        if prompt_on == "clean":
            x = decorate(coordinator, state["x"], sigma, None, state["z"], phi, state["noise"])
        else:
            x = decorate(coordinator, state["x"], 0.0, None, state["z"], phi)
        value = cross_entropy(query(x), state["y"])
        state["losses"].append(value)
        return value

    def sample(i, phi):
        # logs reuse the losses already queried; no extra calls
        if log is not None and (i + 1) % 50 == 0:
            log(i + 1, float(np.mean(state["losses"][-100:])))
        pick(i + 1)

    def pick(i):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        x, noise = dataset.images[idx], rng.standard_normal(dataset.images[idx].shape)
        if prompt_on == "clean":
            state.update(x=x, z=feats[idx], y=dataset.labels[idx], noise=noise)
        else:
            z = (x + sigma * noise).astype(np.float32)
            state.update(x=z, z=coordinator.features(z), y=dataset.labels[idx], noise=None)

    pick(0)
    coordinator.phi = spsa_minimize(loss, coordinator.phi, schedule, steps, seed, sample)
    return query
