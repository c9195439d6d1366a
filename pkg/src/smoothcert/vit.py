"""A small Vision Transformer classifier with PEFT attachment points."""

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from smoothcert import peft as peft_ops
from smoothcert import tensor as T
from smoothcert.tensor import Tensor


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 2
    num_classes: int = 10

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"vit.{name} must be >= 1, got {value}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self):
        return self.embed_dim * self.mlp_ratio

    def to_dict(self):
        return asdict(self)


def backbone_shapes(cfg):
    d, n = cfg.embed_dim, cfg.num_patches
    shapes = {
        "patch.weight": (cfg.patch_dim, d),
        "patch.bias": (d,),
        "cls": (1, 1, d),
        "pos": (1, n + 1, d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update({
            b + "ln1.gain": (d,), b + "ln1.bias": (d,),
            **{b + f"attn.{p}.weight": (d, d) for p in "qkvo"},
            **{b + f"attn.{p}.bias": (d,) for p in "qkvo"},
            b + "ln2.gain": (d,), b + "ln2.bias": (d,),
            b + "mlp.fc1.weight": (d, cfg.mlp_dim), b + "mlp.fc1.bias": (cfg.mlp_dim,),
            b + "mlp.fc2.weight": (cfg.mlp_dim, d), b + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.gain": (d,), "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes), "head.bias": (cfg.num_classes,),
    })
    return shapes


def init_backbone(cfg, seed=0, dtype=None):
    """Fan-in scaled truncated-normal weights, small cls/position vectors, zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    dtype = dtype or T.default_dtype()
    params = {}
    for name, shape in backbone_shapes(cfg).items():
        if name.endswith("gain"):
            arr = np.ones(shape)
        elif name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            std = 1.0 / np.sqrt(shape[0]) if name.endswith("weight") else 0.02
            arr = np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)
        params[name] = arr.astype(dtype)
    return params


def content_hash(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(f"{name}|{a.dtype.str}|{a.shape}|".encode())
        h.update(a.tobytes())
    return h.hexdigest()


class VitModel:
    """Backbone tensors plus an optional attached :class:`~smoothcert.peft.PeftState`.

    Backbone tensors are frozen (read-only, no gradient) unless the model was
    built with ``trainable=True`` or has the ``full`` PEFT method attached.
    """

    def __init__(self, config, arrays, peft=None, trainable=False, meta=None):
        self.config = config
        expected = backbone_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"backbone tensors mismatch: missing {missing}, unexpected {extra}")
        self.params = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise T.ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            t = Tensor(arr)
            t.requires_grad = trainable
            t.data.flags.writeable = trainable
            self.params[name] = t
        self.peft = peft
        self.trainable = trainable
        self.meta = dict(meta or {})

    @classmethod
    def create(cls, config=None, seed=0, dtype=None, trainable=False):
        config = config or VitConfig()
        return cls(config, init_backbone(config, seed, dtype), trainable=trainable)

    @property
    def dtype(self):
        return self.params["patch.weight"].dtype

    def backbone_arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def backbone_hash(self):
        return content_hash(self.backbone_arrays())

    def trainable_tensors(self):
        out = {k: t for k, t in self.params.items() if t.requires_grad}
        if self.peft is not None:
            out.update({k: t for k, t in self.peft.params.items() if t.requires_grad})
        return out

    def astype(self, dtype):
        """Copy of the model with every tensor cast to ``dtype``."""
        arrays = {k: v.astype(dtype) for k, v in self.backbone_arrays().items()}
        peft = self.peft.astype(dtype) if self.peft is not None else None
        return VitModel(self.config, arrays, peft=peft, trainable=self.trainable, meta=self.meta)

    def frozen_copy(self):
        """Plain frozen backbone carrying the current weights (PEFT state dropped)."""
        return VitModel(self.config, {k: v.copy() for k, v in self.backbone_arrays().items()},
                        meta=self.meta)

    def __call__(self, images):
        return forward(self, images)


def count_parameters(model, trainable_only=False):
    if trainable_only:
        return int(sum(t.data.size for t in model.trainable_tensors().values()))
    total = sum(t.data.size for t in model.params.values())
    if model.peft is not None:
        total += sum(t.data.size for t in model.peft.params.values())
    return int(total)


def patchify(images, patch):
    b, c, h, w = images.shape
    x = T.reshape(images, (b, c, h // patch, patch, w // patch, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, (h // patch) * (w // patch), c * patch * patch))


def embed(model, images):
    """Patch + [CLS] embeddings with positions: (batch, 1 + num_patches, d)."""
    cfg, p = model.config, model.params
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.dtype))
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise T.ShapeError(f"images must be (batch, {cfg.channels}, {cfg.image_size}, "
                           f"{cfg.image_size}), got {x.shape}")
    if x.dtype != model.dtype:
        x = Tensor(x.data.astype(model.dtype), requires_grad=False) if not x.requires_grad else x
    tokens = T.linear(patchify(x, cfg.patch_size), p["patch.weight"], p["patch.bias"])
    cls = T.broadcast_to(p["cls"], (x.shape[0], 1, cfg.embed_dim))
    return T.concat([cls, tokens], axis=1) + p["pos"]


def attention(model, i, x, attn_probe=None):
    cfg, p = model.config, model.params
    b, t, d = x.shape
    pre = f"blocks.{i}.attn."
    state = model.peft

    def proj(name):
        w, bias = p[pre + name + ".weight"], p[pre + name + ".bias"]
        lora = state.lora(i, name) if state is not None else None
        if lora is None:
            return T.linear(x, w, bias)
        a_mat, b_mat, alpha = lora
        return peft_ops.lora_forward(x, w, a_mat, b_mat, alpha, bias=bias)

    def heads(z):
        return T.transpose(T.reshape(z, (b, t, cfg.num_heads, cfg.head_dim)), (0, 2, 1, 3))

    q, k, v = heads(proj("q")), heads(proj("k")), heads(proj("v"))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    probs = T.softmax(scores, scale=1.0 / np.sqrt(cfg.head_dim))
    if attn_probe is not None:
        attn_probe.append(probs.data)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return T.linear(ctx, p[pre + "o.weight"], p[pre + "o.bias"])


def block(model, i, x, attn_probe=None):
    p, state = model.params, model.peft
    pre = f"blocks.{i}."
    h = attention(model, i, T.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"]), attn_probe)
    if state is not None and state.has_adapters:
        h = peft_ops.adapter_forward(h, *state.adapter(i, "attn"))
    x = x + h
    h = T.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
    h = T.gelu(T.linear(h, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"]))
    h = T.linear(h, p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"])
    if state is not None and state.has_adapters:
        h = peft_ops.adapter_forward(h, *state.adapter(i, "mlp"))
    return x + h


def encode(model, images, upto=None, attn_probe=None, token_counts=None):
    """Token states after ``upto`` blocks (all blocks by default)."""
    state = model.peft
    x = embed(model, images)
    depth = model.config.depth if upto is None else upto
    n_prompt = 0
    for i in range(depth):
        if state is not None and state.has_prompts:
            prompt = state.prompt(i)
            if prompt is not None:
                x = peft_ops.prompt_forward(x, prompt, n_prompt)
                n_prompt = prompt.shape[0]
        if token_counts is not None:
            token_counts.append(x.shape[1])
        x = block(model, i, x, attn_probe)
    return x


def forward(model, images, attn_probe=None, token_counts=None):
    """Logits (batch, num_classes); the head reads the [CLS] position only."""
    p = model.params
    x = encode(model, images, attn_probe=attn_probe, token_counts=token_counts)
    cls = x[:, 0]
    cls = T.layer_norm(cls, p["norm.gain"], p["norm.bias"])
    if model.peft is not None and model.peft.head is not None:
        hw, hb = model.peft.head
    else:
        hw, hb = p["head.weight"], p["head.bias"]
    return T.linear(cls, hw, hb)


def predict_logits(model, images, batch_size=256):
    """Inference-only logits as a numpy array.

    Rows do not depend on how inputs are grouped into batches. A lone image is
    padded to two rows because BLAS takes a matrix-vector path for a single
    row, which rounds differently.
    """
    images = np.asarray(images)
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            chunk = images[s:s + batch_size]
            if len(chunk) == 1:
                out.append(forward(model, np.concatenate([chunk, chunk])).data[:1])
            else:
                out.append(forward(model, chunk).data)
    if not out:
        return np.zeros((0, model.config.num_classes), dtype=model.dtype)
    return np.concatenate(out)


class ModelClassifier:
    """Adapts a model to the ``batch -> class scores`` query interface."""

    def __init__(self, model, batch_size=256):
        self.model = model
        self.batch_size = batch_size
        self.num_classes = model.config.num_classes

    def __call__(self, images):
        return predict_logits(self.model, images, self.batch_size)
