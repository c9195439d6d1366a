"""Parameter-efficient adaptation of a frozen ViT backbone.

Four methods attach to a backbone without touching its tensors:

* ``lora``: rank-``r`` updates ``B @ A`` on the query and value projections,
  ``B`` zero-initialised so the attached model starts bit-identical.
* ``adapter``: serial bottleneck adapters after the attention and MLP
  sub-layers of every block, ``W_up`` zero-initialised.
* ``prompt``: trainable tokens inserted after [CLS]; ``deep`` replaces them
  at every layer, ``shallow`` inserts them once before the first block.
* ``full``: every backbone tensor becomes trainable (on a private copy).

The classifier head is copied into the PEFT state and trained alongside the
adaptation tensors, so the backbone (including its head) is never mutated.
"""

from dataclasses import asdict, dataclass

import numpy as np

from smoothcert import tensor as T
from smoothcert.tensor import Tensor

METHODS = ("none", "lora", "adapter", "prompt", "full")
LORA_TARGETS = ("q", "v")


class PeftError(RuntimeError):
    pass


@dataclass(frozen=True)
class PeftConfig:
    method: str = "none"
    rank: int = 2
    lora_alpha: float | None = None
    bottleneck: int = 8
    prompt_length: int = 100
    prompt_depth: str = "deep"
    activation: str = "relu"
    init_std: float = 0.02
    train_head: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"peft.method must be one of {METHODS}, got {self.method!r}")
        if self.method == "lora" and self.rank < 1:
            raise ValueError("peft.rank must be >= 1")
        if self.method == "adapter" and self.bottleneck < 1:
            raise ValueError("peft.bottleneck must be >= 1")
        if self.method == "prompt" and self.prompt_length < 1:
            raise ValueError("peft.prompt_length must be >= 1")
        if self.prompt_depth not in ("deep", "shallow"):
            raise ValueError("peft.prompt_depth must be 'deep' or 'shallow'")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"peft.activation must be one of {sorted(T.ACTIVATIONS)}")

    @property
    def alpha(self):
        return float(self.rank if self.lora_alpha is None else self.lora_alpha)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class PeftState:
    def __init__(self, config, params, merged=False):
        self.config = config
        self.params = dict(params)
        self.merged = merged

    @property
    def method(self):
        return self.config.method

    @property
    def has_adapters(self):
        return self.method == "adapter"

    @property
    def has_prompts(self):
        return self.method == "prompt"

    @property
    def head(self):
        if "head.weight" not in self.params:
            return None
        return self.params["head.weight"], self.params["head.bias"]

    def lora(self, layer, proj):
        if self.method != "lora" or self.merged or proj not in LORA_TARGETS:
            return None
        pre = f"lora.{layer}.{proj}."
        return self.params[pre + "A"], self.params[pre + "B"], self.config.alpha

    def adapter(self, layer, where):
        pre = f"adapter.{layer}.{where}."
        return self.params[pre + "down"], self.params[pre + "up"], self.config.activation

    def prompt(self, layer):
        if self.config.prompt_depth == "shallow" and layer > 0:
            return None
        return self.params[f"prompt.{layer}"]

    def arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def astype(self, dtype):
        params = {}
        for k, t in self.params.items():
            nt = Tensor(t.data.astype(dtype))
            nt.requires_grad = t.requires_grad
            params[k] = nt
        return PeftState(self.config, params, self.merged)


def expected_shapes(config, vit_config):
    """Names and shapes of the tensors a method adds (head copy included)."""
    d, depth = vit_config.embed_dim, vit_config.depth
    shapes = {}
    if config.method == "lora":
        for i in range(depth):
            for proj in LORA_TARGETS:
                shapes[f"lora.{i}.{proj}.A"] = (config.rank, d)
                shapes[f"lora.{i}.{proj}.B"] = (d, config.rank)
    elif config.method == "adapter":
        for i in range(depth):
            for where in ("attn", "mlp"):
                shapes[f"adapter.{i}.{where}.down"] = (d, config.bottleneck)
                shapes[f"adapter.{i}.{where}.up"] = (config.bottleneck, d)
    elif config.method == "prompt":
        layers = depth if config.prompt_depth == "deep" else 1
        for i in range(layers):
            shapes[f"prompt.{i}"] = (config.prompt_length, d)
    if config.method in ("lora", "adapter", "prompt") and config.train_head:
        shapes["head.weight"] = (d, vit_config.num_classes)
        shapes["head.bias"] = (vit_config.num_classes,)
    return shapes


def method_parameter_count(config, vit_config):
    """Closed-form count of the adaptation tensors alone (head excluded)."""
    d, depth = vit_config.embed_dim, vit_config.depth
    if config.method == "lora":
        return 4 * depth * d * config.rank
    if config.method == "adapter":
        return 2 * (2 * d * config.bottleneck) * depth
    if config.method == "prompt":
        layers = depth if config.prompt_depth == "deep" else 1
        return layers * config.prompt_length * d
    return 0


def attach(model, config, seed=0):
    """Return a new model sharing ``model``'s frozen backbone with ``config`` attached."""
    from smoothcert.vit import VitModel

    if model.peft is not None:
        raise PeftError(f"model already has a {model.peft.method!r} PEFT state attached")
    arrays = model.backbone_arrays()
    if config.method == "none":
        return VitModel(model.config, arrays, meta=model.meta)
    if config.method == "full":
        arrays = {k: v.copy() for k, v in arrays.items()}
        return VitModel(model.config, arrays, peft=PeftState(config, {}), trainable=True,
                        meta=model.meta)
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    params = {}
    for name, shape in expected_shapes(config, model.config).items():
        if name.endswith(".B") or name.endswith(".up"):
            arr = np.zeros(shape)
        elif name.startswith("head."):
            arr = arrays[name]
        elif name.endswith(".down"):
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:  # lora A, prompts
            arr = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(np.array(arr, dtype=dtype), requires_grad=True)
    return VitModel(model.config, arrays, peft=PeftState(config, params), meta=model.meta)


def lora_forward(x, w0, a, b, alpha, bias=None):
    """``x @ W0 (+ bias) + (alpha / r) * (x @ A^T) @ B^T``.

    ``w0`` is stored (in, out); ``a`` is (r, in) and ``b`` is (out, r).
    """
    r = a.shape[0]
    if a.shape[1] != w0.shape[0] or b.shape != (w0.shape[1], r):
        raise T.ShapeError(f"lora: W0 {w0.shape}, A {a.shape}, B {b.shape} are not conformal")
    base = T.linear(x, w0, bias)
    delta = T.matmul(T.matmul(x, T.transpose(a)), T.transpose(b))
    return base + delta * (alpha / r)


def adapter_forward(h, w_down, w_up, activation="relu"):
    """Serial bottleneck adapter: ``h + f(h @ W_down) @ W_up``."""
    if w_down.shape[0] != h.shape[-1] or w_up.shape != (w_down.shape[1], h.shape[-1]):
        raise T.ShapeError(f"adapter: input {h.shape}, W_down {w_down.shape}, "
                           f"W_up {w_up.shape} are not conformal")
    act = T.ACTIVATIONS[activation]
    return h + T.matmul(act(T.matmul(h, w_down)), w_up)


def prompt_forward(tokens, prompt, n_prev=0):
    """Replace the ``n_prev`` prompt positions after [CLS] with ``prompt``.

    Token order in and out is ``[CLS], prompts, patch embeddings``.
    """
    b, _, d = tokens.shape
    if prompt.shape[0] == 0 and n_prev == 0:
        return tokens
    cls = tokens[:, :1]
    patches = tokens[:, 1 + n_prev:]
    return T.concat([cls, T.broadcast_to(prompt, (b,) + prompt.shape), patches], axis=1)


def merge_lora(model):
    """Fold ``(alpha/r) B A`` into the query/value weights; returns a plain model."""
    from smoothcert.vit import VitModel

    state = model.peft
    if state is None or state.method != "lora":
        raise PeftError("merge_lora needs a model with LoRA attached")
    if state.merged:
        raise PeftError("LoRA state was already merged")
    arrays = dict(model.backbone_arrays())
    scale = state.config.alpha / state.config.rank
    for i in range(model.config.depth):
        for proj in LORA_TARGETS:
            a, b, _ = state.lora(i, proj)
            name = f"blocks.{i}.attn.{proj}.weight"
            delta = (b.data @ a.data).T * scale
            arrays[name] = (arrays[name] + delta).astype(model.dtype)
    if state.head is not None:
        arrays["head.weight"] = state.head[0].data.copy()
        arrays["head.bias"] = state.head[1].data.copy()
    state.merged = True
    return VitModel(model.config, arrays, meta=model.meta)
