"""Experiment configuration: plain ``key=value`` files with dotted section names.

Every known key has a typed default in :data:`DEFAULTS`; files and command
line overrides may only set known keys. An empty value means "unset" for
optional keys (``train.learning_rate``, ``certify.max``, ``peft.lora_alpha``).
The resolved configuration is rendered back as sorted ``key=value`` lines and
embedded in every artifact.
"""

from smoothcert.blackbox import SpsaSchedule
from smoothcert.peft import PeftConfig
from smoothcert.smoothing import SmoothingParams
from smoothcert.train import TrainConfig
from smoothcert.vit import VitConfig


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


# key -> (type, default); None default marks an optional value
DEFAULTS = {
    "data.format": (str, "desk"),
    "data.train_path": (str, "A:train"),
    "data.test_path": (str, "A:test"),
    "data.train_labels_path": (str, ""),
    "data.test_labels_path": (str, ""),
    "data.subset": (int, 2000),
    "data.test_subset": (int, 500),
    "vit.image_size": (int, 32),
    "vit.channels": (int, 3),
    "vit.patch_size": (int, 4),
    "vit.embed_dim": (int, 64),
    "vit.num_heads": (int, 4),
    "vit.depth": (int, 4),
    "vit.mlp_ratio": (int, 2),
    "vit.num_classes": (int, 10),
    "peft.method": (str, "lora"),
    "peft.rank": (int, 2),
    "peft.lora_alpha": (float, None),
    "peft.bottleneck": (int, 8),
    "peft.prompt_length": (int, 100),
    "peft.prompt_depth": (str, "deep"),
    "peft.activation": (str, "relu"),
    "pretrain.epochs": (int, 8),
    "pretrain.batch_size": (int, 64),
    "pretrain.learning_rate": (float, 1e-3),
    "train.sigma": (float, 0.25),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 64),
    "train.learning_rate": (float, None),
    "train.optimizer": (str, "adam"),
    "train.mode": (str, "noise_finetune"),
    "smoothing.sigma": (float, 0.25),
    "smoothing.n0": (int, 100),
    "smoothing.n": (int, 1000),
    "smoothing.alpha": (float, 0.001),
    "smoothing.batch": (int, 256),
    "certify.model": (str, "finetuned"),
    "certify.skip": (int, 1),
    "certify.max": (int, None),
    "certify.workers": (int, 1),
    "spsa.steps": (int, 1000),
    "spsa.a": (float, 0.01),
    "spsa.big_a": (float, 100.0),
    "spsa.alpha": (float, 0.602),
    "spsa.c": (float, 0.01),
    "spsa.gamma": (float, 0.101),
    "spsa.beta": (float, 0.9),
    "spsa.lookahead": (bool, False),
    "spsa.epsilon": (float, 0.3),
    "spsa.batch_size": (int, 64),
    "spsa.trigger_dim": (int, 16),
    "spsa.hidden": (int, 80),
    "spsa.prompt_on": (str, "noisy"),
    "report.radius_max": (float, 2.0),
    "report.radius_step": (float, 0.05),
    "report.results": (str, ""),
    "sweep.param": (str, "rank"),
    "sweep.ranks": (_ints, (1, 2, 4, 8)),
    "sweep.prompt_lengths": (_ints, (10, 50, 100, 200)),
    "run.seed": (int, 0),
    "run.out": (str, "runs/default"),
}

CHOICES = {
    "data.format": ("cifar10-bin", "idx", "raw", "desk"),
    "certify.model": ("finetuned", "backbone", "blackbox"),
    "sweep.param": ("rank", "prompt_length"),
    "spsa.prompt_on": ("clean", "noisy"),
}


def _coerce(key, text):
    kind, _ = DEFAULTS[key]
    text = text.strip()
    if text == "" and DEFAULTS[key][1] is None:
        return None
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        name = getattr(kind, "__name__", "list of integers").strip("_")
        raise ConfigError(key, f"cannot parse {text!r} as {name}") from None


def _render(value):
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class ExperimentConfig:
    def __init__(self, values=None):
        self.values = {k: d for k, (_, d) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {raw.strip()!r}")
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
        return cls.parse(text, str(path))

    def lines(self):
        return [f"{k}={_render(self.values[k])}" for k in sorted(self.values)]

    def dump(self):
        return "\n".join(self.lines()) + "\n"

    # ---- typed views; each reports the failing field path

    def _section(self, prefix, build):
        try:
            return build()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            msg = str(e)
            key = next((k for k in DEFAULTS if k.startswith(prefix + ".") and k.split(".", 1)[1] in msg),
                       prefix)
            raise ConfigError(key, msg) from None

    def validate(self):
        for key, choices in CHOICES.items():
            if self.values[key] not in choices:
                raise ConfigError(key, f"must be one of {choices}, got {self.values[key]!r}")
        for key in ("certify.skip", "certify.workers", "data.subset", "data.test_subset",
                    "spsa.batch_size", "pretrain.epochs", "pretrain.batch_size"):
            if self.values[key] < (0 if key == "pretrain.epochs" else 1):
                raise ConfigError(key, "must be positive")
        if self.values["certify.max"] is not None and self.values["certify.max"] < 0:
            raise ConfigError("certify.max", "must be >= 0")
        if not self.values["report.radius_step"] > 0:
            raise ConfigError("report.radius_step", "must be > 0")
        self.vit(), self.peft(), self.train(), self.smoothing(), self.spsa()
        return self

    def vit(self):
        keys = ("image_size", "channels", "patch_size", "embed_dim", "num_heads", "depth", "mlp_ratio",
                "num_classes")
        return self._section("vit", lambda: VitConfig(**{k: self.values["vit." + k] for k in keys}))

    def peft(self, **overrides):
        keys = ("method", "rank", "lora_alpha", "bottleneck", "prompt_length", "prompt_depth", "activation")
        kw = {k: self.values["peft." + k] for k in keys}
        kw.update(overrides)
        return self._section("peft", lambda: PeftConfig(**kw))

    def train(self, **overrides):
        keys = ("sigma", "epochs", "batch_size", "learning_rate", "optimizer", "mode")
        kw = {k: self.values["train." + k] for k in keys}
        kw["seed"] = self.values["run.seed"]
        kw.update(overrides)
        return self._section("train", lambda: TrainConfig(**kw))

    def pretrain(self):
        return self.train(sigma=0.0, mode="clean_pretrain", epochs=self.values["pretrain.epochs"],
                          batch_size=self.values["pretrain.batch_size"],
                          learning_rate=self.values["pretrain.learning_rate"])

    def smoothing(self):
        keys = ("sigma", "n0", "n", "alpha", "batch")
        kw = {k: self.values["smoothing." + k] for k in keys}
        return self._section("smoothing", lambda: SmoothingParams(seed=self.values["run.seed"], **kw))

    def spsa(self):
        keys = ("a", "big_a", "alpha", "c", "gamma", "beta", "lookahead")
        return self._section("spsa", lambda: SpsaSchedule(**{k: self.values["spsa." + k] for k in keys}))
