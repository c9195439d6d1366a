"""Command-line front end: ``smoothcert <command> --config FILE [overrides]``.

Commands and their artifacts (all inside ``run.out``):

=============  ==============================================================
pretrain       ``backbone.psmc`` and ``pretrain_loss.csv`` (clean training)
finetune       ``finetune.psmc`` (PEFT delta, or full weights) and ``loss.csv``
certify        ``results.tsv`` (``results_<model>.tsv`` unless model=finetuned)
predict        ``predictions.tsv``
spsa-train     ``coordinator.npz`` (black-box prompt generator)
report         ``curve.csv`` and ``curve.dat`` from a results file
sweep          ``sweep/<param>_<value>/`` runs plus ``sweep_summary.csv``
=============  ==============================================================

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 numeric failure (non-finite training loss).
"""

import argparse
import errno
import json
import os
import sys
import time

import numpy as np

from smoothcert import data as D
from smoothcert.blackbox import Coordinator, decorate, spsa_train
from smoothcert.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from smoothcert.config import ConfigError, ExperimentConfig
from smoothcert.peft import attach, method_parameter_count
from smoothcert.report import compare, curve_from_results, radii_grid
from smoothcert.smoothing import certify_dataset, predict
from smoothcert.train import NumericError, evaluate, train, write_trace
from smoothcert.vit import ModelClassifier, VitModel, count_parameters

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("pretrain", "finetune", "certify", "predict", "spsa-train", "report", "sweep")

FLAG_KEYS = {
    "sigma": ("train.sigma", "smoothing.sigma"),
    "n0": ("smoothing.n0",),
    "n": ("smoothing.n",),
    "alpha": ("smoothing.alpha",),
    "peft": ("peft.method",),
    "rank": ("peft.rank",),
    "prompt_len": ("peft.prompt_length",),
    "seed": ("run.seed",),
    "skip": ("certify.skip",),
    "max": ("certify.max",),
    "out": ("run.out",),
}


class UsageError(Exception):
    pass


class DirectoryLock:
    """Exclusive ``.lock`` file in the output directory for the duration of a command."""

    def __init__(self, directory):
        self.path = os.path.join(directory, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{os.path.dirname(self.path)} is locked by another command "
                             f"(remove {self.path} if that command is no longer running)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass


def build_parser():
    p = argparse.ArgumentParser(prog="smoothcert", description="Certified robustness via "
                                "noise-augmented parameter-efficient fine-tuning.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--sigma", type=float, help="noise level for training and certification")
    p.add_argument("--n0", type=int, help="selection samples")
    p.add_argument("--n", type=int, help="estimation samples")
    p.add_argument("--alpha", type=float, help="certification failure probability")
    p.add_argument("--peft", choices=("lora", "adapter", "prompt", "full", "none"))
    p.add_argument("--rank", type=int)
    p.add_argument("--prompt-len", dest="prompt_len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--skip", type=int)
    p.add_argument("--max", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    p.add_argument("--quiet", action="store_true")
    return p


def resolve_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value)
    for flag, keys in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            for key in keys:
                cfg.set(key, value)
    return cfg.validate()


class Runner:
    def __init__(self, cfg, quiet=False):
        self.cfg = cfg
        self.out = cfg["run.out"]
        self.quiet = quiet

    def log(self, msg):
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def provenance(self):
        return ["resolved config:"] + self.cfg.lines()

    # ---- inputs

    def dataset(self, which):
        c = self.cfg
        path, labels = c[f"data.{which}_path"], c[f"data.{which}_labels_path"] or None
        ds = D.load_dataset(path, c["data.format"], c["vit.num_classes"], which, labels, c["run.seed"])
        size = c["data.subset"] if which == "train" else c["data.test_subset"]
        ds = D.subset(ds, size, c["run.seed"])
        vit = c.vit()
        if ds.images.shape[1:] != (vit.channels, vit.image_size, vit.image_size):
            raise D.DataError(f"{path}: images are {ds.images.shape[1:]}, model expects "
                              f"{(vit.channels, vit.image_size, vit.image_size)}")
        return ds

    def backbone(self):
        path = self.path("backbone.psmc")
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint {path}; run `smoothcert pretrain` first")
        return load_checkpoint(path)

    def finetuned(self):
        path = self.path("finetune.psmc")
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint {path}; run `smoothcert finetune` first")
        backbone = self.backbone()
        from smoothcert.checkpoint import read_checkpoint
        manifest, _ = read_checkpoint(path)
        return load_checkpoint(path, backbone=backbone if manifest["kind"] == "peft" else None)

    def coordinator(self, backbone):
        path = self.path("coordinator.npz")
        if not os.path.exists(path):
            raise CheckpointError(f"missing {path}; run `smoothcert spsa-train` first")
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            coord = Coordinator(backbone, meta["trigger_dim"], meta["hidden"], meta["epsilon"])
            coord.phi = z["phi"].copy()
        if meta.get("prompt_on") == "clean":
            self.log("warning: coordinator was trained with prompts on clean inputs; certification "
                     "applies it to noisy inputs, so expect lower accuracy (spsa.prompt_on=noisy matches)")
        return coord

    def classifier(self, which):
        """(query function, trained-parameter count, label) for the model being certified."""
        backbone = self.backbone()
        batch = self.cfg["smoothing.batch"]
        if which == "backbone":
            return ModelClassifier(backbone, batch), 0, "backbone"
        if which == "finetuned":
            model = self.finetuned()
            return (ModelClassifier(model, batch), count_parameters(model, trainable_only=True),
                    model.meta.get("label", "finetuned"))
        coord = self.coordinator(backbone)
        base = ModelClassifier(backbone, batch)

        def decorated(x):
            # the prompt is computed from the already-noised input so the certificate is about x
            return base(decorate(coord, x, 0.0, None))
        decorated.num_classes = backbone.config.num_classes
        return decorated, coord.num_parameters, "blackbox"

    # ---- commands

    def pretrain(self):
        cfg = self.cfg
        train_ds, test_ds = self.dataset("train"), self.dataset("test")
        model = attach(VitModel.create(cfg.vit(), seed=cfg["run.seed"]), cfg.peft(method="full"))
        res = train(model, train_ds, cfg.pretrain(), eval_data=test_ds, log=lambda s: self.log(str(s)))
        backbone = model.frozen_copy()
        backbone.meta = {"config": cfg.dump(), "label": "backbone"}
        save_checkpoint(backbone, self.path("backbone.psmc"))
        write_trace(res.trace, self.path("pretrain_loss.csv"), self.provenance())

    def finetune(self, subdir=None, peft=None):
        cfg = self.cfg
        peft = peft or cfg.peft()
        out = self.path(subdir) if subdir else self.out
        os.makedirs(out, exist_ok=True)
        backbone = self.backbone()
        train_ds, test_ds = self.dataset("train"), self.dataset("test")
        if peft.method == "none":
            raise UsageError("peft.method=none has nothing to fine-tune; certify the backbone instead")
        model = attach(backbone, peft, cfg["run.seed"])
        res = train(model, train_ds, cfg.train(), eval_data=test_ds, log=lambda s: self.log(str(s)))
        model.meta = {"config": cfg.dump(), "label": label_for(peft)}
        kind = "full" if peft.method in ("full", "none") else "peft"
        save_checkpoint(model, os.path.join(out, "finetune.psmc"), kind=kind)
        write_trace(res.trace, os.path.join(out, "loss.csv"), self.provenance())
        return model

    def certify(self, classifier=None, params=None, out=None, label=None, n_params=None):
        cfg = self.cfg
        which = cfg["certify.model"]
        if classifier is None:
            classifier, n_params, label = self.classifier(which)
        params = params or cfg.smoothing()
        test_ds = self.dataset("test")
        out = out or self.path("results.tsv" if which == "finetuned" else f"results_{which}.tsv")
        clean = evaluate(classifier, test_ds, 0.0, cfg["run.seed"])
        header = self.provenance() + [f"label={label}", f"clean_accuracy={clean:.4f}",
                                      f"trained_parameters={n_params}"]
        start = time.perf_counter()
        rows = certify_dataset(classifier, test_ds, params, cfg["certify.skip"], cfg["certify.max"], out,
                               cfg["certify.workers"], header)
        self.log(f"certified {len(rows)} examples in {time.perf_counter() - start:.1f}s -> {out}")
        return out

    def predict(self):
        cfg = self.cfg
        classifier, _, _ = self.classifier(cfg["certify.model"])
        params = cfg.smoothing()
        test_ds = self.dataset("test")
        stop = len(test_ds) if cfg["certify.max"] is None else min(cfg["certify.max"], len(test_ds))
        with open(self.path("predictions.tsv"), "w") as f:
            for line in self.provenance():
                f.write(f"# {line}\n")
            f.write("idx\tlabel\tpredict\tcorrect\n")
            for i in range(0, stop, cfg["certify.skip"]):
                pred = predict(classifier, test_ds.images[i], params, i)
                label = int(test_ds.labels[i])
                f.write(f"{i}\t{label}\t{pred}\t{int(pred == label)}\n")

    def spsa_train(self):
        cfg = self.cfg
        backbone = self.backbone()
        coord = Coordinator(backbone, cfg["spsa.trigger_dim"], cfg["spsa.hidden"], cfg["spsa.epsilon"],
                            seed=cfg["run.seed"])
        query = ModelClassifier(backbone, cfg["smoothing.batch"])
        counter = spsa_train(coord, query, self.dataset("train"), cfg.spsa(), cfg["train.sigma"],
                             cfg["spsa.steps"], cfg["spsa.batch_size"], cfg["run.seed"],
                             log=lambda i, v: self.log(f"step {i}: loss {v:.4f}"), prompt_on=cfg["spsa.prompt_on"])
        meta = {"trigger_dim": cfg["spsa.trigger_dim"], "hidden": cfg["spsa.hidden"],
                "prompt_on": cfg["spsa.prompt_on"],
                "epsilon": cfg["spsa.epsilon"], "queries": counter.calls, "config": cfg.dump()}
        tmp = self.path("coordinator.tmp.npz")
        np.savez(tmp, phi=coord.phi, meta=json.dumps(meta, sort_keys=True))
        os.replace(tmp, self.path("coordinator.npz"))

    def report(self, results=None, out_dir=None, label=None):
        cfg = self.cfg
        results = results or cfg["report.results"] or self.path("results.tsv")
        if not os.path.exists(results):
            raise CheckpointError(f"missing results file {results}; run `smoothcert certify` first")
        out_dir = out_dir or self.out
        curve = curve_from_results(results, radii_grid(cfg["report.radius_max"], cfg["report.radius_step"]),
                                   label)
        header = [f"source={os.path.basename(results)}"] + self.provenance()
        with open(os.path.join(out_dir, "curve.csv"), "w") as f:
            f.write(curve.to_csv(header))
        with open(os.path.join(out_dir, "curve.dat"), "w") as f:
            f.write(curve.to_dat())
        return curve

    def sweep(self):
        cfg = self.cfg
        param = cfg["sweep.param"]
        values = cfg["sweep.ranks"] if param == "rank" else cfg["sweep.prompt_lengths"]
        method = "lora" if param == "rank" else "prompt"
        curves = []
        for v in values:
            peft = cfg.peft(method=method, **{param: v})
            sub = os.path.join("sweep", f"{param}_{v}")
            self.log(f"sweep {param}={v}")
            model = self.finetune(sub, peft)
            n_params = count_parameters(model, trainable_only=True)
            results = self.certify(ModelClassifier(model, cfg["smoothing.batch"]), out=self.path(sub, "results.tsv"),
                                   label=label_for(peft), n_params=n_params)
            curves.append(self.report(results, self.path(sub), label_for(peft)))
        table = compare(curves)
        adapter_counts = [method_parameter_count(cfg.peft(method=method, **{param: v}), cfg.vit())
                          for v in values]
        header = [f"sweep.param={param}", "adaptation_parameters=" + ",".join(map(str, adapter_counts))]
        with open(self.path("sweep_summary.csv"), "w") as f:
            f.write(table.to_csv(header + self.provenance()))
        return table


def label_for(peft):
    if peft.method == "lora":
        return f"lora-r{peft.rank}"
    if peft.method == "prompt":
        return f"prompt-p{peft.prompt_length}"
    if peft.method == "adapter":
        return f"adapter-b{peft.bottleneck}"
    return peft.method


def run(command, cfg, quiet=False):
    runner = Runner(cfg, quiet)
    os.makedirs(runner.out, exist_ok=True)
    with DirectoryLock(runner.out):
        getattr(runner, command.replace("-", "_"))()


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        run(args.command, cfg, args.quiet)
    except (ConfigError, UsageError) as e:
        print(f"smoothcert: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, CheckpointError) as e:
        print(f"smoothcert: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"smoothcert: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"smoothcert: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        if e.errno in (errno.EACCES, errno.EROFS, errno.ENOENT):
            print(f"smoothcert: usage error: {e}", file=sys.stderr)
            return EXIT_USAGE
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
