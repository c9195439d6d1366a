import os

import numpy as np
import pytest

from smoothcert import cli
from smoothcert.config import ConfigError, ExperimentConfig
from smoothcert.report import (CertifiedAccuracyCurve, compare, curve_from_results, curve_from_rows,
                               radii_grid, read_metadata)
from smoothcert.smoothing import ABSTAIN, CertifyOutcome, format_row, read_results

TINY = """
vit.patch_size=8
vit.embed_dim=16
vit.depth=1
vit.num_heads=2
data.subset=120
data.test_subset=12
pretrain.epochs=1
train.epochs=1
smoothing.n0=10
smoothing.n=40
spsa.steps=2
spsa.batch_size=8
report.radius_step=0.5
"""


def row(i, label, pred, rad):
    return {"idx": i, "label": label, "predict": pred, "radius": rad, "correct": int(pred == label)}


# ---- config

class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig().validate()
        assert cfg["smoothing.n"] == 1000 and cfg["peft.rank"] == 2

    def test_parse_comments_and_types(self):
        cfg = ExperimentConfig.parse("smoothing.sigma = 0.5  # noise\n\n# skip\ncertify.max=\nspsa.lookahead=yes\n")
        assert cfg["smoothing.sigma"] == 0.5 and cfg["certify.max"] is None and cfg["spsa.lookahead"] is True

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as e:
            ExperimentConfig.parse("smoothing.sgima=0.5")
        assert e.value.key == "smoothing.sgima"

    def test_bad_value_reports_field(self):
        with pytest.raises(ConfigError) as e:
            ExperimentConfig.parse("smoothing.n=lots")
        assert e.value.key == "smoothing.n"

    def test_nested_validation_field_path(self):
        cfg = ExperimentConfig.parse("smoothing.alpha=2.0")
        with pytest.raises(ConfigError) as e:
            cfg.validate()
        assert e.value.key.startswith("smoothing")

    def test_choice(self):
        with pytest.raises(ConfigError) as e:
            ExperimentConfig.parse("data.format=png").validate()
        assert e.value.key == "data.format"

    def test_dump_roundtrip(self):
        cfg = ExperimentConfig.parse("peft.method=prompt\nsweep.ranks=1,3\ntrain.learning_rate=0.002")
        again = ExperimentConfig.parse(cfg.dump())
        assert again.values == cfg.values and again.dump() == cfg.dump()

    def test_pretrain_view(self):
        t = ExperimentConfig().pretrain()
        assert t.sigma == 0.0 and t.mode == "clean_pretrain"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "nope.cfg")


# ---- report

class TestCurves:
    def test_r0_metric(self):
        rows = [row(0, 1, 1, 0.3), row(1, 2, 0, 0.9), row(2, 0, ABSTAIN, 0.0), row(3, 1, 1, 0.0)]
        c = curve_from_rows(rows, radii_grid(1.0, 0.25))
        assert c.at(0.0) == 0.5 and c.at(0.25) == 0.25 and c.at(0.5) == 0.0
        assert c.abstain_rate == 0.25

    def test_all_abstain_is_zero(self):
        rows = [row(i, 0, ABSTAIN, 0.0) for i in range(5)]
        c = curve_from_rows(rows, radii_grid())
        assert set(c.accuracy) == {0.0} and c.abstain_rate == 1.0

    def test_monotone_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            rows = [row(i, int(rng.integers(3)), int(rng.integers(-1, 3)), float(rng.exponential()))
                    for i in range(50)]
            acc = curve_from_rows(rows, radii_grid()).accuracy
            assert all(a >= b for a, b in zip(acc, acc[1:]))

    def test_rejects_non_monotone(self):
        with pytest.raises(ValueError):
            CertifiedAccuracyCurve("x", (0.0, 0.5), (0.2, 0.3), 1.0, 0.0, 0)

    def test_grid(self):
        g = radii_grid()
        assert len(g) == 41 and g[0] == 0.0 and g[-1] == 2.0 and g[3] == 0.15

    def test_from_results_file(self, tmp_path):
        p = tmp_path / "r.tsv"
        outs = [CertifyOutcome(1, 0.5, 0.9, None, None, 0.01), CertifyOutcome(ABSTAIN, 0.0, 0.4, None, None, 0.0)]
        with open(p, "w") as f:
            f.write("# label=demo\n# clean_accuracy=0.7500\n# trained_parameters=42\n")
            f.write("idx\tlabel\tpredict\tradius\tcorrect\ttime\n")
            f.write(format_row(0, 1, outs[0]))
            f.write(format_row(1, 0, outs[1]))
        c = curve_from_results(p, radii_grid(1.0, 0.5))
        assert (c.label, c.clean_accuracy, c.trained_parameters) == ("demo", 0.75, 42)
        assert c.accuracy == (0.5, 0.5, 0.0)
        assert read_metadata(p)["label"] == "demo"

    def test_csv_and_dat(self):
        c = curve_from_rows([row(0, 0, 0, 1.0)], radii_grid(1.0, 0.5), label="a")
        text = c.to_csv(["seed=1"])
        assert text.startswith("# seed=1\n") and "radius,certified_accuracy\n0.00,1.0000\n" in text
        assert c.to_dat().splitlines() == ["0.00 1.0000", "0.50 1.0000", "1.00 1.0000"]


class TestCompare:
    def test_single_curve(self):
        c = curve_from_rows([row(0, 0, 0, 0.6), row(1, 1, 0, 0.0)], radii_grid(1.0, 0.5), label="only")
        t = compare([c])
        assert t.best == ["only"] * 3 and t.curves[0].accuracy == c.accuracy

    def test_tie(self):
        a = curve_from_rows([row(0, 0, 0, 0.6)], radii_grid(1.0, 0.5), label="a")
        b = curve_from_rows([row(0, 0, 0, 0.6)], radii_grid(1.0, 0.5), label="b")
        assert compare([a, b]).best == ["tie"] * 3

    def test_winner(self):
        a = curve_from_rows([row(0, 0, 0, 0.6), row(1, 1, 1, 0.1)], radii_grid(1.0, 0.5), label="tuned")
        b = curve_from_rows([row(0, 0, 0, 0.2), row(1, 1, 0, 0.1)], radii_grid(1.0, 0.5), label="untuned")
        assert compare([a, b]).best == ["tuned", "tuned", "tie"]
        lines = compare([a, b]).to_csv().splitlines()
        assert lines[0].startswith("curve,trained_parameters") and lines[-1].startswith("best,")

    def test_mismatched_grid(self):
        a = curve_from_rows([row(0, 0, 0, 0.6)], radii_grid(1.0, 0.5))
        b = curve_from_rows([row(0, 0, 0, 0.6)], radii_grid(1.0, 0.25))
        with pytest.raises(ValueError):
            compare([a, b])


# ---- command line

@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    for cmd in ("pretrain", "finetune", "certify"):
        assert cli.main([cmd, "--config", str(d / "tiny.cfg"), "--out", str(d / "out"), "--quiet"]) == 0
    return d


def call(run_dir, *args):
    return cli.main([args[0], "--config", str(run_dir / "tiny.cfg"), "--out", str(run_dir / "out"),
                     "--quiet", *args[1:]])


class TestCli:
    def test_artifacts_embed_config(self, run_dir):
        out = run_dir / "out"
        for name in ("backbone.psmc", "finetune.psmc", "loss.csv", "results.tsv"):
            assert (out / name).exists()
        text = (out / "results.tsv").read_text()
        assert "# smoothing.n=40\n" in text and "# label=lora-r2\n" in text
        assert "# vit.embed_dim=16\n" in (out / "loss.csv").read_text()
        assert not (out / ".lock").exists()

    def test_report_matches_results(self, run_dir):
        assert call(run_dir, "report") == 0
        out = run_dir / "out"
        rows = read_results(out / "results.tsv")
        want = sum(r["correct"] == 1 and r["predict"] != ABSTAIN for r in rows) / len(rows)
        body = [ln for ln in (out / "curve.csv").read_text().splitlines() if not ln.startswith("#")]
        assert body[1] == f"0.00,{want:.4f}"
        assert len((out / "curve.dat").read_text().splitlines()) == len(body) - 1

    def test_report_survives_checkpoint_deletion(self, run_dir, tmp_path):
        out = run_dir / "out"
        assert call(run_dir, "report") == 0
        before = (out / "curve.csv").read_text()
        # a copy of the results alone is enough
        iso = tmp_path / "iso"
        iso.mkdir()
        (iso / "results.tsv").write_text((out / "results.tsv").read_text())
        assert cli.main(["report", "--config", str(run_dir / "tiny.cfg"), "--out", str(iso), "--quiet"]) == 0
        def body(text):
            return [ln for ln in text.splitlines() if not ln.startswith("# run.out=")]
        assert body((iso / "curve.csv").read_text()) == body(before)

    def test_certify_rerun_is_identical(self, run_dir):
        from smoothcert.smoothing import results_body
        first = results_body(run_dir / "out" / "results.tsv")
        os.remove(run_dir / "out" / "results.tsv")
        assert call(run_dir, "certify", "--set", "certify.workers=2") == 0
        assert results_body(run_dir / "out" / "results.tsv") == first

    def test_backbone_and_predict(self, run_dir):
        assert call(run_dir, "certify", "--set", "certify.model=backbone", "--max", "4") == 0
        assert len(read_results(run_dir / "out" / "results_backbone.tsv")) == 4
        assert call(run_dir, "predict", "--max", "3") == 0
        lines = [ln for ln in (run_dir / "out" / "predictions.tsv").read_text().splitlines()
                 if not ln.startswith("#")]
        assert lines[0] == "idx\tlabel\tpredict\tcorrect" and len(lines) == 4

    def test_spsa_and_blackbox_certify(self, run_dir):
        assert call(run_dir, "spsa-train") == 0
        with np.load(run_dir / "out" / "coordinator.npz") as z:
            assert z["phi"].ndim == 1
        assert call(run_dir, "certify", "--set", "certify.model=blackbox", "--max", "2") == 0

    def test_sweep_counts(self, run_dir):
        assert call(run_dir, "sweep", "--set", "sweep.ranks=1,2", "--max", "3") == 0
        text = (run_dir / "out" / "sweep_summary.csv").read_text()
        assert "# adaptation_parameters=64,128\n" in text  # 4 * L * d * r with L=1, d=16
        body = [ln for ln in text.splitlines() if not ln.startswith("#")]
        assert [ln.split(",")[0] for ln in body] == ["curve", "lora-r1", "lora-r2", "best"]
        for r in (1, 2):
            assert (run_dir / "out" / "sweep" / f"rank_{r}" / "curve.csv").exists()

    def test_flag_overrides(self):
        args = cli.build_parser().parse_args(["certify", "--sigma", "0.5", "--rank", "4", "--prompt-len", "7"])
        cfg = cli.resolve_config(args)
        assert cfg["train.sigma"] == cfg["smoothing.sigma"] == 0.5
        assert cfg["peft.rank"] == 4 and cfg["peft.prompt_length"] == 7


class TestExitCodes:
    def test_usage(self, tmp_path):
        assert cli.main(["nonsense"]) == cli.EXIT_USAGE
        assert cli.main(["certify", "--out", str(tmp_path), "--set", "bogus.key=1"]) == cli.EXIT_USAGE
        assert cli.main(["certify", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert cli.main(["certify", "--out", str(tmp_path), "--quiet"]) == cli.EXIT_DATA
        assert "backbone.psmc" in capsys.readouterr().err

    def test_bad_data_file(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"\x00" * 100)
        code = cli.main(["pretrain", "--out", str(tmp_path), "--quiet", "--set", "data.format=cifar10-bin",
                         "--set", f"data.train_path={bad}", "--set", f"data.test_path={bad}"])
        assert code == cli.EXIT_DATA

    def test_numeric_abort(self, run_dir):
        before = (run_dir / "out" / "finetune.psmc").read_bytes()
        assert call(run_dir, "finetune", "--set", "train.learning_rate=1e30") == cli.EXIT_NUMERIC
        assert (run_dir / "out" / "finetune.psmc").read_bytes() == before

    def test_lock(self, run_dir):
        lock = run_dir / "out" / ".lock"
        lock.write_text("1")
        try:
            assert call(run_dir, "report") == cli.EXIT_USAGE
        finally:
            lock.unlink()
