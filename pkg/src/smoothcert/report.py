"""Certified-accuracy curves and side-by-side comparison tables."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from smoothcert.smoothing import ABSTAIN, read_results


def radii_grid(radius_max=2.0, step=0.05):
    n = int(round(radius_max / step))
    return tuple(round(i * step, 10) for i in range(n + 1))


def read_metadata(path):
    """``# key=value`` comment lines of an artifact, as a dict of strings."""
    meta = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = value.strip()
    return meta


@dataclass(frozen=True)
class CertifiedAccuracyCurve:
    label: str
    radii: tuple
    accuracy: tuple
    clean_accuracy: float
    abstain_rate: float
    trained_parameters: int

    def __post_init__(self):
        if len(self.radii) != len(self.accuracy):
            raise ValueError("radii and accuracy lengths differ")
        acc = np.asarray(self.accuracy)
        if np.any(np.diff(acc) > 0):
            raise ValueError("certified accuracy must be non-increasing in the radius")
        if np.any((acc < 0) | (acc > 1)):
            raise ValueError("accuracies must lie in [0, 1]")

    def at(self, r):
        return self.accuracy[self.radii.index(r)]

    def to_csv(self, header_lines=()):
        out = io.StringIO()
        for line in header_lines:
            out.write(f"# {line}\n")
        out.write(f"# label={self.label}\n# clean_accuracy={self.clean_accuracy:.4f}\n"
                  f"# abstain_rate={self.abstain_rate:.4f}\n"
                  f"# trained_parameters={self.trained_parameters}\n")
        out.write("radius,certified_accuracy\n")
        for r, a in zip(self.radii, self.accuracy):
            out.write(f"{r:.2f},{a:.4f}\n")
        return out.getvalue()

    def to_dat(self):
        """Whitespace-separated columns for gnuplot-style tools."""
        return "".join(f"{r:.2f} {a:.4f}\n" for r, a in zip(self.radii, self.accuracy))


def curve_from_rows(rows, radii, label="", clean_accuracy=float("nan"), trained_parameters=0):
    """Certified accuracy at r = #(correct, not abstained, R >= r) / #rows."""
    n = len(rows)
    if n == 0:
        raise ValueError("no result rows")
    pred = np.array([r["predict"] for r in rows])
    ok = np.array([r["correct"] == 1 and r["predict"] != ABSTAIN for r in rows])
    rad = np.array([r["radius"] for r in rows])
    acc = tuple(float(np.sum(ok & (rad >= r)) / n) for r in radii)
    return CertifiedAccuracyCurve(label, tuple(radii), acc, clean_accuracy,
                                  float(np.mean(pred == ABSTAIN)), trained_parameters)


def curve_from_results(path, radii, label=None):
    """Build a curve from a results file; clean accuracy and parameter count come from its header."""
    meta = read_metadata(path)
    return curve_from_rows(read_results(path), radii,
                           label=label or meta.get("label", str(path)),
                           clean_accuracy=float(meta.get("clean_accuracy", "nan")),
                           trained_parameters=int(meta.get("trained_parameters", 0)))


@dataclass
class Comparison:
    curves: list
    best: list

    def to_csv(self, header_lines=()):
        out = io.StringIO()
        for line in header_lines:
            out.write(f"# {line}\n")
        w = csv.writer(out, lineterminator="\n")
        radii = self.curves[0].radii
        w.writerow(["curve", "trained_parameters", "clean_accuracy", "abstain_rate"]
                   + [f"r={r:.2f}" for r in radii])
        for c in self.curves:
            w.writerow([c.label, c.trained_parameters, f"{c.clean_accuracy:.4f}", f"{c.abstain_rate:.4f}"]
                       + [f"{a:.4f}" for a in c.accuracy])
        w.writerow(["best", "", "", ""] + self.best)
        return out.getvalue()


def compare(curves):
    """Align curves on their shared grid and flag the per-radius maximum ("tie" if shared)."""
    curves = list(curves)
    if not curves:
        raise ValueError("nothing to compare")
    grid = curves[0].radii
    for c in curves[1:]:
        if c.radii != grid:
            raise ValueError(f"curve {c.label!r} uses a different radii grid")
    best = []
    for j in range(len(grid)):
        vals = [c.accuracy[j] for c in curves]
        top = max(vals)
        winners = [c.label for c, v in zip(curves, vals) if v == top]
        best.append(winners[0] if len(winners) == 1 else "tie")
    return Comparison(curves, best)
