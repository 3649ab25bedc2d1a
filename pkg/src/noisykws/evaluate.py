"""Per-suite accuracy, seen/unseen aggregation and report emission (CSV, JSON, markdown, SVG)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import SEEN_TYPES, SNR_GRID, UNSEEN_TYPES
from .model import KwtModel, predict

CLEAN = "clean"


@dataclass(frozen=True)
class SuiteRecord:
    noise_type: str  # "clean" for the unmodified suite
    snr_db: float | None
    accuracy: float
    n_items: int

    def __post_init__(self):
        if not 0 <= self.accuracy <= 1:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass
class EvalResult:
    records: list[SuiteRecord]
    seen_by_snr: dict[float, float] = field(default_factory=dict)
    unseen_by_snr: dict[float, float] = field(default_factory=dict)
    clean: float | None = None
    seen_mean: float | None = None
    unseen_mean: float | None = None

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "seen_by_snr": {str(k): v for k, v in self.seen_by_snr.items()},
            "unseen_by_snr": {str(k): v for k, v in self.unseen_by_snr.items()},
            "clean": self.clean, "seen_mean": self.seen_mean, "unseen_mean": self.unseen_mean,
        }


def evaluate_suite(model: KwtModel, features: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
    """Top-1 accuracy over one suite (argmax ties go to the lowest class index)."""
    n = len(labels)
    if n == 0:
        raise ValueError("empty suite")
    return float(np.mean(predict(model, features) == np.asarray(labels))), n


def accuracy_from_predictions(pred: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
    if len(labels) == 0:
        raise ValueError("empty suite")
    return float(np.mean(np.asarray(pred) == np.asarray(labels))), len(labels)


def _mean(xs: Sequence[float]) -> float:
    return float(sum(xs) / len(xs))


def aggregate(records: Iterable[SuiteRecord], snr_grid: Sequence[float] = SNR_GRID,
              declared_subset: bool = False) -> EvalResult:
    """Per-SNR means over seen and unseen types, and overall means.

    The overall seen (unseen) figure is the equally weighted mean of the
    per-SNR averages and the clean accuracy. Missing suites are an error
    unless ``declared_subset`` is set, in which case means run over what is
    present.
    """
    records = list(records)
    by_key = {(r.noise_type, r.snr_db): r.accuracy for r in records}
    clean = by_key.get((CLEAN, None))
    if not declared_subset:
        missing = [(t, s) for t in SEEN_TYPES + UNSEEN_TYPES for s in snr_grid if (t, s) not in by_key]
        if clean is None:
            missing.append((CLEAN, None))
        if missing:
            raise ValueError(f"{len(missing)} suites missing, e.g. {missing[0]}; pass declared_subset=True")

    def per_snr(types):
        out = {}
        for s in snr_grid:
            vals = [by_key[(t, s)] for t in types if (t, s) in by_key]
            if vals:
                out[s] = _mean(vals)
        return out

    seen, unseen = per_snr(SEEN_TYPES), per_snr(UNSEEN_TYPES)

    def overall(per):
        terms = list(per.values()) + ([clean] if clean is not None else [])
        return _mean(terms) if terms else None

    return EvalResult(records, seen, unseen, clean, overall(seen), overall(unseen))


def relative_improvement(a: float, b: float) -> float:
    """Percentage change of ``a`` relative to ``b``."""
    if not b > 0:
        raise ValueError("reference value must be positive")
    return 100.0 * (a - b) / b


# ---------------------------------------------------------------- reports

CSV_FIELDS = ("method", "noise_type", "snr_db", "accuracy", "n_items")


def results_to_csv(results: dict[str, EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for method, res in results.items():
        for r in res.records:
            w.writerow([method, r.noise_type, CLEAN if r.snr_db is None else repr(r.snr_db),
                        repr(r.accuracy), r.n_items])
    return buf.getvalue()


def results_from_csv(text: str) -> dict[str, EvalResult]:
    grouped: dict[str, list[SuiteRecord]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        snr = None if row["snr_db"] == CLEAN else float(row["snr_db"])
        grouped.setdefault(row["method"], []).append(
            SuiteRecord(row["noise_type"], snr, float(row["accuracy"]), int(row["n_items"])))
    return {m: aggregate(recs, declared_subset=True) for m, recs in grouped.items()}


def _table(title: str, results: dict[str, EvalResult], per: str, snr_grid) -> str:
    cols = [f"{s:g}" for s in snr_grid] + [CLEAN]
    rows = {}
    for m, r in results.items():
        d = getattr(r, per)
        rows[m] = [d.get(s) for s in snr_grid] + [r.clean]
    best = []
    for j in range(len(cols)):
        vals = [v[j] for v in rows.values() if v[j] is not None]
        best.append(max(vals) if vals else None)
    lines = [f"### {title}", "", "| Method | " + " | ".join(cols) + " |",
             "|---|" + "---|" * len(cols)]
    for m, vals in rows.items():
        cells = []
        for j, v in enumerate(vals):
            if v is None:
                cells.append("-")
            else:
                s = f"{v:.3f}"
                cells.append(f"**{s}**" if v == best[j] else s)
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def results_to_markdown(results: dict[str, EvalResult], snr_grid: Sequence[float] = SNR_GRID) -> str:
    """Mean table plus seen/unseen per-SNR tables; column maxima in bold."""
    means = ["### Mean accuracy (SNR levels and clean)", "", "| Method | Seen | Unseen |", "|---|---|---|"]
    seen_best = max((r.seen_mean for r in results.values() if r.seen_mean is not None), default=None)
    unseen_best = max((r.unseen_mean for r in results.values() if r.unseen_mean is not None), default=None)

    def cell(v, best):
        if v is None:
            return "-"
        return f"**{v:.3f}**" if v == best else f"{v:.3f}"

    for m, r in results.items():
        means.append(f"| {m} | {cell(r.seen_mean, seen_best)} | {cell(r.unseen_mean, unseen_best)} |")
    parts = ["\n".join(means),
             _table("Seen noise", results, "seen_by_snr", snr_grid),
             _table("Unseen noise", results, "unseen_by_snr", snr_grid)]
    return "\n\n".join(parts) + "\n"


PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def results_to_svg(results: dict[str, EvalResult], per: str = "seen_by_snr",
                   snr_grid: Sequence[float] = SNR_GRID, title: str = "Accuracy vs SNR") -> str:
    """Self-contained line chart, one polyline per method."""
    width, height, left, right, top, bottom = 640, 420, 60, 180, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = {s: left + pw * i / (len(snr_grid) - 1) for i, s in enumerate(snr_grid)}

    def y(acc):
        return top + ph * (1.0 - acc)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{left + pw / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for s, x in xs.items():
        out.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{top + ph + 20}" text-anchor="middle" font-size="12">{s:g}</text>')
    for k in range(6):
        acc = k / 5
        out.append(f'<text x="{left - 8}" y="{y(acc) + 4:.1f}" text-anchor="end" font-size="12">{acc:.1f}</text>')
        out.append(f'<line x1="{left - 5}" y1="{y(acc):.1f}" x2="{left}" y2="{y(acc):.1f}" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle" font-size="12">SNR [dB]</text>')
    for i, (m, r) in enumerate(results.items()):
        d = getattr(r, per)
        pts = " ".join(f"{xs[s]:.1f},{y(d[s]):.1f}" for s in snr_grid if s in d)
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 20 * i + 10
        out.append(f'<line x1="{left + pw + 15}" y1="{ly}" x2="{left + pw + 35}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 40}" y="{ly + 4}" font-size="12">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(results: dict[str, EvalResult], out_dir, formats: Sequence[str] = ("csv", "json", "markdown", "svg")) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            written.append(_write(out_dir / "results.csv", results_to_csv(results)))
        elif fmt == "json":
            payload = {m: r.to_dict() for m, r in results.items()}
            written.append(_write(out_dir / "results.json", json.dumps(payload, indent=2, sort_keys=True) + "\n"))
        elif fmt == "markdown":
            written.append(_write(out_dir / "results.md", results_to_markdown(results)))
        elif fmt == "svg":
            written.append(_write(out_dir / "seen.svg", results_to_svg(results, "seen_by_snr", title="Seen noise")))
            written.append(_write(out_dir / "unseen.svg", results_to_svg(results, "unseen_by_snr", title="Unseen noise")))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path
