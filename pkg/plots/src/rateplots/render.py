"""Render log-log convergence figures from sweep CSV/JSON files.

The plot layer never recomputes statistics: point coordinates and error bars
come straight from the CSV columns, and fitted lines restate the slope and
intercept recorded in the companion JSON summary.  Censored points (error at
or below twice its standard error) are drawn hollow and get no fit line of
their own, mirroring how the sweep excluded them from the fit.
"""

from __future__ import annotations

import argparse
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

EXPECTED_COLUMNS = ("eps", "q", "error", "stderr", "n_paths", "censored")


class SchemaError(ValueError):
    """CSV file does not match the documented sweep schema."""


@dataclass
class PlotJob:
    """One figure: input CSVs, optional fit JSONs, reference slopes, output."""

    csv_paths: Sequence[str]
    out_path: str
    fit_json_paths: Optional[Sequence[Optional[str]]] = None
    fit_keys: Optional[Sequence[Optional[str]]] = None
    labels: Optional[Sequence[str]] = None
    reference_slopes: Sequence[float] = field(default_factory=tuple)
    title: str = ""
    x_label: str = "scale separation"
    y_label: str = "error"


def read_points(path) -> dict:
    """Parse one sweep CSV; raises SchemaError on any column-level mismatch."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: file does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file (expected a header row)")
    header = tuple(rows[0])
    if header != EXPECTED_COLUMNS:
        missing = set(EXPECTED_COLUMNS) - set(header)
        extra = set(header) - set(EXPECTED_COLUMNS)
        raise SchemaError(
            f"{path}: header mismatch; missing columns {sorted(missing)}, "
            f"unexpected columns {sorted(extra)}")
    body = rows[1:]
    if not body:
        raise SchemaError(f"{path}: no data rows")
    try:
        data = {
            "eps": np.array([float(r[0]) for r in body]),
            "q": np.array([float(r[1]) for r in body]),
            "error": np.array([float(r[2]) for r in body]),
            "stderr": np.array([float(r[3]) for r in body]),
            "n_paths": np.array([int(r[4]) for r in body]),
            "censored": np.array([bool(int(r[5])) for r in body]),
        }
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: malformed data row ({exc})") from exc
    return data


def load_fit(json_path, key: Optional[str] = None) -> Optional[dict]:
    """Extract one RateFit record from a sweep summary JSON.

    ``key`` picks the fit by name; when omitted the single non-null fit is
    used (ambiguity is an error).
    """
    doc = json.loads(Path(json_path).read_text())
    fits = doc.get("fits", {})
    if key is None:
        live = {k: v for k, v in fits.items() if v is not None}
        if len(live) != 1:
            raise SchemaError(
                f"{json_path}: fit key required (available: {sorted(fits)})")
        return next(iter(live.values()))
    if key not in fits:
        raise SchemaError(f"{json_path}: no fit named {key!r} "
                          f"(available: {sorted(fits)})")
    return fits[key]


def _slope_label(name: str, fit: dict) -> str:
    # full-precision slope so the legend restates the JSON value exactly
    slope = format(float(fit["slope"]), ".17g")
    lo, hi = fit["slope_ci"]
    half = 0.5 * (float(hi) - float(lo))
    return f"{name} fit: slope={slope} (+-{half:.3g})"


def build_figure(job: PlotJob):
    """Assemble the matplotlib Figure for a job (no file output)."""
    if not job.csv_paths:
        raise SchemaError("at least one CSV input is required")
    series = [read_points(p) for p in job.csv_paths]
    labels = list(job.labels) if job.labels else [
        Path(p).stem for p in job.csv_paths]
    fit_paths = list(job.fit_json_paths) if job.fit_json_paths \
        else [None] * len(series)
    fit_keys = list(job.fit_keys) if job.fit_keys else [None] * len(series)
    if not (len(labels) == len(series) == len(fit_paths) == len(fit_keys)):
        raise SchemaError("labels / fit files do not align with CSV inputs")

    fig, ax = plt.subplots(figsize=(6.4, 4.8), dpi=120)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, (data, label) in enumerate(zip(series, labels)):
        color = colors[i % len(colors)]
        solid = ~data["censored"]
        if solid.any():
            ax.errorbar(data["eps"][solid], data["error"][solid],
                        yerr=3.0 * data["stderr"][solid], fmt="o",
                        color=color, label=label, capsize=3)
        if data["censored"].any():
            cens = data["censored"]
            ax.errorbar(data["eps"][cens], data["error"][cens],
                        yerr=3.0 * data["stderr"][cens], fmt="o",
                        markerfacecolor="none", color=color,
                        label=f"{label} (censored)", capsize=3)
        if fit_paths[i] is not None:
            fit = load_fit(fit_paths[i], fit_keys[i])
            if fit is not None:
                grid = np.geomspace(data["eps"].min(), data["eps"].max(), 64)
                line = np.exp(fit["intercept"]) * grid ** fit["slope"]
                ax.plot(grid, line, "-", color=color,
                        label=_slope_label(label, fit))

    if job.reference_slopes:
        anchor = series[0]
        idx = int(np.argmax(anchor["eps"]))
        x0, y0 = anchor["eps"][idx], anchor["error"][idx]
        xs = np.geomspace(
            min(d["eps"].min() for d in series),
            max(d["eps"].max() for d in series), 64)
        for r in job.reference_slopes:
            ax.plot(xs, y0 * (xs / x0) ** r, "--", color="gray", linewidth=1.0,
                    label=f"reference slope {r:g}")

    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(job.x_label)
    ax.set_ylabel(job.y_label)
    if job.title:
        ax.set_title(job.title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def render_rate_plot(job: PlotJob) -> str:
    """Render a job to its output file (PNG or SVG) deterministically."""
    fig = build_figure(job)
    out = Path(job.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    suffix = out.suffix.lower()
    if suffix == ".svg":
        with matplotlib.rc_context({"svg.hashsalt": "rateplots"}):
            fig.savefig(out, metadata={"Date": None})
    elif suffix == ".png":
        fig.savefig(out, metadata={"Software": "rateplots"})
    else:
        raise SchemaError(f"unsupported output format {suffix!r} "
                          "(use .png or .svg)")
    plt.close(fig)
    return str(out)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="rateplot",
        description="log-log convergence figure from sweep CSV/JSON outputs")
    p.add_argument("--csv", action="append", required=True,
                   help="input CSV (repeatable)")
    p.add_argument("--fit-json", action="append", default=None,
                   help="summary JSON holding the fit for the matching CSV; "
                        "'none' to skip (repeatable)")
    p.add_argument("--fit-key", action="append", default=None,
                   help="fit name inside the JSON (repeatable)")
    p.add_argument("--label", action="append", default=None,
                   help="series label (repeatable)")
    p.add_argument("--ref-slope", action="append", type=float, default=None,
                   help="dashed reference slope (repeatable)")
    p.add_argument("--out", required=True, help="output image (.png or .svg)")
    p.add_argument("--title", default="")
    args = p.parse_args(argv)

    n = len(args.csv)

    def pad(values):
        if values is None:
            return [None] * n
        vals = [None if v in (None, "none", "") else v for v in values]
        return vals + [None] * (n - len(vals))

    job = PlotJob(
        csv_paths=args.csv,
        out_path=args.out,
        fit_json_paths=pad(args.fit_json),
        fit_keys=pad(args.fit_key),
        labels=args.label if args.label else None,
        reference_slopes=args.ref_slope or (),
        title=args.title,
    )
    path = render_rate_plot(job)
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
