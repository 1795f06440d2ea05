#!/usr/bin/env python3
"""
Convergence reports: per-replication rows, median summaries, tables and figures.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns
from scipy import stats as scipy_stats

logger = logging.getLogger(__name__)

BASE_COLUMNS = ["n", "replication", "tv_to_limit", "center", "info_or_gamma", "ess",
                "localized_mass"]

EXTRA_COLUMNS = {
    "parametric_demo": ["mle", "map", "posterior_sd"],
    "plr_bvm": ["posterior_median", "credible_lo", "credible_hi", "wald_lo", "wald_hi"],
    "mixture_bvm": ["posterior_sd", "kolmogorov", "mean_clusters"],
    "boundary_bvm": ["submodel", "path_accept_rate"],
    "coverage": ["credible_lo", "credible_hi", "wald_lo", "wald_hi", "credible_covers",
                 "wald_covers", "median_covered"],
    "ilan_probe": ["h", "ilan_remainder", "exact_remainder", "log_ratio_gap"],
    "perturbation_probe": ["h", "rho", "ball_mass"],
}

# rows are summarized per group; n is always the last grouping column
GROUP_COLUMNS = {
    "boundary_bvm": ["submodel", "n"],
    "ilan_probe": ["h", "n"],
}

SUMMARY_QUANTILES = (0.1, 0.5, 0.9)


@dataclass
class DensityPanel:
    """One subplot: density curves over a shared abscissa plus vertical markers."""
    title: str
    x: np.ndarray
    curves: Dict[str, np.ndarray]
    markers: Dict[str, float] = field(default_factory=dict)


def report_columns(experiment: str) -> List[str]:
    if experiment not in EXTRA_COLUMNS:
        raise ValueError(f"unknown experiment {experiment!r}")
    return BASE_COLUMNS + EXTRA_COLUMNS[experiment]


@dataclass
class ConvergenceReport:
    """
    Rows of one batch experiment and the figures drawn from it.

    Rows are kept in task order (n-index, then replication), which makes the
    CSV a deterministic function of the configuration.
    """
    experiment: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    figures: Dict[str, List[DensityPanel]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.columns = report_columns(self.experiment)

    def add_row(self, row: Dict[str, Any]) -> None:
        """
        Append one replication's row.

        Raises:
            ValueError: missing or unknown columns, tv or localized mass outside [0, 1]
        """
        if set(row) != set(self.columns):
            missing = sorted(set(self.columns) - set(row))
            unknown = sorted(set(row) - set(self.columns))
            raise ValueError(f"row columns mismatch: missing {missing}, unknown {unknown}")
        for key in ("tv_to_limit", "localized_mass"):
            value = row[key]
            if value is not None and np.isfinite(value) and not -1e-12 <= value <= 1.0 + 1e-12:
                raise ValueError(f"{key}={value} lies outside [0, 1]")
        self.rows.append({key: row[key] for key in self.columns})

    def add_panel(self, figure: str, panel: DensityPanel) -> None:
        self.figures.setdefault(figure, []).append(panel)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    @property
    def completed_rows(self) -> int:
        return len(self.rows)

    def summary(self) -> Dict[str, Any]:
        """Quantiles per group of the numeric columns, plus experiment-specific extras."""
        frame = self.frame()
        groups = GROUP_COLUMNS.get(self.experiment, ["n"])
        numeric = [c for c in self.columns
                   if c not in groups and c != "replication"
                   and pd.api.types.is_numeric_dtype(frame[c])]
        by_group = []
        for key, part in frame.groupby(groups, sort=True):
            key = key if isinstance(key, tuple) else (key,)
            entry = {g: _plain(k) for g, k in zip(groups, key)}
            entry["replications"] = int(len(part))
            for column in numeric:
                values = part[column].to_numpy(dtype=float)
                values = values[np.isfinite(values)]
                for q in SUMMARY_QUANTILES:
                    label = "median" if q == 0.5 else f"q{int(round(q * 100)):02d}"
                    entry[f"{label}_{column}"] = float(np.quantile(values, q)) if values.size \
                        else None
            by_group.append(entry)
        out = {"experiment": self.experiment, "rows": self.completed_rows,
               "groups": by_group}
        out.update(_summary_extras(self.experiment, frame))
        out.update(self.metadata)
        return out

    def print_results(self) -> None:
        """Print a per-group table of medians to stdout."""
        summary = self.summary()
        groups = GROUP_COLUMNS.get(self.experiment, ["n"])
        print(f"\n{self.experiment} results")
        print("=" * 72)
        print(f"Rows: {self.completed_rows}")
        header = "".join(f"{g:>10}" for g in groups) + \
            f"{'reps':>6}{'median TV':>12}{'median loc':>12}{'median ESS':>12}"
        print(header)
        print("-" * len(header))
        for entry in summary["groups"]:
            cells = "".join(f"{_fmt(entry[g]):>10}" for g in groups)
            print(f"{cells}{entry['replications']:>6d}"
                  f"{_fmt(entry.get('median_tv_to_limit')):>12}"
                  f"{_fmt(entry.get('median_localized_mass')):>12}"
                  f"{_fmt(entry.get('median_ess')):>12}")
        for key in ("sd_slope", "coverage", "median_ball_mass"):
            if key in summary:
                print(f"\n{key}: {json.dumps(summary[key])}")


def _plain(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(value)
    return f"{value:.4f}" if np.isfinite(value) else "nan"


def _summary_extras(experiment: str, frame: pd.DataFrame) -> Dict[str, Any]:
    if frame.empty:
        return {}
    if experiment == "mixture_bvm":
        medians = frame.groupby("n", sort=True)["posterior_sd"].median()
        if medians.size >= 2:
            fit = scipy_stats.linregress(np.log(medians.index.to_numpy(dtype=float)),
                                         np.log(medians.to_numpy(dtype=float)))
            return {"sd_slope": float(fit.slope)}
        return {}
    if experiment == "coverage":
        table = frame.groupby("n", sort=True)[["credible_covers", "wald_covers"]].mean()
        return {"coverage": [{"n": int(n), "credible": float(row["credible_covers"]),
                              "wald": float(row["wald_covers"])}
                             for n, row in table.iterrows()]}
    if experiment == "perturbation_probe":
        medians = frame.groupby("n", sort=True)["ball_mass"].median()
        return {"median_ball_mass": {str(int(n)): float(v) for n, v in medians.items()}}
    return {}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def render_figure(panels: List[DensityPanel], path: str) -> None:
    """Draw panels in a grid of up to three columns and save as SVG."""
    if not panels:
        raise ValueError("a figure needs at least one panel")
    sns.set_theme(style="whitegrid")
    ncols = min(3, len(panels))
    nrows = math.ceil(len(panels) / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.5 * ncols, 3.2 * nrows), squeeze=False)
    palette = sns.color_palette("deep")
    for ax, panel in zip(axes.flat, panels):
        for k, (label, values) in enumerate(panel.curves.items()):
            sns.lineplot(x=panel.x, y=values, ax=ax, label=label, color=palette[k % len(palette)])
        for k, (label, position) in enumerate(panel.markers.items()):
            ax.axvline(position, linestyle="--", linewidth=1.0, label=label,
                       color=palette[(k + len(panel.curves)) % len(palette)])
        ax.set_title(panel.title)
        ax.legend(fontsize="small")
    for ax in list(axes.flat)[len(panels):]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(report: ConvergenceReport, output_dir) -> Dict[str, str]:
    """
    Write report.csv, report.json and figures/*.svg under output_dir.

    Returns the written paths by kind.

    Raises:
        OSError: the directory or a file cannot be written (path in the message)
    """
    figures_dir = os.path.join(output_dir, "figures")
    try:
        os.makedirs(figures_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {figures_dir}: {e}") from e

    written = {}
    csv_path = os.path.join(output_dir, "report.csv")
    try:
        report.frame().to_csv(csv_path, index=False)
    except OSError as e:
        raise OSError(f"cannot write {csv_path}: {e}") from e
    written["csv"] = csv_path

    json_path = os.path.join(output_dir, "report.json")
    try:
        with open(json_path, "w") as f:
            json.dump(report.summary(), f, indent=2, default=_plain)
    except OSError as e:
        raise OSError(f"cannot write {json_path}: {e}") from e
    written["json"] = json_path

    for name, panels in sorted(report.figures.items()):
        path = os.path.join(figures_dir, f"{name}.svg")
        try:
            render_figure(panels, path)
        except OSError as e:
            raise OSError(f"cannot write {path}: {e}") from e
        written[f"figure:{name}"] = path
    logger.info("report written to %s (%d rows, %d figures)",
                output_dir, report.completed_rows, len(report.figures))
    return written


def read_report_csv(path, experiment: Optional[str] = None) -> ConvergenceReport:
    """
    Parse a report.csv back into a ConvergenceReport (rows only).

    The experiment is recognized from the column set unless given.
    """
    try:
        frame = pd.read_csv(path)
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    columns = list(frame.columns)
    if experiment is None:
        matches = [name for name in EXTRA_COLUMNS if report_columns(name) == columns]
        if len(matches) != 1:
            raise ValueError(f"{path}: columns {columns} match no single report type")
        experiment = matches[0]
    elif report_columns(experiment) != columns:
        raise ValueError(f"{path}: columns do not match a {experiment} report")
    report = ConvergenceReport(experiment)
    for record in frame.to_dict(orient="records"):
        report.add_row({key: _plain(value) for key, value in record.items()})
    return report
