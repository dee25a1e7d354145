"""Report rendering: matplotlib figures and delimited summaries.

Every CLI subcommand that writes a report calls into this module so the
artifacts live side by side: a JSON record, a CSV table, and one or more
PNG figures rendered off-screen (Agg backend, no display required).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .grid import Volume

__all__ = [
    "save_mip_figure",
    "save_pair_score_figure",
    "save_metric_figure",
    "save_station_radius_figure",
    "save_adf_figure",
    "write_pairs_csv",
    "write_metrics_csv",
    "write_stations_csv",
    "write_adf_csv",
    "write_suite_csv",
]

_VIEWS = ((2, "xy"), (1, "xz"), (0, "yz"))


def _project(data: np.ndarray, axis: int) -> np.ndarray:
    # transpose so the first remaining axis runs along the figure x-axis
    return data.max(axis=axis).T


def save_mip_figure(
    vol: Volume,
    path: str | Path,
    masks: dict[str, Volume] | None = None,
    points: dict[str, np.ndarray] | None = None,
    title: str = "",
) -> Path:
    """Three maximum-intensity projections with optional mask outlines
    and point overlays (stitched paths, centerlines)."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    colors = ("tab:red", "tab:cyan", "tab:green", "tab:orange")
    for ax, (axis, label) in zip(axes, _VIEWS):
        ax.imshow(_project(vol.data, axis), origin="lower", cmap="gray")
        for i, (name, m) in enumerate((masks or {}).items()):
            proj = _project(m.data, axis)
            if proj.max() > 0:
                ax.contour(proj, levels=[0.5], colors=colors[i % len(colors)],
                           linewidths=0.8)
        keep = [a for a in range(3) if a != axis]
        for i, (name, pts) in enumerate((points or {}).items()):
            pts = np.asarray(pts).reshape(-1, 3)
            if len(pts):
                ax.plot(pts[:, keep[0]], pts[:, keep[1]], ".",
                        color=colors[(i + 1) % len(colors)], markersize=2,
                        label=name)
        ax.set_title(f"{label} MIP")
        ax.set_xticks([])
        ax.set_yticks([])
    handles, labels = axes[0].get_legend_handles_labels()
    if labels:
        fig.legend(handles, labels, loc="lower center", ncol=len(labels))
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_pair_score_figure(pairs: list[dict], path: str | Path) -> Path:
    """Per-candidate stitch scores against the acceptance bar."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if pairs:
        xs = np.arange(len(pairs))
        scores = [p["score"] if p["score"] is not None else 0.0 for p in pairs]
        bars = [1.0 + (p["penalties"] or 0.0) for p in pairs]
        face = ["tab:green" if p["verdict"] == "accepted" else "tab:red" for p in pairs]
        ax.bar(xs, scores, color=face, alpha=0.8, label="score")
        ax.plot(xs, bars, "k_", markersize=18, label="threshold + penalties")
        ax.set_xticks(xs)
        ax.set_xticklabels(
            [f"t{p['rtype']} b{p['disconnected_branch']}" for p in pairs],
            rotation=45, ha="right", fontsize=8,
        )
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no candidate pairs", ha="center", va="center")
    ax.set_ylabel("mean vesselness sum")
    ax.set_title("stitch decisions")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_metric_figure(metrics: dict, path: str | Path) -> Path:
    """Bar chart over the scalar entries of a metric report."""
    items = [(k, v) for k, v in metrics.items() if isinstance(v, (int, float))]
    fig, ax = plt.subplots(figsize=(7, 4))
    if items:
        xs = np.arange(len(items))
        ax.bar(xs, [v for _, v in items], color="tab:blue")
        ax.set_xticks(xs)
        ax.set_xticklabels([k for k, _ in items], rotation=45, ha="right", fontsize=8)
    ax.set_title("metrics")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_station_radius_figure(stations: list, path: str | Path) -> Path:
    """Contour radius envelope (min/mean/max) along the tube arc."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if stations:
        t = np.array([st.t for st in stations])
        radii = [np.asarray(st.contour.radii, dtype=np.float64) for st in stations]
        ax.fill_between(t, [r.min() for r in radii], [r.max() for r in radii],
                        alpha=0.3, color="tab:blue", label="min..max")
        ax.plot(t, [r.mean() for r in radii], color="tab:blue", label="mean")
        ax.legend(fontsize=8)
    ax.set_xlabel("arc length (mm)")
    ax.set_ylabel("radius (px)")
    ax.set_title("grown contour radii")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_adf_figure(rows: list[dict], path: str | Path) -> Path:
    """p-value per input series with the usual decision levels."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if rows:
        xs = np.arange(len(rows))
        ax.bar(xs, [r["pvalue"] for r in rows], color="tab:blue")
        ax.axhline(0.05, color="tab:red", linewidth=0.8, label="0.05")
        ax.axhline(0.10, color="tab:orange", linewidth=0.8, label="0.10")
        ax.set_xticks(xs)
        ax.set_xticklabels([str(r["series"]) for r in rows], fontsize=8)
        ax.legend(fontsize=8)
    ax.set_xlabel("series")
    ax.set_ylabel("unit-root p-value")
    ax.set_title("stationarity tests")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _write_csv(path: str | Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_pairs_csv(pairs: list[dict], path: str | Path) -> Path:
    header = ["rtype", "disconnected_branch", "candidate_branch",
              "nearest_distance", "reached", "score", "penalties", "verdict"]
    rows = [[p[k] for k in header] for p in pairs]
    return _write_csv(path, header, rows)


def write_metrics_csv(metrics: dict, path: str | Path) -> Path:
    rows = [[k, "" if v is None else v] for k, v in metrics.items()]
    return _write_csv(path, ["metric", "value"], rows)


def write_stations_csv(stations: list, path: str | Path) -> Path:
    rows = []
    for i, st in enumerate(stations):
        r = np.asarray(st.contour.radii, dtype=np.float64)
        rows.append([i, st.t, len(r),
                     float(r.min()), float(r.mean()), float(r.max())])
    return _write_csv(
        path,
        ["station", "arc_mm", "rays", "r_min", "r_mean", "r_max"],
        rows,
    )


def write_adf_csv(rows: list[dict], path: str | Path) -> Path:
    header = ["series", "n", "lags", "statistic", "pvalue"]
    return _write_csv(path, header, [[r[k] for k in header] for r in rows])


def write_suite_csv(rows: list[dict], path: str | Path) -> Path:
    header = ["name", "seed", "dims", "branches", "breaks", "decoys", "components"]
    return _write_csv(path, header, [[r[k] for k in header] for r in rows])
