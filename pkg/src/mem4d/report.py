"""Operator report: delimited entry dump plus rendered map and timeline figures.

Writes into an output directory:

    entries.csv      one row per entry (id, description, centroid, extent,
                     first/last seen, observation count, contributing agents)
    spatial_map.png  top-down (x, y) view of anchors with extent footprints
    timeline.png     observation intervals per entry

Figures render with the Agg backend, so this works headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

MAX_TIMELINE_ROWS = 40


def _rows(db) -> list[dict]:
    rows = []
    with db.lock.read():
        for entry_id in sorted(db.entries):
            e = db.entries[entry_id]
            c, x = e.spa.centroid, e.spa.extent
            rows.append(
                {
                    "id": e.id,
                    "description": e.sem.description,
                    "cx": float(c[0]),
                    "cy": float(c[1]),
                    "cz": float(c[2]),
                    "ex": float(x[0]),
                    "ey": float(x[1]),
                    "ez": float(x[2]),
                    "first_seen": e.tem.intervals[0][0],
                    "last_seen": e.tem.intervals[-1][1],
                    "intervals": ";".join(f"{a:g}..{b:g}" for a, b in e.tem.intervals),
                    "observations": e.provenance.observation_count(),
                    "agents": ";".join(sorted(e.provenance.agents())),
                }
            )
    return rows


def _write_csv(rows: list[dict], path: Path) -> None:
    fields = ["id", "description", "cx", "cy", "cz", "ex", "ey", "ez",
              "first_seen", "last_seen", "intervals", "observations", "agents"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _plot_map(rows: list[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 8))
    for row in rows:
        ax.plot(row["cx"], row["cy"], "o", color="tab:blue", markersize=4)
        if row["ex"] > 0 or row["ey"] > 0:
            ax.add_patch(
                Rectangle(
                    (row["cx"] - row["ex"] / 2, row["cy"] - row["ey"] / 2),
                    row["ex"], row["ey"],
                    fill=False, edgecolor="tab:blue", alpha=0.4,
                )
            )
        ax.annotate(row["description"][:24], (row["cx"], row["cy"]),
                    fontsize=6, alpha=0.7, xytext=(3, 3),
                    textcoords="offset points")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"anchor map ({len(rows)} entries, top-down)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_timeline(db, rows: list[dict], path: Path) -> None:
    shown = rows[:MAX_TIMELINE_ROWS]
    fig, ax = plt.subplots(figsize=(10, max(3, 0.3 * len(shown) + 1)))
    labels = []
    with db.lock.read():
        for i, row in enumerate(shown):
            intervals = db.entries[row["id"]].tem.intervals
            spans = [(a, max(b - a, 1e-3)) for a, b in intervals]
            ax.broken_barh(spans, (i - 0.35, 0.7), color="tab:green", alpha=0.8)
            labels.append(row["description"][:32])
    ax.set_yticks(range(len(shown)))
    ax.set_yticklabels(labels, fontsize=6)
    ax.set_xlabel("time [s]")
    title = "observation timeline"
    if len(rows) > len(shown):
        title += f" (first {len(shown)} of {len(rows)})"
    ax.set_title(title)
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_report(db, outdir) -> dict:
    """Render the full report; returns a manifest of the written files."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _rows(db)
    csv_path = out / "entries.csv"
    _write_csv(rows, csv_path)
    files = {"entries_csv": str(csv_path)}
    if rows:
        map_path = out / "spatial_map.png"
        timeline_path = out / "timeline.png"
        _plot_map(rows, map_path)
        _plot_timeline(db, rows, timeline_path)
        files["spatial_map"] = str(map_path)
        files["timeline"] = str(timeline_path)
    return {"entry_count": len(rows), "files": files}
