"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["axes.labelsize"] = 11
plt.rcParams["xtick.direction"] = "in"
plt.rcParams["ytick.direction"] = "in"
plt.rcParams["svg.hashsalt"] = "acst"


def plot_peer_load(report: dict, path: str | Path) -> Path:
    """Bar chart of bytes sent and received per peer."""
    peers = report["peers"]
    ids = [p["peer_id"] for p in peers]
    sent = [p["bytes_sent"] / 1e6 for p in peers]
    received = [p["bytes_received"] / 1e6 for p in peers]
    width = 0.38

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(ids))
    ax.bar([x - width / 2 for x in xs], sent, width, label="sent", color="#3b6ea5")
    ax.bar([x + width / 2 for x in xs], received, width, label="received", color="#d08c3c")
    ax.set_xticks(list(xs), [str(i) for i in ids])
    ax.set_xlabel("peer")
    ax.set_ylabel("MB on the wire")
    ax.set_title(f"{report['scenario']} (seed {report['seed']})", fontsize=10)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(table: dict, param: str, path: str | Path) -> Path:
    """Get duration against the swept value; failed joins are marked on the axis."""
    unit = "kbit/s" if param == "bandwidth" else "ms"
    rows = table["rows"]
    ok = [(r["value"], r["get_ms"] / 1000) for r in rows if r["get_ms"] is not None]
    failed = [r["value"] for r in rows if not r["joined"]]

    fig, ax = plt.subplots(figsize=(6, 4))
    if ok:
        ax.plot([v for v, _ in ok], [d for _, d in ok], marker="o", color="#3b6ea5", label="GET duration")
    if failed:
        ax.plot(failed, [0] * len(failed), linestyle="None", marker="x", color="#b03030",
                label="join failed")
    if param == "bandwidth":
        ax.set_xscale("log")
    ax.set_xlabel(f"{param} ({unit})")
    ax.set_ylabel("seconds")
    if table.get("join_threshold") is not None:
        ax.axvline(table["join_threshold"], color="grey", linewidth=0.8, linestyle="--")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
