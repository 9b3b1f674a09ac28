"""CSV and PNG report writers."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MEMORY_COLUMNS = ["call_no", "head_idx", "span", "frames_propagated_total", "resident_frames",
                  "frame_count_resident", "fast_bytes", "slow_bytes", "num_frames_total"]


def write_memory_report(rows, path, partial: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        if partial:
            fh.write("# partial: run stopped early\n")
        w = csv.DictWriter(fh, fieldnames=MEMORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def plot_memory_report(rows, path) -> None:
    """Resident frames and cumulative work per propagation call."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    heads = [r["head_idx"] for r in rows]
    ax1.step(heads, [r["resident_frames"] for r in rows], where="post", label="resident frames")
    ax1.step(heads, [r["frame_count_resident"] for r in rows], where="post", label="frame store", alpha=0.7)
    ax1.set_ylabel("frames")
    ax1.legend(loc="lower right")
    ax2.plot(heads, [r["frames_propagated_total"] for r in rows])
    ax2.set_ylabel("frames propagated")
    ax2.set_xlabel("flush head frame")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_bench(rows, path) -> None:
    """Cost and peak residency per valid grid cell."""
    ok = [r for r in rows if not r.get("skip_reason")]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    labels = [f"K={r['K']} M={r['M']}\nD={r['D']} R={r['retention']}" for r in ok]
    x = range(len(ok))
    ax1.bar(x, [float(r["frames_propagated_total"]) for r in ok])
    ax1.set_title("frames propagated")
    ax2.bar(x, [float(r["peak_resident_frames"]) for r in ok], color="tab:orange")
    ax2.set_title("peak resident frames")
    for ax in (ax1, ax2):
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
