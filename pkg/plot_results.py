import argparse
import os

import matplotlib
import numpy as np

from experiments import read_rows
from grid import CellState, load_map
from vehicle import read_trajectory

FPLAN_CSV = "results/experiment1_fplan.csv"
MIN_PLAN_RATE_HZ = 2.0      # below this the baseline is considered stalled

MODE_STYLE = {
    "bare_rrt": {"color": "tab:red", "marker": "o", "label": "RRT* only"},
    "sbamp": {"color": "tab:blue", "marker": "s", "label": "RRT* + stable DS"},
}


def _pyplot(save: bool):
    if save:
        matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_fplan(rows, ax, use_command_rate: bool = False):
    """Offset vs replanning rate, one line per mode (error bars = std over runs)."""
    for mode in sorted({r["mode"] for r in rows}):
        rs = sorted((r for r in rows if r["mode"] == mode), key=lambda r: float(r["delta_d"]))
        dd = [float(r["delta_d"]) for r in rs]
        if use_command_rate and mode == "sbamp":
            y = [float(r["command_rate_mean"]) for r in rs]
            err = None
        else:
            y = [float(r["f_plan_mean"]) for r in rs]
            err = [float(r["f_plan_std"]) for r in rs]
        style = MODE_STYLE.get(mode, {"label": mode})
        ax.errorbar(dd, y, yerr=err, capsize=3, **style)

    ax.axhline(MIN_PLAN_RATE_HZ, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("lateral offset Δd (m)")
    ax.set_ylabel("rate (Hz)")
    ax.legend()
    ax.grid(alpha=0.3)


def plot_trajectory(traj: np.ndarray, ax, map_file=None):
    if map_file:
        grid = load_map(map_file)
        occupied = (grid.cells == CellState.OCCUPIED).astype(float)
        w, h = grid.size_m
        ox, oy = grid.origin
        ax.imshow(occupied, origin="lower", cmap="Greys", extent=(ox, ox + w, oy, oy + h), vmin=0, vmax=1)
    ax.plot(traj[:, 1], traj[:, 2], c="tab:blue", linewidth=1.5)
    ax.scatter(traj[0, 1], traj[0, 2], c="green", zorder=3)
    ax.scatter(traj[-1, 1], traj[-1, 2], c="red", zorder=3)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")


def main():
    parser = argparse.ArgumentParser(description="Plot experiment outputs")
    parser.add_argument("--fplan", default=FPLAN_CSV, help="experiment1 plot-data CSV")
    parser.add_argument("--trajectory", help="trajectory CSV from 'simulate'")
    parser.add_argument("--map", help="map file drawn under the trajectory")
    parser.add_argument("--command-rate", action="store_true",
                        help="plot the sbamp line as controller command rate")
    parser.add_argument("--save", help="write the figure to this file instead of showing it")
    args = parser.parse_args()

    plt = _pyplot(bool(args.save))
    if args.trajectory:
        fig, ax = plt.subplots(figsize=(8, 4))
        plot_trajectory(read_trajectory(args.trajectory), ax, args.map)
        ax.set_title(os.path.basename(args.trajectory))
    else:
        if not os.path.exists(args.fplan):
            print(f"[WARNING] Plot data not found: {args.fplan}")
            return
        fig, ax = plt.subplots(figsize=(6, 4))
        plot_fplan(read_rows(args.fplan), ax, args.command_rate)
        ax.set_title("Replanning rate under lateral teleports")

    fig.tight_layout()
    if args.save:
        fig.savefig(args.save, dpi=150)
        print(f"[INFO] Saved figure to {args.save}")
    else:
        plt.show()


if __name__ == "__main__":
    main()
