import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from experiments import walled_grid
from grid import save_map
from plot_results import plot_fplan, plot_trajectory

ROWS = [
    {"mode": "bare_rrt", "delta_d": "0.0", "f_plan_mean": "9.8", "f_plan_std": "0.1", "command_rate_mean": "59.0"},
    {"mode": "bare_rrt", "delta_d": "3.0", "f_plan_mean": "0.0", "f_plan_std": "0.0", "command_rate_mean": "0.0"},
    {"mode": "sbamp", "delta_d": "0.0", "f_plan_mean": "9.9", "f_plan_std": "0.1", "command_rate_mean": "60.0"},
    {"mode": "sbamp", "delta_d": "3.0", "f_plan_mean": "1.0", "f_plan_std": "0.2", "command_rate_mean": "60.0"},
]


def test_plot_fplan_draws_one_line_per_mode():
    fig, ax = plt.subplots()
    plot_fplan(ROWS, ax)
    labels = ax.get_legend_handles_labels()[1]
    assert labels == ["RRT* only", "RRT* + stable DS"]
    plt.close(fig)


def test_plot_command_rate_uses_controller_rate():
    fig, ax = plt.subplots()
    plot_fplan(ROWS, ax, use_command_rate=True)
    data_line = ax.containers[1].lines[0]
    assert np.allclose(data_line.get_ydata(), [60.0, 60.0])
    plt.close(fig)


def test_plot_trajectory_over_map(tmp_path):
    save_map(walled_grid(5.0, 2.0), tmp_path / "corridor.txt")
    traj = np.array([[0.0, 0.5, 1.0, 0.0, 1.0, 0.0], [0.1, 0.6, 1.0, 0.0, 1.0, 0.0]])
    fig, ax = plt.subplots()
    plot_trajectory(traj, ax, tmp_path / "corridor.txt")
    assert len(ax.images) == 1
    assert np.allclose(ax.lines[0].get_xdata(), [0.5, 0.6])
    fig.savefig(tmp_path / "traj.png")
    assert (tmp_path / "traj.png").exists()
    plt.close(fig)
