import numpy as np
import pytest

from planner import WaypointPath
from supervisor import (Supervisor, SupervisorConfig, SupervisorEvent, first_waypoint_ahead, lyapunov_monitor,
                        read_events, write_events)

L_PATH = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 1.0), (2.0, 2.0)]


def make_supervisor(position=(0.0, 0.0), **kw):
    cfg = dict(dt_c=0.01, dt_g=1.0, tau_d=0.5, n0=1)
    cfg.update(kw)
    return Supervisor(SupervisorConfig(**cfg), position)


def test_config_requires_dwell_between_periods():
    with pytest.raises(ValueError):
        SupervisorConfig(dt_c=0.1, dt_g=1.0, tau_d=0.05)
    with pytest.raises(ValueError):
        SupervisorConfig(dt_c=0.1, dt_g=1.0, tau_d=2.0)
    assert SupervisorConfig(dt_c=1 / 60, dt_g=1.0).dwell_time == pytest.approx(1 / 3)
    assert SupervisorConfig(dt_c=0.01, dt_g=0.1).dwell_time == pytest.approx(0.1)


def test_dwell_admissible_counts_switches_in_window():
    sup = make_supervisor()
    assert sup.dwell_admissible(0.0, 1.0)
    sup.switch_times = [0.1, 0.4, 0.7]
    assert sup.dwell_admissible(0.0, 1.0)
    sup.switch_times = [0.1, 0.3, 0.5, 0.7]
    assert not sup.dwell_admissible(0.0, 1.0)
    with pytest.raises(ValueError):
        sup.dwell_admissible(1.0, 1.0)


def test_switch_admissible_waits_out_dwell_time():
    sup = make_supervisor()
    sup.switch_times = [0.0]
    assert not sup.switch_admissible(0.4)
    assert sup.switch_admissible(0.5)


def test_control_step_follows_field_without_path():
    sup = make_supervisor(position=(1.0, 0.0))
    assert np.allclose(sup.control_step((0.0, 0.0), 0.0), (1.0, 0.0))
    fast = make_supervisor(position=(1.0, 0.0), speed_gain=2.0)
    assert np.allclose(fast.control_step((0.0, 0.0), 0.0), (2.0, 0.0))


def test_new_path_recentres_on_waypoint_ahead():
    sup = make_supervisor()
    path = WaypointPath.from_points([(0, 0), (1, 0), (2, 0), (3, 0)], stamp=0.0)
    sup.on_new_path(path, (0.0, 0.0), 0.0)
    assert sup.current_path is path
    assert sup.active_waypoint_index == 1
    assert np.array_equal(sup.attractor, (1.0, 0.0))
    assert sup.switch_times == [0.0]
    assert sup.active_model.stability_margin() <= -sup.config.eps_stab

    # same path again changes nothing
    sup.on_new_path(WaypointPath.from_points(path.waypoints, stamp=0.0), (0.0, 0.0), 0.2)
    assert [e.event for e in sup.events] == ["switch"]


def test_path_inside_dwell_window_is_deferred():
    sup = make_supervisor()
    first = WaypointPath.from_points([(0, 0), (1, 0), (2, 0), (3, 0)], stamp=0.0)
    second = WaypointPath.from_points([(0, 0), (0, 1), (0, 2), (0, 3)], stamp=0.1)
    sup.on_new_path(first, (0.0, 0.0), 0.0)
    sup.on_new_path(second, (0.0, 0.0), 0.1)
    assert sup.current_path is first
    assert sup.pending_path is second

    for t in (0.2, 0.3, 0.4):
        sup.control_step((0.0, 0.0), t)
    assert sup.pending_path is second
    sup.control_step((0.0, 0.0), 0.5)
    assert sup.current_path is second
    assert sup.pending_path is None
    assert [e.event for e in sup.events] == ["switch", "defer", "switch"]
    assert sup.switch_times == [0.0, 0.5]


def test_failed_fit_keeps_previous_model():
    sup = make_supervisor(position=(1.0, 1.0))
    before = sup.active_model
    sup.on_new_path(WaypointPath.from_points([(1.0, 1.0)], stamp=1.0), (0.0, 0.0), 0.0)
    assert sup.active_model is before
    assert sup.pending_path is None
    assert sup.switch_times == []
    assert sup.events[-1].event == "fit_fail"


def test_first_waypoint_ahead():
    path = WaypointPath.from_points([(0, 0), (1, 0), (2, 0), (3, 0)])
    assert first_waypoint_ahead(path, (1.5, 0.1), 0.3) == 2
    assert first_waypoint_ahead(path, (1.5, 0.1), 0.6) == 3
    assert first_waypoint_ahead(path, (1.9, 0.0), 0.3) == 3
    assert first_waypoint_ahead(path, (5.0, 0.0), 0.3) == 3


def test_waypoint_advance_without_counting_as_switch():
    sup = make_supervisor(count_waypoint_advance=False)
    path = WaypointPath.from_points([(0, 0), (1, 0), (2, 0), (3, 0)])
    sup.on_new_path(path, (0.0, 0.0), 0.0)
    sup.control_step((0.9, 0.0), 0.05)
    assert sup.active_waypoint_index == 2
    assert sup.switch_times == [0.0]
    assert sup.events[-1].event == "waypoint_advance"


def test_closed_loop_run_is_smooth_and_reaches_goal():
    dt = 0.01
    sup = make_supervisor(tau_d=0.2, speed_gain=3.0)
    xi = np.array([0.0, 0.0])
    speeds, times, trajectory = [], [], []
    for n in range(2000):
        t = n * dt
        if n % 50 == 0 and t <= 6.0:
            sup.on_new_path(WaypointPath.from_points(L_PATH, stamp=t), xi, t)
        v = sup.control_step(xi, t)
        speeds.append(float(np.linalg.norm(v)))
        times.append(t)
        trajectory.append((t, xi.copy()))
        xi = xi + dt * v

    assert len(sup.switch_times) >= 10
    # command magnitude is continuous across every switch
    for s in sup.switch_times[1:]:
        k = int(np.argmin(np.abs(np.array(times) - s)))
        assert abs(speeds[k] - speeds[k - 1]) < 1e-9
    switches = sup.switch_times
    for i in range(len(switches)):
        for j in range(i + 1, len(switches)):
            assert sup.dwell_admissible(switches[i], switches[j])
    report = sup.lyapunov_monitor(trajectory)
    assert report.final_v < 0.09
    assert np.allclose(sup.goal(), L_PATH[-1])


def test_lyapunov_monitor_flags_growth_between_switches():
    goal = (0.0, 0.0)
    down = [(0.0, (2.0, 0.0)), (1.0, (1.0, 0.0)), (2.0, (0.5, 0.0))]
    report = lyapunov_monitor(down, goal)
    assert report.decreasing
    assert report.final_v == pytest.approx(0.25)

    up = [(0.0, (1.0, 0.0)), (1.0, (2.0, 0.0))]
    report = lyapunov_monitor(up, goal)
    assert not report.decreasing
    assert report.violations == [(0.0, 1.0, 1.0, 4.0)]
    assert report.max_step_increase == pytest.approx(3.0)
    # a switch between the two samples splits them into separate intervals
    assert lyapunov_monitor(up, goal, switch_times=[1.0]).decreasing

    parked = [(0.0, (0.0, 0.0)), (1.0, (0.0, 0.0))]
    assert lyapunov_monitor(parked, goal).decreasing


def test_lyapunov_monitor_needs_sorted_trajectory():
    with pytest.raises(ValueError):
        lyapunov_monitor([(1.0, (0.0, 0.0)), (0.0, (1.0, 0.0))], (0.0, 0.0))


def test_event_log_round_trip(tmp_path):
    events = [SupervisorEvent(0.0, "switch", "stamp=0.0;waypoint=1"),
              SupervisorEvent(0.25, "defer", "stamp=0.25"),
              SupervisorEvent(0.5, "waypoint_advance", "waypoint=2")]
    write_events(events, tmp_path / "events.csv")
    assert read_events(tmp_path / "events.csv") == events

    (tmp_path / "bad.csv").write_text("t,event,detail\n0.0,explode,\n")
    with pytest.raises(ValueError):
        read_events(tmp_path / "bad.csv")


def test_waypoint_left_behind_off_the_path_is_skipped():
    sup = make_supervisor(count_waypoint_advance=False)
    path = WaypointPath.from_points([(0, 0), (1, 0), (2, 0), (3, 0)])
    sup.on_new_path(path, (0.0, 0.0), 0.0)
    # wide of waypoint 1 but already past it along the path
    sup.control_step((1.2, 0.5), 0.05)
    assert sup.active_waypoint_index == 2
    # still short of waypoint 2 and outside its radius
    sup.control_step((1.5, 0.5), 0.06)
    assert sup.active_waypoint_index == 2
