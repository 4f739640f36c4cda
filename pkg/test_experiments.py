import json
import math

import numpy as np
import pytest
from scipy.ndimage import label

from experiments import (DISTURBANCES, EXP1_DELTA_D, EXP1_DT_PLANNER, EXP2_SEEDS, EXP3_SEEDS, LOOP_ROUTE,
                         STRAIGHT_CENTERLINE_Y, STRAIGHT_STATION_X, LateralTeleport, RouteTracker, Scenario,
                         ScenarioError, SimConfig, TrapApproach, corridor_scenario, derive_rng, ensure_calibrated,
                         experiment1, experiment2, experiment3, load_scenario, loop_scenario, planner_rng,
                         planning_grid, read_rows, resolve_perturbation, run_scenario, run_seed, scenario_from_dict,
                         scenario_to_dict, shortcut_grid, straight_route, straightaway_scenario,
                         summarize_experiment1, walled_grid, write_rows)
from grid import CellState, add_box, is_free, save_map, segment_free
from planner import run_rrt_star
from supervisor import Supervisor
from vehicle import CornerTrap, Translate, VehicleState, apply_perturbation

# fixed planner budget so tests skip calibration
FAST = SimConfig(min_iterations=400, c_iter=0.5 / 400)


@pytest.fixture
def small_corridor():
    start, goal = (0.5, 1.5, 0.0), (5.5, 1.5)
    return Scenario("small", walled_grid(6.0, 3.0), start, goal, straight_route(start, goal),
                    dt_c=0.05, dt_g=0.5, duration=20.0)


@pytest.fixture
def scenario_dir(tmp_path):
    save_map(walled_grid(5.0, 2.0), tmp_path / "corridor.txt")
    return tmp_path


def test_derived_streams_are_reproducible():
    a = derive_rng(7, "sbamp", "planner").random(5)
    b = derive_rng(7, "sbamp", "planner").random(5)
    c = derive_rng(7, "bare_rrt", "planner").random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert run_seed(0, 3) == run_seed(0, 3)
    assert len({run_seed(0, k) for k in range(20)}) == 20


def test_config_overrides_are_typed():
    cfg = SimConfig().with_overrides({"speed_gain": "2.5", "min_iterations": "none",
                                      "count_waypoint_advance": "false", "max_iterations": 500})
    assert cfg.speed_gain == 2.5
    assert cfg.min_iterations is None
    assert cfg.count_waypoint_advance is False
    assert cfg.max_iterations == 500
    with pytest.raises(KeyError):
        SimConfig().with_overrides({"warp_speed": "9"})
    with pytest.raises(ValueError):
        SimConfig().with_overrides({"max_iterations": "lots"})
    with pytest.raises(ValueError):
        SimConfig().with_overrides({"n0": 1.5})


def test_scenario_validation():
    start, goal = (0.5, 1.0, 0.0), (4.5, 1.0)
    truth = walled_grid(5.0, 2.0)
    with pytest.raises(ScenarioError) as err:
        Scenario("x", truth, start, goal, straight_route(start, goal), dt_c=0.03, dt_g=0.1)
    assert err.value.key == "dt_g"
    with pytest.raises(ScenarioError) as err:
        Scenario("x", truth, (0.05, 1.0, 0.0), goal, straight_route(start, goal))
    assert err.value.key == "start"
    assert Scenario("x", truth, start, goal, straight_route(start, goal)).ticks_per_cycle == 60


def test_load_scenario_file(scenario_dir):
    data = {
        "map_path": "corridor.txt",
        "start": [0.5, 1.0],
        "goal": [4.5, 1.0],
        "perturbations": [{"type": "rotate", "angle": 1.0, "min_x": 1.5}],
        "seeds": [1, 2],
        "settings": {"speed_gain": 2.0},
    }
    path = scenario_dir / "trial.json"
    path.write_text(json.dumps(data))
    s = load_scenario(path)
    assert s.name == "trial"
    assert s.start == (0.5, 1.0, 0.0)
    assert s.runs == 2
    assert s.schedule[0].min_x == 1.5
    assert s.settings == {"speed_gain": 2.0}
    again = scenario_from_dict(scenario_to_dict(s), str(scenario_dir))
    assert scenario_to_dict(again) == scenario_to_dict(s)


def test_load_scenario_reports_line_and_key(scenario_dir):
    bad = scenario_dir / "bad.json"
    bad.write_text('{\n  "map_path": "corridor.txt",\n  oops\n}\n')
    with pytest.raises(ScenarioError) as err:
        load_scenario(bad)
    assert err.value.line == 3

    missing = scenario_dir / "missing.json"
    missing.write_text(json.dumps({"map_path": "corridor.txt", "goal": [4.5, 1.0]}))
    with pytest.raises(ScenarioError) as err:
        load_scenario(missing)
    assert err.value.key == "start"

    unknown = scenario_dir / "unknown.json"
    unknown.write_text(json.dumps({"map_path": "corridor.txt", "start": [0.5, 1.0], "goal": [4.5, 1.0],
                                   "perturbations": [{"type": "teleport"}]}))
    with pytest.raises(ScenarioError) as err:
        load_scenario(unknown)
    assert err.value.key == "perturbations[0].type"


@pytest.mark.parametrize("patch, key", [
    ({"start": ["a", 1.0]}, "start"),
    ({"goal": [4.5, None]}, "goal"),
    ({"dt_c": "fast"}, "dt_c"),
    ({"dt_g": [1.0]}, "dt_g"),
    ({"speed": "quick"}, "speed"),
    ({"duration": float("nan")}, "duration"),
    ({"runs": "many"}, "runs"),
    ({"seeds": ["x"]}, "seeds"),
    ({"seeds": [1.5]}, "seeds"),
    ({"seeds": 3}, "seeds"),
    ({"perturbations": [{"type": "rotate", "angle": "big"}]}, "perturbations[0].angle"),
    ({"perturbations": [{"type": "translate", "distance": 0.5, "time": "soon"}]}, "perturbations[0].time"),
    ({"perturbations": [{"type": "lateral_teleport", "offset": 1.0}]}, "perturbations[0].centerline_y"),
])
def test_malformed_values_name_their_key(scenario_dir, patch, key):
    data = {"map_path": "corridor.txt", "start": [0.5, 1.0], "goal": [4.5, 1.0], **patch}
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(data, str(scenario_dir))
    assert err.value.key == key


@pytest.mark.parametrize("scenario", [
    straightaway_scenario(2.0),
    corridor_scenario("corner_trap", 0.5),
    corridor_scenario("translate", 0.4),
])
def test_built_in_schedules_survive_a_file_round_trip(tmp_path, scenario):
    save_map(scenario.truth, tmp_path / "truth.txt")
    data = scenario_to_dict(scenario)
    data["map_path"] = "truth.txt"
    path = tmp_path / "built_in.json"
    path.write_text(json.dumps(data))
    loaded = load_scenario(path)
    assert loaded.schedule == scenario.schedule
    types = [p["type"] for p in data["perturbations"]]
    assert set(types) <= {"translate", "rotate", "corner_trap", "lateral_teleport", "trap_approach"}


def test_route_tracker_does_not_skip_around_loop():
    tracker = RouteTracker(LOOP_ROUTE)
    assert tracker.total == pytest.approx(28.0)
    assert tracker.update((3.0, 1.5)) == 0.0
    for s in np.arange(0.0, 28.0, 0.25):
        tracker.update(tracker.point_at(s) + (0.0, 0.2))
    assert tracker.progress == pytest.approx(28.0, abs=0.3)
    assert tracker.distance((6.0, 2.0)) == pytest.approx(0.5)


def test_local_goal_skips_blocked_route_points():
    grid = walled_grid(6.0, 3.0)
    grid = add_box(grid, (3.0, 1.0), (3.6, 2.0))
    tracker = RouteTracker([(0.5, 1.5), (5.5, 1.5)])
    goal = tracker.local_goal(grid, 2.75)
    assert goal[0] > 3.6
    assert goal[1] == pytest.approx(1.5)


def test_resolve_perturbation():
    p = resolve_perturbation(LateralTeleport(1.0, 1.5), VehicleState(2.0, 2.0, 0.3))
    moved = apply_perturbation(VehicleState(2.0, 2.0, 0.3), p)
    assert (moved.x, moved.y, moved.theta) == pytest.approx((2.0, 2.5, 0.3))
    half = resolve_perturbation(TrapApproach(0.5, 1.0, 0.0, math.pi / 2), VehicleState(3.0, 2.0, 0.0))
    assert isinstance(half, CornerTrap)
    assert (half.x, half.y, half.theta) == pytest.approx((2.0, 1.0, math.pi / 4))
    assert resolve_perturbation(Translate(0.3), VehicleState(0.0, 0.0, 0.0)) == Translate(0.3)
    reset = resolve_perturbation(LateralTeleport(2.5, 1.5, station_x=4.0), VehicleState(7.0, 1.2, -0.4))
    assert reset == CornerTrap(4.0, 4.0, 0.0)


def test_built_in_scenarios():
    s = straightaway_scenario(2.0)
    assert s.ticks_per_cycle == 6
    assert s.schedule[0].every_cycle_until == s.duration
    assert s.schedule[0].perturbation.station_x == STRAIGHT_STATION_X
    # the unperturbed point still resets to the station every cycle
    assert straightaway_scenario(0.0).schedule[0].perturbation.offset == 0.0
    with pytest.raises(ValueError):
        corridor_scenario("shake", 1.0)
    a, b = loop_scenario(4), loop_scenario(4)
    assert np.array_equal(a.truth.cells, b.truth.cells)
    assert a.schedule == b.schedule
    assert a.sensing
    assert a.truth.count(CellState.OCCUPIED) > a.prior.count(CellState.OCCUPIED)
    assert not loop_scenario(4, obstacle=False).sensing


def test_rows_file_round_trip(tmp_path):
    rows = [{"seed": 3, "recovered": True, "collisions": 0, "t_recover_s": 1.25},
            {"seed": 4, "recovered": False, "collisions": 1, "t_recover_s": math.inf}]
    write_rows(rows, ["seed", "recovered", "collisions", "t_recover_s"], tmp_path / "rows.csv")
    back = read_rows(tmp_path / "rows.csv")
    assert back[0] == {"seed": "3", "recovered": "true", "collisions": "0", "t_recover_s": "1.25"}
    assert back[1]["recovered"] == "false"
    assert float(back[1]["t_recover_s"]) == math.inf


def test_sbamp_drives_unperturbed_corridor(small_corridor):
    result = run_scenario(small_corridor, "sbamp", 0, FAST)
    m = result.metrics
    assert m.collisions == 0
    assert m.recovery
    assert m.reached_goal
    assert m.final_goal_error <= 0.3
    assert m.f_plan == pytest.approx(1 / small_corridor.dt_g, rel=0.01)
    assert m.command_rate == pytest.approx(1 / small_corridor.dt_c)
    assert result.events[0].event == "switch"


def test_runs_are_deterministic(small_corridor):
    a = run_scenario(small_corridor, "sbamp", 5, FAST)
    b = run_scenario(small_corridor, "sbamp", 5, FAST)
    assert a.trajectory == b.trajectory
    assert a.metrics == b.metrics


def test_modes_share_the_planner_stream_per_cycle(small_corridor):
    cfg = SimConfig(min_iterations=1, c_iter=1e-6)
    bare = run_scenario(small_corridor, "bare_rrt", 3, cfg)
    sbamp = run_scenario(small_corridor, "sbamp", 3, cfg)
    # same start pose, same cycle-0 sampler, same first plan
    assert bare.plan_log[0] == sbamp.plan_log[0]
    grid = planning_grid(small_corridor.truth, cfg)
    goal = RouteTracker(small_corridor.route).local_goal(grid, cfg.local_goal_distance)
    first = run_rrt_star(grid, small_corridor.start[:2], goal, cfg.planner_config(), planner_rng(3, 0))
    assert bare.plan_log[0] == (0.0, "planned", first.iterations)
    assert not np.array_equal(planner_rng(3, 0).random(4), planner_rng(3, 1).random(4))


def test_bare_planner_stalls_in_corner_trap():
    scenario = corridor_scenario("corner_trap", 1.0, seeds=(0,))
    result = run_scenario(scenario, "bare_rrt", 0, SimConfig(min_iterations=300, c_iter=1 / 300))
    m = result.metrics
    assert not m.recovery
    assert m.min_command_rate == 0.0
    assert m.collisions == 0
    assert math.isinf(m.time_to_recovery)


def test_unknown_mode_is_rejected(small_corridor):
    with pytest.raises(ValueError):
        run_scenario(small_corridor, "teleport", 0, FAST)


@pytest.mark.parametrize("dd", EXP1_DELTA_D)
def test_straightaway_offsets_land_in_free_space(dd):
    s = straightaway_scenario(dd)
    pose = resolve_perturbation(s.schedule[0].perturbation, VehicleState(*s.start))
    assert pose == CornerTrap(STRAIGHT_STATION_X, STRAIGHT_CENTERLINE_Y + dd, 0.0)
    planning = planning_grid(s.truth, SimConfig())
    assert is_free(planning, (pose.x, pose.y))
    # every start reaches the lane, but only the lane itself sees it in a straight line
    labels, _ = label(planning.cells == CellState.FREE)
    si, sj = planning.world_to_cell((pose.x, pose.y))
    gi, gj = planning.world_to_cell(s.goal)
    assert labels[sj, si] == labels[gj, gi] != 0
    lane = (pose.x, STRAIGHT_CENTERLINE_Y)
    assert segment_free(planning, (pose.x, pose.y), lane) == (dd == 0.0)


def test_nominal_run_respects_dwell_time(small_corridor):
    result = run_scenario(small_corridor, "sbamp", 0, FAST)
    sup = Supervisor(FAST.supervisor_config(small_corridor), small_corridor.start[:2])
    sup.switch_times = [e.t for e in result.events if e.event in ("switch", "waypoint_advance")]
    assert sup.switch_times
    assert sup.dwell_admissible(0.0, small_corridor.duration)


@pytest.mark.slow
def test_experiment1_command_rate_is_independent_of_offset():
    cfg = SimConfig(min_iterations=1, c_iter=1e-6, duration=1.0)
    rows = experiment1([0.0, 3.0], runs=1, seed=0, config=cfg, modes=("sbamp",))
    assert len(rows) == 2
    for r in rows:
        assert r["command_rate_hz"] == pytest.approx(60.0)


@pytest.mark.slow
def test_bare_planning_rate_falls_with_offset():
    rows = experiment1(EXP1_DELTA_D, runs=6, config=SimConfig(n_jobs=-1), modes=("bare_rrt",))
    points = sorted(summarize_experiment1(rows), key=lambda p: p["delta_d"])
    f = [p["f_plan_mean"] for p in points]
    assert f[0] == pytest.approx(1.0 / EXP1_DT_PLANNER, rel=0.01)
    assert all(a > b for a, b in zip(f, f[1:]))
    assert f[-1] < 2.0


@pytest.mark.slow
def test_deep_offset_slows_planning_without_endpoint_failures():
    cfg = ensure_calibrated(straightaway_scenario(0.0), SimConfig())
    result = run_scenario(straightaway_scenario(EXP1_DELTA_D[-1]), "bare_rrt", run_seed(0, 0), cfg)
    kinds = {kind for _, kind, _ in result.plan_log}
    assert "planned" in kinds
    assert "invalid_endpoint" not in kinds


@pytest.mark.slow
@pytest.mark.parametrize("disturbance", DISTURBANCES)
def test_sbamp_tolerates_at_least_what_bare_planner_does(disturbance):
    cfg = SimConfig(n_jobs=1)
    bare = experiment2("bare_rrt", disturbance, config=cfg)
    sbamp = experiment2("sbamp", disturbance, config=cfg)
    assert sbamp.threshold >= bare.threshold


@pytest.mark.slow
def test_sbamp_escapes_corner_trap_where_bare_planner_stalls():
    cfg = ensure_calibrated(corridor_scenario(None, 0.0, EXP2_SEEDS), SimConfig())
    scenario = corridor_scenario("corner_trap", 1.0, EXP2_SEEDS)
    for s in EXP2_SEEDS:
        assert run_scenario(scenario, "sbamp", s, cfg).metrics.recovery
        assert not run_scenario(scenario, "bare_rrt", s, cfg).metrics.recovery


@pytest.mark.slow
def test_loop_shoves_are_recovered_without_collisions():
    result = experiment3(EXP3_SEEDS, config=SimConfig(n_jobs=-1))
    assert result.recovery_rate >= 0.95
    assert result.collisions == 0


def test_shortcut_grid_keeps_extra_clearance():
    cfg = SimConfig()
    prior = loop_scenario(0, obstacle=False).known_map
    clear = shortcut_grid(prior, cfg)
    assert clear.inflation_radius == pytest.approx(cfg.inflation_radius + cfg.shortcut_clearance)
    assert clear.count(CellState.FREE) < planning_grid(prior, cfg).count(CellState.FREE)
    # three cells right of the island's corner cell: inside the pruning margin only
    assert is_free(planning_grid(prior, cfg), (9.775, 2.575))
    assert not is_free(clear, (9.775, 2.575))
