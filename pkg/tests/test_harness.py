import math
import subprocess
import sys

import pytest

from lodsync.harness import (
    MetricsReport, ScenarioConfig, ScenarioError, compare, comparison_csv, data_path, load_scenario, main,
    parse_scenario, run_scenario,
)
from lodsync.metrics import KINDS, MetricsLog, read_rows, rows_to_csv

TABLE2 = data_path("table2.sched")


def test_parse_scenario_keys(tmp_path):
    (tmp_path / "s.sched").write_text("0 100\n")
    cfg = parse_scenario(
        "mode simulated\nadaptation fixed\nschedule s.sched\nroles default\nduration 12.5\nseed 9\n"
        "probe_loss 10\nloss_down 2.5\nbatch 1\nlog_updates yes\n", tmp_path)
    assert cfg.adaptation == "fixed" and cfg.schedule == tmp_path / "s.sched"
    assert cfg.duration_s == 12.5 and cfg.seed == 9 and cfg.probe_loss == 10
    assert cfg.loss_down == 2.5 and cfg.batch and cfg.log_updates
    assert cfg.roles == data_path("roles.txt")


@pytest.mark.parametrize("text,fragment", [
    ("colour blue\n", "unknown key"),
    ("duration -1\n", "duration"),
    ("seed x\n", "line 1"),
    ("mode remote\n", "mode"),
    ("schedule missing.sched\n", "not found"),
    ("probe_loss 101\n", "probe_loss"),
    ("duration\n", "line 1"),
])
def test_parse_scenario_errors(tmp_path, text, fragment):
    with pytest.raises(ScenarioError, match=fragment):
        parse_scenario(text, tmp_path)


def test_config_hash_tracks_settings_and_files(tmp_path):
    a = ScenarioConfig()
    assert a.config_hash() == ScenarioConfig().config_hash()
    assert a.config_hash() != a.replace(seed=43).config_hash()
    roles = tmp_path / "roles.txt"
    roles.write_text(data_path("roles.txt").read_text())
    b = a.replace(roles=roles)
    assert b.config_hash() == a.config_hash()  # contents are hashed, not the path
    roles.write_text(roles.read_text().replace("weight=1.5", "weight=1.6"))
    assert b.config_hash() != a.config_hash()
    assert len(a.config_hash()) == 40


def test_byte_identical_reports(tmp_path):
    cfg = ScenarioConfig(duration_s=30, schedule=TABLE2)
    run_scenario(cfg).write(tmp_path / "a")
    run_scenario(cfg).write(tmp_path / "b")
    for name in ("events.csv", "summary.csv", "entities.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_round_trip(tmp_path):
    rep = run_scenario(ScenarioConfig(duration_s=8, log_updates=True))
    loaded = MetricsReport.load(rep.write(tmp_path))
    assert loaded.rows == rep.rows and loaded.summary == rep.summary and loaded.entities == rep.entities


def test_metrics_csv_schema():
    log = MetricsLog()
    log.event(5, "loss_percent", None, None, 12.5)
    log.count("pkts_out", 1500, 0, 3)
    text = rows_to_csv(log.all_rows())
    assert text.splitlines() == ["time_ms,kind,entity_id,group_id,value", "5,loss_percent,,,12.5",
                                 "1000,pkts_out,,0,3"]
    assert {"update_applied", "staleness_sample", "reassignment", "loss_percent", "pkts_out",
            "pkts_in"} <= set(KINDS)


def test_rows_sorted_by_time(tmp_path):
    log = MetricsLog()
    log.event(5, "loss_percent", None, None, 1.0)
    log.count("pkts_out", 1500, 0, 3)
    rows = log.all_rows()
    assert [r[0] for r in rows] == sorted(r[0] for r in rows)
    (tmp_path / "x.csv").write_text(rows_to_csv(rows))
    assert read_rows(tmp_path / "x.csv") == rows


def test_fixed_timeline_is_constant():
    rep = run_scenario(ScenarioConfig(duration_s=60, schedule=TABLE2, adaptation="fixed"))
    assert rep.of_kind("reassignment") == []
    assert {gid for _, _, gid in rep.timeline()} == {0}


def test_zero_loss_keeps_everything_optimal():
    rep = run_scenario(ScenarioConfig(duration_s=60))
    assert rep.of_kind("reassignment") == []
    assert {gid for _, _, gid in rep.timeline()} == {0}
    assert {r[4] for r in rep.of_kind("loss_percent")} == {0.0}


def test_timeline_covers_every_entity_from_spawn():
    rep = run_scenario(ScenarioConfig(duration_s=60, probe_loss=10))
    joined = {eid: t for t, eid, _ in reversed(rep.timeline())}
    for eid, _, spawn_ms in rep.entities:
        assert joined[eid] == spawn_ms
    assert min(joined.values()) == 0


def test_identical_reports_compare_to_zero():
    rep = run_scenario(ScenarioConfig(duration_s=70, schedule=TABLE2))
    segs = compare(rep, rep)
    assert [(s.start_s, s.end_s, s.capacity) for s in segs] == [(0, 30, 6000), (30, 60, 3000), (60, 70, 5000)]
    for s in segs:
        for name in s.metrics:
            d = s.delta(name)
            assert d == 0 or math.isnan(d)
    assert "bot_score" in comparison_csv(rep, rep, segs)


def test_compare_rejects_mismatched_runs():
    a = run_scenario(ScenarioConfig(duration_s=5))
    with pytest.raises(ScenarioError):
        compare(a, run_scenario(ScenarioConfig(duration_s=6)))
    with pytest.raises(ScenarioError):
        compare(a, run_scenario(ScenarioConfig(duration_s=5, seed=1)))


def test_cli_run_and_compare(tmp_path, capsys):
    for arm in ("lod", "fixed"):
        (tmp_path / f"{arm}.cfg").write_text(f"adaptation {arm}\nschedule default\nduration 40\n")
        assert main(["run", "--config", str(tmp_path / f"{arm}.cfg"), "--out", str(tmp_path / arm)]) == 0
    out = tmp_path / "cmp.csv"
    assert main(["compare", "--a", str(tmp_path / "lod"), "--b", str(tmp_path / "fixed"), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "segment_start_s,segment_end_s,capacity,metric,a,b,delta"
    assert any(",3000,update_datagrams_per_s," in line for line in lines)


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("duration zero\n")
    assert main(["run", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err
    assert err.startswith("ERROR {") and '"kind": "ScenarioError"' in err
    assert main(["compare", "--a", str(tmp_path / "nope"), "--b", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "c.csv")]) != 0


def test_console_entry_point(tmp_path):
    (tmp_path / "c.cfg").write_text("duration 3\n")
    res = subprocess.run([sys.executable, "-m", "lodsync.harness", "run", "--config", str(tmp_path / "c.cfg"),
                          "--out", str(tmp_path / "out")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert load_scenario(tmp_path / "c.cfg").duration_s == 3


@pytest.mark.realsocket
def test_realsocket_scenario_runs_end_to_end(tmp_path):
    cfg = ScenarioConfig(mode="realsocket", duration_s=8, schedule=TABLE2)
    rep = run_scenario(cfg, tmp_path)
    assert rep.summary["status"] == "ok", (tmp_path / "server.log").read_text()
    assert int(rep.summary["updates_applied"]) > 10_000
    assert int(rep.summary["decode_errors"]) == 0
    assert {r[1] for r in rep.rows} >= {"group_join", "pkts_out", "pkts_in", "staleness_sample", "loss_percent"}
    assert rep.roles[1] == "reticle"


def test_groups_at_forgets_removed_entities():
    rep = run_scenario(ScenarioConfig(duration_s=60, probe_loss=10))
    leaves = rep.of_kind("group_leave")
    assert leaves, "expected at least one wave change in 60 s"
    t_leave, gone = leaves[0][0], {r[2] for r in leaves if r[0] == leaves[0][0]}
    assert gone <= set(rep.groups_at(t_leave - 1))
    assert not gone & set(rep.groups_at(t_leave))
