"""Adaptive vs fixed-frequency synchronization under the packaged step capacity schedule.

Runs both arms for 240 s of virtual time and prints, per 30 s segment,
the update datagram rate and the mean reticle staleness of each arm.

    python demos/schedule_comparison.py [out_dir]
"""

import sys

from lodsync.harness import ScenarioConfig, compare, comparison_csv, data_path, run_scenario

base = ScenarioConfig(duration_s=240, schedule=data_path("table2.sched"))
lod = run_scenario(base)
fixed = run_scenario(base.replace(adaptation="fixed"))

print(f"{'segment':>10} {'cap':>5} | {'updates/s lod':>13} {'fixed':>6} | {'reticle stale lod':>17} {'fixed':>6}")
for seg in compare(lod, fixed):
    u_l, u_f = seg.metrics["update_datagrams_per_s"]
    s_l, s_f = seg.metrics["staleness_mean_ms.reticle"]
    print(f"{int(seg.start_s):>4}-{int(seg.end_s):<5} {seg.capacity:>5} | {u_l:>13.0f} {u_f:>6.0f} | "
          f"{s_l:>17.1f} {s_f:>6.1f}")
print(f"bot score: lod {lod.summary['bot_score']}, fixed {fixed.summary['bot_score']}")

if len(sys.argv) > 1:
    lod.write(f"{sys.argv[1]}/lod")
    fixed.write(f"{sys.argv[1]}/fixed")
    with open(f"{sys.argv[1]}/comparison.csv", "w") as fh:
        fh.write(comparison_csv(lod, fixed, compare(lod, fixed)))
