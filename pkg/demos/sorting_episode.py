"""Run one simulated sorting episode: classify a scene, plan picks by
material priority and move the joint with PID on marker-based estimates.

    python3 demos/sorting_episode.py [seed]
"""
import sys

from coarsesort.pipeline import run_pipeline


def main(seed=7):
    res = run_pipeline(seed=seed, estimator="Markers")
    print(f"scene macro-f1 {res.scene_macro_f1:.3f}, {len(res.targets)} targets")
    for pick in res.report.picks:
        t = pick.target
        print(f"{pick.index:2d} {t.material.name:15s} at {t.target_sensor_pos:+.3f} -> bin {pick.drop_pos:+.3f}"
              f"  rmse {pick.rmse:.4f}  {'ok' if pick.completed else 'aborted'}")
    rep = res.report
    print(f"{rep.n_completed}/{len(rep.picks)} completed, {rep.total_time_s:.1f} s simulated")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 7)
