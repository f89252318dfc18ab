"""Command line entry point: ``deepbias simulate|calibrate|train|run|report``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .allanvar import ImuCalibration, calibrate, write_curves_csv
from .biasnet import TrainConfig
from .experiment import (
    METHODS, CompatibilityWarning, ModelBundle, run_experiment, settings_from_calibration, static_scenario,
    train_bundle,
)
from .estimator import EstimatorSettings
from .simulator import PROFILES, FaultEvent, Scenario, load_scenario, save_scenario, simulate, write_csvs

log = logging.getLogger("deepbias")


def scenario_arg(value: str, args) -> Scenario:
    """A scenario file (YAML/JSON) or a bare motion-profile name."""
    if value in PROFILES:
        sc = Scenario(motion_profile=value, duration=args.duration or 120.0, imu_identity=args.imu)
    else:
        sc = load_scenario(value)
        if args.duration:
            sc.duration = args.duration
    faults = list(sc.faults)
    for spec in args.blackout or ():
        start, dur = map(float, spec.split(":"))
        faults.append(FaultEvent("blackout", start, dur))
    for spec in args.distortion or ():
        start, dur = map(float, spec.split(":"))
        faults.append(FaultEvent("distortion", start, dur))
    sc.faults = faults
    return sc.with_seed(args.seed) if args.seed is not None else sc


def _settings(args) -> EstimatorSettings:
    if getattr(args, "calibration", None):
        return settings_from_calibration(ImuCalibration.load(args.calibration))
    return EstimatorSettings()


def cmd_simulate(args) -> int:
    sc = scenario_arg(args.scenario, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csvs(simulate(sc), out)
    save_scenario(sc, out / "scenario.yaml")
    print(f"wrote {sc.motion_profile} sequence ({sc.duration:g} s, seed {sc.seed}) to {out}")
    return 0


def cmd_calibrate(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.imu_csv:
        raw = np.loadtxt(args.imu_csv, delimiter=",", skiprows=1)
        rate = 1.0 / float(np.median(np.diff(raw[:, 0])))
        accel, gyro = raw[:, 1:4], raw[:, 4:7]
    else:
        rate = 100.0
        data = simulate(static_scenario(args.imu, args.duration or 7200.0, rate, args.seed or 0))
        accel, gyro = data.imu.accel, data.imu.gyro
    cal, curves = calibrate(accel, gyro, rate)
    cal.save(out)
    write_curves_csv(curves, out.with_suffix(".curves.csv"))
    ka, kg = cal.walk_sigmas()
    print(f"accel N {np.mean(cal.accel.white_density):.3e} K {ka:.3e} | "
          f"gyro N {np.mean(cal.gyro.white_density):.3e} K {kg:.3e} -> {out}")
    return 0


def cmd_train(args) -> int:
    if not args.calibration:
        print("train needs --calibration (run `deepbias calibrate` first)", file=sys.stderr)
        return 2
    cal = ImuCalibration.load(args.calibration)
    seed0 = args.seed or 0
    recs = [simulate(scenario_arg(args.scenario, args).with_seed(seed0 + i)) for i in range(args.recordings)]
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=seed0)
    out = Path(args.out)
    for arch in args.model:
        bundle, results = train_bundle(recs, arch, cal, cfg)
        bundle.save(out)
        for sensor, r in results.items():
            r.write_curves(out / f"{arch}_{sensor}_curves.csv")
            print(f"{arch}/{sensor}: best epoch {r.best_epoch}, val MSE {r.best_val:.3e}")
    return 0


def cmd_run(args) -> int:
    sc = scenario_arg(args.scenario, args)
    methods = args.methods
    models = {}
    for m in methods:
        if m in ("lstm", "transformer"):
            if not args.model:
                print(f"method {m} needs --model DIR", file=sys.stderr)
                return 2
            models[m] = ModelBundle.load(args.model, m)
    with warnings.catch_warnings():
        warnings.simplefilter("always", CompatibilityWarning)
        warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
        report = run_experiment(sc, methods, models, _settings(args), args.out,
                                max_iterations=args.max_iterations)
    print(report.summary(), end="")
    return 0


def cmd_report(args) -> int:
    rows = []
    for p in sorted(Path(args.out).rglob("report.csv")):
        with open(p) as fh:
            for r in csv.DictReader(fh):
                r["run"] = str(p.parent.relative_to(args.out)) or "."
                rows.append(r)
    if not rows:
        print(f"no report.csv under {args.out}", file=sys.stderr)
        return 1
    methods = list(dict.fromkeys(r["method"] for r in rows))
    print(f"{len({r['run'] for r in rows})} runs")
    print(f"{'method':<12} {'rpe5':>9} {'drift':>9} {'ba_rmse':>9} {'bg_rmse':>9}")
    means = {}
    for m in methods:
        sel = [r for r in rows if r["method"] == m]
        means[m] = {k: float(np.nanmean([float(r[k]) for r in sel]))
                    for k in ("rpe5_mean", "drift_rate", "bias_rmse_accel", "bias_rmse_gyro")}
        d = means[m]
        print(f"{m:<12} {d['rpe5_mean']:9.4f} {d['drift_rate']:9.5f} {d['bias_rmse_accel']:9.5f} "
              f"{d['bias_rmse_gyro']:9.6f}")
    if "baseline" in means:
        for m in methods:
            if m != "baseline":
                b = means["baseline"]
                print(f"{m}: RPE {100 * (b['rpe5_mean'] - means[m]['rpe5_mean']) / b['rpe5_mean']:+.1f}%, "
                      f"drift {100 * (b['drift_rate'] - means[m]['drift_rate']) / b['drift_rate']:+.1f}% "
                      "(positive = reduction)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepbias", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", default="handheld_walk",
                           help=f"scenario YAML/JSON file or profile name {PROFILES}")
            p.add_argument("--blackout", action="append", metavar="START:DUR")
            p.add_argument("--distortion", action="append", metavar="START:DUR")
        p.add_argument("--seed", type=int)
        p.add_argument("--duration", type=float)
        p.add_argument("--imu", type=int, default=0, help="simulated IMU identity")
        p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="write a synthetic sequence as CSV")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="Allan-variance calibration of a static IMU log")
    common(p, scenario=False)
    p.add_argument("--imu-csv", help="t,ax,ay,az,gx,gy,gz log; default: simulate a static recording")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train bias networks on simulated recordings")
    common(p)
    p.add_argument("--model", nargs="+", choices=("lstm", "transformer"), default=["lstm"])
    p.add_argument("--calibration", help="YAML from `calibrate` (teacher noise)")
    p.add_argument("--recordings", type=int, default=6)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="compare estimator variants on one scenario")
    common(p)
    p.add_argument("--methods", nargs="+", choices=METHODS, default=["baseline", "bias_lock"])
    p.add_argument("--model", help="directory with trained model files")
    p.add_argument("--calibration", help="YAML from `calibrate` (estimator noise model)")
    p.add_argument("--max-iterations", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate report.csv files below a directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
