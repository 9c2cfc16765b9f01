"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3
algorithmic failure (training divergence, failed registration, failed
gradient check).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidInputError, RegistrationFailed, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ALGO = 0, 1, 2, 3

logger = logging.getLogger("coarsesort")


class UsageError(Exception):
    pass


class AlgorithmFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs: list[Path] = []
        self.t0 = time.monotonic()
        self.out = Path(args.out) if getattr(args, "out", None) else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs.append(p)
        return p

    def path(self, name: str) -> Path:
        if self.out is None:
            raise UsageError("this command needs --out")
        return self.out / name

    def write_manifest(self):
        if self.out is None:
            return
        outputs = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != "manifest.json")
        manifest = {
            "command": " ".join(self.args.command_path),
            "argv": self.argv,
            "config": self.args.config,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "inputs": {str(p): _sha256(p) for p in self.inputs},
            "outputs": {str(p.relative_to(self.out)): _sha256(p) for p in outputs},
            "wall_time_s": round(time.monotonic() - self.t0, 3),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_bands(args, run):
    from .cube import format_band_table

    print(format_band_table())


def cmd_synth_scene(args, run):
    from .cube import write_cube
    from .matclass import SyntheticSceneSpec, gen_synthetic_scene, label_rects_for, save_label_map, save_labels
    from .matclass import swir_only_signatures

    kw = {"width": args.width, "height": args.height, "grid": args.grid, "noise_std": args.noise}
    if args.swir_only:
        kw["signatures"] = swir_only_signatures()
    for i in range(args.n_scenes):
        spec = SyntheticSceneSpec(seed=args.seed * 1000 + i, **kw)
        cube, gt = gen_synthetic_scene(spec)
        write_cube(cube, run.path(f"scene_{i}.msc1"))
        save_label_map(gt, run.path(f"scene_{i}_gt.png"))
        save_labels(label_rects_for(spec), run.path(f"scene_{i}_labels.json"))
        if args.series:
            _write_series(run.path(f"scene_{i}_series"), cube, args.series_size, args.seed * 1000 + i)
    print(f"wrote {args.n_scenes} scene(s) to {run.out}")


def _write_series(d: Path, cube, size, seed):
    from PIL import Image

    from .register import synthetic_series

    d.mkdir(parents=True, exist_ok=True)
    vis, caps, truth = synthetic_series(size, seed, cube)
    for cam, img in vis.items():
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(d / f"vis_{cam}.png")
    peak = max(float(c.image.max()) for c in caps) or 1.0
    for cap in caps:
        img = np.round(cap.image / peak * 65535).astype(np.uint16)
        name = d / f"filter_{cap.band.filter_index:02d}.png"
        if img.ndim == 3 and img.shape[2] == 3:
            Image.fromarray((img >> 8).astype(np.uint8), mode="RGB").save(name)
        else:
            Image.fromarray(img[:, :, 0] if img.ndim == 3 else img).save(name)
        _dump(name.with_suffix(".json"), {"filter_index": cap.band.filter_index,
                                          "exposure_s": cap.exposure_used_s, "series_id": cap.series_id})
    _dump(d / "truth_homographies.json", {k: v.ravel().tolist() for k, v in truth.items()})


def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(float)


def cmd_register(args, run):
    from .cube import CAMERAS, load_raw_capture, write_cube
    from .register import build_cube, register_series

    series = Path(args.series)
    if not series.is_dir():
        raise FileNotFoundError(f"series directory not found: {series}")
    vis = {}
    for cam in CAMERAS:
        p = series / f"vis_{cam}.png"
        if p.exists():
            vis[cam] = _read_gray(run.input(p))
    caps = [load_raw_capture(run.input(p)) for p in sorted(series.glob("filter_*.png"))]
    result = register_series(vis, ratio=args.ratio, thresh_px=args.thresh, seed=args.seed,
                             series_id=series.name)
    run.path("registration.json").write_text(result.dumps())
    if result.failed:
        raise AlgorithmFailure(f"registration failed for {sorted(result.failed)}")
    if caps:
        h, w = next(iter(vis.values())).shape[:2]
        write_cube(build_cube(caps, result, w, h), run.path("cube.msc1"))
    for cam, st in sorted(result.stats.items()):
        print(f"{cam}: {st}")


def _load_training_samples(run, cubes, labels):
    from .cube import read_cube
    from .matclass import SampleSet, extract_samples, load_labels

    if len(cubes) != len(labels):
        raise UsageError("give one --labels file per --cube")
    sets = [extract_samples(read_cube(run.input(c)), load_labels(run.input(l))) for c, l in zip(cubes, labels)]
    return SampleSet.concat(sets)


def _mlp_config(args):
    from .matclass import MlpConfig

    return MlpConfig(hidden_sizes=tuple(args.hidden), epochs=args.epochs, batch=args.batch, lr=args.lr,
                     seed=args.seed, band_subset=tuple(args.bands) if args.bands else None)


def cmd_classify_train(args, run):
    from .matclass import evaluate, stratified_split, train_mlp

    samples = _load_training_samples(run, args.cube, args.labels)
    train, test = stratified_split(samples, args.test_frac, args.seed)
    model = train_mlp(train, _mlp_config(args))
    model.save(run.path("model.json"))
    metrics = evaluate(model, test)
    _dump(run.path("metrics.json"), metrics.to_json())
    print(metrics.summary())


def cmd_classify_eval(args, run):
    from .matclass import MlpModel, evaluate

    model = MlpModel.load(run.input(args.model))
    samples = _load_training_samples(run, args.cube, args.labels)
    metrics = evaluate(model, samples)
    if run.out is not None:
        _dump(run.path("metrics.json"), metrics.to_json())
    print(metrics.summary())


def cmd_classify_infer(args, run):
    from .cube import read_cube
    from .matclass import MlpModel, classify_cube, save_confidence_map, save_label_map

    model = MlpModel.load(run.input(args.model))
    labels, conf = classify_cube(model, read_cube(run.input(args.cube)))
    save_label_map(labels, run.path("label_map.png"), run.path("label_legend.json"))
    save_confidence_map(conf, run.path("confidence.png"))
    print(f"classified {labels.size} pixels")


BAND_SUBSETS = {
    "all": tuple(range(15)),
    "uv": (0, 1, 2),
    "vis": (3, 4, 5),
    "visnir": (3, 4, 5, 6, 7, 8, 9),
    "swir": (10, 11, 12, 13, 14),
}


def cmd_classify_ablate(args, run):
    from .matclass import band_ablation

    samples = _load_training_samples(run, args.cube, args.labels)
    names = {BAND_SUBSETS[name]: name for name in args.subsets}
    ranked = band_ablation(samples, list(names), _mlp_config(args), args.test_frac, args.seed)
    rows = [{"subset": names[s], "channels": list(s), "macro_f1": f1} for s, f1 in ranked]
    _dump(run.path("ablation.json"), rows)
    for row in rows:
        print(f"{row['subset']:>8}: macro-f1 {row['macro_f1']:.3f}")


def _plant_params(run, args):
    from .plant import canonical_params, load_params

    return load_params(run.input(args.params)) if args.params else canonical_params()


def cmd_plant_run(args, run):
    from .plant import Replay, collect_dataset

    p = _plant_params(run, args)
    if args.commands:
        cmds = np.loadtxt(run.input(args.commands), delimiter=",", ndmin=1)
        if not np.all(np.isfinite(cmds)) or np.any(np.abs(cmds) > 1):
            raise InvalidInputError("commands must be finite and within [-1, 1]")
        duration = len(cmds) * args.dt
    else:
        if not -1 <= args.constant <= 1:
            raise InvalidInputError("--constant must lie in [-1, 1]")
        duration = args.duration
        cmds = np.full(int(round(duration / args.dt)), args.constant)
    log = collect_dataset(p, Replay(tuple(float(c) for c in cmds)), duration, args.dt, args.seed,
                          safety=not args.no_safety, start_L=args.start_length)
    log.save(run.path("log.csv"))
    print(f"{len(log)} rows, final s = {log.s[-1]:.4f} rad")


def cmd_plant_chirp(args, run):
    from .plant import ChirpSpec, collect_dataset

    p = _plant_params(run, args)
    spec = ChirpSpec(args.amp_start, args.amp_end, args.f0, args.f1, args.duration)
    log = collect_dataset(p, spec, args.duration, args.dt, args.seed, start_L=args.start_length)
    log.save(run.path("log.csv"))
    print(f"{len(log)} rows, sensor range {log.s.min():.3f}..{log.s.max():.3f} rad")


def cmd_plant_collect(args, run):
    from .plant import RandomWalk, collect_dataset
    from .sysid import canonical_training_logs

    p = _plant_params(run, args)
    if args.excitation == "canonical":
        logs = canonical_training_logs(p, amp_end=args.amp_end, seed=args.seed)
        for i, log in enumerate(logs):
            log.save(run.path(f"segment_{i}.csv"))
        print(f"{len(logs)} chirp segments")
    else:
        log = collect_dataset(p, RandomWalk(args.step_std), args.duration, args.dt, args.seed)
        log.save(run.path("log.csv"))
        print(f"{len(log)} rows of random-walk excitation")


def _load_logs(run, paths):
    from .plant import DatasetLog

    return [DatasetLog.load(run.input(p)) for p in paths]


def cmd_predictor_train(args, run):
    from .plant import canonical_params
    from .sysid import PredictorConfig, canonical_training_logs, evaluate_predictor, train_predictor

    if args.log:
        logs = _load_logs(run, args.log)
    else:
        logs = canonical_training_logs(canonical_params(), amp_end=args.amp_end, seed=args.seed)
    cfg = PredictorConfig(hidden_size=args.hidden, window_len=args.window, epochs=args.epochs, lr=args.lr,
                          batch=args.batch, seed=args.seed)
    model = train_predictor(logs, cfg)
    model.save(run.path("predictor.json"))
    worst = max(evaluate_predictor(model, log).max_abs_error for log in logs)
    _dump(run.path("train_report.json"), {"train_max_abs_error": worst, "loss_history": model.loss_history})
    print(f"training max|error| {worst:.4f} rad/s")


def cmd_predictor_eval(args, run):
    from .sysid import LstmPredictor, evaluate_predictor

    model = LstmPredictor.load(run.input(args.model))
    (log,) = _load_logs(run, [args.log])
    override = {"T": args.zero_temperature_value} if args.zero_temperature else None
    rep = evaluate_predictor(model, log, override)
    rep.save(run.out)
    print(f"max|error| {rep.max_abs_error:.4f} rad/s, rmse {rep.rmse:.4f} rad/s")


def cmd_predictor_gradcheck(args, run):
    from .plant import ChirpSpec, canonical_params, collect_dataset
    from .sysid import LstmPredictor, gradcheck_window, gradient_check_recurrent, init_predictor, log_arrays

    if args.log:
        (log,) = _load_logs(run, [args.log])
    else:
        log = collect_dataset(canonical_params(), ChirpSpec(duration=10.0), 10.0, seed=args.seed)
    if args.model:
        model = LstmPredictor.load(run.input(args.model))
    else:
        X, Y = log_arrays(log)
        model = init_predictor(32, args.seed, X.mean(0), X.std(0) + 1e-12, Y.mean(), Y.std() + 1e-12)
        # a zero head would hide every gate gradient
        model.w_out = np.random.default_rng(args.seed).normal(0.0, 0.5, model.hidden_size)
    X, Y = gradcheck_window(model, log, args.start, args.window)
    rep = gradient_check_recurrent(model, X, Y, args.epsilon, args.n_params, args.seed)
    if run.out is not None:
        _dump(run.path("gradcheck.json"), rep.to_json())
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_checked} parameters")
    if not rep.passed:
        raise AlgorithmFailure("recurrent gradient check failed")


def cmd_controller_train(args, run):
    from .control import ControllerTrainConfig, train_controller
    from .plant import canonical_params
    from .sysid import LstmPredictor

    pred = LstmPredictor.load(run.input(args.predictor))
    cfg = ControllerTrainConfig(iterations=args.iterations, lr=args.lr, seed=args.seed,
                                lookahead=args.lookahead, hidden=args.hidden)
    policy = train_controller(pred, canonical_params(), cfg)
    policy.save(run.path("policy.json"))
    print(f"final loss/step {policy.loss_history[-1]:.3e}")


def cmd_controller_run(args, run):
    from .control import (
        PidController,
        PidGains,
        PolicyController,
        PolicyModel,
        follow,
        gen_trajectory,
        make_state_source,
    )

    p = _plant_params(run, args)
    traj = gen_trajectory(args.start, args.target, args.vmax, args.amax, args.dt)
    if args.policy:
        ctrl = PolicyController(PolicyModel.load(run.input(args.policy)))
    else:
        ctrl = PidController(PidGains(args.kp, args.ki, args.kd))
    log, _ = follow(p, traj, ctrl, source=make_state_source(args.estimator, p),
                    rng=np.random.default_rng(args.seed))
    rows = ["t,ref,s,s_est,v_est,u"] + [
        ",".join(repr(float(v)) for v in r) for r in zip(log.t, log.ref, log.s, log.s_est, log.v_est, log.u)
    ]
    run.path("follow.csv").write_text("\n".join(rows) + "\n")
    _dump(run.path("follow.json"), {"rmse": log.rmse, "controller": "Policy" if args.policy else "PID",
                                    "estimator": args.estimator})
    print(f"tracking rmse {log.rmse:.4f} rad")


def cmd_pipeline_run(args, run):
    from .control import PolicyModel, Strategy
    from .matclass import MlpModel, save_confidence_map, save_label_map
    from .pipeline import default_strategy, run_pipeline

    strategy = Strategy.load(run.input(args.strategy)) if args.strategy else default_strategy()
    policy = PolicyModel.load(run.input(args.policy)) if args.policy else None
    classifier = MlpModel.load(run.input(args.classifier)) if args.classifier else None
    controller = "Policy" if policy is not None else "PID"
    res = run_pipeline(args.seed, strategy, controller, args.estimator, policy, classifier)
    res.report.save(run.out)
    save_label_map(res.label_map, run.path("label_map.png"), run.path("label_legend.json"))
    save_confidence_map(res.confidence, run.path("confidence.png"))
    _dump(run.path("plan.json"), {"strategy": strategy.to_json(), "scene_macro_f1": res.scene_macro_f1,
                                  "targets": [t.to_json() for t in res.targets]})
    rep = res.report
    print(f"{rep.n_completed}/{len(rep.picks)} picks completed in {rep.total_time_s:.2f} s simulated time")


# --------------------------------------------------------------------------
# parser


def _common(p, out_required=True, seed=True):
    p.add_argument("--out", required=out_required, help="output directory")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option defaults; explicit flags win")


def build_parser():
    parser = _Parser(prog="coarsesort", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    leaves = {}

    def leaf(parent, name, fn, path, **kw):
        p = parent.add_parser(name, **kw)
        p.set_defaults(func=fn, command_path=path)
        leaves[tuple(path)] = p
        return p

    p = leaf(sub, "bands", cmd_bands, ["bands"], help="print the filter band table")
    p.add_argument("--config")

    p = leaf(sub, "synth-scene", cmd_synth_scene, ["synth-scene"], help="generate synthetic labelled cubes")
    _common(p)
    p.add_argument("--n-scenes", type=int, default=1)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--swir-only", action="store_true", help="classes differ only in SWIR channels")
    p.add_argument("--series", action="store_true", help="also write a misaligned raw exposure series")
    p.add_argument("--series-size", type=int, default=256)

    p = leaf(sub, "register", cmd_register, ["register"], help="register an exposure series into a cube")
    _common(p)
    p.add_argument("--series", required=True, help="directory with vis_<CAMERA>.png and filter_XX.png files")
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--thresh", type=float, default=3.0)

    cls = sub.add_parser("classify", help="material classifier").add_subparsers(
        dest="action", required=True, parser_class=_Parser)

    def mlp_opts(p):
        p.add_argument("--hidden", type=int, nargs="+", default=[64])
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--batch", type=int, default=128)
        p.add_argument("--lr", type=float, default=0.05)
        p.add_argument("--bands", type=int, nargs="+")
        p.add_argument("--test-frac", type=float, default=0.2)

    p = leaf(cls, "train", cmd_classify_train, ["classify", "train"])
    _common(p)
    p.add_argument("--cube", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    mlp_opts(p)
    p = leaf(cls, "eval", cmd_classify_eval, ["classify", "eval"])
    _common(p, out_required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--cube", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p = leaf(cls, "infer", cmd_classify_infer, ["classify", "infer"])
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cube", required=True)
    p = leaf(cls, "ablate", cmd_classify_ablate, ["classify", "ablate"])
    _common(p)
    p.add_argument("--cube", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--subsets", nargs="+", default=["all", "swir", "vis"], choices=sorted(BAND_SUBSETS))
    mlp_opts(p)

    plant = sub.add_parser("plant", help="simulated hydraulic joint").add_subparsers(
        dest="action", required=True, parser_class=_Parser)

    def plant_opts(p):
        _common(p)
        p.add_argument("--params", help="plant parameter JSON (default: canonical)")
        p.add_argument("--dt", type=float, default=0.01)
        p.add_argument("--duration", type=float, default=120.0)
        p.add_argument("--start-length", type=float, help="initial cylinder length [m]")

    p = leaf(plant, "run", cmd_plant_run, ["plant", "run"])
    plant_opts(p)
    p.add_argument("--commands", help="file of commands, one per step")
    p.add_argument("--constant", type=float, default=0.0)
    p.add_argument("--no-safety", action="store_true")
    p = leaf(plant, "chirp", cmd_plant_chirp, ["plant", "chirp"])
    plant_opts(p)
    p.add_argument("--amp-start", type=float, default=0.05)
    p.add_argument("--amp-end", type=float, default=0.6)
    p.add_argument("--f0", type=float, default=0.1)
    p.add_argument("--f1", type=float, default=1.5)
    p = leaf(plant, "collect", cmd_plant_collect, ["plant", "collect"])
    plant_opts(p)
    p.add_argument("--excitation", choices=["canonical", "random-walk"], default="canonical")
    p.add_argument("--amp-end", type=float, default=0.6)
    p.add_argument("--step-std", type=float, default=0.03)

    pred = sub.add_parser("predictor", help="recurrent motion predictor").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = leaf(pred, "train", cmd_predictor_train, ["predictor", "train"])
    _common(p)
    p.add_argument("--log", nargs="+", help="training logs (default: canonical chirp segments)")
    p.add_argument("--amp-end", type=float, default=0.6)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p = leaf(pred, "eval", cmd_predictor_eval, ["predictor", "eval"])
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--zero-temperature", action="store_true", help="replace the oil-temperature input")
    p.add_argument("--zero-temperature-value", type=float, default=0.0)
    p = leaf(pred, "gradcheck", cmd_predictor_gradcheck, ["predictor", "gradcheck"])
    _common(p, out_required=False)
    p.add_argument("--model")
    p.add_argument("--log")
    p.add_argument("--start", type=int, default=100)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--n-params", type=int, default=120)

    ctl = sub.add_parser("controller", help="joint controllers").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = leaf(ctl, "train", cmd_controller_train, ["controller", "train"])
    _common(p)
    p.add_argument("--predictor", required=True)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lookahead", type=int, default=5)
    p.add_argument("--hidden", type=int, default=32)
    p = leaf(ctl, "run", cmd_controller_run, ["controller", "run"])
    _common(p)
    p.add_argument("--params")
    p.add_argument("--policy", help="policy JSON; PID when omitted")
    p.add_argument("--estimator", choices=["Direct", "Markers"], default="Direct")
    p.add_argument("--start", type=float, default=-0.5)
    p.add_argument("--target", type=float, default=0.5)
    p.add_argument("--vmax", type=float, default=0.5)
    p.add_argument("--amax", type=float, default=0.5)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--kp", type=float, default=20.0)
    p.add_argument("--ki", type=float, default=60.0)
    p.add_argument("--kd", type=float, default=0.3)

    pipe = sub.add_parser("pipeline", help="end-to-end sorting episode").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = leaf(pipe, "run", cmd_pipeline_run, ["pipeline", "run"])
    _common(p)
    p.add_argument("--strategy", help="strategy JSON {priority, min_area, min_confidence}")
    p.add_argument("--policy", help="use a trained policy instead of PID")
    p.add_argument("--classifier", help="pre-trained classifier JSON")
    p.add_argument("--estimator", choices=["Direct", "Markers"], default="Direct")
    return parser, leaves


def parse(argv):
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        cfg = json.loads(cfg_path.read_text())
        if not isinstance(cfg, dict):
            raise InvalidInputError("config file must hold a JSON object")
        leaf = leaves[tuple(args.command_path)]
        known = {a.dest for a in leaf._actions}
        unknown = set(k.replace("-", "_") for k in cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        leaf.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (FileNotFoundError, InvalidInputError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        run = Run(args, argv)
        args.func(args, run)
        code = EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, InvalidInputError, json.JSONDecodeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, RegistrationFailed, AlgorithmFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_ALGO
    if run is not None:
        run.write_manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
