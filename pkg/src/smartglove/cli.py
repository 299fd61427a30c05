"""smartglove command line.

Config precedence: built-in defaults < ``--config`` JSON < command-line flags.
Each run writes its resolved config to ``<out>/config.json``.  On failure a
single line ``error: <category>: <message>`` goes to stderr.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import threading
from dataclasses import asdict, fields

import numpy as np

log = logging.getLogger("smartglove")

DEFAULT_CONFIG = {
    "seed": 0,
    "model": {},
    "train": {"epochs": 30, "lr": 1e-3, "batch_size": 64, "beta": 0.5, "lr_schedule": "constant"},
    "data": {"stride": 2, "baseline_correct": False, "baseline_window": 400},
    "eval": {"scheme": "kfold10", "retrain": False},
    "sweep": {"noise": [0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12], "mask": [0, 1, 2, 3],
              "scale": [0.0, 0.25, 0.5, 0.75, 1.0]},
    "head": {"hidden": 64, "epochs": 100, "lr": 1e-3},
    "serve": {"queue_size": 256, "overflow": "drop-oldest", "tap_threshold": 0.04},
}


class ConfigError(ValueError):
    category = "config-error"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"error: usage: {message}\n")


# ---------------------------------------------------------------- config

def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k != "model":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    from .glovepose import ModelConfig
    known = {f.name for f in fields(ModelConfig)}
    bad = set(cfg["model"]) - known
    if bad:
        raise ConfigError(f"unknown config key(s) model.{sorted(bad)}")
    return cfg


def _override(cfg, section, key, value):
    if value is not None:
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value


def _write_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_config(cfg, multitask=False):
    from .glovepose import ModelConfig
    d = dict(cfg["model"])
    if multitask:
        d["multitask_flags_dim"] = 3
    try:
        return ModelConfig(**d).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _train_config(cfg):
    from .glovepose import TrainConfig
    t = cfg["train"]
    return TrainConfig(epochs=int(t["epochs"]), lr=float(t["lr"]), batch_size=int(t["batch_size"]),
                       beta=float(t["beta"]), seed=int(cfg["seed"]), lr_schedule=str(t["lr_schedule"]))


# ---------------------------------------------------------------- data

def _read(paths):
    from .synth import read_dataset
    return [read_dataset(p) for p in paths]


def _features(ds, cfg):
    from .signal import baseline_correct, frame_features
    feats = frame_features(ds.frames)
    if cfg["data"]["baseline_correct"]:
        feats[:, :25] = baseline_correct(feats[:, :25], int(cfg["data"]["baseline_window"]))
    return feats


def _window_dataset(files, cfg, stride=None, require_angles=True):
    from .glovepose import WindowDataset
    segs, groups = [], []
    for ds in files:
        if ds.angles is None and require_angles:
            raise ConfigError("dataset has no ground-truth angle columns")
        segs.append((_features(ds, cfg), ds.angles if ds.angles is not None else np.zeros((len(ds), 22))))
        groups.append(f"{ds.subject}\x1f{ds.session}")
    stride = int(cfg["data"]["stride"]) if stride is None else stride
    return WindowDataset.from_segments(segs, stride=stride, groups=groups)


def _write_training_report(bundle, path):
    meta = bundle.metadata
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "regression_loss", "flag_loss"])
        for e, (tot, reg, fl) in enumerate(zip(meta["loss_curve"], meta["reg_curve"], meta["flag_curve"]), 1):
            w.writerow([e, repr(tot), repr(reg), repr(fl)])


# ---------------------------------------------------------------- commands

def cmd_synth_gen(args, cfg):
    from .synth import (random_class_poses, synthesize_class_recording, synthesize_recording,
                        synthesize_typing, write_dataset)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    written = []
    if args.mode == "classes":
        poses = random_class_poses(args.classes, int(rng.integers(2**31)), args.intra_std)
    for s in range(args.subjects):
        for k in range(args.sessions):
            seed = int(rng.integers(2**31))
            subject, session = f"S{s + 1}", str(k + 1)
            if args.mode == "motion":
                ds = synthesize_recording(seed, args.duration_s, subject, session,
                                          gain_jitter=args.gain_jitter, drift_per_s=args.drift_per_s)
            elif args.mode == "classes":
                ds = synthesize_class_recording(seed, poses, args.hold_s, args.intra_std,
                                                repeats=args.repeats, subject=subject, session=session)
            else:
                ds, _, _ = synthesize_typing(seed, args.taps)
                ds.subject, ds.session = subject, session
            path = os.path.join(args.out, f"{subject}_s{session}.sgd")
            write_dataset(ds, path)
            written.append(path)
    _write_config(cfg, args.out)
    print("\n".join(written))
    return 0


def cmd_train(args, cfg, multitask=False):
    from .augment import multitask_train
    from .glovepose import save_bundle, train
    files = _read(args.data)
    data = _window_dataset(files, cfg)
    mcfg = _model_config(cfg, multitask)
    tcfg = _train_config(cfg)
    _write_config(cfg, args.out)
    if multitask:
        bundle = multitask_train(data, mcfg, tcfg)
    else:
        bundle = train(data, mcfg, tcfg)
    bundle.metadata["data"] = [os.path.basename(p) for p in args.data]
    path = os.path.join(args.out, "model.sgb")
    save_bundle(bundle, path)
    _write_training_report(bundle, os.path.join(args.out, "training_report.csv"))
    print(path)
    return 0


def cmd_train_head(args, cfg):
    from .glovepose import load_bundle
    from .heads import HeadConfig, attach_head, save_head, train_head, write_label_map
    cores = [load_bundle(p) for p in args.core]
    files = _read(args.data)
    h = cfg["head"]
    hcfg = HeadConfig(args.num_classes, int(h["hidden"]), uses_both_hands=len(cores) == 2, seed=int(cfg["seed"]))
    clf = attach_head(cores, hcfg)
    if len(cores) == 2:
        if len(files) % 2:
            raise ConfigError("two-hand heads need left/right file pairs")
        pairs = [(files[i], files[i + 1]) for i in range(0, len(files), 2)]
    else:
        pairs = [(f,) for f in files]
    feats, labels = [], []
    for group in pairs:
        hand_windows = []
        for ds in group:
            d = _window_dataset([ds], cfg, stride=int(args.stride), require_angles=False)
            hand_windows.append(d.windows(np.arange(len(d))))
            lab = ds.labels[d.starts + d.length - 1] if ds.labels is not None else None
        if lab is None:
            raise ConfigError("head training data needs a label column")
        keep = lab >= 0
        feats.append(clf.core_features([w[keep] for w in hand_windows]))
        labels.append(lab[keep])
    train_head(clf, features=np.concatenate(feats), labels=np.concatenate(labels),
               epochs=int(h["epochs"]), lr=float(h["lr"]))
    _write_config(cfg, args.out)
    path = os.path.join(args.out, "head.sgb")
    save_head(clf, path)
    write_label_map(os.path.join(args.out, "labels.txt"), [f"class_{i}" for i in range(args.num_classes)])
    print(path)
    return 0


def cmd_eval(args, cfg):
    from .evalharness import regression_report, split, write_json, write_table_csv
    from .glovepose import load_bundle, train
    bundle = load_bundle(args.model)
    files = _read(args.data)
    data = _window_dataset(files, cfg, stride=int(args.stride))
    groups = np.array([g.split("\x1f") for g in data.groups])
    scheme = cfg["eval"]["scheme"]
    plan = split(len(data), scheme, seed=int(cfg["seed"]), subjects=groups[:, 0], sessions=groups[:, 1])
    preds = np.zeros((len(data), 22))
    truth = data.targets()
    folds = []
    for k, (tr, te) in enumerate(plan.folds()):
        model = bundle
        if cfg["eval"]["retrain"]:
            model = train(data.subset(tr), bundle.config, _train_config(cfg))
        preds[te] = model.predict(data.windows(te))
        r = regression_report(preds[te], truth[te])
        folds.append({"fold": str(plan.fold_names[k]), "n_test": int(len(te)),
                      "average_rmse_deg": r.average_rmse})
    rep = regression_report(preds, truth, folds, {"plan": plan.to_dict(), "model": os.path.basename(args.model),
                                                 "retrain": bool(cfg["eval"]["retrain"])})
    _write_config(cfg, args.out)
    write_table_csv(rep, os.path.join(args.out, "joint_table.csv"))
    write_json(rep.to_dict(), os.path.join(args.out, "report.json"))
    print(f"average RMSE {rep.average_rmse:.4f} deg, average R2 {rep.average_r2:.3f} %")
    return 0


def cmd_sweep(args, cfg):
    from .evalharness import robustness_sweep, sweep_cells, write_json, write_sweep_csv
    from .glovepose import load_bundle
    bundles = {"plain": load_bundle(args.plain), "augmented": load_bundle(args.aug)}
    data = _window_dataset(_read(args.data), cfg, stride=int(args.stride))
    s = cfg["sweep"]
    res = robustness_sweep(bundles, data.windows(np.arange(len(data))), data.targets(), seed=int(cfg["seed"]),
                           cells=sweep_cells(s["noise"], s["mask"], s["scale"]))
    _write_config(cfg, args.out)
    write_sweep_csv(res, os.path.join(args.out, "sweep.csv"))
    write_json(res, os.path.join(args.out, "sweep.json"))
    p = res["summary"]["plain"]["perturbed_average_rmse_deg"]
    a = res["summary"]["augmented"]["perturbed_average_rmse_deg"]
    print(f"perturbed-average RMSE: plain {p:.4f} deg, augmented {a:.4f} deg, ratio {a / p:.3f}")
    return 0


def cmd_infer(args, cfg):
    from .glovepose import load_bundle, predict_stream
    from .schema import JOINT_NAMES
    from .synth import read_dataset
    bundle = load_bundle(args.model)
    ds = read_dataset(args.data)
    res = predict_stream(ds.frames, bundle)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms", *JOINT_NAMES])
        for t, row in zip(res.t_ms, res.angles):
            w.writerow([int(t), *[repr(float(v)) for v in row]])
    print(f"{len(res.angles)} predictions; median latency {res.latency['p50_us'] or 0:.1f} us "
          f"(p95 {res.latency['p95_us'] or 0:.1f} us)")
    return 0


def cmd_serve(args, cfg):
    from .glovepose import load_bundle
    from .heads import load_head
    from .stream import ServeConfig, serve
    bundle = load_bundle(args.model)
    clf = load_head(args.head, [bundle]) if args.head else None
    s = cfg["serve"]
    scfg = ServeConfig(queue_size=int(s["queue_size"]), overflow=s["overflow"],
                       tap_fingers=tuple(args.tap_fingers or ()), tap_threshold=float(s["tap_threshold"]))
    stats = serve(args.listen, bundle, scfg, clf)
    for st in stats:
        print(json.dumps({"session": st.to_dict()}, sort_keys=True), file=sys.stderr)
    return 0


def cmd_replay(args, cfg):
    from .stream import parse_endpoint, replay
    lines = replay(args.data, args.rate)
    if not args.connect:
        for line in lines:
            sys.stdout.write(line)
        sys.stdout.flush()
        return 0
    import socket
    ep = parse_endpoint(args.connect)
    if ep[0] != "tcp":
        raise ConfigError("--connect needs tcp:HOST:PORT")
    with socket.create_connection((ep[1], ep[2])) as sock:
        rfile = sock.makefile("r", encoding="utf-8")

        def pump():
            for ev in rfile:
                sys.stdout.write(ev)
            sys.stdout.flush()

        th = threading.Thread(target=pump, daemon=True)
        th.start()
        for line in lines:
            sock.sendall(line.encode("utf-8"))
        sock.shutdown(socket.SHUT_WR)
        th.join()
    return 0


def cmd_taps(args, cfg):
    from .schema import tap_finger_channel
    from .signal import detect_taps, rest_value
    from .synth import read_dataset
    ds = read_dataset(args.data)
    events = []
    for f in args.fingers:
        _, ch = tap_finger_channel(f)
        series = ds.frames.hsy[:, ch]
        events += detect_taps(series, rest_value(series), float(cfg["serve"]["tap_threshold"]), f, ds.frames.t_ms)
    events.sort(key=lambda e: (e.timestamp_ms, e.finger_index))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "taps.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ms", "finger"])
        for e in events:
            w.writerow([e.timestamp_ms, e.finger_index])
    print(f"{len(events)} taps")
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="smartglove", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="run directory")

    sp = sub.add_parser("synth-gen", help="generate synthetic recordings")
    common(sp)
    sp.add_argument("--mode", choices=("motion", "classes", "typing"), default="motion")
    sp.add_argument("--subjects", type=int, default=1)
    sp.add_argument("--sessions", type=int, default=1)
    sp.add_argument("--duration-s", type=float, default=600.0)
    sp.add_argument("--gain-jitter", type=float, default=0.0)
    sp.add_argument("--drift-per-s", type=float, default=0.0)
    sp.add_argument("--classes", type=int, default=34)
    sp.add_argument("--intra-std", type=float, default=3.0)
    sp.add_argument("--hold-s", type=float, default=4.0)
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--taps", type=int, default=100)

    for name, helptext in (("train", "train the pose model"),
                           ("pretrain-aug", "augmented multitask pretraining")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--data", nargs="+", required=True)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lr-schedule", choices=("constant", "cosine"))
        sp.add_argument("--hidden", type=int)
        sp.add_argument("--stride", type=int)
        sp.add_argument("--baseline-correct", action="store_true", default=None)

    sp = sub.add_parser("train-head", help="train a classification head on frozen core(s)")
    common(sp)
    sp.add_argument("--core", nargs="+", required=True, help="one core, or left and right cores")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--num-classes", type=int, required=True)
    sp.add_argument("--stride", type=int, default=5)
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("eval", help="cross-validated evaluation")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--scheme", help="kfold<k>, loso or loseo")
    sp.add_argument("--retrain", action="store_true", default=None)
    sp.add_argument("--stride", type=int, default=1)

    sp = sub.add_parser("sweep", help="robustness sweep, plain vs augmented")
    common(sp)
    sp.add_argument("--plain", required=True)
    sp.add_argument("--aug", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--stride", type=int, default=1)

    sp = sub.add_parser("infer", help="offline sliding-window inference")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)

    sp = sub.add_parser("serve", help="streaming inference over stdio or TCP")
    common(sp, out=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--listen", default="stdio", help="stdio or tcp:HOST:PORT")
    sp.add_argument("--head")
    sp.add_argument("--tap-fingers", type=int, nargs="*")
    sp.add_argument("--queue-size", type=int)
    sp.add_argument("--overflow", choices=("drop-oldest", "block"))

    sp = sub.add_parser("replay", help="replay a dataset file as wire frames")
    common(sp, out=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--rate", type=float, default=0.0, help="rate multiplier, 0 = as fast as possible")
    sp.add_argument("--connect", help="tcp:HOST:PORT of a running server")

    sp = sub.add_parser("taps", help="detect fingertip taps in a recording")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--fingers", type=int, nargs="+", default=list(range(6, 11)))
    sp.add_argument("--threshold", type=float)
    return p


def _resolve(args):
    cfg = load_config(getattr(args, "config", None))
    _override(cfg, None, "seed", getattr(args, "seed", None))
    _override(cfg, "train", "epochs", getattr(args, "epochs", None) if args.command != "train-head" else None)
    _override(cfg, "train", "lr", getattr(args, "lr", None))
    _override(cfg, "train", "lr_schedule", getattr(args, "lr_schedule", None))
    if getattr(args, "hidden", None) is not None:
        cfg["model"]["hidden_size"] = args.hidden
    if args.command in ("train", "pretrain-aug"):
        _override(cfg, "data", "stride", args.stride)
        _override(cfg, "data", "baseline_correct", args.baseline_correct)
    if args.command == "train-head":
        _override(cfg, "head", "epochs", args.epochs)
    if args.command == "eval":
        _override(cfg, "eval", "scheme", args.scheme)
        _override(cfg, "eval", "retrain", args.retrain)
    if args.command == "serve":
        _override(cfg, "serve", "queue_size", args.queue_size)
        _override(cfg, "serve", "overflow", args.overflow)
    if args.command == "taps":
        _override(cfg, "serve", "tap_threshold", args.threshold)
    return cfg


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "pretrain-aug": lambda a, c: cmd_train(a, c, multitask=True),
    "train-head": cmd_train_head,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "infer": cmd_infer,
    "serve": cmd_serve,
    "replay": cmd_replay,
    "taps": cmd_taps,
}


def error_category(exc):
    from .glovepose import ShapeMismatchError, TrainingDivergedError
    from .signal import ChannelMismatchError, QuaternionNormError, RestCalibrationError
    from .synth import AdapterError, DatasetFormatError
    cat = getattr(exc, "category", None)
    if cat:
        return cat
    for types, name in (((DatasetFormatError, AdapterError), "data-format"),
                        ((TrainingDivergedError,), "training-diverged"),
                        ((RestCalibrationError,), "rest-calibration"),
                        ((QuaternionNormError, ChannelMismatchError, ShapeMismatchError), "input-shape"),
                        ((FileNotFoundError, PermissionError, IsADirectoryError), "io-error"),
                        ((OSError,), "io-error"),
                        ((ValueError,), "invalid-value")):
        if isinstance(exc, types):
            return name
    return "internal-error"


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except KeyboardInterrupt:
        print("error: interrupted: keyboard interrupt", file=sys.stderr)
        return 130
    except Exception as exc:  # one machine-parsable line per failure
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {error_category(exc)}: {msg}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
