"""``edgecare`` command-line tool.

Each subcommand is one stage of the pipeline and writes its artifacts plus a
``manifest.json`` into ``--out``. Settings come from an optional JSON file
(``--config``) whose keys are the subcommand's long flag names; explicit flags
win over the file. Failures print one JSON line on stderr and exit with

* 2 for configuration errors,
* 3 for data errors (unreadable or malformed inputs),
* 4 for violated internal invariants.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen, nn, sim, stream, transfer
from .metrics import evaluate

log = logging.getLogger("edgecare")

EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config_error(msg):
    return CliError(EXIT_CONFIG, msg)


def _data_error(msg):
    return CliError(EXIT_DATA, msg)


# ---------------------------------------------------------------- manifest

def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_manifest(out: Path, argv, args, settings: dict, artifacts: list[Path]) -> Path:
    """One manifest per output directory; no timestamps, so equal runs give equal manifests."""
    config_hashes = {"settings": _canonical_hash(settings)}
    if args.config:
        config_hashes["config_file"] = _sha256_file(Path(args.config))
    manifest = {
        "tool": "edgecare",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "seeds": {"seed": args.seed},
        "settings": settings,
        "config_hashes": config_hashes,
        "artifacts": {p.name: _sha256_file(p) for p in sorted(artifacts)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _out_dir(args) -> Path:
    if not args.out:
        raise _config_error(f"{args.command} needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_seed(args) -> int:
    if args.seed is None:
        raise _config_error(f"{args.command} needs --seed N (no entropy-based default)")
    return args.seed


# ---------------------------------------------------------------- inputs

def _load_stream(path) -> datagen.LabeledStream:
    try:
        return datagen.load_stream(path)
    except FileNotFoundError as exc:
        raise _data_error(f"stream file not found: {path}") from exc
    except datagen.StreamFormatError as exc:
        raise _data_error(f"{path}: {exc}") from exc


def _load_checkpoint(path) -> transfer.ModelCheckpoint:
    try:
        return transfer.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise _data_error(f"checkpoint not found: {path}") from exc
    except transfer.CheckpointError as exc:
        raise _data_error(f"{path}: {type(exc).__name__}: {exc}") from exc


def _spec_for(domain: str, seed: int, channels: int, noise: float | None, spec_file) -> datagen.GeneratorSpec:
    if spec_file:
        try:
            spec = datagen.GeneratorSpec.from_dict(json.loads(Path(spec_file).read_text()))
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise _config_error(f"bad generator spec {spec_file}: {exc}") from exc
        return datagen.GeneratorSpec.from_dict({**spec.to_dict(), "seed": spec.seed + seed})
    make = datagen.source_spec if domain == "source" else datagen.target_spec
    base = make()
    kwargs = {"channels": channels}
    if noise is not None:
        kwargs["noise_sigma"] = noise
    return make(seed=base.seed + seed, **kwargs)


def _generated(domain, seed, args, frames_per_class, segment_len):
    spec = _spec_for(domain, seed, args.channels, args.noise_sigma, args.spec)
    segs = datagen.balanced_segments(len(spec.classes), frames_per_class, segment_len, spec.seed)
    return spec, datagen.generate(spec, segs)


def _class_names(args, default, n):
    names = [c for c in args.classes.split(",") if c] if args.classes else list(default)
    if len(names) < n:
        raise _data_error(f"stream has label {n - 1} but only {len(names)} class names")
    return names


# ---------------------------------------------------------------- subcommands

def cmd_datagen(args, argv):
    seed = _require_seed(args)
    out = _out_dir(args)
    spec, st = _generated(args.domain, seed, args, args.frames_per_class, args.segment_len)
    path = out / "stream.tlds"
    datagen.save_stream(st, path)
    spec_path = _write_json(out / "spec.json", spec.to_dict())
    settings = {"domain": args.domain, "frames_per_class": args.frames_per_class,
                "segment_len": args.segment_len, "spec_fingerprint": spec.fingerprint()}
    write_manifest(out, argv, args, settings, [path, spec_path])
    print(f"wrote {len(st)} frames ({', '.join(spec.class_names)}) to {path}")
    return 0


def _split(st, args, seed):
    try:
        return datagen.split(st, args.train_fraction, seed, args.window)
    except ValueError as exc:
        raise _data_error(str(exc)) from exc


def cmd_train(args, argv):
    seed = _require_seed(args)
    out = _out_dir(args)
    if args.data:
        st = _load_stream(args.data)
        names = _class_names(args, datagen.source_spec().class_names, int(st.labels.max()) + 1)
        channels = st.frames.shape[1]
    else:
        spec, st = _generated("source", seed, args, args.frames_per_class, args.segment_len)
        names, channels = spec.class_names, spec.channels
    train, hold = _split(st, args, seed)
    cfg = transfer.FineTuneConfig(args.epochs, args.batch_size, args.learning_rate, seed)
    layers = transfer.reference_architecture(len(names), in_channels=channels)
    model, history = transfer.pretrain(layers, names, (train.frames, train.labels), (hold.frames, hold.labels), cfg)
    ck = out / "model.tlec"
    transfer.save_checkpoint(model, names, {"trained_on": args.data or "synthetic-source",
                                            "epochs": args.epochs, "seed": seed}, ck)
    hist = _write_json(out / "history.json", [vars(h) for h in history])
    write_manifest(out, argv, args, {"train": cfg.to_dict(), "classes": names}, [ck, hist])
    print(f"checkpoint {ck} (best epoch {transfer.best_epoch(history)})")
    return 0


def _policy(spec: str) -> transfer.FreezePolicy:
    try:
        return transfer.resolve_policy(spec)
    except FileNotFoundError as exc:
        raise _config_error(f"policy file not found: {spec}") from exc
    except (ValueError, TypeError) as exc:
        raise _config_error(f"bad freeze policy {spec!r}: {exc}") from exc


def cmd_finetune(args, argv):
    seed = _require_seed(args)
    out = _out_dir(args)
    policy = _policy(args.policy)
    ck = _load_checkpoint(args.checkpoint)
    if args.data:
        st = _load_stream(args.data)
        names = _class_names(args, datagen.target_spec().class_names, int(st.labels.max()) + 1)
    else:
        spec, st = _generated("target", seed, args, args.frames_per_class, args.segment_len)
        names = spec.class_names
    if st.frames.shape[1] != ck.architecture[0]["in_channels"]:
        raise _data_error(f"stream has {st.frames.shape[1]} channels, checkpoint expects "
                          f"{ck.architecture[0]['in_channels']}")
    train, hold = _split(st, args, seed)
    model = transfer.realign_head(ck, names, seed)
    try:
        budget = transfer.apply_freeze(model, policy)
    except transfer.PolicyError as exc:
        raise _config_error(str(exc)) from exc
    cfg = transfer.FineTuneConfig(args.epochs, args.batch_size, args.learning_rate, seed, names)
    best, history = transfer.fine_tune(model, policy, (train.frames, train.labels), (hold.frames, hold.labels), cfg)
    frozen = policy.frozen_layers(model)
    for layer, slot, arr in model.state_arrays():
        if layer in frozen and transfer.tensor_digest(arr) != transfer.tensor_digest(
                (best.params if slot in best.params.get(layer, {}) else best.buffers)[layer][slot]):
            raise CliError(EXIT_INVARIANT, f"frozen tensor {layer}.{slot} changed during fine-tuning")
    path = out / "model.tlec"
    transfer.save_checkpoint(best, names, {"trained_on": args.data or "synthetic-target",
                                           "epochs": args.epochs, "seed": seed}, path)
    hist = _write_json(out / "history.json", [vars(h) for h in history])
    bud = _write_json(out / "budget.json", {"policy": policy.to_dict(), **budget.to_dict()})
    write_manifest(out, argv, args, {"finetune": cfg.to_dict(), "policy": policy.to_dict()}, [path, hist, bud])
    print(f"checkpoint {path}: trainable {budget.trainable}/{budget.total} "
          f"({budget.trainable_fraction:.4f}), best epoch {transfer.best_epoch(history)}")
    return 0


def cmd_budget(args, argv):
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint).to_model()
    else:
        model = nn.Model(transfer.reference_architecture(args.num_classes, in_channels=args.channels))
    names = args.policy or ["case1", "case2", "case3"]
    policies = {name: _policy(name) for name in names}
    try:
        rows = transfer.budget_table(model, policies)
    except transfer.PolicyError as exc:
        raise _config_error(str(exc)) from exc
    print(transfer.format_budget_table(rows))
    if args.out:
        out = _out_dir(args)
        path = _write_json(out / "budget.json", rows)
        write_manifest(out, argv, args, {"policies": names, "checkpoint": args.checkpoint}, [path])
    return 0


def cmd_simulate(args, argv):
    seed = _require_seed(args)
    out = _out_dir(args)
    cfg = sim.load_scenario(args.scenario) if args.scenario else sim.default_scenario()
    result = sim.run_simulation(cfg, seed, baseline=args.baseline)
    artifacts = [
        _write_text(out / "event_log.jsonl", result.log_jsonl()),
        _write_json(out / "ledger.json", result.ledger.to_dict()),
        _write_json(out / "actions.json", result.actions),
        _write_json(out / "cloud_storage.json", result.cloud_storage),
    ]
    if result.report is not None:
        artifacts.append(_write_text(out / "report.json", result.report.to_json() + "\n"))
    if result.checkpoint:
        path = out / "edge_model.tlec"
        path.write_bytes(result.checkpoint)
        artifacts.append(path)
    write_manifest(out, argv, args, {"scenario": cfg, "baseline": args.baseline}, artifacts)
    ledger = result.ledger
    print(f"boundary_bytes={ledger.boundary_bytes} delivered_bytes={ledger.delivered_bytes} "
          f"rejected={ledger.rejected} mAP={result.report.mean_ap if result.report else float('nan'):.4f}")
    return 0


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def cmd_evaluate(args, argv):
    out = _out_dir(args)
    ck = _load_checkpoint(args.checkpoint)
    st = _load_stream(args.data)
    model = ck.to_model()
    if st.labels.size and st.labels.max() >= model.num_classes:
        raise _data_error(f"stream label {int(st.labels.max())} outside the {model.num_classes}-class head")
    try:
        cfg = stream.WindowConfig(args.window, args.stride)
        events, scores = stream.run_stream(model, st.frames, cfg, class_names=ck.label_space,
                                           stream_id=Path(args.data).stem)
    except nn.ShapeError as exc:
        raise _data_error(str(exc)) from exc
    except ValueError as exc:
        raise _config_error(str(exc)) from exc
    report = evaluate(scores, st.labels, ck.label_space)
    rep = _write_text(out / "report.json", report.to_json() + "\n")
    ev = _write_text(out / "events.jsonl", stream.events_to_jsonl(events))
    write_manifest(out, argv, args, {"window": args.window, "stride": args.stride}, [rep, ev])
    print(f"mAP={report.mean_ap:.4f} frame_accuracy={report.frame_accuracy:.4f} events={len(events)}")
    return 0


# ---------------------------------------------------------------- parser

def _add_common(p, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="FILE", default=default,
                   help="JSON file of settings keyed by long flag name; explicit flags override it")
    p.add_argument("--seed", type=int, metavar="N", default=default,
                   help="base seed; every random stream is derived from it")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory for artifacts and manifest.json")


def _add_data_flags(p, frames_per_class, segment_len=48):
    p.add_argument("--frames-per-class", type=int, default=frames_per_class,
                   help="frames per class when generating data (default %(default)s)")
    p.add_argument("--segment-len", type=int, default=segment_len, help="frames per generated segment (default %(default)s)")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3,
                   help="1 for depth/thermal-like, 3 for RGB-like frames (default %(default)s)")
    p.add_argument("--noise-sigma", type=float, default=None, help="override the generator noise level")
    p.add_argument("--spec", metavar="FILE", default=None, help="GeneratorSpec JSON replacing the built-in domain")


def _add_train_flags(p, epochs, lr):
    p.add_argument("--data", metavar="FILE", default=None, help="TLDS stream; generated from --seed when omitted")
    p.add_argument("--classes", default=None, help="comma-separated class names for a --data stream")
    p.add_argument("--epochs", type=int, default=epochs, help="training epochs (default %(default)s)")
    p.add_argument("--batch-size", type=int, default=16, help="mini-batch size (default %(default)s)")
    p.add_argument("--learning-rate", type=float, default=lr, help="SGD step size (default %(default)s)")
    p.add_argument("--train-fraction", type=float, default=0.5,
                   help="share of windows used for training; the rest select the best epoch (default %(default)s)")
    p.add_argument("--window", type=int, default=8, help="split window length in frames (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgecare", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"edgecare {__version__}")
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("datagen", help="generate a labelled synthetic stream (TLDS file)")
    _add_common(p, suppress=True)
    p.add_argument("--domain", choices=("source", "target"), default="target",
                   help="five-class source or three-class target domain (default %(default)s)")
    _add_data_flags(p, 240)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="cloud-side training of the reference CNN")
    _add_common(p, suppress=True)
    _add_train_flags(p, 15, 0.02)
    _add_data_flags(p, 1440, segment_len=16)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="realign the head and fine-tune under a freeze policy")
    _add_common(p, suppress=True)
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="pre-trained TLEC checkpoint")
    p.add_argument("--policy", default="case3", help="case1, case2, case3 or a policy JSON file (default %(default)s)")
    _add_train_flags(p, 20, 0.02)
    _add_data_flags(p, 480, segment_len=96)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("budget", help="trainable-parameter report per freeze policy")
    _add_common(p, suppress=True)
    p.add_argument("--checkpoint", metavar="FILE", default=None,
                   help="model to analyse (default: reference architecture)")
    p.add_argument("--policy", action="append", default=None,
                   help="preset or policy file; repeat for several (default: all presets)")
    p.add_argument("--num-classes", type=int, default=3, help="head size of the reference model (default %(default)s)")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3, help="input channels (default %(default)s)")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("simulate", help="run the home/cloud/caregiver discrete-event simulation")
    _add_common(p, suppress=True)
    p.add_argument("--scenario", metavar="FILE", default=None, help="scenario JSON (default: built-in scenario)")
    p.add_argument("--baseline", action="store_true",
                   help="reference run in which the edge also streams raw frames to the cloud")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="sliding-window inference and frame-level mAP on a stream")
    _add_common(p, suppress=True)
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="TLEC checkpoint to evaluate")
    p.add_argument("--data", required=True, metavar="FILE", help="labelled TLDS stream")
    p.add_argument("--window", type=int, default=8, help="window length W in frames (default %(default)s)")
    p.add_argument("--stride", type=int, default=4, help="window stride S in frames (default %(default)s)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config(parser, argv):
    """Parse once to find --config, feed its keys in as defaults, parse again."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise _config_error(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise _config_error("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions} - {"help", "config"}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known:
            raise _config_error(f"unknown setting {key!r} for {args.command}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    parser.set_defaults(**{k: v for k, v in defaults.items() if k in ("seed", "out")})
    return parser.parse_args(argv)


def _setup_logging():
    level = os.environ.get("EDGECARE_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args, argv)
    except CliError as exc:
        return _fail(exc.code, "config" if exc.code == EXIT_CONFIG else "data" if exc.code == EXIT_DATA
                     else "invariant", exc)
    except (sim.ScenarioError, transfer.PolicyError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (datagen.StreamFormatError, transfer.CheckpointError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except sim.PrivacyViolation as exc:
        return _fail(EXIT_INVARIANT, "invariant", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except Exception as exc:  # anything else means a broken internal assumption
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INVARIANT, "invariant", f"{type(exc).__name__}: {exc}")
