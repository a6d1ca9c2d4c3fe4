"""Command line for synthesis, label utilities, toy training and inference.

Results are printed to stdout as JSON; progress goes to stderr.
Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .audit import summarize
from .config import ConfigError, EngineConfig, read_config
from .core import GridSpec, LabelMap, LabelMergeTable, default_protocol, dice_overlap, remap_labels
from .engine import Session, default_jobs, emit_dataset, fit_nonbrain_gmm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (io.NiftiError, ConfigError, KeyError, ValueError, OSError, json.JSONDecodeError)

log = logging.getLogger("groupseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def parse_grid(text: str, base: GridSpec | None = None) -> GridSpec:
    """``48``, ``48@3`` or ``64x48x48@2.5`` (shape, optional isotropic spacing in mm)."""
    m = re.fullmatch(r"(\d+)(?:x(\d+)x(\d+))?(?:@([0-9.]+))?", text.strip())
    if not m:
        raise UsageError(f"bad grid {text!r}; expected N, N@mm or AxBxC@mm")
    shape = (int(m[1]),) * 3 if m[2] is None else (int(m[1]), int(m[2]), int(m[3]))
    base = base or GridSpec()
    spacing = (float(m[4]),) * 3 if m[4] else base.spacing
    return GridSpec(shape, spacing, base.orientation)


def load_sessions(path) -> list[Session]:
    """Sessions file: a JSON list (or {"sessions": [...]}) of
    {"labels": path, "images": [paths], "id": name}; paths relative to the file."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    entries = doc["sessions"] if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: sessions must be a list")
    sessions = []
    for i, e in enumerate(entries):
        if "labels" not in e:
            raise ConfigError(f"{path}: sessions[{i}]: missing 'labels'")
        resolve = lambda p: str((path.parent / p).resolve())  # noqa: E731
        s = Session(
            label_path=resolve(e["labels"]),
            image_paths=[resolve(p) for p in e.get("images", [])],
            metadata=e.get("metadata", {}),
            session_id=e.get("id"),
        )
        s.load()
        sessions.append(s)
    return sessions


def _config(path) -> EngineConfig:
    return read_config(path) if path else EngineConfig.default()


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = _config(args.config)
    if args.grid:
        config = config.with_grid(parse_grid(args.grid, config.grid))
    if args.seed is not None:
        config.seed = int(args.seed)
    sessions = load_sessions(args.sessions)
    if not sessions:
        raise UsageError("the sessions file lists no sessions")
    manifest = emit_dataset(sessions, config, args.count, args.out, jobs=args.jobs or default_jobs())
    log.info("wrote %d samples to %s", args.count, args.out)
    _emit({"manifest": str(manifest), "count": args.count, "config_hash": config.hash()})
    return EXIT_OK


def cmd_remap(args) -> int:
    lm = io.read_volume(args.in_path, as_labels=True)
    out = remap_labels(lm, LabelMergeTable.from_json(args.table))
    io.write_volume(out, args.out)
    _emit({"out": str(args.out), "labels": sorted(int(k) for k in np.unique(out.data))})
    return EXIT_OK


def cmd_gmm_labels(args) -> int:
    image = io.read_volume(args.image)
    lm = io.read_volume(args.labels, as_labels=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = fit_nonbrain_gmm(image, lm, k=args.k, seed=args.seed)
    for w in caught:
        log.warning("%s", w.message)
    io.write_volume(out, args.out)
    added = sorted(int(k) for k in np.unique(out.data) if k > 1100)
    _emit({"out": str(args.out), "components": len(added), "labels": added, "warnings": [str(w.message) for w in caught]})
    return EXIT_OK


def cmd_train_toy(args) -> int:
    import torch

    from .net import GroupUNet, save_weights, train_toy, write_curve
    from .phantom import phantom_session, toy_grid

    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    config = _config(args.config)
    grid = parse_grid(args.grid, toy_grid()) if args.grid else toy_grid()
    config = config.with_grid(grid)
    torch.manual_seed(args.seed)
    session = load_sessions(args.sessions)[0] if args.sessions else phantom_session(seed=args.seed)
    protocol = default_protocol()
    net = GroupUNet(args.levels, args.features, args.first_features, len(protocol), seed=args.seed)
    history = train_toy(session, config, net, args.steps, lr=args.lr, seed=args.seed, protocol=protocol)
    save_weights(net, args.out_weights, protocol.ids, grid=grid.to_dict())
    if args.curve:
        write_curve(history, args.curve)
    _emit(
        {
            "weights": str(args.out_weights),
            "curve": str(args.curve) if args.curve else None,
            "steps": args.steps,
            "final_loss": history[-1]["loss"] if history else None,
        }
    )
    return EXIT_OK


def cmd_segment(args) -> int:
    from .net import load_weights, segment

    net, header = load_weights(args.weights)
    protocol = default_protocol()
    if header["n_classes"] != len(protocol):
        raise ValueError(f"weights predict {header['n_classes']} classes, protocol has {len(protocol)}")
    if args.grid:
        grid = parse_grid(args.grid)
    elif header.get("grid"):
        g = header["grid"]
        grid = GridSpec(g["shape"], g["spacing"], g["orientation"])
    else:
        raise UsageError("weights carry no grid; pass --grid")
    inputs = [io.read_volume(p) for p in args.inputs]
    out = segment(net, inputs, grid, protocol)
    io.write_volume(out, args.out)
    _emit({"out": str(args.out), "inputs": len(inputs)})
    return EXIT_OK


def cmd_dice(args) -> int:
    pred = io.read_volume(args.pred, as_labels=True)
    truth = io.read_volume(args.truth, as_labels=True)
    if args.merge:
        table = LabelMergeTable.evaluation_merge() if args.merge == "eval" else LabelMergeTable.from_json(args.merge)
        present = set(np.unique(pred.data).tolist()) | set(np.unique(truth.data).tolist())
        table = LabelMergeTable({**{k: k for k in present}, **table.mapping})
        pred = remap_labels(LabelMap(pred.data, pred.affine), table)
        truth = remap_labels(LabelMap(truth.data, truth.affine), table)
    if args.labels:
        labels = [int(x) for x in args.labels.split(",") if x.strip()]
    else:
        labels = sorted(int(k) for k in np.union1d(np.unique(pred.data), np.unique(truth.data)) if k != 0)
    scores = dice_overlap(pred, truth, labels)
    mean = float(np.mean(list(scores.values()))) if scores else None
    _emit({"per_label": {str(k): v for k, v in scores.items()}, "mean": mean})
    return EXIT_OK


def cmd_inspect(args) -> int:
    config = _config(args.config)
    if args.trace:
        traces = [io.read_trace(args.trace)]
    else:
        base = Path(args.manifest).parent
        traces = [io.read_trace(base / r["dir"] / "trace.json") for r in io.read_manifest(args.manifest)]
    _emit({"samples": len(traces), "rows": summarize(traces, config) if traces else {}})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groupseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser.add_argument(
        "--defaults",
        metavar="JSON",
        help="file of per-subcommand flag defaults, e.g. {\"synth\": {\"count\": 8}}; explicit flags win",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic training dataset")
    p.add_argument("--config", help="engine config JSON (default: shipped table)")
    p.add_argument("--sessions", required=True, help="sessions list JSON")
    p.add_argument("--count", type=int, default=1, help="number of samples")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available CPUs)")
    p.add_argument("--grid", help="working grid, e.g. 96@1.4 (default: config grid)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("remap", help="merge label IDs through a table")
    p.add_argument("--in", dest="in_path", required=True, help="input label map")
    p.add_argument("--table", required=True, help="merge table JSON")
    p.add_argument("--out", required=True, help="output label map")
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("gmm-labels", help="label non-brain voxels by an intensity mixture")
    p.add_argument("--image", required=True, help="co-registered scan")
    p.add_argument("--labels", required=True, help="brain label map")
    p.add_argument("--k", type=int, default=6, help="mixture components")
    p.add_argument("--seed", type=int, default=0, help="restart seed")
    p.add_argument("--out", required=True, help="output label map")
    p.set_defaults(func=cmd_gmm_labels)

    p = sub.add_parser("train-toy", help="train a small network on synthesized samples")
    p.add_argument("--config", help="engine config JSON (default: shipped table)")
    p.add_argument("--sessions", help="sessions list JSON (default: procedural phantom)")
    p.add_argument("--steps", type=int, default=2000, help="training steps (batch size 1)")
    p.add_argument("--grid", help="working grid (default 48@3)")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--levels", type=int, default=4, help="U-Net levels")
    p.add_argument("--features", type=int, default=12, help="features per convolution")
    p.add_argument("--first-features", type=int, default=1, help="features of the first convolution")
    p.add_argument("--seed", type=int, default=0, help="initialization and sampling seed")
    p.add_argument("--out-weights", required=True, help="weights file to write")
    p.add_argument("--curve", help="CSV file for the loss curve")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("segment", help="segment one or more aligned scans jointly")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("inputs", nargs="+", help="input scans (any number)")
    p.add_argument("--out", required=True, help="output label map")
    p.add_argument("--grid", help="working grid (default: stored with the weights)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("dice", help="per-label Dice between two label maps")
    p.add_argument("--pred", required=True, help="predicted label map")
    p.add_argument("--truth", required=True, help="reference label map")
    p.add_argument("--merge", help="merge table JSON applied to both, or 'eval' for the built-in one")
    p.add_argument("--labels", help="comma-separated label IDs (default: all non-zero present)")
    p.set_defaults(func=cmd_dice)

    p = sub.add_parser("inspect", help="summarize sampled parameters for range auditing")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest", help="dataset manifest.jsonl")
    g.add_argument("--trace", help="single trace.json")
    p.add_argument("--config", help="config whose bounds are reported (default: shipped table)")
    p.set_defaults(func=cmd_inspect)
    return parser


def _apply_defaults(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Load per-subcommand defaults from ``--defaults`` before the real parse."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--defaults")
    known, rest = pre.parse_known_args(argv)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((t for t in rest if t in subparsers.choices), None)
    if known.defaults and command:
        with open(known.defaults) as f:
            section = json.load(f).get(command, {})
        sub = subparsers.choices[command]
        unknown = set(section) - {a.dest for a in sub._actions}
        if unknown:
            raise UsageError(f"{known.defaults}: unknown {command} options {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in section:
                action.required = False
        sub.set_defaults(**section)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_defaults(parser, argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
        )
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as err:
        print(f"groupseg: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as err:
        print(f"groupseg: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else EXIT_USAGE
    except Exception as err:  # noqa: BLE001
        logging.getLogger("groupseg").exception("internal error")
        print(f"groupseg: internal error: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
