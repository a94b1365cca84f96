"""shiftcloud command line: world -> dataset -> model -> evaluation."""
from __future__ import annotations

import argparse
import logging
import secrets
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .config import Config, apply_overrides, format_config, load_config
from .errors import ConfigError, DataError, ShiftCloudError
from . import pipeline as pl

log = logging.getLogger("shiftcloud")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--seed", type=int, help="random seed (drawn and recorded when omitted)")
    p.add_argument("--config", help="INI file with [world], [cloud], [augment], ... sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="shiftcloud", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-world", help="render a reference drive along a track")
    _common(p)
    p.add_argument("--track", default="town", help="track file or built-in name (default: town)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-dataset", help="clouds, synthetic trajectories and labels")
    _common(p)
    p.add_argument("--world", required=True, help="output directory of gen-world")
    p.add_argument("--out", required=True)
    p.add_argument("--offsets", type=_floats, help="lateral offsets in meters, e.g. -1,1")
    p.add_argument("--no-align", action="store_true", help="shift only, no preceding frames")
    p.add_argument("--no-counteract", action="store_true", help="keep all points of preceding frames")
    p.add_argument("--no-edge-filter", action="store_true", help="use full clouds")
    p.add_argument("--max-distance", type=float, help="drop points farther than this (inf = keep all)")

    p = sub.add_parser("train", help="fit the point network to a dataset")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("evaluate", help="closed-loop lane keeping on held-out tracks")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", action="append", default=[], metavar="NAME=PATH",
                   help="model to drive with (repeatable)")
    p.add_argument("--baseline", default="oracle", help="built-in controllers: oracle, zero or none")
    p.add_argument("--tracks", default=",".join(pl.HELDOUT), help="comma separated track files or names")
    p.add_argument("--calib", default="town", help="track used to calibrate the steering gain")
    p.add_argument("--perturb", type=_floats, help="perturbation levels, e.g. 0,0.05,0.1")
    p.add_argument("--seeds", type=_ints, help="perturbation seeds relative to --seed, e.g. 0,1,2")
    p.add_argument("--starts", type=_floats, help="start positions in meters along each track")
    p.add_argument("--alpha", type=float, help="steering gain (default: calibrate)")
    p.add_argument("--preset", choices=["ablation"],
                   help="ablation: build the world, every variant's dataset and model, then evaluate")
    p.add_argument("--no-svg", action="store_true")

    p = sub.add_parser("export-ply", help="write one synthesized frame as PLY")
    _common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--out", required=True, help="PLY file")
    p.add_argument("--ascii", action="store_true")

    p = sub.add_parser("verify", help="check artifact digests against their manifests")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--rerun", action="store_true", help="re-derive each directory and compare outputs")
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("show-config", help="print the effective configuration")
    _common(p)
    return ap


def resolve_config(args) -> Config:
    cfg = Config()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    for item in getattr(args, "set", []):
        key, eq, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not eq or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg = apply_overrides(cfg, section.strip(), {name.strip(): value}, "--set")
    return cfg


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = secrets.randbelow(2**31)
    log.info("no --seed given, using %d", seed)
    return seed


def cmd_gen_world(args, cfg):
    track = pl.resolve_track(args.track)
    path = args.track if Path(args.track).exists() else None
    doc = pl.gen_world(track, args.out, cfg, _seed(args), args.jobs, track_path=path)
    print(f"{doc['args']['frames']} frames -> {args.out}")


def cmd_gen_dataset(args, cfg):
    if args.offsets is not None:
        cfg = cfg.with_("augment", offsets=args.offsets)
    if args.no_align:
        cfg = cfg.with_("augment", align=False)
    if args.no_counteract:
        cfg = cfg.with_("augment", counteract=False)
    if args.no_edge_filter:
        cfg = cfg.with_("cloud", edge_filter=False)
    if args.max_distance is not None:
        cfg = cfg.with_("cloud", max_distance=args.max_distance)
    doc = pl.gen_dataset(args.world, args.out, cfg, _seed(args), args.jobs)
    a = doc["args"]
    print(f"{a['samples']} samples in {a['trajectories']} trajectories -> {args.out}")


def cmd_train(args, cfg):
    if args.epochs is not None:
        cfg = cfg.with_("train", epochs=args.epochs)
    if args.lr is not None:
        cfg = cfg.with_("train", lr=args.lr)
    doc = pl.train_model(args.dataset, args.out, cfg, _seed(args))
    print(f"{doc['args']['epochs']} epochs, val mse {float(doc['args']['final_val_mse']):.4f} -> {args.out}")


def _print_table(path):
    print(Path(path).read_text().rstrip())


def cmd_evaluate(args, cfg):
    changes = {k: v for k, v in (("perturb", args.perturb), ("seeds", args.seeds),
                                 ("starts", args.starts), ("alpha", args.alpha)) if v is not None}
    if changes:
        cfg = cfg.with_("eval", **changes)
    seed = _seed(args)
    if args.preset == "ablation":
        if args.checkpoint:
            raise ConfigError("--preset ablation trains its own models; drop --checkpoint")
        done = pl.run_ablation(args.out, cfg, seed, args.jobs)
        _print_table(Path(args.out) / "eval" / "tracks.csv")
        if "robustness" in done:
            _print_table(Path(args.out) / "robustness" / "levels.csv")
        return
    ckpts = {}
    for item in args.checkpoint:
        name, eq, path = item.partition("=")
        if not eq:
            name, path = Path(item).parent.name or "model", item
        if name in ckpts or name in ("oracle", "zero"):
            raise ConfigError(f"duplicate or reserved controller name {name!r}")
        ckpts[name] = path
    extra = [] if args.baseline in ("", "none") else [b.strip() for b in args.baseline.split(",")]
    refs = [t for t in args.tracks.split(",") if t.strip()]
    if not refs:
        raise ConfigError("empty track set")
    tracks = [pl.resolve_track(t) for t in refs]
    paths = [t for t in refs if Path(t).exists()]
    if paths and len(paths) != len(refs):
        raise ConfigError("mix of track files and built-in names; use one kind")
    calib = pl.resolve_track(args.calib)
    pl.evaluate(ckpts, tracks, args.out, cfg, seed, args.jobs, calib=calib, extra_controllers=extra,
                svg=not args.no_svg, track_paths=paths,
                calib_path=args.calib if Path(args.calib).exists() else None)
    _print_table(Path(args.out) / "levels.csv")


def cmd_export_ply(args, cfg):
    n = pl.export_ply(args.world, args.frame, args.offset, args.out, cfg, binary=not args.ascii)
    print(f"{n} points -> {args.out}")


def cmd_verify(args, cfg):
    bad = 0
    for root in args.dirs:
        dirs = pl.manifest_dirs(root)
        if not dirs:
            raise DataError(f"{root}: no manifests found")
        for d in dirs:
            problems = pl.verify_dir(d)
            if not problems and args.rerun:
                problems = _rerun_check(d)
            bad += bool(problems)
            print(f"{'ok' if not problems else 'FAIL'}  {d}")
            for msg in problems:
                print(f"      {msg}")
    if bad:
        raise DataError(f"{bad} director{'y' if bad == 1 else 'ies'} failed verification")


def _rerun_check(d) -> list[str]:
    old = pl.read_manifest(d)["outputs"]
    tmp = Path(tempfile.mkdtemp(prefix="shiftcloud-verify-"))
    try:
        new = pl.rerun(d, tmp / "out")["outputs"]
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    msgs = [f"rerun differs: {k}" for k in sorted(set(old) | set(new)) if old.get(k) != new.get(k)]
    return msgs


def cmd_show_config(args, cfg):
    print(format_config(cfg), end="")


COMMANDS = {
    "gen-world": cmd_gen_world,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-ply": cmd_export_ply,
    "verify": cmd_verify,
    "show-config": cmd_show_config,
}


def _prior_state(out):
    """None if ``out`` did not exist, else whether we may mark it on failure
    (it was empty or held a previous shiftcloud output)."""
    if out is None or not Path(out).exists():
        return None
    p = Path(out)
    return not p.is_dir() or not any(p.iterdir()) or (p / pl.MANIFEST).exists()


def _flag_partial(out, prior, err):
    """Remove a directory this run created, or mark a reused one incomplete.
    Foreign directories that a command refused to overwrite stay untouched."""
    if out is None or prior is False:
        return
    out = Path(out)
    existed = prior is not None
    if out.is_dir():
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        else:
            (out / pl.MANIFEST).unlink(missing_ok=True)
            (out / "INCOMPLETE").write_text(f"{type(err).__name__}: {err}\n")
    elif out.suffix and out.exists() and not existed:
        out.unlink()


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", None)
    existed = _prior_state(out)
    try:
        cfg = resolve_config(args) if args.cmd != "verify" else None
        COMMANDS[args.cmd](args, cfg)
    except ConfigError as e:
        _flag_partial(out, existed, e)
        print(f"shiftcloud {args.cmd}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        _flag_partial(out, existed, e)
        print(f"shiftcloud {args.cmd}: {e}", file=sys.stderr)
        return EXIT_DATA
    except ShiftCloudError as e:
        _flag_partial(out, existed, e)
        print(f"shiftcloud {args.cmd}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except KeyboardInterrupt:
        _flag_partial(out, existed, RuntimeError("interrupted"))
        return 130
    except Exception as e:  # bug
        _flag_partial(out, existed, e)
        log.exception("internal error")
        print(f"shiftcloud {args.cmd}: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
