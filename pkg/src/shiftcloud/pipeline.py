"""On-disk stages: world -> dataset -> model -> evaluation report.

Every stage writes a ``manifest.json`` next to its outputs with the config
snapshot, the seed, and sha256 digests of inputs and outputs. Manifests hold
no wall-clock data, so identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import FrameRecord, Trajectory, collect_trajectories, frame_tag, synthesize_base
from .config import Config, from_dict, to_dict
from .depthcloud import DepthMap, frame_cloud, read_dmap, sample_fixed, write_dmap
from .errors import ConfigError, DataError
from .geometry import CameraIntrinsics
from .labeling import SteeringParams, build_dataset, sample_seed
from .model import PointNetLite, load_checkpoint, save_checkpoint, train, write_history
from .ply import read_ply, write_ply
from .poses import read_poses, write_poses
from .simulator import (
    Job,
    ModelController,
    OracleController,
    SimConfig,
    ZeroController,
    bev_svg,
    calibrate_alpha,
    format_csv,
    report_rows,
    summarize,
    sweep,
    REPORT_FIELDS,
)
from .synthworld import PoseNoiseModel, corrupt_depth, load_track, perturb, sample_reference
from .synthworld.raycast import scene_for
from .synthworld.track import TrackSpec, format_track, parse_track

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


# --- small helpers -----------------------------------------------------------

def builtin_track(name: str) -> TrackSpec:
    try:
        text = resources.files("shiftcloud.data").joinpath(f"{name}.track").read_text(encoding="ascii")
    except FileNotFoundError:
        raise ConfigError(f"no built-in track named {name!r}") from None
    return parse_track(text, f"<builtin {name}>")


HELDOUT = ("heldout_a", "heldout_b")


def resolve_track(ref: str) -> TrackSpec:
    """A track file path, or the name of a bundled track."""
    if os.path.exists(ref):
        return load_track(ref)
    return builtin_track(ref)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _rel(path, root) -> str:
    return Path(os.path.relpath(path, root)).as_posix()


def write_manifest(out: Path, command: str, cfg: Config, seed: int, inputs: dict, outputs, args=None) -> dict:
    """``inputs`` maps a role to a file or directory (directories are listed
    through their own manifest); ``outputs`` are files below ``out``."""
    out = Path(out)
    ins = {}
    for role, p in sorted(inputs.items()):
        p = Path(p)
        target = p / MANIFEST if p.is_dir() else p
        ins[role] = {"path": _rel(p, out), "sha256": sha256_file(target)}
    outs = {_rel(p, out): sha256_file(p) for p in sorted(Path(p) for p in outputs)}
    doc = {
        "tool": "shiftcloud",
        "version": __version__,
        "command": command,
        "seed": int(seed),
        "args": args or {},
        "config": to_dict(cfg),
        "inputs": ins,
        "outputs": outs,
    }
    atomic_write(out / MANIFEST, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def read_manifest(d) -> dict:
    p = Path(d) / MANIFEST
    if not p.exists():
        raise DataError(f"{d}: no {MANIFEST}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{p}: {e}") from None


def verify_dir(d) -> list[str]:
    """Digest mismatches (empty when everything matches)."""
    d = Path(d)
    doc = read_manifest(d)
    problems = []
    for rel, digest in doc["outputs"].items():
        p = d / rel
        if not p.exists():
            problems.append(f"missing {rel}")
        elif sha256_file(p) != digest:
            problems.append(f"changed {rel}")
    for role, ent in doc["inputs"].items():
        p = d / ent["path"]
        target = p / MANIFEST if p.is_dir() else p
        if not target.exists():
            problems.append(f"input {role} not found at {ent['path']}")
        elif sha256_file(target) != ent["sha256"]:
            problems.append(f"input {role} changed")
    return problems


def _pmap(fn, items, jobs: int, shared=None):
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(shared, it) for it in items]
    chunks = [items[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(jobs) as ex:
        parts = list(ex.map(_pmap_chunk, [(fn, shared, c) for c in chunks]))
    out = [None] * len(items)
    for i, part in enumerate(parts):
        out[i::jobs] = part
    return out


def _pmap_chunk(args):
    fn, shared, chunk = args
    return [fn(shared, it) for it in chunk]


def _fresh_dir(out) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not (out / MANIFEST).exists():
            raise ConfigError(f"{out} exists, is not empty and holds no previous output")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- world -----------------------------------------------------------------------

def _write_camera(path, intr: CameraIntrinsics):
    atomic_write(path, "".join(f"{k} = {float(getattr(intr, k))!r}\n" for k in ("fx", "fy", "cx", "cy", "width", "height")))


def read_camera(path) -> CameraIntrinsics:
    vals = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected key = value")
        k, v = (t.strip() for t in line.split("=", 1))
        vals[k] = float(v)
    try:
        return CameraIntrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]), int(vals["height"]))
    except KeyError as e:
        raise DataError(f"{path}: missing {e.args[0]}") from None


def _render_one(shared, i):
    track, poses, intr, rng_max = shared
    fr = scene_for(track).render(poses[i], intr, 0.0, rng_max)
    return fr.depth.values.astype(np.float32), fr.intensity.astype(np.float32)


def gen_world(track: TrackSpec, out, cfg: Config, seed: int, jobs: int = 1, track_path=None) -> dict:
    """Render the reference drive of ``track`` and write depth, intensity,
    true poses and odometry-style drifted poses."""
    out = _fresh_dir(out)
    w = cfg.world
    intr = w.intrinsics()
    poses = sample_reference(track, w.spacing)
    if len(poses) < 2:
        raise ConfigError("track too short for a sequence")
    noisy = perturb(poses, PoseNoiseModel(w.translation_sigma, w.rotation_sigma, seed))
    stamps = np.arange(len(poses)) * w.frame_dt
    rasters = _pmap(_render_one, range(len(poses)), jobs, (track, poses, intr, w.render_range))
    noise = w.depth_noise()
    outputs = []
    for i, (depth, inten) in enumerate(rasters):
        depth = corrupt_depth(depth, noise, [seed, 4, i])
        for sub, arr in (("depth", depth), ("intensity", inten)):
            p = out / sub / f"{i:06d}.dmap"
            p.parent.mkdir(exist_ok=True)
            write_dmap(p, DepthMap(arr))
            outputs.append(p)
    atomic_write(out / "track.txt", format_track(track))
    _write_camera(out / "camera.txt", intr)
    write_poses(out / "poses_gt.txt", stamps, poses)
    write_poses(out / "poses.txt", stamps, noisy)
    outputs += [out / "track.txt", out / "camera.txt", out / "poses_gt.txt", out / "poses.txt"]
    inputs = {"track": track_path} if track_path else {}
    return write_manifest(out, "gen-world", cfg, seed, inputs, outputs, {"frames": len(poses)})


def load_world(d):
    d = Path(d)
    for name in ("camera.txt", "poses.txt", "poses_gt.txt", "track.txt"):
        if not (d / name).exists():
            raise DataError(f"{d}: missing {name}; run gen-world first")
    intr = read_camera(d / "camera.txt")
    stamps, vo = read_poses(d / "poses.txt")
    _, gt = read_poses(d / "poses_gt.txt")
    if len(gt) != len(vo):
        raise DataError(f"{d}: pose files differ in length")
    track = load_track(d / "track.txt")
    return intr, stamps, gt, vo, track


def _cloud_one(shared, i):
    d, intr, ccfg = shared
    depth = read_dmap(Path(d) / "depth" / f"{i:06d}.dmap")
    inten = read_dmap(Path(d) / "intensity" / f"{i:06d}.dmap").values
    return frame_cloud(intr, depth, inten, ccfg, frame_tag(i)).points


def source_cloud_config(cfg: Config):
    """Per-frame clouds reach further than the final limit by the largest
    offset, so a shifted camera still gets points out to ``max_distance``."""
    reach = max((abs(o) for o in cfg.augment.offsets), default=0.0)
    return replace(cfg.cloud, max_distance=cfg.cloud.max_distance + reach)


def world_frames(d, cfg: Config, jobs: int = 1) -> tuple[CameraIntrinsics, list[FrameRecord]]:
    intr, stamps, gt, vo, _ = load_world(d)
    poses = vo if cfg.world.use_vo_poses else gt
    for i in range(len(poses)):
        if not (Path(d) / "depth" / f"{i:06d}.dmap").exists():
            raise DataError(f"{d}: missing depth frame {i}")
    clouds = _pmap(_cloud_one, range(len(poses)), jobs, (str(d), intr, source_cloud_config(cfg)))
    from .geometry import PointCloud

    frames = [FrameRecord(i, poses[i], PointCloud(c, frame_tag(i)), float(stamps[i])) for i, c in enumerate(clouds)]
    return intr, frames


# --- dataset -------------------------------------------------------------------

def _synth_one(shared, i):
    frames, intr, acfg = shared
    return synthesize_base(frames, i, intr, acfg)


def traj_dirname(offset: float) -> str:
    return f"traj_{offset:+.3f}"


def make_trajectories(frames, intr, cfg: Config, jobs: int = 1) -> list[Trajectory]:
    acfg = replace(cfg.augment, max_distance=cfg.cloud.max_distance)
    per_base = _pmap(_synth_one, range(len(frames)), jobs, (frames, intr, acfg))
    return collect_trajectories(frames, per_base, acfg)


def gen_dataset(world_dir, out, cfg: Config, seed: int, jobs: int = 1) -> dict:
    """Clouds, augmentation and labels for one sequence."""
    out = _fresh_dir(out)
    cfg = cfg.with_("label", seed=seed)
    intr, frames = world_frames(world_dir, cfg, jobs)
    trajs = make_trajectories(frames, intr, cfg, jobs)
    n = cfg.cloud.target_points
    samples, stats = build_dataset(trajs, cfg.label, n)
    outputs = []
    traj_rows = []
    for t_idx, traj in enumerate(trajs):
        sub = out / traj_dirname(traj.offset)
        sub.mkdir()
        dropped = set(traj.dropped)
        for f in traj.frames:
            cloud = sample_fixed(f.cloud, n, sample_seed(cfg.label.seed, t_idx, f.id))
            p = sub / f"{f.id:06d}.ply"
            write_ply(p, cloud.points.astype(np.float32), comments=[f"offset {traj.offset:+.6f}", f"frame {f.id}"])
            outputs.append(p)
        by_id = {f.id: f for f in traj.frames}
        for base in frames:
            rec = by_id.get(base.id)
            m = rec.pose.matrix[:3] if rec is not None else np.full((3, 4), np.nan)
            traj_rows.append([f"{traj.offset:+.6f}", base.id] + [repr(float(v)) for v in m.ravel()]
                             + [int(base.id in dropped), int(rec is not None and rec.flagged)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["offset", "frame_id"] + [f"r{i}{j}" if j < 3 else f"t{i}" for i in range(3) for j in range(4)]
               + ["dropped", "flagged"])
    w.writerows(traj_rows)
    atomic_write(out / "trajectories.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trajectory_offset", "frame_id", "future_frame_id", "delta_x", "ply_path"])
    for s in samples:
        off, fid = s.source
        w.writerow([f"{off:+.6f}", fid, s.future_id, repr(float(s.delta_x)),
                    f"{traj_dirname(off)}/{fid:06d}.ply"])
    atomic_write(out / "dataset.csv", buf.getvalue())
    outputs += [out / "trajectories.csv", out / "dataset.csv"]
    counts = {f"{k:+.3f}": v for k, v in stats.counts.items()}
    return write_manifest(out, "gen-dataset", cfg, seed, {"world": world_dir}, outputs,
                          {"samples": len(samples), "per_trajectory": counts, "clamped": stats.clamped,
                           "trajectories": len(trajs)})


def load_dataset(d) -> tuple[np.ndarray, np.ndarray, list]:
    d = Path(d)
    p = d / "dataset.csv"
    if not p.exists():
        raise DataError(f"{d}: no dataset.csv; run gen-dataset first")
    xs, ys, rows = [], [], []
    with open(p, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                ys.append(float(row["delta_x"]))
                xs.append(read_ply(d / row["ply_path"]))
            except (KeyError, ValueError) as e:
                raise DataError(f"{p}: bad row {row}: {e}") from None
            rows.append(row)
    if not xs:
        raise DataError(f"{p}: no samples")
    sizes = {len(x) for x in xs}
    if len(sizes) != 1:
        raise DataError(f"{d}: clouds differ in size {sorted(sizes)}")
    return np.stack(xs).astype(np.float32), np.array(ys), rows


# --- training ------------------------------------------------------------------

def new_net(cfg: Config, seed: int) -> PointNetLite:
    m = cfg.model
    return PointNetLite(m.point_dims, m.head_dims, m.output_scale, m.input_scale, seed=seed)


def train_model(dataset_dir, out, cfg: Config, seed: int) -> dict:
    out = _fresh_dir(out)
    x, y, _ = load_dataset(dataset_dir)
    tcfg = replace(cfg.train, seed=seed)
    net, history = train(new_net(cfg, seed), x, y, tcfg)
    save_checkpoint(net, out / "model.ckpt")
    write_history(out / "loss.csv", history)
    cfg = replace(cfg, train=tcfg)
    return write_manifest(out, "train", cfg, seed, {"dataset": dataset_dir},
                          [out / "model.ckpt", out / "loss.csv"],
                          {"samples": len(y), "epochs": len(history),
                           "final_val_mse": repr(float(history[-1][2]))})


# --- evaluation -------------------------------------------------------------------

def sim_config(cfg: Config) -> SimConfig:
    e = cfg.eval
    return SimConfig(intr=cfg.world.intrinsics(), cloud=cfg.cloud, points=cfg.cloud.target_points,
                     dt=e.dt, max_steer=e.max_steer, wheelbase=e.wheelbase, render_range=cfg.world.render_range,
                     depth_noise=cfg.world.depth_noise())


def calibrated_alpha(cfg: Config, sim: SimConfig, calib: TrackSpec) -> tuple[float, list]:
    e = cfg.eval
    if e.alpha > 0:
        return e.alpha, []
    starts = [s for s in e.starts if s + e.frames * e.speed * e.dt + 10 <= calib.length] or [5]
    return calibrate_alpha([calib], sim, e.lookahead, e.alpha_grid, starts, e.frames, e.speed)


def _training_cloud(ckpt, cfg: Config):
    """Cloud settings recorded when the checkpoint was trained, falling back
    to the current config for bare checkpoints."""
    d = Path(ckpt).parent
    if not (d / MANIFEST).exists():
        return cfg.cloud
    return from_dict(read_manifest(d)["config"]).cloud


def evaluate(checkpoints: dict, tracks: list, out, cfg: Config, seed: int, jobs: int = 1,
             calib: TrackSpec | None = None, extra_controllers=("oracle",), svg: bool = True,
             track_paths=(), calib_path=None) -> dict:
    """Closed-loop sweep of every controller over tracks x starts x levels x seeds.

    ``checkpoints`` maps a controller name to a checkpoint path; names in
    ``extra_controllers`` may be ``oracle`` or ``zero``.
    """
    if not tracks:
        raise ConfigError("empty track set")
    if not checkpoints and not extra_controllers:
        raise ConfigError("no controllers to evaluate")
    out = _fresh_dir(out)
    e = cfg.eval
    sim = sim_config(cfg)
    alpha, scores = calibrated_alpha(cfg, sim, calib or builtin_track("town"))
    params = SteeringParams(alpha, e.lookahead)
    controllers = {name: ModelController(load_checkpoint(p), params, _training_cloud(p, cfg))
                   for name, p in checkpoints.items()}
    names = list(checkpoints)
    for extra in extra_controllers:
        if extra == "oracle":
            controllers["oracle"] = None
        elif extra == "zero":
            controllers["zero"] = ZeroController()
        else:
            raise ConfigError(f"unknown built-in controller {extra!r}")
        names.append(extra)

    seeds = [seed + s for s in e.seeds]
    jobs_list = []
    for name in names:
        for tr in tracks:
            for k, s0 in enumerate(e.starts):
                sign = 1.0 if k % 2 == 0 else -1.0
                if s0 + e.frames * e.speed * e.dt > tr.length:
                    raise ConfigError(f"start {s0} leaves too little of {tr.name} ({tr.length:.0f} m)")
                for lvl in e.perturb:
                    # without perturbation the episode is the same for every seed
                    for sd in (seeds if lvl > 0 else seeds[:1]):
                        jobs_list.append(Job(name, tr, s0, lvl, sd, e.frames, e.speed,
                                             sign * e.start_lateral, sign * e.start_yaw))
    # oracles need the track, so build them per track lazily
    oracle_jobs = [j for j in jobs_list if j.controller == "oracle"]
    other_jobs = [j for j in jobs_list if j.controller != "oracle"]
    results = {}
    ctrl = {k: v for k, v in controllers.items() if v is not None}
    for j, r in zip(other_jobs, sweep(other_jobs, ctrl, sim, jobs) if other_jobs else []):
        results[id(j)] = r
    for tr in tracks:
        tj = [j for j in oracle_jobs if j.track is tr]
        if tj:
            for j, r in zip(tj, sweep(tj, {"oracle": OracleController(tr, params)}, sim, jobs)):
                results[id(j)] = r
    ordered = [results[id(j)] for j in jobs_list]

    rows = report_rows(jobs_list, ordered)
    outputs = []
    atomic_write(out / "report.csv", format_csv(rows, REPORT_FIELDS))
    outputs.append(out / "report.csv")

    # per (controller, level): mean over starts, tracks and seeds
    summ = summarize(rows)
    levels = sorted({float(l) for l in e.perturb})
    srows = [{"controller": c, "perturbation": f"{l:g}", "mean_ratio_on_lane": f"{v:.6f}",
              "episodes": sum(1 for r in rows if r["controller"] == c and float(r["perturbation"]) == l)}
             for (c, l), v in summ.items()]
    srows.sort(key=lambda r: (names.index(r["controller"]), float(r["perturbation"])))
    atomic_write(out / "summary.csv", format_csv(srows, ["controller", "perturbation", "mean_ratio_on_lane", "episodes"]))
    # one row per controller, one column per level
    wide = []
    for c in names:
        row = {"controller": c}
        for l in levels:
            row[f"p{l:g}"] = f"{summ.get((c, l), float('nan')):.6f}"
        wide.append(row)
    atomic_write(out / "levels.csv", format_csv(wide, ["controller"] + [f"p{l:g}" for l in levels]))
    # one row per controller and track, one column per level
    per_track: dict = {}
    for r in rows:
        per_track.setdefault((r["controller"], r["track"], float(r["perturbation"])), []).append(float(r["ratio_on_lane"]))
    trows = []
    for tr in tracks:
        for c in names:
            row = {"track": tr.name, "controller": c}
            for l in levels:
                row[f"p{l:g}"] = f"{np.mean(per_track[(c, tr.name, l)]):.6f}"
            trows.append(row)
    atomic_write(out / "tracks.csv", format_csv(trows, ["track", "controller"] + [f"p{l:g}" for l in levels]))
    outputs.append(out / "tracks.csv")
    # per seed, for checking that rankings hold seed by seed
    per_seed: dict = {}
    for r in rows:
        lvl = float(r["perturbation"])
        sds = [int(r["seed"])] if lvl > 0 else seeds
        for sd in sds:
            per_seed.setdefault((r["controller"], lvl, sd), []).append(float(r["ratio_on_lane"]))
    prow = [{"controller": c, "perturbation": f"{l:g}", "seed": sd, "mean_ratio_on_lane": f"{np.mean(v):.6f}"}
            for (c, l, sd), v in per_seed.items()]
    prow.sort(key=lambda r: (names.index(r["controller"]), float(r["perturbation"]), r["seed"]))
    atomic_write(out / "seeds.csv", format_csv(prow, ["controller", "perturbation", "seed", "mean_ratio_on_lane"]))
    outputs += [out / "summary.csv", out / "levels.csv", out / "seeds.csv"]
    if scores:
        atomic_write(out / "alpha.csv", format_csv(
            [{"alpha": repr(a), "ratio_on_lane": f"{r:.6f}", "mean_abs_offset": f"{d:.6f}"} for a, r, d in scores],
            ["alpha", "ratio_on_lane", "mean_abs_offset"]))
        outputs.append(out / "alpha.csv")
    if svg:
        for j, r in zip(jobs_list, ordered):
            p = out / "bev" / f"{j.controller}_{j.track.name}_{j.start_idx}_p{j.perturbation:g}_s{j.seed}.svg"
            p.parent.mkdir(exist_ok=True)
            atomic_write(p, bev_svg(j.track, r, f"{j.controller} {j.track.name} start {j.start_idx}"))
            outputs.append(p)
    inputs = {f"checkpoint:{k}": v for k, v in checkpoints.items()}
    inputs.update({f"track:{i}": p for i, p in enumerate(track_paths)})
    if calib_path:
        inputs["calib"] = calib_path
    calib = calib or builtin_track("town")
    return write_manifest(out, "evaluate", cfg.with_("eval", alpha=alpha), seed, inputs, outputs,
                          {"controllers": names, "tracks": [t.name for t in tracks], "episodes": len(rows),
                           "calibrated": bool(scores), "calib": calib.name, "svg": svg})


def read_summary(d) -> dict:
    out = {}
    with open(Path(d) / "summary.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            out[(r["controller"], float(r["perturbation"]))] = float(r["mean_ratio_on_lane"])
    return out


def read_seed_summary(d) -> dict:
    out = {}
    with open(Path(d) / "seeds.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            out[(r["controller"], float(r["perturbation"]), int(r["seed"]))] = float(r["mean_ratio_on_lane"])
    return out


# --- ablation preset -------------------------------------------------------------

# dataset variants; "oracle" needs no training
ABLATIONS = {
    "ours": {},
    "single": {"augment": {"offsets": ()}},
    "shift-only": {"augment": {"align": False}},
    "unfiltered": {"cloud": {"edge_filter": False}},
    "unlimited": {"cloud": {"max_distance": math.inf}},
    "no-counteract": {"augment": {"counteract": False}},
}


def variant_config(cfg: Config, name: str) -> Config:
    for section, changes in ABLATIONS[name].items():
        cfg = cfg.with_(section, **changes)
    return cfg


def run_ablation(out, cfg: Config, seed: int, jobs: int = 1, variants=None, levels=None,
                 heldout=HELDOUT, robust=("ours", "single")) -> dict:
    """World, one dataset and model per variant, then an unperturbed
    evaluation of all of them (plus the oracle) on the held-out tracks in
    ``eval/`` and a perturbation sweep of the ``robust`` models in
    ``robustness/``. Returns ``{stage: manifest}``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    variants = list(variants or ABLATIONS)
    town = builtin_track("town")
    done = {"world": gen_world(town, out / "world", cfg, seed, jobs)}
    ckpts = {}
    n_ref = None
    for v in variants:
        vcfg = variant_config(cfg, v)
        done[f"data/{v}"] = gen_dataset(out / "world", out / "data" / v, vcfg, seed, jobs)
        if v == "ours" or n_ref is None:
            n_ref = done[f"data/{v}"]["args"]["samples"]
    n_train = n_ref - int(round(cfg.train.val_fraction * n_ref))
    updates = math.ceil(n_train / cfg.train.batch_size) * cfg.train.epochs
    for v in variants:
        # equal number of updates for every variant, however small its dataset
        vcfg = variant_config(cfg, v).with_("train", min_updates=updates)
        done[f"models/{v}"] = train_model(out / "data" / v, out / "models" / v, vcfg, seed)
        ckpts[v] = out / "models" / v / "model.ckpt"
    tracks = [builtin_track(h) for h in heldout]
    done["eval"] = evaluate(ckpts, tracks, out / "eval", cfg.with_("eval", perturb=(0.0,)), seed, jobs,
                            calib=town, extra_controllers=("oracle",))
    levels = tuple(cfg.eval.perturb if levels is None else levels)
    chosen = {v: ckpts[v] for v in robust if v in ckpts}
    if chosen and any(l > 0 for l in levels):
        done["robustness"] = evaluate(chosen, tracks, out / "robustness", cfg.with_("eval", perturb=levels),
                                      seed, jobs, calib=town, extra_controllers=())
    return done


# --- export and re-derivation ------------------------------------------------------

def export_ply(world_dir, frame: int, offset: float, out_path, cfg: Config, binary: bool = True) -> int:
    """Write the cloud synthesized at ``offset`` for one world frame.
    Returns the number of points written."""
    from .augmentation import synthesize_frame

    intr, frames = world_frames(world_dir, cfg)
    if not 0 <= frame < len(frames):
        raise ConfigError(f"frame {frame} out of range (0..{len(frames) - 1})")
    acfg = replace(cfg.augment, max_distance=cfg.cloud.max_distance)
    if offset == 0:
        acfg = replace(acfg, align=False)
    rec = synthesize_frame(frames, frame, offset, intr, acfg)
    write_ply(out_path, rec.cloud.points.astype(np.float32), binary=binary,
              comments=[f"frame {frame}", f"offset {offset:+.6f}"])
    return len(rec.cloud)


def rerun(d, out) -> dict:
    """Re-derive an artifact directory from its manifest into ``out``."""
    d = Path(d)
    doc = read_manifest(d)
    cfg = from_dict(doc["config"])
    seed, args, cmd = doc["seed"], doc["args"], doc["command"]

    def inp(role):
        ent = doc["inputs"].get(role)
        if ent is None:
            raise DataError(f"{d}: manifest lacks input {role!r}")
        return d / ent["path"]

    if cmd == "gen-world":
        track = load_track(inp("track")) if "track" in doc["inputs"] else load_track(d / "track.txt")
        return gen_world(track, out, cfg, seed, track_path=inp("track") if "track" in doc["inputs"] else None)
    if cmd == "gen-dataset":
        return gen_dataset(inp("world"), out, cfg, seed)
    if cmd == "train":
        return train_model(inp("dataset"), out, cfg, seed)
    if cmd == "evaluate":
        ckpts = {k.split(":", 1)[1]: d / e["path"] for k, e in doc["inputs"].items() if k.startswith("checkpoint:")}
        numbered = sorted((int(k.split(":")[1]), e["path"]) for k, e in doc["inputs"].items()
                          if k.startswith("track:"))
        paths = [d / p for _, p in numbered]
        tracks = [load_track(p) for p in paths] or [builtin_track(n) for n in args["tracks"]]
        calib = load_track(inp("calib")) if "calib" in doc["inputs"] else builtin_track(args["calib"])
        if args.get("calibrated"):
            cfg = cfg.with_("eval", alpha=0.0)
        extra = [c for c in args["controllers"] if c not in ckpts]
        return evaluate(ckpts, tracks, out, cfg, seed, calib=calib, extra_controllers=extra,
                        svg=args.get("svg", True), track_paths=paths,
                        calib_path=inp("calib") if "calib" in doc["inputs"] else None)
    raise DataError(f"{d}: cannot re-run command {cmd!r}")


def manifest_dirs(root) -> list[Path]:
    """``root`` and every directory below it that holds a manifest."""
    root = Path(root)
    return sorted(p.parent for p in root.rglob(MANIFEST))
