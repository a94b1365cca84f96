"""Closed-loop lane keeping on synthetic tracks with a kinematic bicycle."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .depthcloud import CloudConfig, DepthMap, frame_cloud, sample_fixed
from .errors import ConfigError, DegenerateFrameError, OutOfTrack, ShiftCloudError
from .geometry import CameraIntrinsics
from .labeling import SteeringParams, steering_from_offset
from .model import PointNetLite, forward
from .synthworld.noise import DepthNoiseModel, corrupt_depth
from .synthworld.raycast import RENDER_RANGE, scene_for
from .synthworld.track import Centerline, TrackSpec, camera_pose

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = 10.0
    wheelbase: float = 2.7
    length: float = 4.5
    width: float = 1.8
    rear_overhang: float = 0.9  # body extends this far behind the rear axle

    def __post_init__(self):
        if self.speed < 0:
            raise ConfigError("speed must be >= 0")
        if not self.wheelbase > 0:
            raise ConfigError("wheelbase must be positive")

    def corners(self) -> np.ndarray:
        """Bounding-box corners on the ground plane, shape (4, 2)."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        fwd = np.array([c, s])
        right = np.array([-s, c])
        lo, hi, hw = -self.rear_overhang, self.length - self.rear_overhang, self.width / 2
        base = np.array([self.x, self.y])
        return np.array([base + a * fwd + b * right for a in (hi, lo) for b in (hw, -hw)])


def step(state: VehicleState, steer: float, dt: float) -> VehicleState:
    """Rear-axle kinematic bicycle; positive steer turns right (toward +d)."""
    if abs(steer) >= math.pi / 2:
        raise ConfigError("steering angle must be inside (-pi/2, pi/2)")
    v = state.speed
    return replace(
        state,
        x=state.x + v * math.cos(state.heading) * dt,
        y=state.y + v * math.sin(state.heading) * dt,
        heading=state.heading + v / state.wheelbase * math.tan(steer) * dt,
    )


def _lateral(track: TrackSpec, line: Centerline, state: VehicleState):
    _, d, ok = line.coords(*state.corners().T)
    return d, ok


def on_lane(track: TrackSpec, state: VehicleState, line: Centerline | None = None) -> bool:
    line = line or Centerline(track)
    d, ok = _lateral(track, line, state)
    half = track.lane_width / 2
    return bool(ok.all() and np.all(np.abs(d) <= half))


def _in_rect(pts, cx, cy, yaw, half_l, half_w):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
    u, w = dx * c + dy * s, -dx * s + dy * c
    return (np.abs(u) <= half_l) & (np.abs(w) <= half_w)


def collides(track: TrackSpec, state: VehicleState, line: Centerline | None = None) -> bool:
    line = line or Centerline(track)
    corners = state.corners()
    d, ok = _lateral(track, line, state)
    d = d[ok]
    if np.any(d >= track.right_barrier) or np.any(d <= track.left_barrier):
        return True
    ccx, ccy = corners.mean(axis=0)
    hl, hw = state.length / 2, state.width / 2
    for b in track.boxes:
        if _in_rect(corners, b.cx, b.cy, b.yaw, b.length / 2, b.width / 2).any():
            return True
        bc = _box_corners(b)
        if _in_rect(bc, ccx, ccy, state.heading, hl, hw).any():
            return True
    for p in track.poles:
        if _in_rect(np.array([[p.x, p.y]]), ccx, ccy, state.heading, hl + p.radius, hw + p.radius).any():
            return True
    return False


def _box_corners(b) -> np.ndarray:
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    out = []
    for a in (b.length / 2, -b.length / 2):
        for w in (b.width / 2, -b.width / 2):
            out.append([b.cx + a * c - w * s, b.cy + a * s + w * c])
    return np.array(out)


# --- controllers -------------------------------------------------------------

@dataclass
class Observation:
    state: VehicleState
    cloud: np.ndarray | None  # (n, 3) camera-frame points, when the controller asks for them


class ZeroController:
    needs_cloud = False

    def __call__(self, obs: Observation) -> float:
        return 0.0


class OracleController:
    """Steers from the true offset of the centerline point ``lookahead`` ahead."""

    needs_cloud = False

    def __init__(self, track: TrackSpec, params: SteeringParams):
        self.track, self.params = track, params
        self._line = None

    def offset(self, state: VehicleState) -> float:
        if self._line is None:
            self._line = Centerline(self.track)
        s, _, ok = self._line.coords(state.x, state.y)
        if not bool(ok):
            raise OutOfTrack("vehicle left the track extent")
        tx, ty, _ = self._line.point(min(float(s) + self.params.lookahead, self._line.length))
        return -(tx - state.x) * math.sin(state.heading) + (ty - state.y) * math.cos(state.heading)

    def __call__(self, obs: Observation) -> float:
        return steering_from_offset(self.offset(obs.state), self.params)


class ModelController:
    """Network prediction turned into steering. ``cloud`` overrides the
    simulator's point-cloud settings (models trained on differently
    filtered clouds must see the same kind of cloud when driving)."""

    needs_cloud = True

    def __init__(self, net: PointNetLite, params: SteeringParams, cloud: CloudConfig | None = None):
        self.net, self.params, self.cloud = net, params, cloud

    def __call__(self, obs: Observation) -> float:
        return steering_from_offset(forward(self.net, obs.cloud), self.params)


# --- episodes ----------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    intr: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics.from_fov(320, 96))
    cloud: CloudConfig = field(default_factory=CloudConfig)
    points: int = 256
    dt: float = 0.1
    max_steer: float = 0.5
    wheelbase: float = 2.7
    render_range: float = RENDER_RANGE
    depth_noise: DepthNoiseModel = field(default_factory=DepthNoiseModel)

    def __post_init__(self):
        if not self.dt >= 0:
            raise ConfigError("dt must be >= 0")
        if not 0 < self.max_steer < math.pi / 2:
            raise ConfigError("max_steer must be in (0, pi/2)")


@dataclass(frozen=True)
class EpisodeConfig:
    start_idx: int = 0  # meters along the centerline
    frames: int = 135
    speed: float = 10.0
    perturbation: float = 0.0
    seed: int = 0
    lateral: float = 0.0  # start displacement from the centerline, + right
    yaw: float = 0.0  # start heading error, radians

    def __post_init__(self):
        if self.frames <= 0:
            raise ConfigError("frames must be positive")
        if self.perturbation < 0:
            raise ConfigError("perturbation level must be >= 0")
        if self.speed < 0:
            raise ConfigError("speed must be >= 0")


@dataclass
class EpisodeResult:
    on_lane: np.ndarray
    path: list  # (x, y, heading) per frame
    termination: str  # completed | collision | off_track
    steering: list = field(default_factory=list)

    @property
    def ratio_on_lane(self) -> float:
        return float(np.mean(self.on_lane))

    @property
    def terminated_early(self) -> bool:
        return self.termination != "completed"


def perturb_steering(steer: float, level: float, rng: np.random.Generator, max_steer: float = 0.5) -> float:
    if level < 0:
        raise ConfigError("perturbation level must be >= 0")
    if level == 0:
        return steer
    h = level * max_steer
    return steer + float(rng.uniform(-h, h))


def start_state(track: TrackSpec, start_idx: float, speed: float, wheelbase: float = 2.7,
                lateral: float = 0.0, yaw: float = 0.0) -> VehicleState:
    x, y, h = Centerline(track).point(float(start_idx))
    # +d is to the right of travel, i.e. +90 deg from heading toward +Y
    x, y = x - lateral * math.sin(h), y + lateral * math.cos(h)
    return VehicleState(x, y, h + yaw, speed=speed, wheelbase=wheelbase)


def run_episode(track: TrackSpec, controller, cfg: EpisodeConfig, sim: SimConfig = SimConfig()) -> EpisodeResult:
    line = Centerline(track)
    state = start_state(track, cfg.start_idx, cfg.speed, sim.wheelbase, cfg.lateral, cfg.yaw)
    rng = np.random.default_rng([cfg.seed, 1])
    flags = np.zeros(cfg.frames, dtype=bool)
    path, steers = [], []
    scene = scene_for(track) if controller.needs_cloud else None
    ccfg = getattr(controller, "cloud", None) or sim.cloud
    termination = "completed"
    steer = 0.0
    for k in range(cfg.frames):
        path.append((state.x, state.y, state.heading))
        flags[k] = on_lane(track, state, line)
        cloud = None
        if scene is not None:
            pose = camera_pose(state.x, state.y, state.heading, track.camera_height)
            fr = scene.render(pose, sim.intr, k * sim.dt, sim.render_range)
            depth = fr.depth
            if sim.depth_noise.active:
                depth = DepthMap(corrupt_depth(depth.values, sim.depth_noise, [cfg.seed, 3, k]))
            pc = frame_cloud(sim.intr, depth, fr.intensity, ccfg)
            try:
                cloud = sample_fixed(pc, sim.points, np.random.SeedSequence([cfg.seed, 2, k])).points
            except DegenerateFrameError:
                log.warning("episode %s@%s frame %d: empty cloud, holding steering", track.name, cfg.start_idx, k)
        try:
            if scene is None or cloud is not None:
                steer = float(controller(Observation(state, cloud)))
        except OutOfTrack:
            termination = "off_track"
            break
        except ShiftCloudError:
            raise
        except Exception as e:  # noqa: BLE001 - surface with context
            raise ShiftCloudError(f"controller failed at frame {k} of {track.name}@{cfg.start_idx}: {e}") from e
        if not math.isfinite(steer):
            raise ShiftCloudError(f"controller returned {steer} at frame {k}")
        steer = perturb_steering(steer, cfg.perturbation, rng, sim.max_steer)
        steer = min(max(steer, -sim.max_steer), sim.max_steer)
        steers.append(steer)
        state = step(state, steer, sim.dt)
        if collides(track, state, line):
            termination = "collision"
            break
        if not bool(line.coords(state.x, state.y)[2]):
            termination = "off_track"
            break
    return EpisodeResult(flags, path, termination, steers)


# --- sweeps and reports ----------------------------------------------------------

REPORT_FIELDS = ["controller", "track", "start_idx", "perturbation", "ratio_on_lane", "frames", "terminated_early", "seed"]


@dataclass(frozen=True)
class Job:
    controller: str
    track: TrackSpec
    start_idx: int
    perturbation: float
    seed: int
    frames: int = 135
    speed: float = 10.0
    lateral: float = 0.0
    yaw: float = 0.0


def run_job(job: Job, controllers: dict, sim: SimConfig) -> EpisodeResult:
    cfg = EpisodeConfig(job.start_idx, job.frames, job.speed, job.perturbation, job.seed, job.lateral, job.yaw)
    return run_episode(job.track, controllers[job.controller], cfg, sim)


def _run_chunk(args):
    jobs, controllers, sim = args
    return [run_job(j, controllers, sim) for j in jobs]


def sweep(jobs, controllers: dict, sim: SimConfig, workers: int = 1) -> list[EpisodeResult]:
    """Run every job; results come back in job order whatever ``workers`` is."""
    jobs = list(jobs)
    if not jobs:
        raise ConfigError("nothing to evaluate")
    if workers <= 1 or len(jobs) == 1:
        return [run_job(j, controllers, sim) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    chunks = [jobs[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_run_chunk, [(c, controllers, sim) for c in chunks]))
    out = [None] * len(jobs)
    for i, part in enumerate(parts):
        out[i::workers] = part
    return out


def report_rows(jobs, results) -> list[dict]:
    rows = []
    for j, r in zip(jobs, results):
        rows.append({
            "controller": j.controller, "track": j.track.name, "start_idx": j.start_idx,
            "perturbation": f"{j.perturbation:g}", "ratio_on_lane": f"{r.ratio_on_lane:.6f}",
            "frames": len(r.on_lane), "terminated_early": int(r.terminated_early), "seed": j.seed,
        })
    return rows


def format_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def summarize(rows) -> dict:
    """Mean ratio on lane per (controller, perturbation level)."""
    acc: dict = {}
    for r in rows:
        acc.setdefault((r["controller"], float(r["perturbation"])), []).append(float(r["ratio_on_lane"]))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def calibrate_alpha(tracks, sim: SimConfig, lookahead: float = 5.0, grid=None, starts=(0,),
                    frames: int = 135, speed: float = 10.0) -> tuple[float, list]:
    """Pick the steering gain for which the oracle stays on lane most often;
    ties go to the smaller mean absolute lateral error."""
    grid = np.logspace(-2, 0.5, 11) if grid is None else np.asarray(grid, dtype=float)
    scores = []
    for a in grid:
        p = SteeringParams(float(a), lookahead)
        ratios, errs = [], []
        for tr in tracks:
            line = Centerline(tr)
            for s0 in starts:
                res = run_episode(tr, OracleController(tr, p), EpisodeConfig(s0, frames, speed), sim)
                ratios.append(res.ratio_on_lane)
                xs = np.array(res.path)
                _, d, ok = line.coords(xs[:, 0], xs[:, 1])
                errs.append(float(np.mean(np.where(ok, np.abs(d), tr.lane_width))))
        scores.append((float(a), float(np.mean(ratios)), float(np.mean(errs))))
    best = max(scores, key=lambda t: (t[1], -t[2]))
    return best[0], scores


# --- bird's-eye view -------------------------------------------------------------

def _polyline(line: Centerline, offset: float, step: float = 1.0) -> np.ndarray:
    pts = []
    for s in np.append(np.arange(0.0, line.length, step), line.length):
        x, y, h = line.point(float(s))
        pts.append((x - offset * math.sin(h), y + offset * math.cos(h)))
    return np.array(pts)


def bev_svg(track: TrackSpec, result: EpisodeResult, title: str = "") -> str:
    """Top view: road edges, lane divider, barriers, driven path and start."""
    line = Centerline(track)
    layers = [
        (_polyline(line, track.right_barrier), "#888", 1.5, ""),
        (_polyline(line, track.left_barrier), "#888", 1.5, ""),
        (_polyline(line, track.right_edge), "#222", 1.0, ""),
        (_polyline(line, track.left_edge), "#222", 1.0, ""),
        (_polyline(line, -track.lane_width / 2), "#222", 0.6, ' stroke-dasharray="3,6"'),
    ]
    path = np.array([(x, y) for x, y, _ in result.path])
    allp = np.vstack([l[0] for l in layers] + [path])
    lo, hi = allp.min(axis=0) - 5, allp.max(axis=0) + 5
    w, h = hi - lo
    # looking down the world z axis, +y already points "down" the screen
    def fmt(p):
        return " ".join(f"{x - lo[0]:.2f},{y - lo[1]:.2f}" for x, y in p)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.2f} {h:.2f}" '
           f'width="{min(900, 4 * w):.0f}" height="{min(900, 4 * w) * h / w:.0f}">']
    if title:
        out.append(f"<title>{title}</title>")
    for pts, color, width, extra in layers:
        out.append(f'<polyline points="{fmt(pts)}" fill="none" stroke="{color}" stroke-width="{width / 4:.3f}"{extra}/>')
    color = "#c22" if result.terminated_early else "#16a"
    out.append(f'<polyline points="{fmt(path)}" fill="none" stroke="{color}" stroke-width="0.5"/>')
    sx, sy = path[0]
    out.append(f'<circle cx="{sx - lo[0]:.2f}" cy="{sy - lo[1]:.2f}" r="1.5" fill="#2a2"/>')
    out.append("</svg>\n")
    return "\n".join(out)
