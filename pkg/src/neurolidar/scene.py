"""Procedural desk-scale scenes: ray-cast depth, Lambertian intensity, events and scene states.

Camera axes: x right, y down, z forward. The camera keeps a fixed orientation and
translates along the ego trajectory; primitives and the ego carry their own
piecewise-linear trajectories in world coordinates.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .depth import DepthFrame, read_depth_frames, write_depth_frames
from .events import EventStream, merge_streams, read_events, write_events

AMBIENT = 0.05
US_PER_S = 1_000_000

MANIFEST_NAME = "manifest.json"
EVENTS_NAME = "events.evt"
DEPTH_NAME = "depth.eldr"
STATES_NAME = "states.json"


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    focal: float = 0.0          # pixels; 0 means width / 2 (90 degree horizontal FOV)
    cx: float = -1.0            # principal point; negative means width // 2
    cy: float = -1.0
    rate_hz: float = 100.0
    duration_s: float = 10.0
    contrast_threshold: float = 0.2
    max_range: float = 200.0
    seed: int = 0
    light_dir: tuple = (0.2, -0.7, -0.6)
    noise_rate_hz: float = 0.0  # uniform background events per pixel per second

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("geometry must be at least 8x8")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.noise_rate_hz < 0:
            raise ValueError("noise_rate_hz must be non-negative")
        object.__setattr__(self, "light_dir", tuple(float(v) for v in self.light_dir))

    @property
    def f(self):
        return self.focal if self.focal > 0 else self.width / 2.0

    @property
    def principal(self):
        cx = self.cx if self.cx >= 0 else float(self.width // 2)
        cy = self.cy if self.cy >= 0 else float(self.height // 2)
        return cx, cy

    @property
    def frame_count(self):
        return int(round(self.duration_s * self.rate_hz))

    def frame_time(self, k):
        return int(round(k * US_PER_S / self.rate_hz))

    def ray_directions(self):
        cx, cy = self.principal
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return (u - cx) / self.f, (v - cy) / self.f


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear position over time; knot times in seconds."""
    times: tuple
    positions: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if t.size == 0 or t.size != p.shape[0]:
            raise ValueError("trajectory needs matching, non-empty knots")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory knot times must increase")
        object.__setattr__(self, "times", tuple(t.tolist()))
        object.__setattr__(self, "positions", tuple(map(tuple, p.tolist())))

    @classmethod
    def fixed(cls, position):
        return cls((0.0,), (tuple(position),))

    @classmethod
    def linear(cls, start, velocity, duration_s):
        start = np.asarray(start, dtype=np.float64)
        end = start + np.asarray(velocity, dtype=np.float64) * duration_s
        return cls((0.0, float(duration_s)), (tuple(start), tuple(end)))

    def position(self, t_us):
        ts = t_us / US_PER_S
        t = np.asarray(self.times)
        p = np.asarray(self.positions)
        if t.size == 1:
            return p[0].copy()
        return np.array([np.interp(ts, t, p[:, i]) for i in range(3)])

    def velocity(self, t_us):
        """Right derivative (m/s); left derivative at the final knot, zero outside."""
        t = np.asarray(self.times)
        p = np.asarray(self.positions)
        if t.size == 1:
            return np.zeros(3)
        ts = t_us / US_PER_S
        k = int(np.clip(np.searchsorted(t, ts, side="right") - 1, 0, t.size - 2))
        if ts < t[0] or ts > t[-1]:
            return np.zeros(3)
        return (p[k + 1] - p[k]) / (t[k + 1] - t[k])


@dataclass(frozen=True)
class Primitive:
    """Sphere (size = radius), axis-aligned box (size = full extents) or ground plane.

    A plane's trajectory y coordinate is its height (normal points to -y).
    ``texture`` is the period in meters of a sinusoidal albedo pattern, 0 for flat.
    """
    kind: str
    trajectory: Trajectory
    size: tuple = (1.0,)
    albedo: float = 0.8
    texture: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        size = tuple(float(s) for s in np.atleast_1d(self.size))
        if self.kind == "box" and len(size) == 1:
            size = size * 3
        if any(s <= 0 for s in size):
            raise ValueError("primitive size must be positive")
        if not 0 < self.albedo <= 1:
            raise ValueError("albedo must lie in (0, 1]")
        object.__setattr__(self, "size", size)

    def to_dict(self):
        d = asdict(self)
        d["trajectory"] = {"times": list(self.trajectory.times),
                           "positions": [list(p) for p in self.trajectory.positions]}
        d["size"] = list(self.size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        tr = d.pop("trajectory")
        return cls(trajectory=Trajectory(tuple(tr["times"]), tuple(map(tuple, tr["positions"]))),
                   size=tuple(d.pop("size")), **d)


def ground_plane(height=1.5, albedo=0.6, texture=2.0):
    return Primitive("plane", Trajectory.fixed((0.0, height, 0.0)), (1.0,), albedo,
                     texture, "ground")


def _prim_rows(primitives, ego_pos, t_us):
    rows = np.zeros((len(primitives), 7))
    for i, prim in enumerate(primitives):
        c = prim.trajectory.position(t_us) - ego_pos
        if prim.kind == "sphere":
            rows[i] = (kernels.KIND_SPHERE, *c, prim.size[0], 0.0, 0.0)
        elif prim.kind == "box":
            rows[i] = (kernels.KIND_BOX, *c, *(0.5 * np.asarray(prim.size)))
        else:
            rows[i] = (kernels.KIND_PLANE, 0.0, c[1], 0.0, 0.0, 0.0, 0.0)
    return rows


def _raycast(config, primitives, ego, t_us, backend=None):
    du, dv = config.ray_directions()
    ego_pos = ego.position(t_us)
    rows = _prim_rows(primitives, ego_pos, t_us)
    depth, ident, normal = kernels.raycast(du, dv, rows, config.max_range, backend=backend)
    return depth, ident, normal, (du, dv, ego_pos)


def _texture(primitives, ident, depth, rays, t_us):
    du, dv, ego_pos = rays
    tex = np.ones_like(depth)
    for i, prim in enumerate(primitives):
        if prim.texture <= 0:
            continue
        m = ident == i
        if not m.any():
            continue
        z = depth[m]
        local = np.stack([du[m] * z, dv[m] * z, z], axis=1) + ego_pos \
            - prim.trajectory.position(t_us)
        w = 2.0 * math.pi / prim.texture
        s = np.sin(w * local).sum(axis=1) / 6.0 + 0.5
        tex[m] = 0.35 + 0.65 * s
    return tex


def _shade(config, primitives, ident, normal, tex):
    light = np.asarray(config.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    albedo = np.array([p.albedo for p in primitives] + [0.0])
    lam = np.maximum(0.0, normal @ light)
    val = albedo[ident] * tex * lam
    return np.clip(np.where(ident >= 0, val, AMBIENT), AMBIENT, 1.0)


def render_depth(config, primitives, t_us, ego=None, backend=None):
    ego = ego or Trajectory.fixed((0.0, 0.0, 0.0))
    depth, *_ = _raycast(config, primitives, ego, t_us, backend)
    return DepthFrame(depth.astype(np.float32), t_us)


def render_intensity(config, primitives, t_us, ego=None, backend=None):
    """Shaded intensity in [AMBIENT, 1]; background takes the ambient floor."""
    ego = ego or Trajectory.fixed((0.0, 0.0, 0.0))
    depth, ident, normal, rays = _raycast(config, primitives, ego, t_us, backend)
    return _shade(config, primitives, ident, normal,
                  _texture(primitives, ident, depth, rays, t_us))


def render(config, primitives, ego, t_us, backend=None):
    """(depth float64, primitive id map, intensity) for one instant."""
    depth, ident, normal, rays = _raycast(config, primitives, ego, t_us, backend)
    inten = _shade(config, primitives, ident, normal,
                   _texture(primitives, ident, depth, rays, t_us))
    return depth, ident, inten


def synthesize_events(config, intensities, times, backend=None):
    """Contrast-threshold events from an intensity sequence sampled at ``times`` (µs)."""
    intensities = np.asarray(intensities, dtype=np.float64)
    if intensities.shape[0] < 2:
        raise ValueError("need at least two intensity samples")
    log_i = np.log(np.clip(intensities, AMBIENT, 1.0))
    cols = kernels.synthesize(log_i, times, config.contrast_threshold, backend=backend)
    parts = [cols]
    if config.noise_rate_hz > 0:
        parts.append(_noise_events(config, int(times[0]), int(times[-1])))
    return merge_streams(config.height, config.width, parts)


def _noise_events(config, t0, t1):
    rng = np.random.default_rng([config.seed, 0x4E01])
    span_s = (t1 - t0) / US_PER_S
    n = rng.poisson(config.noise_rate_hz * config.height * config.width * span_s)
    t = np.sort(rng.integers(t0, max(t1, t0 + 1), size=n))
    x = rng.integers(0, config.width, size=n).astype(np.uint16)
    y = rng.integers(0, config.height, size=n).astype(np.uint16)
    p = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
    return t, x, y, p


@dataclass(frozen=True)
class SceneState:
    t: int
    ego_speed: float
    distances: tuple
    visible: tuple

    def to_dict(self):
        return {"t": self.t, "ego_speed": self.ego_speed,
                "distances": list(self.distances), "visible": list(self.visible)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["t"]), float(d["ego_speed"]), tuple(d["distances"]),
                   tuple(bool(v) for v in d["visible"]))


def _surface_distance(prim, ego_pos, t_us):
    d = prim.trajectory.position(t_us) - ego_pos
    if prim.kind == "sphere":
        return max(0.0, float(np.linalg.norm(d)) - prim.size[0])
    if prim.kind == "box":
        out = np.maximum(np.abs(d) - 0.5 * np.asarray(prim.size), 0.0)
        return float(np.linalg.norm(out))
    return abs(float(d[1]))


def _state(primitives, ego, t_us, ident):
    ego_pos = ego.position(t_us)
    speed = float(np.linalg.norm(ego.velocity(t_us)))
    objs = [(i, p) for i, p in enumerate(primitives) if p.kind != "plane"]
    seen = set(np.unique(ident[ident >= 0]).tolist())
    return SceneState(int(t_us), speed,
                      tuple(_surface_distance(p, ego_pos, t_us) for _, p in objs),
                      tuple(i in seen for i, _ in objs))


@dataclass
class Sequence:
    config: SceneConfig
    primitives: list
    ego: Trajectory
    depth: list
    events: EventStream
    states: list
    meta: dict = field(default_factory=dict)

    @property
    def times(self):
        return [f.timestamp for f in self.depth]

    def depth_at(self, t_us):
        k = self.index_of(t_us)
        return self.depth[k]

    def index_of(self, t_us):
        times = self.times
        k = int(np.searchsorted(times, t_us))
        if k >= len(times) or times[k] != t_us:
            raise KeyError(f"no ground-truth depth frame at t={t_us}")
        return k

    def manifest(self):
        return {
            "format": "neurolidar-sequence/1",
            "config": asdict(self.config),
            "primitives": [p.to_dict() for p in self.primitives],
            "ego": {"times": list(self.ego.times),
                    "positions": [list(p) for p in self.ego.positions]},
            "frame_count": len(self.depth),
            "event_count": len(self.events),
            "files": {"events": EVENTS_NAME, "depth": DEPTH_NAME, "states": STATES_NAME},
            "meta": self.meta,
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_events(self.events, directory / EVENTS_NAME)
        write_depth_frames(self.depth, directory / DEPTH_NAME)
        (directory / STATES_NAME).write_text(
            json.dumps([s.to_dict() for s in self.states], separators=(",", ":")) + "\n")
        (directory / MANIFEST_NAME).write_text(json.dumps(self.manifest(), indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        man = json.loads((directory / MANIFEST_NAME).read_text())
        files = man["files"]
        cfg = dict(man["config"])
        cfg["light_dir"] = tuple(cfg["light_dir"])
        config = SceneConfig(**cfg)
        prims = [Primitive.from_dict(p) for p in man["primitives"]]
        ego = Trajectory(tuple(man["ego"]["times"]), tuple(map(tuple, man["ego"]["positions"])))
        depth = read_depth_frames(directory / files["depth"])
        events = read_events(directory / files["events"])
        states = [SceneState.from_dict(s)
                  for s in json.loads((directory / files["states"]).read_text())]
        return cls(config, prims, ego, depth, events, states, man.get("meta", {}))


def generate_sequence(config, primitives, ego, backend=None, meta=None):
    """Render every ground-truth instant, synthesize events and annotate scene state."""
    n = config.frame_count
    if n < 2:
        raise ValueError("sequence needs at least two frames")
    times = np.array([config.frame_time(k) for k in range(n)], dtype=np.int64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("rate too high for microsecond timestamps")
    inten = np.empty((n, config.height, config.width))
    depth, states = [], []
    for k, t in enumerate(times):
        d, ident, inten[k] = render(config, primitives, ego, int(t), backend)
        depth.append(DepthFrame(d.astype(np.float32), int(t)))
        states.append(_state(primitives, ego, int(t), ident))
    events = synthesize_events(config, inten, times, backend)
    return Sequence(config, list(primitives), ego, depth, events, states, dict(meta or {}))


def scene_state_at(sequence, t_us, backend=None):
    t_us = int(t_us)
    end = sequence.config.duration_s * US_PER_S
    if t_us < 0 or t_us > end:
        raise ValueError(f"t={t_us} outside sequence [0, {end}]")
    _, ident, _, _ = _raycast(sequence.config, sequence.primitives, sequence.ego, t_us, backend)
    return _state(sequence.primitives, sequence.ego, t_us, ident)


# ---------------------------------------------------------------------------
# procedural scenarios

def random_scene(config, rng=None, speed_range=(0.0, 20.0), max_objects=6,
                 segment_s=(0.5, 2.0)):
    """Ego driving forward over textured ground with 1..max_objects moving primitives.

    The ego speed is piecewise constant over random segments drawn from
    ``speed_range``; objects are spread along the ego path so some are passed,
    some approach and some cross the field of view laterally.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dur = config.duration_s
    knots_t = [0.0]
    while knots_t[-1] < dur:
        knots_t.append(min(dur, knots_t[-1] + rng.uniform(*segment_s)))
    pos = [np.array([0.0, 0.0, 0.0])]
    for a, b in zip(knots_t[:-1], knots_t[1:]):
        v = rng.uniform(*speed_range)
        lateral = rng.uniform(-0.05, 0.05) * v
        pos.append(pos[-1] + np.array([lateral, 0.0, v]) * (b - a))
    ego = Trajectory(tuple(knots_t), tuple(map(tuple, pos)))
    ground_h = 1.5
    prims = [ground_plane(ground_h, albedo=rng.uniform(0.4, 0.8),
                          texture=rng.uniform(1.5, 3.0))]
    n_obj = int(rng.integers(1, max_objects + 1))
    for i in range(n_obj):
        t_ref = rng.uniform(0, dur)
        ez = ego.position(t_ref * US_PER_S)[2]
        z = ez + rng.uniform(3.0, 35.0)
        x = rng.uniform(-10.0, 10.0)
        vel = np.zeros(3)
        mode = rng.random()
        if mode < 0.4:
            vel[0] = rng.choice([-1, 1]) * rng.uniform(1.0, 4.0)
        elif mode < 0.7:
            vel[2] = rng.uniform(-8.0, 8.0)
        if rng.random() < 0.5:
            r = rng.uniform(0.4, 1.5)
            start = np.array([x, ground_h - r, z]) - vel * t_ref
            prim = Primitive("sphere", Trajectory.linear(start, vel, dur), (r,),
                             rng.uniform(0.3, 1.0), rng.uniform(0.5, 1.5), f"sphere{i}")
        else:
            size = rng.uniform([0.5, 0.8, 0.5], [2.5, 2.5, 4.0])
            start = np.array([x, ground_h - size[1] / 2, z]) - vel * t_ref
            prim = Primitive("box", Trajectory.linear(start, vel, dur), tuple(size),
                             rng.uniform(0.3, 1.0), rng.uniform(0.5, 1.5), f"box{i}")
        prims.append(prim)
    return prims, ego
