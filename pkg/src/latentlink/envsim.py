"""Top-down driving task observed through grayscale frames.

A point-mass car with a heading drives on a closed track. Kinematics per
tick, for action ``a``::

    speed   <- clip(speed * (1 - drag) + accel*[a == ACCEL] - brake*[a == BRAKE], 0, max_speed)
    heading <- heading + steer * ([a == LEFT] - [a == RIGHT])
    pos     <- pos + speed * (cos heading, sin heading)

Progress is the furthest fraction of the lap reached along the centerline.
The reward of a tick is the progress gained minus ``offtrack_penalty`` when
the car is further than half the track width from the centerline, so a
clean full lap sums to exactly 1. An episode ends when the car strays
beyond ``half_width + margin``, completes the lap, or hits ``max_steps``.

Frames are egocentric: the camera window follows the car, is rotated so
the car points up, and keeps the car sprite at the frame center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

NOOP, ACCEL, BRAKE, LEFT, RIGHT = range(5)
ACTION_NAMES = ("noop", "accelerate", "brake", "steer-left", "steer-right")

TRACK_GRAY = 0.5
BACKGROUND = 0.15
CAR = 1.0


class ProtocolError(RuntimeError):
    """Raised on ``step`` after termination or before ``reset``."""


def stadium_track(straight: float = 60.0, radius: float = 20.0, spacing: float = 2.0) -> np.ndarray:
    """Waypoints of a counter-clockwise stadium loop starting at the bottom straight."""
    pts = []
    n_straight = max(int(round(straight / spacing)), 1)
    n_arc = max(int(round(np.pi * radius / spacing)), 2)
    half = straight / 2
    for i in range(n_straight):
        pts.append((-half + straight * i / n_straight, -radius))
    for i in range(n_arc):
        a = -np.pi / 2 + np.pi * i / n_arc
        pts.append((half + radius * np.cos(a), radius * np.sin(a)))
    for i in range(n_straight):
        pts.append((half - straight * i / n_straight, radius))
    for i in range(n_arc):
        a = np.pi / 2 + np.pi * i / n_arc
        pts.append((-half + radius * np.cos(a), radius * np.sin(a)))
    return np.asarray(pts, dtype=np.float64)


def load_track(path) -> np.ndarray:
    """Read waypoints from a text file with one ``x y`` pair (meters) per line."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            x, y = line.split()[:2]
            rows.append((float(x), float(y)))
    if len(rows) < 3:
        raise ValueError("a closed track needs at least 3 waypoints")
    return np.asarray(rows)


def save_track(path, waypoints: np.ndarray) -> None:
    Path(path).write_text("".join(f"{x:.6f} {y:.6f}\n" for x, y in np.asarray(waypoints)))


@dataclass(frozen=True)
class EnvSpec:
    frame_size: int = 84
    n_actions: int = 5
    max_steps: int = 1000
    track: np.ndarray = field(default_factory=stadium_track, compare=False)
    gamma: float = 0.99
    half_width: float = 6.0
    margin: float = 4.0
    view_meters: float = 40.0
    accel: float = 0.5
    brake: float = 0.8
    drag: float = 0.05
    max_speed: float = 3.0
    steer: float = 0.15
    offtrack_penalty: float = 0.01
    texture_amplitude: float = 0.06
    world_padding: float = 30.0

    def __post_init__(self):
        if self.frame_size < 16:
            raise ValueError("frame_size must be >= 16")
        if self.n_actions != 5:
            raise ValueError("the car exposes exactly 5 discrete actions")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if len(self.track) < 3:
            raise ValueError("track needs at least 3 waypoints")

    @property
    def bounds(self) -> tuple:
        """World rectangle (xmin, ymin, xmax, ymax) in meters."""
        lo = self.track.min(axis=0) - self.world_padding
        hi = self.track.max(axis=0) + self.world_padding
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    @property
    def max_step_reward(self) -> float:
        return self.max_speed / track_geometry(self).length

    def with_track(self, waypoints) -> "EnvSpec":
        return replace(self, track=np.asarray(waypoints, dtype=np.float64))


@dataclass
class DeviceState:
    position: np.ndarray
    heading: float
    speed: float
    progress: float
    step_index: int
    arc: float = 0.0  # unwrapped arc length along the centerline, meters

    def copy(self) -> "DeviceState":
        return replace(self, position=np.array(self.position, dtype=np.float64))


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    terminal: bool = False  # true termination (off track / lap done) rather than the time limit
    info: dict = field(default_factory=dict)


class TrackGeometry:
    def __init__(self, waypoints: np.ndarray):
        self.a = np.asarray(waypoints, dtype=np.float64)
        self.b = np.roll(self.a, -1, axis=0)
        seg = self.b - self.a
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.seg_dir = seg / self.seg_len[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)[:-1]])
        self.length = float(self.seg_len.sum())

    def project(self, p) -> tuple[float, float]:
        """Distance to the centerline and arc length of the nearest point."""
        d = np.asarray(p, dtype=np.float64) - self.a
        t = np.clip((d * self.seg_dir).sum(axis=1), 0.0, self.seg_len)
        near = self.a + self.seg_dir * t[:, None]
        dist = np.linalg.norm(np.asarray(p) - near, axis=1)
        i = int(np.argmin(dist))
        return float(dist[i]), float(self.cum[i] + t[i])

    def distance_field(self, xs: np.ndarray, ys: np.ndarray, chunk: int = 20000) -> np.ndarray:
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        out = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            p = pts[s:s + chunk, None, :]
            d = p - self.a[None]
            t = np.clip((d * self.seg_dir[None]).sum(-1), 0.0, self.seg_len[None])
            near = self.a[None] + self.seg_dir[None] * t[..., None]
            out[s:s + chunk] = np.linalg.norm(p - near, axis=-1).min(axis=1)
        return out.reshape(xs.shape)


_GEOMETRY_CACHE: dict = {}


def track_geometry(spec: EnvSpec) -> TrackGeometry:
    key = spec.track.tobytes()
    if key not in _GEOMETRY_CACHE:
        _GEOMETRY_CACHE[key] = TrackGeometry(spec.track)
    return _GEOMETRY_CACHE[key]


RASTER_RES = 0.25
TEXTURE_CELL = 2.0


@lru_cache(maxsize=8)
def _track_raster(track_bytes: bytes, n_points: int, half_width: float, bounds: tuple) -> np.ndarray:
    geo = TrackGeometry(np.frombuffer(track_bytes).reshape(n_points, 2))
    x0, y0, x1, y1 = bounds
    xs = x0 + RASTER_RES * (np.arange(int(np.ceil((x1 - x0) / RASTER_RES))) + 0.5)
    ys = y0 + RASTER_RES * (np.arange(int(np.ceil((y1 - y0) / RASTER_RES))) + 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return geo.distance_field(gx, gy) <= half_width


def _texture(spec: EnvSpec, seed: int) -> np.ndarray:
    x0, y0, x1, y1 = spec.bounds
    shape = (int(np.ceil((x1 - x0) / TEXTURE_CELL)), int(np.ceil((y1 - y0) / TEXTURE_CELL)))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(17,)))
    return spec.texture_amplitude * (2.0 * rng.random(shape) - 1.0)


def render_frame(state: DeviceState, spec: EnvSpec, texture: np.ndarray | None = None) -> np.ndarray:
    """Rasterize the egocentric view of ``state``; a pure function of its inputs."""
    n = spec.frame_size
    res = spec.view_meters / n
    centre = n / 2.0
    idx = np.arange(n) + 0.5
    forward = (centre - idx)[:, None] * res          # rows: up is ahead of the car
    right = (idx - centre)[None, :] * res            # columns: right of the car
    c, s = np.cos(state.heading), np.sin(state.heading)
    wx = state.position[0] + forward * c + right * s
    wy = state.position[1] + forward * s - right * c

    x0, y0, x1, y1 = spec.bounds
    raster = _track_raster(spec.track.tobytes(), len(spec.track), spec.half_width, spec.bounds)
    ix = np.floor((wx - x0) / RASTER_RES).astype(int)
    iy = np.floor((wy - y0) / RASTER_RES).astype(int)
    inside = (ix >= 0) & (iy >= 0) & (ix < raster.shape[0]) & (iy < raster.shape[1])
    on_track = np.zeros((n, n), dtype=bool)
    on_track[inside] = raster[ix[inside], iy[inside]]
    frame = np.where(on_track, TRACK_GRAY, BACKGROUND)
    if texture is not None:
        tx = np.clip(np.floor((wx - x0) / TEXTURE_CELL).astype(int), 0, texture.shape[0] - 1)
        ty = np.clip(np.floor((wy - y0) / TEXTURE_CELL).astype(int), 0, texture.shape[1] - 1)
        frame = frame + texture[tx, ty]

    car_len = max(int(round(4.0 / res)), 2)
    car_wid = max(int(round(2.0 / res)), 2)
    r0, c0 = int(centre - car_len / 2), int(centre - car_wid / 2)
    frame[r0:r0 + car_len, c0:c0 + car_wid] = CAR
    # quantized to 8 bits so replay storage is lossless
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0) / 255.0


def normalized_return(rewards, max_reward: float = 1.0) -> float:
    """Episode reward sum over the best achievable (one clean lap), clipped to [0, 1]."""
    return float(np.clip(np.sum(rewards) / max_reward, 0.0, 1.0))


class CarEnv:
    """Deterministic, seedable driving environment (single caller per instance)."""

    def __init__(self, spec: EnvSpec | None = None):
        self.spec = spec or EnvSpec()
        self.geometry = track_geometry(self.spec)
        self.state: DeviceState | None = None
        self.done = True
        self._texture = None

    def start_state(self) -> DeviceState:
        p = self.spec.track[0].astype(np.float64)
        d = self.geometry.seg_dir[0]
        return DeviceState(position=p.copy(), heading=float(np.arctan2(d[1], d[0])),
                           speed=0.0, progress=0.0, step_index=0, arc=0.0)

    def reset(self, seed: int = 0) -> tuple[np.ndarray, DeviceState]:
        self._texture = _texture(self.spec, seed)
        self.state = self.start_state()
        self.done = False
        return self.render(), self.state.copy()

    def render(self, state: DeviceState | None = None) -> np.ndarray:
        return render_frame(state or self.state, self.spec, self._texture)

    def step(self, action: int) -> StepResult:
        if self.state is None or self.done:
            raise ProtocolError("episode terminated; call reset() first")
        if not (0 <= int(action) < self.spec.n_actions) or int(action) != action:
            raise ValueError(f"action must be an integer in [0, {self.spec.n_actions})")
        sp = self.spec
        st = self.state
        a = int(action)
        speed = st.speed * (1.0 - sp.drag) + sp.accel * (a == ACCEL) - sp.brake * (a == BRAKE)
        speed = float(np.clip(speed, 0.0, sp.max_speed))
        heading = st.heading + sp.steer * ((a == LEFT) - (a == RIGHT))
        heading = float((heading + np.pi) % (2 * np.pi) - np.pi)
        pos = st.position + speed * np.array([np.cos(heading), np.sin(heading)])
        x0, y0, x1, y1 = sp.bounds
        pos = np.clip(pos, [x0, y0], [x1, y1])

        dist, arc = self.geometry.project(pos)
        length = self.geometry.length
        delta = (arc - st.arc % length + length / 2) % length - length / 2
        unwrapped = st.arc + delta
        progress = max(st.progress, min(unwrapped / length, 1.0))
        reward = progress - st.progress
        if dist > sp.half_width:
            reward -= sp.offtrack_penalty

        self.state = DeviceState(position=pos, heading=heading, speed=speed, progress=progress,
                                 step_index=st.step_index + 1, arc=unwrapped)
        off = dist > sp.half_width + sp.margin
        finished = progress >= 1.0
        timeout = self.state.step_index >= sp.max_steps
        self.done = bool(off or finished or timeout)
        info = {"distance": dist, "offtrack": off, "finished": finished, "timeout": timeout}
        return StepResult(self.render(), float(reward), self.done, bool(off or finished), info)


def autopilot(state: DeviceState, spec: EnvSpec, lookahead: float = 8.0, cruise: float | None = None) -> int:
    """Privileged pure-pursuit controller (for scripted tests and demos only)."""
    geo = track_geometry(spec)
    _, arc = geo.project(state.position)
    target_arc = (arc + lookahead) % geo.length
    i = int(np.searchsorted(geo.cum, target_arc, side="right") - 1)
    target = geo.a[i] + geo.seg_dir[i] * (target_arc - geo.cum[i])
    want = np.arctan2(*(target - state.position)[::-1])
    err = (want - state.heading + np.pi) % (2 * np.pi) - np.pi
    if err > spec.steer / 2:
        return LEFT
    if err < -spec.steer / 2:
        return RIGHT
    cruise = spec.max_speed if cruise is None else cruise
    return ACCEL if state.speed < cruise else NOOP


class TraceWriter:
    """Line-delimited JSON episode trace: step, action, reward, terminated, position."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, step: int, action: int, reward: float, terminated: bool, position) -> None:
        rec = {"step": int(step), "action": int(action), "reward": float(reward),
               "terminated": bool(terminated), "x": float(position[0]), "y": float(position[1])}
        self._fh.write(json.dumps(rec) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            break  # tolerate a torn final line
    return out
