"""Position-coupled multipath uplink channel and SNR arithmetic.

Each base-station array sees one line-of-sight path plus one path per
scatterer. Path ``p`` with total length ``d_p`` contributes, on antenna
``n`` and subcarrier frequency ``f_k``::

    gain_p * (d_ref / d_p) ** decay_exponent * exp(-j 2 pi f_k d_p / c)
           * exp(j jitter_p[slot]) * exp(j 2 pi / lambda * <r_n, u_p>)

where ``u_p`` is the unit arrival direction at the array and ``r_n`` the
element offset (half-wavelength grid). ``jitter_p[slot]`` is a zero-mean
Gaussian phase with standard deviation ``jitter_std`` drawn from the
field seed and the slot index, so the channel is a deterministic function
of (position, slot, seed).

The channel gain used in the SNR is the receive-combined power, summed
over antennas and averaged over subcarriers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class SingularChannel(ValueError):
    pass


def _default_arrays():
    return ((-45.0, -45.0, 10.0), (45.0, -40.0, 10.0), (60.0, 35.0, 10.0),
            (70.0, 0.0, 10.0), (50.0, 50.0, 10.0))


@dataclass(frozen=True)
class RadioSpec:
    array_rows: int = 4
    array_cols: int = 2
    array_positions: tuple = field(default_factory=_default_arrays)
    carrier_hz: float = 2.14e9
    subcarriers: int = 16
    bandwidth_hz: float = 20e6
    noise_power: float = 5e-4
    snr_threshold: float = 10.0
    power_budget: float = 1.0
    decay_exponent: float = 1.0
    reference_distance: float = 1.0
    jitter_std: float = 0.1
    device_height: float = 1.5
    world_bounds: tuple = (-80.0, -80.0, 80.0, 80.0)

    def __post_init__(self):
        if self.n_antennas < 1:
            raise ValueError("need at least one antenna")
        if self.noise_power <= 0 or self.power_budget <= 0 or self.snr_threshold <= 0:
            raise ValueError("noise power, power budget and SNR threshold must be positive")

    @property
    def n_antennas(self) -> int:
        return self.array_rows * self.array_cols * len(self.array_positions)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def frequencies(self) -> np.ndarray:
        spacing = self.bandwidth_hz / self.subcarriers
        return self.carrier_hz + spacing * (np.arange(self.subcarriers) - (self.subcarriers - 1) / 2)

    @property
    def input_width(self) -> int:
        """Length of the interleaved real/imaginary channel vector."""
        return 2 * self.n_antennas * self.subcarriers


@dataclass(frozen=True)
class ScattererField:
    positions: np.ndarray  # (S, 2) meters
    gains: np.ndarray      # (S,) complex
    seed: int
    height: float = 5.0

    @classmethod
    def generate(cls, seed: int, spec: RadioSpec, count: int = 8,
                 gain_range: tuple = (0.2, 0.5)) -> "ScattererField":
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(29,)))
        x0, y0, x1, y1 = spec.world_bounds
        pos = np.column_stack([rng.uniform(x0, x1, count), rng.uniform(y0, y1, count)])
        gains = rng.uniform(*gain_range, count) * np.exp(1j * rng.uniform(0, 2 * np.pi, count))
        return cls(pos, gains, int(seed))

    def save(self, path) -> None:
        """Text format: ``x y re im`` per scatterer, comment header with seed and height."""
        lines = [f"# seed {self.seed}", f"# height {self.height:.6f}"]
        lines += [f"{x:.9f} {y:.9f} {g.real:.12e} {g.imag:.12e}"
                  for (x, y), g in zip(self.positions, self.gains)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ScattererField":
        seed, height, rows = 0, 5.0, []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                if key == "seed":
                    seed = int(value)
                elif key == "height":
                    height = float(value)
            elif line:
                rows.append([float(v) for v in line.split()])
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, :2], arr[:, 2] + 1j * arr[:, 3], seed, height)


@dataclass
class ChannelSnapshot:
    g: np.ndarray          # (n_antennas, subcarriers) complex
    position: np.ndarray
    slot: int

    @property
    def gain(self) -> float:
        return channel_gain(self.g)

    def interleaved(self) -> np.ndarray:
        """Real vector (re, im, re, im, ...) over the flattened antenna-major channel."""
        return interleave(self.g)


def interleave(g: np.ndarray) -> np.ndarray:
    flat = np.asarray(g).reshape(*np.shape(g)[:-2], -1)
    out = np.empty(flat.shape[:-1] + (2 * flat.shape[-1],), dtype=np.float64)
    out[..., 0::2] = flat.real
    out[..., 1::2] = flat.imag
    return out


def deinterleave(vec: np.ndarray, n_antennas: int, subcarriers: int) -> np.ndarray:
    """Inverse of :func:`interleave`: real (..., 2NK) back to complex (..., N, K)."""
    vec = np.asarray(vec, dtype=np.float64)
    return (vec[..., 0::2] + 1j * vec[..., 1::2]).reshape(*vec.shape[:-1], n_antennas, subcarriers)


def channel_gain(g) -> float | np.ndarray:
    """Sum over antennas of the subcarrier-averaged power; works on stacked channels too."""
    g = g.g if isinstance(g, ChannelSnapshot) else np.asarray(g)
    return (np.abs(g) ** 2).mean(axis=-1).sum(axis=-1)


def _element_offsets(spec: RadioSpec, array_pos: np.ndarray) -> np.ndarray:
    """Half-wavelength planar grid in the vertical plane facing the world origin."""
    d = spec.wavelength / 2
    facing = -array_pos[:2] / (np.linalg.norm(array_pos[:2]) + 1e-12)
    lateral = np.array([-facing[1], facing[0], 0.0])
    vertical = np.array([0.0, 0.0, 1.0])
    r = np.arange(spec.array_rows) - (spec.array_rows - 1) / 2
    c = np.arange(spec.array_cols) - (spec.array_cols - 1) / 2
    return np.array([d * (i * lateral + j * vertical) for i in r for j in c])


def _slot_jitter(seed: int, slot: int, shape, std: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(31, int(slot))))
    return std * rng.standard_normal(shape)


def channel_at(position, slot: int, field: ScattererField, spec: RadioSpec) -> ChannelSnapshot:
    x0, y0, x1, y1 = spec.world_bounds
    p2 = np.asarray(position, dtype=np.float64)[:2]
    if not (x0 <= p2[0] <= x1 and y0 <= p2[1] <= y1):
        raise ValueError(f"position {p2} outside world bounds {spec.world_bounds}")
    dev = np.array([p2[0], p2[1], spec.device_height])
    scat = np.column_stack([field.positions, np.full(len(field.positions), field.height)])
    gains = np.concatenate([[1.0 + 0j], field.gains])
    k_wave = 2 * np.pi / spec.wavelength
    freqs = spec.frequencies
    n_paths = 1 + len(scat)
    jitter = _slot_jitter(field.seed, slot, (len(spec.array_positions), n_paths), spec.jitter_std)
    blocks = []
    for a, apos in enumerate(spec.array_positions):
        apos = np.asarray(apos, dtype=np.float64)
        # path endpoints at the array: the device itself, then each scatterer
        last_hop = np.vstack([dev, scat])
        to_array = np.linalg.norm(last_hop - apos, axis=1)
        lengths = to_array.copy()
        lengths[1:] += np.linalg.norm(scat - dev, axis=1)
        arrival = (last_hop - apos) / to_array[:, None]
        amp = gains * (spec.reference_distance / lengths) ** spec.decay_exponent * np.exp(1j * jitter[a])
        steer = np.exp(1j * k_wave * (_element_offsets(spec, apos) @ arrival.T))   # (elements, paths)
        delay = np.exp(-2j * np.pi * np.outer(lengths, freqs) / SPEED_OF_LIGHT)    # (paths, subcarriers)
        blocks.append(steer @ (amp[:, None] * delay))
    return ChannelSnapshot(np.vstack(blocks), p2.copy(), int(slot))


def snr(g, power: float, noise_power: float) -> float:
    if power < 0:
        raise ValueError("transmit power must be non-negative")
    return channel_gain(g) * power / noise_power


def required_power(g, snr_threshold: float, noise_power: float) -> float:
    """Smallest transmit power that meets the SNR threshold on channel ``g``."""
    gain = channel_gain(g)
    if np.any(gain <= 0):
        raise SingularChannel("channel has zero gain")
    return snr_threshold * noise_power / gain


def feasible(power: float, spec: RadioSpec) -> bool:
    return bool(0.0 <= power <= spec.power_budget)


def correlation(g1, g2) -> float:
    """Normalized magnitude of the inner product of two flattened channels."""
    a, b = np.ravel(g1), np.ravel(g2)
    return float(np.abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))


def write_trace(stem, snapshots) -> tuple[Path, Path]:
    """Binary channel trace (interleaved little-endian float64) plus a text manifest."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    snaps = list(snapshots)
    n, k = snaps[0].g.shape
    data = np.stack([interleave(s.g) for s in snaps]).astype("<f8")
    bin_path, man_path = stem.with_suffix(".bin"), stem.with_suffix(".manifest")
    bin_path.write_bytes(data.tobytes())
    man_path.write_text(f"antennas={n}\nsubcarriers={k}\nslots={len(snaps)}\ndtype=<f8\nlayout=interleaved\n")
    return man_path, bin_path


def read_trace(stem) -> np.ndarray:
    stem = Path(stem)
    meta = dict(line.split("=", 1) for line in stem.with_suffix(".manifest").read_text().split())
    n, k, t = int(meta["antennas"]), int(meta["subcarriers"]), int(meta["slots"])
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=meta["dtype"]).reshape(t, n * k * 2)
    return (raw[:, 0::2] + 1j * raw[:, 1::2]).reshape(t, n, k)


def smoke_radio(**overrides) -> RadioSpec:
    """8 antennas (two 2x2 arrays) and 4 subcarriers."""
    base = RadioSpec(array_rows=2, array_cols=2, array_positions=((-45.0, -45.0, 10.0), (55.0, 40.0, 10.0)),
                     subcarriers=4, noise_power=1e-4)
    return replace(base, **overrides)
