"""Time-varying MIMO-OFDM channel generation in the angular-delay domain.

A sum-of-paths model stands in for a full geometric cluster simulator: each
path has a complex gain, a delay, a departure angle at the base-station ULA
and a Doppler shift. Frames are truncated to the first ``n_delay`` rows of
the 2D-DFT representation and affinely scaled to [0, 1].
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
DELAY_WINDOW_FRACTION = 0.8
DATASET_MAGIC = "CSIFB-DATASET"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


class CoherenceError(ValueError):
    """The feedback window outlasts the channel coherence time."""


@dataclass(frozen=True)
class ScenarioConfig:
    n_subcarriers: int = 64
    n_antennas: int = 8
    n_delay: int = 8
    bandwidth_hz: float = 20e6
    carrier_hz: float = 300e6
    ue_speed_mps: float = 0.9
    feedback_interval_s: float = 0.04
    group_len: int = 4
    n_paths: int = 6
    seed: int = 0
    on_grid_delays: bool = False
    angle_center: float = 0.2        # sin(theta) at the sector centre
    angle_halfwidth: float = 0.1     # sector half-width in sin(theta); 1 with centre 0 is isotropic
    delay_decay_bins: float | None = 1.0  # exponential power-delay profile; None is flat

    def __post_init__(self):
        if not 1 <= self.n_delay <= self.n_subcarriers:
            raise ValueError("n_delay must lie in [1, n_subcarriers]")
        if self.group_len < 1:
            raise ValueError("group_len must be >= 1")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        lo, hi = self.angle_center - self.angle_halfwidth, self.angle_center + self.angle_halfwidth
        if self.angle_halfwidth < 0 or lo < -1 or hi > 1:
            raise ValueError("angle sector must lie within sin(theta) in [-1, 1]")

    @property
    def n_real(self) -> int:
        """Real parameters per truncated frame (2 * n_delay * n_antennas)."""
        return 2 * self.n_delay * self.n_antennas

    @property
    def max_doppler_hz(self) -> float:
        return self.ue_speed_mps * self.carrier_hz / SPEED_OF_LIGHT

    def check_coherence(self) -> None:
        window = self.feedback_interval_s * self.group_len
        tc = coherence_time(self.ue_speed_mps, self.carrier_hz)
        if window > tc:
            raise CoherenceError(
                f"feedback window dt*T = {self.feedback_interval_s:g}*{self.group_len} = {window:g} s "
                f"exceeds coherence time c/(2 v f0) = {tc:.4g} s; shorten T or the feedback interval")

    @classmethod
    def paper_scale(cls, **kw) -> "ScenarioConfig":
        base = dict(n_subcarriers=256, n_antennas=32, n_delay=32, group_len=10)
        base.update(kw)
        return cls(**base)

    @classmethod
    def isotropic(cls, **kw) -> "ScenarioConfig":
        base = dict(angle_center=0.0, angle_halfwidth=1.0, delay_decay_bins=None)
        base.update(kw)
        return cls(**base)

    @classmethod
    def indoor(cls, **kw) -> "ScenarioConfig":
        base = dict(carrier_hz=5.3e9, ue_speed_mps=0.001)
        base.update(kw)
        return cls(**base)


def coherence_time(speed_mps: float, carrier_hz: float) -> float:
    """Channel coherence time c / (2 v f0) in seconds."""
    if speed_mps == 0:
        raise ValueError("static channel: coherence time unbounded")
    if speed_mps < 0 or carrier_hz <= 0:
        raise ValueError("speed and carrier frequency must be positive")
    return SPEED_OF_LIGHT / (2.0 * speed_mps * carrier_hz)


@dataclass
class PathSet:
    gains: np.ndarray      # complex, (P,)
    delays: np.ndarray     # seconds
    angles: np.ndarray     # radians from broadside
    dopplers: np.ndarray   # Hz

    def __len__(self) -> int:
        return self.gains.size


def sample_paths(config: ScenarioConfig, rng: np.random.Generator) -> PathSet:
    P = config.n_paths
    window = DELAY_WINDOW_FRACTION * config.n_delay
    if config.on_grid_delays:
        k = rng.integers(0, math.ceil(window), size=P)
        delays = k / config.bandwidth_hz
    else:
        delays = rng.uniform(0.0, window, size=P) / config.bandwidth_hz
    c, w = config.angle_center, config.angle_halfwidth
    angles = np.arcsin(rng.uniform(c - w, c + w, size=P))
    dopplers = config.max_doppler_hz * np.cos(rng.uniform(0.0, 2 * np.pi, size=P))
    if config.delay_decay_bins is None:
        power = np.full(P, 1.0 / P)
    else:
        power = np.exp(-delays * config.bandwidth_hz / config.delay_decay_bins)
        power /= power.sum()
    gains = (rng.standard_normal(P) + 1j * rng.standard_normal(P)) * np.sqrt(power / 2)
    return PathSet(gains, delays, angles, dopplers)


def channel_at(paths: PathSet, t: float, config: ScenarioConfig) -> np.ndarray:
    """Spatial-frequency CSI matrix (n_subcarriers x n_antennas) at time ``t``."""
    f = np.arange(config.n_subcarriers) * config.bandwidth_hz / config.n_subcarriers
    m = np.arange(config.n_antennas)
    g = paths.gains * np.exp(2j * np.pi * paths.dopplers * t)
    freq = np.exp(-2j * np.pi * np.outer(f, paths.delays))          # (Nc, P)
    space = np.exp(1j * np.pi * np.outer(np.sin(paths.angles), m))  # (P, Nt)
    return (freq * g) @ space


def to_angular_delay(H: np.ndarray) -> np.ndarray:
    """Unitary 2D-DFT over the last two axes (subcarrier -> delay, antenna -> angle).

    Signs are chosen so a path with delay k/bandwidth lands on delay row k and
    a path with sin(theta) = 2l/N_t lands on angle column l (mod N_t).
    """
    return np.fft.fft(np.fft.ifft(H, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def from_angular_delay(Hp: np.ndarray) -> np.ndarray:
    return np.fft.ifft(np.fft.fft(Hp, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def truncate_delay(Hp: np.ndarray, n_delay: int) -> np.ndarray:
    if n_delay > Hp.shape[-2]:
        raise ValueError(f"cannot keep {n_delay} of {Hp.shape[-2]} delay rows")
    return Hp[..., :n_delay, :]


def pad_delay(Hpp: np.ndarray, n_subcarriers: int) -> np.ndarray:
    pad = [(0, 0)] * Hpp.ndim
    pad[-2] = (0, n_subcarriers - Hpp.shape[-2])
    return np.pad(Hpp, pad)


def to_planes(Hc: np.ndarray) -> np.ndarray:
    """Complex ``(..., R, C)`` to real ``(..., 2, R, C)`` with real plane first."""
    return np.stack([Hc.real, Hc.imag], axis=-3)


def from_planes(X: np.ndarray) -> np.ndarray:
    return X[..., 0, :, :] + 1j * X[..., 1, :, :]


@dataclass(frozen=True)
class NormStats:
    """Affine map ``(x - offset) / scale`` shared by real and imaginary planes."""
    offset: float
    scale: float

    def __post_init__(self):
        if self.scale == 0:
            raise ValueError("normalisation scale is zero")

    @classmethod
    def fit(cls, planes: np.ndarray) -> "NormStats":
        lo, hi = float(planes.min()), float(planes.max())
        return cls(lo, hi - lo)

    @property
    def zero_level(self) -> float:
        """Normalised value of a raw zero."""
        return -self.offset / self.scale


def normalize(planes: np.ndarray, stats: NormStats) -> np.ndarray:
    """Scale raw planes into [0, 1]; out-of-range values are clamped and counted."""
    x = (planes - stats.offset) / stats.scale
    n_out = int(np.count_nonzero((x < 0) | (x > 1)))
    if n_out:
        log.warning("normalize: clamped %d out-of-range elements", n_out)
        x = np.clip(x, 0.0, 1.0)
    return x


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return x * stats.scale + stats.offset


def group_rng(seed: int, split: int, group_id: int) -> np.random.Generator:
    """Independent stream per (seed, split, group)."""
    return np.random.default_rng([seed, split, group_id])


def generate_group(config: ScenarioConfig, split: int, group_id: int) -> np.ndarray:
    """One channel group as raw angular-delay planes, ``(T, 2, n_delay, n_antennas)``."""
    paths = sample_paths(config, group_rng(config.seed, split, group_id))
    frames = [channel_at(paths, k * config.feedback_interval_s, config)
              for k in range(config.group_len)]
    Hp = truncate_delay(to_angular_delay(np.stack(frames)), config.n_delay)
    return to_planes(Hp)


@dataclass
class Dataset:
    """Grouped raw angular-delay planes per split plus shared normalisation."""
    config: ScenarioConfig
    splits: dict[str, np.ndarray]  # each (G, T, 2, n_delay, n_antennas), raw values
    stats: NormStats
    version: int = DATASET_VERSION
    extra: dict = field(default_factory=dict)

    def raw(self, split: str) -> np.ndarray:
        return self.splits[split]

    def normalized(self, split: str) -> np.ndarray:
        return normalize(self.splits[split], self.stats)

    def counts(self) -> dict[str, int]:
        return {k: int(v.shape[0]) for k, v in self.splits.items()}

    def header(self) -> dict:
        return {
            "format": DATASET_MAGIC,
            "version": self.version,
            "config": asdict(self.config),
            "norm": {"offset": self.stats.offset, "scale": self.stats.scale},
            "counts": self.counts(),
            "split_order": list(self.splits),
            "layout": "group,frame,plane(real,imag),delay,antenna; float32 little-endian",
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, indent=1).encode()
        buf = io.BytesIO()
        buf.write(f"{DATASET_MAGIC} {len(head)}\n".encode())
        buf.write(head)
        for name in self.splits:
            buf.write(np.ascontiguousarray(self.splits[name], dtype="<f4").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        nl = blob.index(b"\n")
        magic, n = blob[:nl].decode().split()
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a dataset file (magic {magic!r})")
        start = nl + 1
        head = json.loads(blob[start:start + int(n)])
        if head["version"] != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {head['version']}")
        config = ScenarioConfig(**head["config"])
        frame_shape = (config.group_len, 2, config.n_delay, config.n_antennas)
        per_group = int(np.prod(frame_shape))
        pos = start + int(n)
        splits = {}
        for name in head["split_order"]:
            g = head["counts"][name]
            count = g * per_group
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            splits[name] = arr.astype(np.float64).reshape((g, *frame_shape))
            pos += 4 * count
        if pos != len(blob):
            raise ValueError("dataset file length does not match its header")
        stats = NormStats(head["norm"]["offset"], head["norm"]["scale"])
        return cls(config, splits, stats, head["version"])

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def generate_dataset(config: ScenarioConfig, counts: dict[str, int] | tuple[int, int, int]) -> Dataset:
    """Generate train/val/test channel groups.

    Raw values are rounded to float32 before the normalisation statistics are
    fitted, so a saved and reloaded dataset is identical to the in-memory one.
    """
    config.check_coherence()
    if not isinstance(counts, dict):
        counts = dict(zip(SPLITS, counts))
    if any(counts[s] < 1 for s in SPLITS):
        raise ValueError("every split needs at least one group")
    splits = {}
    for k, name in enumerate(SPLITS):
        groups = [generate_group(config, k, g) for g in range(counts[name])]
        splits[name] = np.stack(groups).astype("<f4").astype(np.float64)
    stats = NormStats.fit(splits["train"])
    return Dataset(config, splits, stats)


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(config, seed=seed)
