"""Frozen stub encoders: one broadband base encoder and three specialised weak experts.

Each encoder frames the waveform, computes a hand-designed per-frame
descriptor, multiplies by a fixed random projection drawn from its seed and
squashes with tanh.  Nothing here is trainable.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError

KINDS = ("base", "envelope_expert", "spectral_expert", "burst_expert")

# Pool order used everywhere a weak-expert index appears.
DEFAULT_POOL = ("envelope_expert", "spectral_expert", "burst_expert")

NUM_BANDS = 13


@dataclass
class AudioSegment:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("audio must be mono (1-D)")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("audio samples must be finite")
        if np.any(np.abs(self.samples) > 4.0):
            raise InvalidInputError("audio samples must lie in [-4, 4]")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    output_dim: int
    frame_len: int = 50
    hop: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if not self.frame_len > self.hop > 0:
            raise ConfigError("need frame_len > hop > 0")
        if self.output_dim < 1:
            raise ConfigError("output_dim must be >= 1")

    @property
    def descriptor_dim(self) -> int:
        if self.kind == "base":
            return self.frame_len // 2 + 1
        if self.kind == "spectral_expert":
            return NUM_BANDS
        return 2

    def projection(self) -> np.ndarray:
        return _projection(self.seed, self.descriptor_dim, self.output_dim)

    def num_frames(self, num_samples: int) -> int:
        return 1 + (num_samples - self.frame_len) // self.hop


@dataclass
class FeatureMap:
    """Time-major (T, d) features."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError("FeatureMap values must be 2-D (T, d)")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@functools.lru_cache(maxsize=64)
def _projection(seed: int, in_dim: int, out_dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
    w.setflags(write=False)
    return w


@functools.lru_cache(maxsize=16)
def _dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    # Real and imaginary parts of the naive DFT for bins 0..n//2.
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    ang = 2.0 * np.pi * k * t / n
    c, s = np.cos(ang), -np.sin(ang)
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def preprocess(raw: AudioSegment, target_duration_s: float, target_rate_hz: int) -> AudioSegment:
    """Resample by linear interpolation, then crop from the start or zero-pad at the end."""
    if target_duration_s <= 0 or target_rate_hz <= 0:
        raise ConfigError("target duration and rate must be positive")
    if len(raw) == 0:
        raise InvalidInputError("cannot preprocess an empty segment")
    x = raw.samples
    if raw.sample_rate_hz != target_rate_hz:
        n_out = max(1, int(round(len(x) * target_rate_hz / raw.sample_rate_hz)))
        t_out = np.arange(n_out) / target_rate_hz
        t_in = np.arange(len(x)) / raw.sample_rate_hz
        x = np.interp(t_out, t_in, x)
    n = int(round(target_duration_s * target_rate_hz))
    if len(x) >= n:
        x = x[:n].copy()
    else:
        x = np.concatenate([x, np.zeros(n - len(x))])
    return AudioSegment(x, target_rate_hz)


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if len(x) < frame_len:
        raise InvalidInputError(f"segment of {len(x)} samples is shorter than one frame ({frame_len})")
    n_frames = 1 + (len(x) - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def dft_magnitude(frames: np.ndarray) -> np.ndarray:
    c, s = _dft_matrices(frames.shape[-1])
    re = frames @ c.T
    im = frames @ s.T
    return np.sqrt(re * re + im * im)


def descriptor(spec: EncoderSpec, frames: np.ndarray, sample_rate_hz: int) -> np.ndarray:
    """Raw per-frame descriptor, before projection."""
    n = spec.frame_len
    if spec.kind == "base":
        return np.log(dft_magnitude(frames) + 1e-3)
    if spec.kind == "envelope_expert":
        env = np.abs(frames).mean(axis=1)
        diff = np.concatenate([[0.0], np.diff(env)])
        return np.stack([env, diff], axis=1)
    if spec.kind == "spectral_expert":
        # unit-amplitude sinusoid ~ 1 in its band
        mag = dft_magnitude(frames) / (n / 2.0)
        bands = np.array_split(np.arange(mag.shape[1]), NUM_BANDS)
        return np.stack([mag[:, b].mean(axis=1) for b in bands], axis=1)
    # burst_expert
    power = dft_magnitude(frames) ** 2
    freqs = np.arange(power.shape[1]) * sample_rate_hz / n
    high = power[:, freqs > 0.25 * (sample_rate_hz / 2.0)].sum(axis=1)
    total = power.sum(axis=1)
    ratio = np.divide(high, total, out=np.zeros_like(total), where=total > 0)
    peak = np.abs(frames).max(axis=1)
    return np.stack([ratio, peak], axis=1)


def encode(spec: EncoderSpec, a: AudioSegment) -> FeatureMap:
    frames = frame_signal(a.samples, spec.frame_len, spec.hop)
    desc = descriptor(spec, frames, a.sample_rate_hz)
    return FeatureMap(np.tanh(desc @ spec.projection()))


def encode_batch(spec: EncoderSpec, audio: np.ndarray, sample_rate_hz: int) -> np.ndarray:
    """Encode a (N, num_samples) stack of equal-length waveforms -> (N, T, d)."""
    return np.stack([encode(spec, AudioSegment(x, sample_rate_hz)).values for x in audio])


def align_time(z: FeatureMap, target_frames: int) -> FeatureMap:
    """Linear interpolation along time to ``target_frames`` frames."""
    t1 = z.frames
    if t1 < 1 or target_frames < 1:
        raise InvalidInputError("align_time needs at least one frame on both sides")
    if t1 == target_frames:
        return FeatureMap(z.values.copy())
    if t1 == 1:
        return FeatureMap(np.repeat(z.values, target_frames, axis=0))
    pos = np.linspace(0.0, t1 - 1.0, target_frames) if target_frames > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t1 - 1)
    w = (pos - lo)[:, None]
    return FeatureMap((1.0 - w) * z.values[lo] + w * z.values[hi])


@dataclass(frozen=True)
class EncoderPool:
    """The base encoder plus the ordered weak-expert pool."""

    base: EncoderSpec
    experts: tuple[EncoderSpec, ...] = field(default_factory=tuple)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.kind for e in self.experts)

    def index(self, kind: str) -> int:
        return self.names.index(kind)

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        out = {"encoder.base.projection": self.base.projection()}
        for e in self.experts:
            out[f"encoder.{e.kind}.projection"] = e.projection()
        return out


def default_pool(d_base: int = 32, d_w: int = 16, frame_len: int = 50, hop: int = 25,
                 seed: int = 1234, kinds=DEFAULT_POOL) -> EncoderPool:
    """Desk-scale pool; projection seeds are derived from ``seed`` and the kind."""

    def kind_seed(kind: str) -> int:
        h = hashlib.sha256(f"{seed}:{kind}".encode()).digest()
        return int.from_bytes(h[:8], "little")

    base = EncoderSpec("base", d_base, frame_len, hop, kind_seed("base"))
    experts = tuple(EncoderSpec(k, d_w, frame_len, hop, kind_seed(k)) for k in kinds)
    return EncoderPool(base, experts)
