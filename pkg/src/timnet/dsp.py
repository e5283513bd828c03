"""MFCC front end: framing, Hamming window, power spectrum, mel filterbank, DCT."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy.fft


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if samples.size < 1:
            raise ValueError("audio clip is empty")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 22050
    frame_ms: float = 50.0
    hop_ms: float = 12.5
    fft_size: int = 2048
    n_mels: int = 128
    n_mfcc: int = 39
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.frame_len < 1 or self.hop < 1:
            raise ValueError("frame and hop must each span at least one sample")
        if self.fft_size < self.frame_len:
            raise ValueError(f"fft_size {self.fft_size} is shorter than a frame ({self.frame_len} samples)")
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise ValueError(f"need 1 <= n_mfcc <= n_mels, got {self.n_mfcc} and {self.n_mels}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def frame_len(self) -> int:
        return int(np.floor(self.frame_ms * self.sample_rate / 1000))

    @property
    def hop(self) -> int:
        return int(np.floor(self.hop_ms * self.sample_rate / 1000))

    def describe(self) -> str:
        return ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))


@dataclass
class FeatureMatrix:
    """T x C MFCC frames for one utterance."""

    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"feature matrix must be T x C with T >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"feature matrix {self.source_id!r} has non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def n_frames(n_samples: int, cfg: FeatureConfig) -> int:
    if n_samples < cfg.frame_len:
        raise ValueError(
            f"signal of {n_samples} samples is shorter than one {cfg.frame_len}-sample frame"
        )
    return 1 + (n_samples - cfg.frame_len) // cfg.hop


def frame_signal(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
    """Split into overlapping Hamming-windowed frames, shape T x frame_len."""
    L, hop = cfg.frame_len, cfg.hop
    T = n_frames(clip.samples.size, cfg)
    idx = np.arange(T)[:, None] * hop + np.arange(L)[None, :]
    return clip.samples[idx] * np.hamming(L)


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    frames = np.atleast_2d(frames)
    if frames.shape[1] > fft_size:
        raise ValueError(f"frame length {frames.shape[1]} exceeds fft_size {fft_size}")
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


# Slaney auditory-toolbox mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    linear = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, linear)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    linear = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (np.maximum(m, _MIN_LOG_MEL) - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, linear)


def mel_band_edges(cfg: FeatureConfig) -> np.ndarray:
    """n_mels + 2 breakpoints in Hz, equally spaced on the mel axis over [0, sr/2]."""
    mels = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape n_mels x (fft_size/2 + 1)."""
    if cfg.n_mels < 2:
        raise ValueError("need at least 2 mel filters")
    edges = mel_band_edges(cfg)
    bin_hz = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(
            f"{cfg.n_mels} mel filters are too many for a {cfg.fft_size}-point FFT: "
            f"filter {int(empty[0])} covers no frequency bin"
        )
    return fb


def dct_ortho(x: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II along the last axis.

    The first element of each row is subtracted before the transform and its
    exact contribution restored into coefficient 0, so constant rows give
    exactly zero in every higher coefficient.
    """
    base = x[..., :1]
    out = scipy.fft.dct(x - base, type=2, norm="ortho", axis=-1)
    out[..., :1] += base * np.sqrt(x.shape[-1])
    return out


def log_mel(clip: AudioClip, cfg: FeatureConfig, filterbank: np.ndarray | None = None) -> np.ndarray:
    fb = mel_filterbank(cfg) if filterbank is None else filterbank
    spec = power_spectrum(frame_signal(clip, cfg), cfg.fft_size)
    return np.log(np.maximum(spec @ fb.T, cfg.log_floor))


def mfcc(clip: AudioClip, cfg: FeatureConfig, source_id: str = "") -> FeatureMatrix:
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"clip is sampled at {clip.sample_rate} Hz but features expect {cfg.sample_rate} Hz; resample first"
        )
    coeffs = dct_ortho(log_mel(clip, cfg))[:, : cfg.n_mfcc]
    return FeatureMatrix(coeffs, source_id)


def pad_or_truncate(f: FeatureMatrix, target_T: int) -> FeatureMatrix:
    if target_T < 1:
        raise ValueError("target frame count must be >= 1")
    v = f.values
    if v.shape[0] >= target_T:
        out = v[:target_T].copy()
    else:
        out = np.zeros((target_T, v.shape[1]))
        out[: v.shape[0]] = v
    return FeatureMatrix(out, f.source_id)


# ---------------------------------------------------------------------------
# file formats

FEATURE_MAGIC = b"TIMF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


def save_features(f: FeatureMatrix, path) -> None:
    T, C = f.values.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, C))
        fh.write(f.values.astype("<f4").tobytes(order="C"))


def load_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise ValueError(f"{path}: truncated feature cache header")
    magic, version, T, C = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature cache (magic {magic!r})")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature cache version {version}")
    body = data[_FEATURE_HEADER.size:]
    if len(body) != 4 * T * C:
        raise ValueError(f"{path}: expected {T}x{C} float32 values, found {len(body)} bytes")
    values = np.frombuffer(body, dtype="<f4").reshape(T, C).astype(np.float64)
    return FeatureMatrix(values, Path(path).stem)


def read_audio(path) -> AudioClip:
    """Read a 16-bit mono PCM WAV file or a raw little-endian float32 file (``.f32``, sample rate in a ``.rate`` sidecar or 22050)."""
    path = Path(path)
    if path.suffix.lower() == ".f32":
        rate_file = path.with_suffix(".rate")
        rate = int(rate_file.read_text().strip()) if rate_file.exists() else 22050
        samples = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
        return AudioClip(samples, rate)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono audio, found {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, found {8 * w.getsampwidth()}-bit")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: malformed WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
