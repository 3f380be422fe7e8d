"""High-frequency log-mel spectrogram (HF-LMS) features with context stacking.

The spectrogram uses a 4096-sample Hamming window with a 1634-sample hop
(940 ms / 37 ms at 44.1 kHz), centered frames via reflect padding, and a
48-band mel filterbank restricted to [f_min, f_max]. Dropping the filters
below 1 kHz is what turns the LMS into the HF-LMS. Feature vectors stack
the spectra at q=5 surrounding instants with a stride of 2, giving
(2q+1) * n_mel = 528 dimensions.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .dataio import AudioClip, DataError

DEFAULT_Q = 5
DEFAULT_CONTEXT_STRIDE = 2


@dataclass(frozen=True)
class SpectrogramConfig:
    """Spectrogram and mel filterbank parameters (window is always Hamming)."""

    window_len: int = 4096
    hop: int = 1634
    n_mel: int = 48
    f_min: float = 1000.0
    f_max: float = 22050.0
    log_floor: float = 1e-10
    sample_rate: int = 44100

    def __post_init__(self):
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if not self.window_len > self.hop > 0:
            raise ValueError("need window_len > hop > 0")
        if self.n_mel < 1:
            raise ValueError("n_mel must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def frame_period(self) -> float:
        return self.hop / self.sample_rate

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-clip feature rows, one per frame."""

    clip_id: str
    data: np.ndarray
    frame_period: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.size == 0:
            raise ValueError("data must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature entries must be finite")
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension standardization statistics fitted on the training set."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be matching 1-D vectors")

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.std


def n_frames_for(n_samples: int, hop: int) -> int:
    return (n_samples - 1) // hop + 1


def stft_power(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    """Power spectrogram, frames x (window_len/2+1) bins.

    Frame m is centered at sample m*hop; the signal is reflect-padded by
    window_len/2 on both ends so the count is floor((n-1)/hop)+1.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"clip rate {clip.sample_rate} != configured {cfg.sample_rate}"
        )
    x = clip.samples
    if x.size < cfg.hop:
        raise ValueError("clip shorter than one hop")
    half = cfg.window_len // 2
    padded = np.pad(x, half, mode="reflect")
    n_frames = n_frames_for(x.size, cfg.hop)
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_len)
    frames = frames[:: cfg.hop][:n_frames]
    window = np.hamming(cfg.window_len)
    spectrum = np.fft.rfft(frames * window, axis=1)
    return np.abs(spectrum) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectrogramConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, n_mel x bins, each row peak-normalized to 1.

    Centers are equally spaced on the mel scale between mel(f_min) and
    mel(f_max); triangles are linear in mel. Filters are zero outside
    [f_min, f_max].
    """
    bins = cfg.n_bins
    bin_freqs = np.arange(bins) * sample_rate / cfg.window_len
    bin_mels = hz_to_mel(bin_freqs)
    edges = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mel + 2)
    left, center, right = edges[:-2], edges[1:-1], edges[2:]
    rising = (bin_mels[None, :] - left[:, None]) / (center - left)[:, None]
    falling = (right[:, None] - bin_mels[None, :]) / (right - center)[:, None]
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1)
    if np.any(peaks <= 0):
        raise ValueError(
            "n_mel too large for the bin resolution (empty mel filter)"
        )
    return fb / peaks[:, None]


def hf_lms(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    """log(filterbank @ power + log_floor), natural log, frames x n_mel."""
    power = stft_power(clip, cfg)
    fb = mel_filterbank(cfg, clip.sample_rate)
    return np.log(power @ fb.T + cfg.log_floor)


def stack_context(lms: np.ndarray, q: int, stride: int) -> np.ndarray:
    """Concatenate rows m + j*stride for j = -q..q; edges replicate.

    Output is frames x (2q+1)*width with the frame count unchanged.
    """
    lms = np.asarray(lms, dtype=np.float64)
    if lms.ndim != 2 or lms.size == 0:
        raise ValueError("lms must be a non-empty 2-D matrix")
    if q < 0 or stride < 1:
        raise ValueError("need q >= 0 and stride >= 1")
    n = lms.shape[0]
    offsets = np.arange(-q, q + 1) * stride
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, n - 1)
    return lms[idx].reshape(n, -1)


def extract_features(
    clip: AudioClip,
    cfg: SpectrogramConfig,
    q: int = DEFAULT_Q,
    stride: int = DEFAULT_CONTEXT_STRIDE,
) -> FeatureMatrix:
    """HF-LMS + context stacking for one clip."""
    stacked = stack_context(hf_lms(clip, cfg), q, stride)
    return FeatureMatrix(
        clip_id=clip.id, data=stacked, frame_period=cfg.frame_period
    )


def standardize(features, stats: FeatureStats | None = None):
    """Per-dimension z-score; fits stats on the list when none are given.

    Returns (standardized feature list, stats). The std is floored at 1e-8
    so constant dimensions map to zero.
    """
    features = list(features)
    if stats is None:
        if not features:
            raise ValueError("cannot fit statistics on an empty training list")
        pooled = np.concatenate([fm.data for fm in features], axis=0)
        mean = pooled.mean(axis=0)
        std = np.maximum(pooled.std(axis=0), 1e-8)
        stats = FeatureStats(mean=mean, std=std)
    out = [
        FeatureMatrix(
            clip_id=fm.clip_id,
            data=stats.apply(fm.data),
            frame_period=fm.frame_period,
        )
        for fm in features
    ]
    return out, stats


# --- feature cache files ----------------------------------------------------

_CACHE_MAGIC = b"AVCF1\x00"


def write_feature_cache(path, fm: FeatureMatrix):
    """Binary per-clip record: id, frames, dim, frame_period, row-major f64 LE."""
    cid = fm.clip_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", len(cid)))
        fh.write(cid)
        fh.write(struct.pack("<IId", fm.frames, fm.dim, fm.frame_period))
        fh.write(np.ascontiguousarray(fm.data, dtype="<f8").tobytes())


def read_feature_cache(path) -> FeatureMatrix:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(_CACHE_MAGIC))
            if magic != _CACHE_MAGIC:
                raise DataError(f"{path}: not a feature cache file")
            (id_len,) = struct.unpack("<I", fh.read(4))
            cid = fh.read(id_len).decode("utf-8")
            frames, dim, frame_period = struct.unpack("<IId", fh.read(16))
            raw = fh.read(frames * dim * 8)
            if len(raw) != frames * dim * 8:
                raise DataError(f"{path}: truncated feature cache")
            data = np.frombuffer(raw, dtype="<f8").reshape(frames, dim)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except struct.error as exc:
        raise DataError(f"{path}: truncated feature cache") from exc
    return FeatureMatrix(clip_id=cid, data=data, frame_period=frame_period)
