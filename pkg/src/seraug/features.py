"""Log-mel feature extraction, normalization and segmentation.

Spectrograms are stored frames-first: ``values`` has shape ``(T, n_mels)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

MAGIC = b"MELS"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHBBII")
_DTYPE_CODES = {1: np.float32, 2: np.float64}


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 50.0
    overlap_ratio: float = 0.5
    n_mels: int = 128
    log_floor_db: float = -80.0

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise FeatureError("sample_rate_hz must be positive")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise FeatureError("overlap_ratio must lie in [0, 1)")
        if self.n_mels < 1:
            raise FeatureError("n_mels must be >= 1")
        if self.win_length < 2:
            raise FeatureError(f"window of {self.win_length} samples is too short")
        if self.hop_length < 1:
            raise FeatureError("hop must be at least one sample")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.win_length * (1.0 - self.overlap_ratio)))

    @property
    def n_fft(self) -> int:
        return self.win_length

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MelSpectrogram:
    values: np.ndarray
    config: FeatureConfig = field(default_factory=FeatureConfig)
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise FeatureError(f"expected a 2-D (frames x bands) array, got shape {self.values.shape}")
        if self.values.shape[1] != self.config.n_mels:
            raise FeatureError(
                f"band count {self.values.shape[1]} does not match n_mels={self.config.n_mels}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FeatureError("spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


# --- mel filterbank (Slaney-style mel scale, area-normalized triangles) -----

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(freqs):
    freqs = np.asarray(freqs, dtype=np.float64)
    mels = freqs / _F_SP
    log_t = freqs >= _MIN_LOG_HZ
    return np.where(log_t, _MIN_LOG_MEL + np.log(np.maximum(freqs, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP, mels)


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    freqs = _F_SP * mels
    log_t = mels >= _MIN_LOG_MEL
    return np.where(log_t, _MIN_LOG_HZ * np.exp(_LOGSTEP * (mels - _MIN_LOG_MEL)), freqs)


def mel_band_edges(sample_rate_hz: int, n_mels: int) -> np.ndarray:
    """Return the ``n_mels + 2`` corner frequencies (Hz) of the triangular filters."""
    lo, hi = hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2.0)
    return mel_to_hz(np.linspace(lo, hi, n_mels + 2))


def mel_filterbank(sample_rate_hz: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filterbank of shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0.0, sample_rate_hz / 2.0, n_fft // 2 + 1)
    edges = mel_band_edges(sample_rate_hz, n_mels)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def _frame(signal: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = (len(signal) - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(signal, win)[::hop][:n_frames]


def compute_mel_spectrogram(waveform, sample_rate_hz: int, cfg: FeatureConfig | None = None) -> MelSpectrogram:
    """Log-power mel spectrogram in dB, clamped below at ``cfg.log_floor_db``.

    Audio at a different rate is resampled to ``cfg.sample_rate_hz`` first.
    No centre padding is applied, so ``T = (N - win) // hop + 1``.
    """
    cfg = cfg or FeatureConfig()
    signal = np.asarray(waveform, dtype=np.float64)
    if signal.ndim != 1 or signal.size == 0:
        raise FeatureError("waveform must be a non-empty 1-D array")
    if not np.all(np.isfinite(signal)):
        raise FeatureError("waveform contains non-finite samples")
    if sample_rate_hz != cfg.sample_rate_hz:
        signal = resample_to(signal, sample_rate_hz, cfg.sample_rate_hz)

    win, hop = cfg.win_length, cfg.hop_length
    if len(signal) < win:
        raise FeatureError(f"utterance too short: {len(signal)} samples < window of {win}")

    frames = _frame(signal, win, hop)
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)) ** 2
    mel_power = power @ mel_filterbank(cfg.sample_rate_hz, cfg.n_fft, cfg.n_mels).T
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(np.maximum(mel_power, 1e-30))
    db = np.maximum(db, cfg.log_floor_db)
    return MelSpectrogram(db.astype(np.float32), cfg, normalized=False)


def resample_to(signal: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    from math import gcd

    g = gcd(int(src_rate), int(dst_rate))
    return resample_poly(signal, dst_rate // g, src_rate // g)


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM or float WAV file as mono float64 in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:  # unsigned 8-bit
            data = (data.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
        else:
            data = data.astype(np.float64) / -float(info.min)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data, int(rate)


def extract_file(path, cfg: FeatureConfig | None = None) -> MelSpectrogram:
    data, rate = load_wav(path)
    return compute_mel_spectrogram(data, rate, cfg)


def normalize_mel(mel: MelSpectrogram, stats: tuple[float, float] | None = None) -> MelSpectrogram:
    """Min-max map to [0, 1] using the utterance extrema or supplied ``(lo, hi)``.

    Values outside supplied stats are clipped. A constant input maps to zeros.
    """
    values = mel.values.astype(np.float64)
    lo, hi = (float(values.min()), float(values.max())) if stats is None else map(float, stats)
    if hi <= lo:
        out = np.zeros_like(values)
    else:
        out = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return MelSpectrogram(out.astype(mel.values.dtype), mel.config, normalized=True)


def loop_pad(values: np.ndarray, length: int) -> np.ndarray:
    """Repeat frames from the start until ``length`` frames are available."""
    if values.shape[0] >= length:
        return values
    reps = -(-length // values.shape[0])
    return np.concatenate([values] * reps, axis=0)[:length]


def segment_mel(mel: MelSpectrogram, frame_len: int, hop_frames: int) -> list[MelSpectrogram]:
    if frame_len < 1 or hop_frames < 1:
        raise FeatureError("frame_len and hop_frames must be >= 1")
    if mel.n_frames == 0:
        raise FeatureError("cannot segment an empty spectrogram")
    values = mel.values
    if values.shape[0] < frame_len:
        return [replace(mel, values=loop_pad(values, frame_len))]
    count = (values.shape[0] - frame_len) // hop_frames + 1
    return [
        replace(mel, values=values[i * hop_frames:i * hop_frames + frame_len])
        for i in range(count)
    ]


# --- binary container -------------------------------------------------------

def write_container(path, values: np.ndarray) -> None:
    """Header ``{magic, version, dtype code, byte order, T, bands}`` then row-major data."""
    values = np.ascontiguousarray(values)
    if values.ndim != 2:
        raise FeatureError("container holds 2-D arrays only")
    code = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}.get(values.dtype.newbyteorder("="))
    if code is None:
        raise FeatureError(f"unsupported dtype {values.dtype}")
    order = b">" if values.dtype.byteorder == ">" else b"<"
    if values.dtype.byteorder == "=":
        order = b"<" if np.little_endian else b">"
    header = _HEADER.pack(MAGIC, CONTAINER_VERSION, code, order[0], *values.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes(order="C"))


def read_container(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureError(f"{path}: truncated header")
    magic, version, code, order, n_frames, n_bands = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureError(f"{path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise FeatureError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    if code not in _DTYPE_CODES:
        raise FeatureError(f"{path}: unknown dtype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder(chr(order))
    expected = n_frames * n_bands * dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise FeatureError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(n_frames, n_bands).astype(dtype.newbyteorder("="))


class FeatureStore:
    """In-memory mapping ``utterance id -> MelSpectrogram`` with a directory format.

    On disk: one ``<id>.mel`` container per utterance plus ``feature_config.json``.
    """

    def __init__(self, config: FeatureConfig | None = None, items: dict | None = None):
        self.config = config or FeatureConfig()
        self._items: dict[str, MelSpectrogram] = dict(items or {})

    def __getitem__(self, key: str) -> MelSpectrogram:
        try:
            return self._items[key]
        except KeyError:
            raise KeyError(f"no features stored for utterance {key!r}") from None

    def __setitem__(self, key: str, mel: MelSpectrogram):
        self._items[key] = mel

    def __contains__(self, key) -> bool:
        return key in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def items(self):
        return self._items.items()

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        index = {}
        for i, key in enumerate(sorted(self._items)):
            fname = f"{i:06d}.mel"
            write_container(directory / fname, self._items[key].values)
            index[key] = {"file": fname, "normalized": self._items[key].normalized}
            written.append(directory / fname)
        (directory / "feature_config.json").write_text(json.dumps(self.config.to_dict(), indent=2))
        (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        written += [directory / "feature_config.json", directory / "index.json"]
        return written

    @classmethod
    def load(cls, directory) -> "FeatureStore":
        directory = Path(directory)
        cfg = FeatureConfig(**json.loads((directory / "feature_config.json").read_text()))
        index = json.loads((directory / "index.json").read_text())
        store = cls(cfg)
        for key, entry in index.items():
            store[key] = MelSpectrogram(read_container(directory / entry["file"]), cfg, entry["normalized"])
        return store
