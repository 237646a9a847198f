"""Core audio plumbing: waveforms, STFT/ISTFT, WAV files, resampling, seeds.

All internal processing is float64 mono. Sample values are nominally in
[-1, 1] but are never clipped here except at the 16-bit WAV write boundary,
so intermediate stages (echo tails, codec overshoot, adversarial noise) keep
their headroom.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import (
    FormatError,
    InvalidOverlap,
    RangeError,
    SignalTooShort,
    UnsupportedEncoding,
)

DEFAULT_SAMPLE_RATE = 16000

_U64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _U64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """Fan a master seed out to a module-specific stream.

    XORs the seed with a stable 64-bit hash of the tag, so every module
    draws from an independent stream while one --seed reproduces the run.
    """
    return (int(seed) ^ _fnv1a64(tag)) & _U64


def rng_for(seed: int, tag: str = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag) if tag else int(seed) & _U64)


@dataclass(frozen=True)
class Waveform:
    """Mono audio: 1-D float64 samples plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("empty waveform")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise RangeError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftParams:
    """Analysis parameters. Hann window; hop must overlap-add cleanly.

    Only hop = window/2 or window/4 are accepted: those are the Hann hops
    where overlap-add reconstruction is well conditioned end to end.
    """

    window_size: int = 512
    hop_size: int = 128
    window: str = "hann"

    def __post_init__(self):
        w, h = self.window_size, self.hop_size
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if w < 16 or w % 4 != 0:
            raise ValueError(f"window_size must be a multiple of 4 and >= 16, got {w}")
        if h not in (w // 2, w // 4):
            raise InvalidOverlap(
                f"hop {h} with window {w}: need hop = window/2 or window/4"
            )

    @property
    def bins(self) -> int:
        return self.window_size // 2 + 1


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass
class Spectrogram:
    """Polar STFT: amplitude and phase, both [frames, bins], plus bookkeeping
    to invert back to exactly ``original_length`` samples."""

    amplitude: np.ndarray
    phase: np.ndarray
    params: StftParams
    sample_rate: int
    original_length: int

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.amplitude.shape != self.phase.shape:
            raise ValueError("amplitude and phase shapes differ")
        if self.amplitude.ndim != 2 or self.amplitude.shape[1] != self.params.bins:
            raise ValueError(
                f"expected [frames, {self.params.bins}] arrays, got {self.amplitude.shape}"
            )
        if np.any(self.amplitude < 0):
            raise ValueError("negative amplitude")
        w, h = self.params.window_size, self.params.hop_size
        total = (self.amplitude.shape[0] - 1) * h + w
        if not (0 < self.original_length <= total - w // 2):
            raise ValueError("original_length inconsistent with frame count")

    @property
    def frames(self) -> int:
        return self.amplitude.shape[0]

    def to_complex(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)


def frame_count(n_samples: int, params: StftParams) -> int:
    return 1 + int(np.ceil(n_samples / params.hop_size))


def _frame_signal(x: np.ndarray, params: StftParams) -> np.ndarray:
    """Pad and slice into hop-aligned windows of window_size samples."""
    w, h = params.window_size, params.hop_size
    n = x.size
    n_frames = frame_count(n, params)
    total = (n_frames - 1) * h + w
    pad_front = w // 2
    pad_back = total - pad_front - n
    xp = np.concatenate([np.zeros(pad_front), x, np.zeros(pad_back)])
    return np.lib.stride_tricks.sliding_window_view(xp, w)[::h]


def stft(wave: Waveform, params: StftParams | None = None) -> Spectrogram:
    """Short-time Fourier transform to polar form.

    Linear in the input (up to the polar split) and invertible by istft to
    better than 1e-6 relative error.
    """
    params = params or StftParams()
    x = wave.samples
    if x.size < params.window_size:
        raise SignalTooShort(
            f"signal of {x.size} samples shorter than window {params.window_size}"
        )
    win = _hann_periodic(params.window_size)
    frames = _frame_signal(x, params) * win
    spec = scipy.fft.rfft(frames, axis=1)
    amplitude = np.abs(spec)
    phase = np.angle(spec)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return Spectrogram(amplitude, phase, params, wave.sample_rate, x.size)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Overlap-add along the last two axes ([..., n_frames, window])."""
    *lead, n_frames, w = frames.shape
    step = w // hop
    total = (n_frames - 1) * hop + w
    out = np.zeros((*lead, total), dtype=frames.dtype)
    for r in range(step):
        sel = frames[..., r::step, :]
        m = sel.shape[-2]
        if m == 0:
            continue
        out[..., r * hop : r * hop + m * w] += sel.reshape(*lead, m * w)
    return out


_DENOM_CACHE: dict = {}


def _wola_denominator(n_frames: int, params: StftParams, original_length: int):
    """Summed-squared-window normalizer, cached: attack loops synthesize
    thousands of candidates with identical framing."""
    key = (n_frames, params.window_size, params.hop_size, original_length)
    denom = _DENOM_CACHE.get(key)
    if denom is None:
        w, h = params.window_size, params.hop_size
        win = _hann_periodic(w)
        wsum = _overlap_add(np.tile(win**2, (n_frames, 1)), h)
        lo = w // 2
        d = wsum[lo : lo + original_length]
        denom = np.where(d > 0, d, 1.0)
        if len(_DENOM_CACHE) > 64:
            _DENOM_CACHE.clear()
        _DENOM_CACHE[key] = denom
    return denom


def synthesize(
    amplitude: np.ndarray,
    phase: np.ndarray,
    params: StftParams,
    original_length: int,
) -> np.ndarray:
    """Raw ISTFT on bare arrays; supports a leading batch axis.

    Windowed overlap-add divided by the summed squared window. Used directly
    by attack loops that churn through thousands of candidate spectrograms.
    """
    w, h = params.window_size, params.hop_size
    win = _hann_periodic(w)
    spec = amplitude * np.exp(1j * phase)
    frames = scipy.fft.irfft(spec, n=w, axis=-1) * win
    num = _overlap_add(frames, h)
    n_frames = frames.shape[-2]
    lo = w // 2
    hi = lo + original_length
    if hi > num.shape[-1]:
        raise ValueError("original_length longer than synthesized span")
    return num[..., lo:hi] / _wola_denominator(n_frames, params, original_length)


def istft(sg: Spectrogram) -> Waveform:
    """Invert a Spectrogram back to a Waveform of its original length."""
    y = synthesize(sg.amplitude, sg.phase, sg.params, sg.original_length)
    return Waveform(y, sg.sample_rate)


# WAV I/O. Hand-rolled RIFF so that "not a WAV" and "a WAV we don't decode"
# stay distinguishable; only 16-bit integer PCM is accepted.

_PCM_SCALE = 32768.0


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file; multi-channel input is downmixed by averaging."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt_body = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            fmt_body = body
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt_body is None or payload is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    if len(fmt_body) < 16:
        raise FormatError(f"{path}: fmt chunk too short")
    tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt_body[:16])
    if tag == 0xFFFE and len(fmt_body) >= 26:
        # WAVE_FORMAT_EXTENSIBLE: the real codec tag leads the sub-format GUID
        (tag,) = struct.unpack("<H", fmt_body[24:26])
    if tag != 1:
        raise UnsupportedEncoding(f"{path}: format tag {tag}, only PCM supported")
    if bits != 16:
        raise UnsupportedEncoding(f"{path}: {bits}-bit samples, only 16-bit supported")
    if channels < 1:
        raise FormatError(f"{path}: channel count 0")
    usable = len(payload) // (2 * channels) * (2 * channels)
    if usable == 0:
        raise FormatError(f"{path}: empty data chunk")
    raw = np.frombuffer(payload[:usable], dtype="<i2")
    x = raw.astype(np.float64) / _PCM_SCALE
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return Waveform(x, rate)


def write_wav(path, wave: Waveform) -> None:
    """Write mono 16-bit PCM. Samples are clipped to [-1, 1] here and only
    here; quantization error is at most one half step (2**-15)."""
    x = np.clip(wave.samples, -1.0, 1.0)
    q = np.clip(np.round(x * _PCM_SCALE), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    rate = wave.sample_rate
    block_align = 2
    header = b"".join(
        [
            b"RIFF",
            struct.pack("<I", 36 + len(payload)),
            b"WAVE",
            b"fmt ",
            struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * block_align, block_align, 16),
            b"data",
            struct.pack("<I", len(payload)),
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


# Resampling: band-limited interpolation with a 32-tap Hann-windowed sinc.

_TAPS = 32
_HALF = _TAPS // 2


def resample_ratio(x: np.ndarray, ratio: float, out_len: int | None = None) -> np.ndarray:
    """Resample by an arbitrary rate ratio (output rate / input rate)."""
    if ratio <= 0:
        raise RangeError(f"resample ratio must be positive, got {ratio}")
    n = x.size
    if out_len is None:
        out_len = int(np.floor(n * ratio + 0.5))
    if out_len < 1:
        raise SignalTooShort(f"resampling {n} samples by {ratio} leaves nothing")
    cutoff = min(1.0, ratio)
    positions = np.arange(out_len) / ratio
    base = np.floor(positions).astype(np.int64)
    frac = positions - base
    xp = np.concatenate([np.zeros(_HALF), x, np.zeros(_HALF + 1)])
    acc = np.zeros(out_len)
    norm = np.zeros(out_len)
    for k in range(-_HALF + 1, _HALF + 1):
        u = frac - k
        w = cutoff * np.sinc(cutoff * u) * (0.5 + 0.5 * np.cos(np.pi * u / _HALF))
        w[np.abs(u) >= _HALF] = 0.0
        acc += w * xp[base + k + _HALF]
        norm += w
    norm = np.where(np.abs(norm) > 1e-12, norm, 1.0)
    return acc / norm


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Change sample rate; the same rate returns the identical waveform."""
    if int(target_rate) <= 0:
        raise RangeError(f"target rate must be positive, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    y = resample_ratio(wave.samples, target_rate / wave.sample_rate)
    return Waveform(y, target_rate)
