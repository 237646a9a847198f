"""Reference watermarking schemes and the scheme abstraction.

Three built-in schemes cover the three detector families found in deployed
audio watermarking: a probability detector (global score P_s compared
strictly against tau), a bitwise-accuracy detector (BA >= tau), and a
sync-plus-payload detector (decoded sync word must equal the configured one
exactly, AND payload BA >= tau). All three share one embedding primitive:
multiplicative amplitude modulation of seeded, disjoint per-bit carrier
cells in the 1-6 kHz band, with phase untouched. A subprocess adapter wraps
external watermarking tools behind the same interface.
"""

from __future__ import annotations

import json
import os
import selectors
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.ndimage

from .audio import (
    StftParams,
    Waveform,
    _frame_signal,
    _hann_periodic,
    _overlap_add,
    frame_count,
    rng_for,
    stft,
    synthesize,
)
from .errors import (
    AdapterError,
    CalibrationInfeasible,
    GradientUnavailable,
    ProtocolError,
    SignalTooShort,
)
from .metrics import bitwise_accuracy

BAND_LO_HZ = 1000.0
BAND_HI_HZ = 6000.0
BLOCK_FRAMES = 16
RUN_BINS = 2

DEFAULT_PAYLOAD_BITS = 16
DEFAULT_EMBED_STRENGTH = 0.3
DEFAULT_SHARPNESS = 8.0
DEFAULT_SYNC = (1, 0, 1, 1, 0, 0, 1, 0)

KIND_SPREAD = "spread_spectrum"
KIND_PROB = "probability"
KIND_SYNC = "sync_payload"
KIND_EXTERNAL = "external"

_KIND_ALIASES = {
    "spreadspectrum": KIND_SPREAD,
    "spread_spectrum": KIND_SPREAD,
    "probability": KIND_PROB,
    "syncpayload": KIND_SYNC,
    "sync_payload": KIND_SYNC,
    "external": KIND_EXTERNAL,
}

# family defaults for the detector threshold; calibrate_threshold is the
# real source of a deployment tau
DEFAULT_TAUS = {
    KIND_SPREAD: 0.8125,
    KIND_PROB: 0.6,
    KIND_SYNC: 0.0,
    KIND_EXTERNAL: 0.5,
}

SCHEME_ENV_PREFIX = "AUDIOMARK_SCHEME_"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class WatermarkBits:
    """Fixed-length bit vector; the payload w, sync word, or forgery target."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) < 1:
            raise ValueError("need at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise ValueError("bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int64)

    def invert(self) -> "WatermarkBits":
        return WatermarkBits(tuple(1 - b for b in self.bits))

    def concat(self, other: "WatermarkBits") -> "WatermarkBits":
        return WatermarkBits(self.bits + other.bits)

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_string(cls, text: str) -> "WatermarkBits":
        if not text or any(ch not in "01" for ch in text):
            raise ValueError(f"bit string must be nonempty over 0/1, got {text!r}")
        return cls(tuple(int(ch) for ch in text))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "WatermarkBits":
        return cls(tuple(int(b) for b in rng.integers(0, 2, n)))


def random_bits(n: int, seed: int, tag: str = "watermark") -> WatermarkBits:
    return WatermarkBits.random(n, rng_for(seed, tag))


@dataclass(frozen=True)
class SchemeConfig:
    """Everything a scheme needs: family, strength, payload size, threshold.

    ``embed_strength`` 0 is allowed as an explicit no-op for experiments;
    every positive default satisfies the >= 25 dB embedding SNR target.
    """

    kind: str = KIND_SPREAD
    embed_strength: float = DEFAULT_EMBED_STRENGTH
    payload_bits: int = DEFAULT_PAYLOAD_BITS
    sync_bits: WatermarkBits | None = None
    detector_threshold: float | None = None
    sharpness: float = DEFAULT_SHARPNESS
    seed: int = 0
    stft_params: StftParams = field(default_factory=StftParams)
    name: str = ""
    command: str | None = None
    timeout_s: float = 60.0

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).replace("-", "_").lower())
        if kind is None:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.embed_strength < 0:
            raise ValueError("embed_strength must be >= 0")
        if self.payload_bits < 1:
            raise ValueError("payload_bits must be >= 1")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")
        sync = self.sync_bits
        if kind == KIND_SYNC:
            if sync is None:
                sync = WatermarkBits(DEFAULT_SYNC)
                object.__setattr__(self, "sync_bits", sync)
            if len(sync) < 8:
                raise ValueError(f"sync word needs >= 8 bits, got {len(sync)}")
        if self.detector_threshold is not None and not (
            0.0 <= self.detector_threshold <= 1.0
        ):
            raise ValueError(f"tau {self.detector_threshold} outside [0, 1]")

    @property
    def tau(self) -> float:
        if self.detector_threshold is not None:
            return self.detector_threshold
        return DEFAULT_TAUS[self.kind]

    @property
    def total_bits(self) -> int:
        if self.kind == KIND_SYNC:
            return len(self.sync_bits) + self.payload_bits
        return self.payload_bits

    def with_tau(self, tau: float) -> "SchemeConfig":
        from dataclasses import replace

        return replace(self, detector_threshold=float(tau))


@dataclass
class DetectionOutcome:
    decoded: WatermarkBits
    soft_bits: np.ndarray
    score: float
    decision: bool
    sync_matched: bool | None = None


# Carrier layout, patchwork style. The 1-6 kHz bins split into contiguous
# runs of RUN_BINS; adjacent runs form a pair, one side boosted and one cut.
# Balancing +/- inside every pair makes the per-bit correlation zero-mean on
# clean audio regardless of spectral shape, and keeps the local normalizer
# unbiased. Frames split into BLOCK_FRAMES-deep blocks; each block gets its
# own seeded pair-to-bit assignment and pair polarities, so every bit
# collects many independent (block, pair) patches per second. Gains are
# constant inside a patch, which survives the synthesis round trip; isolated
# per-cell signs would not.


class _CarrierLayout:
    def __init__(self, total_bits: int, params: StftParams, sample_rate: int, seed: int):
        w = params.window_size
        bins = params.bins
        lo = int(np.ceil(BAND_LO_HZ * w / sample_rate))
        hi = int(np.floor(BAND_HI_HZ * w / sample_rate))
        hi = min(hi, bins - 2)
        lo = max(lo, 1)
        band = np.arange(lo, hi + 1)
        n_pairs = band.size // (2 * RUN_BINS)
        if n_pairs < total_bits:
            raise ValueError(
                f"carrier band holds {n_pairs} pairs; too few for {total_bits} bits"
            )
        self.total_bits = total_bits
        self.band_lo = lo
        self.band_hi = hi
        self.bins = bins
        self.n_pairs = n_pairs
        self.seed = seed
        # bins and side polarity per (pair, side, run) cell, flattened
        pair_bins = band[: n_pairs * 2 * RUN_BINS].reshape(n_pairs, 2, RUN_BINS)
        side_sign = np.stack(
            [np.ones((n_pairs, RUN_BINS)), -np.ones((n_pairs, RUN_BINS))], axis=1
        )
        self._pair_cell_bins = pair_bins.reshape(n_pairs, -1)
        self._pair_cell_side = side_sign.reshape(n_pairs, -1)
        self._per_frames: dict[int, tuple] = {}

    def _block_plan(self, block: int):
        rng = rng_for(self.seed, f"carrier/{block}")
        perm = rng.permutation(self.n_pairs)
        bit_of_pair = np.empty(self.n_pairs, dtype=np.int64)
        bit_of_pair[perm] = np.arange(self.n_pairs) % self.total_bits
        polarity = rng.choice(np.array([-1.0, 1.0]), self.n_pairs)
        return bit_of_pair, polarity

    def for_frames(self, n_frames: int):
        """Cells for a clip with this many frames, grouped by bit.

        Returns (flat indices into the raveled [frames, bins] array, signs,
        per-bit segment starts for reduceat, bit id per cell).
        """
        cached = self._per_frames.get(n_frames)
        if cached is not None:
            return cached
        n_blocks = int(np.ceil(n_frames / BLOCK_FRAMES))
        cpp = self._pair_cell_bins.shape[1]  # cells per pair per frame
        all_flat, all_sign, all_bit = [], [], []
        for b in range(n_blocks):
            bit_of_pair, polarity = self._block_plan(b)
            frames = np.arange(b * BLOCK_FRAMES, min((b + 1) * BLOCK_FRAMES, n_frames))
            # [pair, cell] -> [pair, cell, frame], flattened
            signs = (polarity[:, None] * self._pair_cell_side)[..., None]
            flat = (
                self._pair_cell_bins[..., None] + self.bins * frames[None, None, :]
            )
            bits_cells = np.broadcast_to(
                bit_of_pair[:, None, None], (self.n_pairs, cpp, frames.size)
            )
            all_flat.append(flat.reshape(-1))
            all_sign.append(np.broadcast_to(signs, flat.shape).reshape(-1))
            all_bit.append(bits_cells.reshape(-1))
        flat = np.concatenate(all_flat)
        signs = np.concatenate(all_sign)
        bits_all = np.concatenate(all_bit)
        order = np.argsort(bits_all, kind="stable")
        flat = flat[order]
        signs = signs[order]
        bits_all = bits_all[order]
        starts = np.searchsorted(bits_all, np.arange(self.total_bits))
        counts = np.diff(np.append(starts, bits_all.size))
        if np.any(counts == 0):
            raise SignalTooShort(
                f"{n_frames} frames leave some bits without carrier cells"
            )
        out = (flat, signs, starts, bits_all)
        self._per_frames[n_frames] = out
        return out


# local spectral normalizer: a positive kernel over the frequency axis;
# dividing by it flattens formant structure so the per-cell residual keeps
# only channel-sized fluctuations and the clip's spectral shape drops out.
# 9 taps: wide enough to straddle a pair, narrow enough to track formants
_NORM_KERNEL = np.hanning(11)[1:-1]
_NORM_KERNEL = _NORM_KERNEL / _NORM_KERNEL.sum()


class _BuiltinScheme:
    """Shared machinery: carrier correlations, embedding, analytic gradient."""

    def __init__(self, cfg: SchemeConfig):
        self.cfg = cfg
        self.params = cfg.stft_params
        self._layouts: dict[int, _CarrierLayout] = {}

    # layout depends on the clip's sample rate; cache per rate
    def _layout(self, sample_rate: int) -> _CarrierLayout:
        layout = self._layouts.get(sample_rate)
        if layout is None:
            layout = _CarrierLayout(
                self.cfg.total_bits, self.params, sample_rate, self.cfg.seed
            )
            self._layouts[sample_rate] = layout
        return layout

    def _full_bits(self, payload: WatermarkBits) -> np.ndarray:
        if len(payload) != self.cfg.payload_bits:
            raise ValueError(
                f"payload has {len(payload)} bits, config says {self.cfg.payload_bits}"
            )
        if self.cfg.kind == KIND_SYNC:
            return self.cfg.sync_bits.concat(payload).array
        return payload.array

    # correlation forward pass on amplitude arrays [..., frames, bins]
    def _correlations(self, amp: np.ndarray, sample_rate: int, want_aux=False):
        layout = self._layout(sample_rate)
        flat_idx, signs, starts, _bits_all = layout.for_frames(amp.shape[-2])
        smooth = scipy.ndimage.convolve1d(amp, _NORM_KERNEL, axis=-1, mode="nearest")
        band = slice(layout.band_lo, layout.band_hi + 1)
        scale = np.mean(smooth[..., band], axis=(-2, -1), keepdims=True)
        eps_n = 1e-6 * scale + 1e-30
        v = amp / (smooth + eps_n)
        lead = v.shape[:-2]
        v_flat = v.reshape(*lead, -1)[..., flat_idx]
        num = np.add.reduceat(v_flat * signs, starts, axis=-1)
        den = np.add.reduceat(v_flat, starts, axis=-1)
        c = num / (den + 1e-12)
        if not want_aux:
            return c
        aux = {
            "layout": layout,
            "flat_idx": flat_idx,
            "signs": signs,
            "starts": starts,
            "smooth": smooth,
            "eps_n": eps_n,
            "v": v,
            "den": den,
            "c": c,
        }
        return c, aux

    def _corr_backward(self, dc: np.ndarray, amp_shape, aux) -> np.ndarray:
        """d(loss)/d(amplitude) from d(loss)/d(correlations). Single clip."""
        flat_idx = aux["flat_idx"]
        signs = aux["signs"]
        starts = aux["starts"]
        seg_len = np.diff(np.append(starts, flat_idx.size))
        bit_of_cell = np.repeat(np.arange(starts.size), seg_len)
        den_cell = aux["den"][bit_of_cell] + 1e-12
        c_cell = aux["c"][bit_of_cell]
        dv_cells = dc[bit_of_cell] * (signs - c_cell) / den_cell
        dv = np.zeros(amp_shape[0] * amp_shape[1])
        np.add.at(dv, flat_idx, dv_cells)
        dv = dv.reshape(amp_shape)
        smooth = aux["smooth"]
        eps = aux["eps_n"]
        # v = a / (smooth + eps): direct path plus the path through the
        # normalizer (the floor eps is treated as a constant)
        d_amp = dv / (smooth + eps)
        d_smooth = -dv * aux["v"] / (smooth + eps)
        d_amp += scipy.ndimage.convolve1d(d_smooth, _NORM_KERNEL, axis=-1, mode="nearest")
        return d_amp

    # embedding

    def _embedded_amplitude(self, sg, full_bits: np.ndarray):
        layout = self._layout(sg.sample_rate)
        flat_idx, signs, _starts, bits_all = layout.for_frames(sg.frames)
        amp = sg.amplitude.copy()
        factor = 1.0 + self.cfg.embed_strength * signs * (2.0 * full_bits[bits_all] - 1.0)
        flat = amp.reshape(-1)
        flat[flat_idx] *= factor
        return amp

    def embedded_spectrogram(self, wave: Waveform, payload: WatermarkBits):
        """The modified spectrogram before synthesis; phase is the input's."""
        from .audio import Spectrogram

        sg = stft(wave, self.params)
        amp = self._embedded_amplitude(sg, self._full_bits(payload))
        return Spectrogram(amp, sg.phase, sg.params, sg.sample_rate, sg.original_length)

    def embed(self, wave: Waveform, payload: WatermarkBits) -> Waveform:
        full = self._full_bits(payload)
        if self.cfg.embed_strength == 0.0:
            # explicit no-op; also keeps the output bit-identical
            self._layout(wave.sample_rate).for_frames(
                frame_count(len(wave), self.params)
            )
            return Waveform(wave.samples.copy(), wave.sample_rate)
        sg = stft(wave, self.params)
        amp = self._embedded_amplitude(sg, full)
        y = synthesize(amp, sg.phase, self.params, sg.original_length)
        return Waveform(y, wave.sample_rate)

    # decoding

    def decode_amplitude(self, amp: np.ndarray, sample_rate: int):
        """Correlations -> soft bits for amplitude arrays (batch friendly)."""
        c = self._correlations(amp, sample_rate)
        soft = _sigmoid(self.cfg.sharpness * c)
        return c, soft

    def decode(self, wave: Waveform, truth: WatermarkBits | None = None) -> DetectionOutcome:
        sg = stft(wave, self.params)
        c, soft = self.decode_amplitude(sg.amplitude, wave.sample_rate)
        return self._outcome(c, soft, truth)

    def detect(self, wave: Waveform, truth: WatermarkBits) -> bool:
        return self.decode(wave, truth).decision

    def _split(self, vec: np.ndarray):
        if self.cfg.kind == KIND_SYNC:
            ns = len(self.cfg.sync_bits)
            return vec[..., :ns], vec[..., ns:]
        return None, vec

    def _outcome(self, c, soft, truth) -> DetectionOutcome:
        raise NotImplementedError

    # losses and the analytic gradient

    def removal_target(self, payload: WatermarkBits) -> np.ndarray:
        """Full-length target bits whose CE loss pushes detection off."""
        return 1 - self._full_bits(payload)

    def forgery_target(self, payload: WatermarkBits) -> np.ndarray:
        """Full-length target bits whose CE loss pushes detection on."""
        return self._full_bits(payload)

    def loss_value(self, c: np.ndarray, target_full: np.ndarray, loss: str) -> float:
        k = self.cfg.sharpness
        if loss == "ce":
            soft = np.clip(_sigmoid(k * c), 1e-12, 1.0 - 1e-12)
            t = np.asarray(target_full, dtype=np.float64)
            return float(-np.sum(t * np.log(soft) + (1 - t) * np.log(1 - soft)))
        if loss == "hinge":
            p = float(_sigmoid(k * np.mean(np.abs(c))))
            return max(0.0, p - self.cfg.tau)
        if loss == "hinge_forge":
            p = float(_sigmoid(k * np.mean(np.abs(c))))
            return max(0.0, self.cfg.tau - p)
        raise ValueError(f"unknown loss {loss!r}")

    def loss_and_gradient(
        self, samples: np.ndarray, sample_rate: int, target_full: np.ndarray, loss: str = "ce"
    ):
        """Loss and its exact gradient with respect to the time samples."""
        params = self.params
        w, h = params.window_size, params.hop_size
        x = np.asarray(samples, dtype=np.float64)
        if x.size < w:
            raise SignalTooShort(f"{x.size} samples shorter than window {w}")
        win = _hann_periodic(w)
        frames = _frame_signal(x, params) * win
        spec = scipy.fft.rfft(frames, axis=1)
        amp = np.abs(spec)
        c, aux = self._correlations(amp, sample_rate, want_aux=True)
        k = self.cfg.sharpness
        n_total = c.size
        if loss == "ce":
            t = np.asarray(target_full, dtype=np.float64)
            if t.size != n_total:
                raise ValueError(f"target has {t.size} bits, scheme decodes {n_total}")
            soft = np.clip(_sigmoid(k * c), 1e-12, 1.0 - 1e-12)
            value = float(-np.sum(t * np.log(soft) + (1 - t) * np.log(1 - soft)))
            dc = k * (_sigmoid(k * c) - t)
        elif loss == "hinge":
            m = float(np.mean(np.abs(c)))
            p = float(_sigmoid(k * m))
            value = max(0.0, p - self.cfg.tau)
            if p > self.cfg.tau:
                dc = p * (1.0 - p) * (k / n_total) * np.sign(c)
            else:
                dc = np.zeros_like(c)
        elif loss == "hinge_forge":
            # mirror hinge: pull the presence statistic up through tau
            m = float(np.mean(np.abs(c)))
            p = float(_sigmoid(k * m))
            value = max(0.0, self.cfg.tau - p)
            if p < self.cfg.tau:
                dc = -p * (1.0 - p) * (k / n_total) * np.sign(c)
            else:
                dc = np.zeros_like(c)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        if not np.any(dc):
            return value, np.zeros_like(x)
        d_amp = self._corr_backward(dc, amp.shape, aux)
        safe = np.where(amp > 0, amp, 1.0)
        g_spec = d_amp * (spec / safe)
        g_spec[amp == 0] = 0
        # adjoint of rfft on real frames: halve interior bins, inverse
        # transform, scale by the window length
        g_spec[:, 1:-1] *= 0.5
        g_spec[:, 0] = g_spec[:, 0].real
        g_spec[:, -1] = g_spec[:, -1].real
        g_frames = w * scipy.fft.irfft(g_spec, n=w, axis=1) * win
        g_padded = _overlap_add(g_frames, h)
        lo = w // 2
        return value, g_padded[lo : lo + x.size]


class SpreadSpectrumScheme(_BuiltinScheme):
    """Bitwise-accuracy family: decision = BA(decoded, truth) >= tau."""

    def _outcome(self, c, soft, truth):
        decoded = WatermarkBits(tuple(int(b) for b in (soft >= 0.5)))
        if truth is not None:
            score = bitwise_accuracy(decoded, truth)
            decision = score >= self.cfg.tau
        else:
            score = float("nan")
            decision = False
        return DetectionOutcome(decoded, soft, score, decision, None)

    def scores_batch(self, amps: np.ndarray, sample_rate: int, truth: WatermarkBits):
        c = self._correlations(amps, sample_rate)
        decoded = c >= 0
        score = np.mean(decoded == truth.array.astype(bool), axis=-1)
        return score, score >= self.cfg.tau


class ProbabilityScheme(_BuiltinScheme):
    """Probability family: global P_s compared strictly against tau."""

    def p_s(self, c: np.ndarray):
        return _sigmoid(self.cfg.sharpness * np.mean(np.abs(c), axis=-1))

    def _outcome(self, c, soft, truth):
        decoded = WatermarkBits(tuple(int(b) for b in (soft >= 0.5)))
        score = float(self.p_s(c))
        return DetectionOutcome(decoded, soft, score, score > self.cfg.tau, None)

    def scores_batch(self, amps: np.ndarray, sample_rate: int, truth=None):
        c = self._correlations(amps, sample_rate)
        score = self.p_s(c)
        return score, score > self.cfg.tau


class SyncPayloadScheme(_BuiltinScheme):
    """Sync-gated family: sync word must match exactly, then BA >= tau."""

    def _outcome(self, c, soft, truth):
        sync_soft, payload_soft = self._split(soft)
        decoded = WatermarkBits(tuple(int(b) for b in (payload_soft >= 0.5)))
        sync_decoded = tuple(int(b) for b in (sync_soft >= 0.5))
        sync_matched = sync_decoded == self.cfg.sync_bits.bits
        if truth is not None:
            ba = bitwise_accuracy(decoded, truth)
            score = ba if sync_matched else 0.0
            decision = sync_matched and score >= self.cfg.tau
        else:
            score = float("nan")
            decision = False
        return DetectionOutcome(decoded, payload_soft, score, decision, sync_matched)

    def scores_batch(self, amps: np.ndarray, sample_rate: int, truth: WatermarkBits):
        c = self._correlations(amps, sample_rate)
        bits = c >= 0
        sync_bits, payload = self._split(bits)
        sync_ok = np.all(
            sync_bits == np.asarray(self.cfg.sync_bits.bits, dtype=bool), axis=-1
        )
        ba = np.mean(payload == truth.array.astype(bool), axis=-1)
        score = np.where(sync_ok, ba, 0.0)
        return score, sync_ok & (score >= self.cfg.tau)


class ExternalScheme:
    """Adapter speaking line-delimited JSON to a watermarking subprocess.

    One request object per line on stdin, one response per line on stdout;
    the subprocess stays alive across calls and is restarted if it dies.
    """

    def __init__(self, cfg: SchemeConfig):
        self.cfg = cfg
        self._proc = None
        self._stderr_path = None
        self._rbuf = b""
        command = cfg.command
        if not command and cfg.name:
            command = os.environ.get(SCHEME_ENV_PREFIX + cfg.name.upper())
        if not command:
            raise AdapterError(
                f"no command for external scheme {cfg.name or '<unnamed>'}; "
                f"set {SCHEME_ENV_PREFIX}<NAME> or pass --scheme-cmd"
            )
        self.command = command

    def _ensure_proc(self):
        if self._proc is not None and self._proc.poll() is None:
            return
        stderr_fh = tempfile.NamedTemporaryFile(
            mode="w+b", prefix="audiomark-scheme-err", delete=False
        )
        self._stderr_path = stderr_fh.name
        try:
            self._proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=stderr_fh,
            )
        except OSError as exc:
            raise AdapterError(f"cannot start {self.command!r}: {exc}") from exc
        finally:
            stderr_fh.close()

    def _stderr_tail(self) -> str:
        if not self._stderr_path or not os.path.exists(self._stderr_path):
            return ""
        try:
            with open(self._stderr_path, "rb") as fh:
                return fh.read()[-2000:].decode("utf-8", "replace").strip()
        except OSError:
            return ""

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._stderr_path and os.path.exists(self._stderr_path):
            try:
                os.unlink(self._stderr_path)
            except OSError:
                pass
        self._proc = None
        self._stderr_path = None
        self._rbuf = b""

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, request: dict) -> dict:
        self._ensure_proc()
        proc = self._proc
        try:
            proc.stdin.write((json.dumps(request) + "\n").encode())
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            err = self._stderr_tail()
            self.close()
            raise AdapterError(f"adapter process died: {exc}; stderr: {err}") from exc
        sel = selectors.DefaultSelector()
        sel.register(proc.stdout, selectors.EVENT_READ)
        start = time.monotonic()
        try:
            while b"\n" not in self._rbuf:
                remaining = self.cfg.timeout_s - (time.monotonic() - start)
                if remaining <= 0:
                    err = self._stderr_tail()
                    self.close()
                    raise AdapterError(
                        f"adapter timed out after {self.cfg.timeout_s}s; stderr: {err}"
                    )
                if not sel.select(timeout=remaining):
                    continue
                chunk = os.read(proc.stdout.fileno(), 65536)
                if not chunk:
                    err = self._stderr_tail()
                    self.close()
                    raise AdapterError(f"adapter closed stdout; stderr: {err}")
                self._rbuf += chunk
        finally:
            sel.close()
        line, self._rbuf = self._rbuf.split(b"\n", 1)
        try:
            reply = json.loads(line.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"unparseable adapter reply {line[:200]!r}") from exc
        if not isinstance(reply, dict) or "ok" not in reply:
            raise ProtocolError(f"adapter reply missing 'ok': {reply!r}")
        if not reply["ok"]:
            raise AdapterError(f"adapter error: {reply.get('error', '<unspecified>')}")
        return reply

    def embed(self, wave: Waveform, payload: WatermarkBits) -> Waveform:
        from .audio import read_wav, write_wav

        with tempfile.TemporaryDirectory(prefix="audiomark-ext") as td:
            in_path = os.path.join(td, "in.wav")
            out_path = os.path.join(td, "out.wav")
            write_wav(in_path, wave)
            self._call(
                {
                    "op": "embed",
                    "wav_path": in_path,
                    "out_path": out_path,
                    "bits": payload.to_string(),
                }
            )
            if not os.path.exists(out_path):
                raise ProtocolError("adapter claimed ok but wrote no output file")
            return read_wav(out_path)

    def decode(self, wave: Waveform, truth: WatermarkBits | None = None) -> DetectionOutcome:
        from .audio import write_wav

        with tempfile.TemporaryDirectory(prefix="audiomark-ext") as td:
            in_path = os.path.join(td, "in.wav")
            write_wav(in_path, wave)
            reply = self._call({"op": "decode", "wav_path": in_path})
        bits_text = reply.get("bits")
        prob = reply.get("prob")
        if bits_text is None and prob is None:
            raise ProtocolError("adapter decode reply carries neither bits nor prob")
        if bits_text is not None:
            try:
                decoded = WatermarkBits.from_string(bits_text)
            except ValueError as exc:
                raise ProtocolError(f"bad bits in adapter reply: {exc}") from exc
        else:
            decoded = WatermarkBits((0,) * self.cfg.payload_bits)
        soft = np.where(decoded.array > 0, 1.0 - 1e-3, 1e-3)
        if prob is not None:
            try:
                score = float(prob)
            except (TypeError, ValueError) as exc:
                raise ProtocolError(f"bad prob in adapter reply: {prob!r}") from exc
            decision = score > self.cfg.tau
        elif truth is not None:
            score = bitwise_accuracy(decoded, truth)
            decision = score >= self.cfg.tau
        else:
            score = float("nan")
            decision = False
        return DetectionOutcome(decoded, soft, score, decision, None)

    def detect(self, wave: Waveform, truth: WatermarkBits) -> bool:
        return self.decode(wave, truth).decision

    def loss_and_gradient(self, *args, **kwargs):
        raise GradientUnavailable("external schemes expose no gradients")


_SCHEME_CLASSES = {
    KIND_SPREAD: SpreadSpectrumScheme,
    KIND_PROB: ProbabilityScheme,
    KIND_SYNC: SyncPayloadScheme,
}

_BUILTIN_CACHE: dict[SchemeConfig, _BuiltinScheme] = {}


def make_scheme(cfg: SchemeConfig):
    """Scheme factory; built-in instances are cached per config."""
    if cfg.kind == KIND_EXTERNAL:
        return ExternalScheme(cfg)
    scheme = _BUILTIN_CACHE.get(cfg)
    if scheme is None:
        scheme = _SCHEME_CLASSES[cfg.kind](cfg)
        if len(_BUILTIN_CACHE) > 64:
            _BUILTIN_CACHE.clear()
        _BUILTIN_CACHE[cfg] = scheme
    return scheme


def embed(wave: Waveform, payload: WatermarkBits, cfg: SchemeConfig) -> Waveform:
    return make_scheme(cfg).embed(wave, payload)


def decode(wave: Waveform, cfg: SchemeConfig, truth: WatermarkBits | None = None):
    return make_scheme(cfg).decode(wave, truth)


def detect(wave: Waveform, truth: WatermarkBits, cfg: SchemeConfig) -> bool:
    return make_scheme(cfg).detect(wave, truth)


def gradient(
    wave: Waveform, target_full: np.ndarray, cfg: SchemeConfig, loss: str = "ce"
) -> np.ndarray:
    scheme = make_scheme(cfg)
    if isinstance(scheme, ExternalScheme):
        raise GradientUnavailable("external schemes expose no gradients")
    _, grad = scheme.loss_and_gradient(wave.samples, wave.sample_rate, target_full, loss)
    return grad


DEFAULT_TAU_GRID = np.round(np.linspace(0.0, 1.0, 161), 6)


@dataclass
class CalibrationResult:
    tau: float
    curve: list  # (tau, fnr, fpr) rows over the whole grid


def _decide_at(kind: str, score, sync_ok, tau: float):
    score = np.asarray(score)
    if kind == KIND_PROB:
        return score > tau
    decisions = score >= tau
    if kind == KIND_SYNC:
        decisions = decisions & np.asarray(sync_ok)
    return decisions


def calibrate_threshold(
    cfg: SchemeConfig,
    watermarked,
    unwatermarked,
    grid=None,
) -> CalibrationResult:
    """Smallest grid threshold with FNR < 0.01 and FPR < 0.01.

    ``watermarked`` and ``unwatermarked`` are sequences of (Waveform,
    ground-truth WatermarkBits) pairs; scores are computed once and swept
    over the grid. Raises CalibrationInfeasible (curve attached) if no
    threshold reaches both targets.
    """
    if grid is None:
        grid = DEFAULT_TAU_GRID
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be nonempty and sorted ascending")
    if not watermarked or not unwatermarked:
        raise ValueError("both corpora must be nonempty")
    scheme = make_scheme(cfg)

    def collect(pairs):
        scores, syncs = [], []
        for wave, truth in pairs:
            out = scheme.decode(wave, truth)
            scores.append(out.score)
            syncs.append(True if out.sync_matched is None else out.sync_matched)
        return np.array(scores), np.array(syncs)

    wm_score, wm_sync = collect(watermarked)
    un_score, un_sync = collect(unwatermarked)
    curve = []
    chosen = None
    for tau in grid:
        fnr = float(np.mean(~_decide_at(cfg.kind, wm_score, wm_sync, tau)))
        fpr = float(np.mean(_decide_at(cfg.kind, un_score, un_sync, tau)))
        curve.append((float(tau), fnr, fpr))
        if chosen is None and fnr < 0.01 and fpr < 0.01:
            chosen = float(tau)
    if chosen is None:
        raise CalibrationInfeasible(
            "no grid threshold reaches FNR < 0.01 and FPR < 0.01", curve=curve
        )
    return CalibrationResult(chosen, curve)
