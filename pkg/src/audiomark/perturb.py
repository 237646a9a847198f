"""No-box perturbations: the twelve audio edits, composition, and codecs.

Severity is controlled by one key parameter per kind with a fixed valid
range. Neural-codec entries ship with a built-in stand-in (subband residual
quantization plus a quality-tracked noise floor) so the benchmark runs
without external binaries; real codecs plug in through command templates.
"""

from __future__ import annotations

import hashlib
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.signal

from .audio import StftParams, Waveform, resample_ratio, rng_for, stft, synthesize
from .errors import (
    CodecError,
    CodecUnavailable,
    PipelineError,
    RangeError,
    TemplateError,
    UndefinedSnr,
)

KIND_RANGES = {
    "time_stretch": (0.7, 1.5),
    "gaussian_noise": (5.0, 40.0),
    "background_noise": (5.0, 40.0),
    "soundstream_like": (4.0, 16.0),
    "opus_ext": (16.0, 256.0),
    "encodec_like": (1.5, 24.0),
    "quantization": (4.0, 64.0),
    "highpass_filter": (0.1, 0.5),
    "lowpass_filter": (0.1, 0.5),
    "smooth": (6.0, 22.0),
    "echo": (0.1, 0.9),
    "mp3_ext": (8.0, 40.0),
}

_KIND_ALIASES = {
    "timestretch": "time_stretch",
    "gaussiannoise": "gaussian_noise",
    "backgroundnoise": "background_noise",
    "soundstreamlike": "soundstream_like",
    "soundstream": "soundstream_like",
    "opusext": "opus_ext",
    "opus": "opus_ext",
    "encodeclike": "encodec_like",
    "encodec": "encodec_like",
    "quantization": "quantization",
    "highpassfilter": "highpass_filter",
    "highpass": "highpass_filter",
    "lowpassfilter": "lowpass_filter",
    "lowpass": "lowpass_filter",
    "smooth": "smooth",
    "echo": "echo",
    "mp3ext": "mp3_ext",
    "mp3": "mp3_ext",
}


def canonical_kind(kind: str) -> str:
    key = str(kind).replace("-", "_").lower()
    canon = _KIND_ALIASES.get(key.replace("_", ""), key)
    if canon not in KIND_RANGES:
        raise RangeError(f"unknown perturbation kind {kind!r}")
    return canon


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    param: float
    seed: int = 0
    noise_corpus: str | None = None

    def __post_init__(self):
        canon = canonical_kind(self.kind)
        object.__setattr__(self, "kind", canon)
        lo, hi = KIND_RANGES[canon]
        if not (lo <= self.param <= hi):
            raise RangeError(
                f"{canon} parameter {self.param} outside [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class PerturbationPipeline:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("pipeline needs at least one stage")
        if not all(isinstance(s, PerturbationSpec) for s in stages):
            raise TypeError("stages must be PerturbationSpec instances")
        object.__setattr__(self, "stages", stages)


# codec command templates

CODEC_ENV_PREFIX = "AUDIOMARK_CODEC_"
_PLACEHOLDERS = ("{in}", "{out}", "{param}")
_CODEC_REGISTRY: dict[str, str] = {}

_KIND_CODEC_NAME = {
    "opus_ext": "opus",
    "mp3_ext": "mp3",
    "soundstream_like": "soundstream",
    "encodec_like": "encodec",
}


def register_codec(name: str, template: str) -> None:
    """Register a shell template with {in} {out} {param} placeholders."""
    missing = [p for p in _PLACEHOLDERS if p not in template]
    if missing:
        raise TemplateError(
            f"codec template for {name!r} lacks placeholders: {', '.join(missing)}"
        )
    _CODEC_REGISTRY[name.lower()] = template


def unregister_codec(name: str) -> None:
    _CODEC_REGISTRY.pop(name.lower(), None)


def _codec_template(kind: str) -> str | None:
    name = _KIND_CODEC_NAME.get(kind)
    if name is None:
        return None
    template = _CODEC_REGISTRY.get(name)
    if template is None:
        template = os.environ.get(CODEC_ENV_PREFIX + name.upper())
        if template is not None:
            for p in _PLACEHOLDERS:
                if p not in template:
                    raise TemplateError(
                        f"codec template from {CODEC_ENV_PREFIX + name.upper()} "
                        f"lacks placeholder {p}"
                    )
    return template


def codec_available(kind: str) -> bool:
    """Whether the kind can run here: built-in, or external with a template."""
    kind = canonical_kind(kind)
    if _KIND_CODEC_NAME.get(kind) is None:
        return True
    if kind in ("soundstream_like", "encodec_like"):
        return True  # stand-in path needs no binary
    return _codec_template(kind) is not None


def _run_codec(template: str, spec: PerturbationSpec, wave: Waveform) -> Waveform:
    from .audio import read_wav, write_wav

    with tempfile.TemporaryDirectory(prefix="audiomark-codec") as td:
        in_path = os.path.join(td, "in.wav")
        out_path = os.path.join(td, "out.wav")
        write_wav(in_path, wave)
        command = (
            template.replace("{in}", in_path)
            .replace("{out}", out_path)
            .replace("{param}", repr(spec.param) if spec.param % 1 else str(int(spec.param)))
        )
        try:
            proc = subprocess.run(
                shlex.split(command), capture_output=True, timeout=300
            )
        except OSError as exc:
            raise CodecError(f"cannot run codec command {command!r}: {exc}") from exc
        except subprocess.TimeoutExpired as exc:
            raise CodecError(f"codec command timed out: {command!r}") from exc
        if proc.returncode != 0:
            err = proc.stderr.decode("utf-8", "replace").strip()[-2000:]
            raise CodecError(
                f"codec exited with {proc.returncode}: {err or '<no stderr>'}"
            )
        if not os.path.exists(out_path):
            raise CodecError(f"codec wrote no output file: {command!r}")
        decoded = read_wav(out_path)
    return decoded


def _match_length(samples: np.ndarray, n: int) -> np.ndarray:
    if samples.size >= n:
        return samples[:n]
    return np.concatenate([samples, np.zeros(n - samples.size)])


# built-in kinds


def _scaled_noise(wave: Waveform, noise: np.ndarray, snr_db: float) -> np.ndarray:
    power_s = float(np.sum(wave.samples**2))
    if power_s == 0.0:
        raise UndefinedSnr("cannot hit an SNR target on a silent clip")
    power_n = float(np.sum(noise**2))
    scale = np.sqrt(power_s / (power_n * 10.0 ** (snr_db / 10.0)))
    return wave.samples + scale * noise


def _apply_gaussian(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    rng = rng_for(spec.seed, "gaussian-noise")
    noise = rng.standard_normal(len(wave))
    return Waveform(_scaled_noise(wave, noise, spec.param), wave.sample_rate)


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.arange(spec.size, dtype=np.float64)
    freqs[0] = 1.0
    spec = spec / np.sqrt(freqs)
    spec[0] = 0.0
    return np.fft.irfft(spec, n=n)


def _apply_background(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    rng = rng_for(spec.seed, "background-noise")
    n = len(wave)
    if spec.noise_corpus:
        from .audio import read_wav, resample

        root = spec.noise_corpus
        if os.path.isdir(root):
            names = sorted(
                f for f in os.listdir(root) if f.lower().endswith(".wav")
            )
            if not names:
                raise FileNotFoundError(f"no .wav files under {root}")
            choice = os.path.join(root, names[int(rng.integers(len(names)))])
        else:
            choice = root
        src = read_wav(choice)
        src = resample(src, wave.sample_rate)
        samples = src.samples
        if samples.size < n:
            reps = int(np.ceil(n / samples.size))
            samples = np.tile(samples, reps)
        offset = int(rng.integers(0, samples.size - n + 1)) if samples.size > n else 0
        noise = samples[offset : offset + n]
    else:
        noise = _pink_noise(n, rng)
    if not np.any(noise):
        raise UndefinedSnr("background noise excerpt is silent")
    return Waveform(_scaled_noise(wave, noise, spec.param), wave.sample_rate)


def _apply_time_stretch(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    return Waveform(
        resample_ratio(wave.samples, 1.0 / spec.param), wave.sample_rate
    )


def _apply_quantization(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    levels = int(round(spec.param))
    step = 2.0 / levels
    cells = np.clip(np.floor((wave.samples + 1.0) / step), 0, levels - 1)
    return Waveform(-1.0 + (cells + 0.5) * step, wave.sample_rate)


def _apply_butterworth(spec: PerturbationSpec, wave: Waveform, btype: str) -> Waveform:
    sos = scipy.signal.butter(6, spec.param, btype=btype, output="sos")
    return Waveform(scipy.signal.sosfilt(sos, wave.samples), wave.sample_rate)


def _apply_smooth(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    length = int(round(spec.param))
    sigma = spec.param / 6.0
    centered = np.arange(length, dtype=np.float64) - (length - 1) / 2.0
    kernel = np.exp(-0.5 * (centered / sigma) ** 2)
    kernel /= kernel.sum()
    out = scipy.ndimage.convolve1d(wave.samples, kernel, mode="nearest")
    return Waveform(out, wave.sample_rate)


def _apply_echo(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    delay = int(round(spec.param * wave.sample_rate))
    out = wave.samples.copy()
    if delay < len(wave):
        out[delay:] += 0.5 * wave.samples[: len(wave) - delay]
    peak = float(np.abs(out).max())
    if peak > 1.0:
        out = out / peak
    return Waveform(out, wave.sample_rate)


# Neural-codec stand-in.  Three ingredients: per-subband residual scalar
# quantization of the spectrogram (transform-codec texture), optional
# bandwidth truncation, and a resynthesis noise floor whose SNR tracks the
# quality knob.  The floor models what matters about neural codecs here:
# waveform-domain error that is NOT proportional to local signal level.
# It is keyed off the input content, not a run seed, so identical inputs
# always produce identical outputs.

_RQ_PARAMS = StftParams()
_RQ_SUBBANDS = 8
_RQ_BASE = 2.0
_ENCODEC_STAGES = 10
# noise-floor SNR in dB at the two ends of each control range
_SS_FLOOR_SNR = (12.0, 42.0)
_EC_FLOOR_SNR = (12.0, 18.0)


def _subband_edges(bins: int) -> np.ndarray:
    # roughly log-spaced subbands over the positive-frequency bins
    edges = np.unique(
        np.round(np.geomspace(1, bins - 1, _RQ_SUBBANDS + 1)).astype(int)
    )
    edges[0] = 0
    edges[-1] = bins
    return edges


def _residual_quantize(coeffs: np.ndarray, stages: int) -> np.ndarray:
    """Quantize complex STFT coefficients subband by subband."""
    out = np.zeros_like(coeffs)
    edges = _subband_edges(coeffs.shape[1])
    for lo, hi in zip(edges[:-1], edges[1:]):
        band = coeffs[:, lo:hi]
        rms = float(np.sqrt(np.mean(np.abs(band) ** 2)))
        if rms == 0.0:
            continue
        residual = band.copy()
        total = np.zeros_like(band)
        step = _RQ_BASE * rms
        for _ in range(stages):
            q = step * (
                np.round(residual.real / step) + 1j * np.round(residual.imag / step)
            )
            total += q
            residual -= q
            step /= 2.0
        out[:, lo:hi] = total
    return out


def _content_rng(wave: Waveform, tag: str) -> np.random.Generator:
    digest = hashlib.blake2b(digest_size=16)
    digest.update(tag.encode())
    digest.update(np.ascontiguousarray(wave.samples).tobytes())
    return np.random.default_rng(int.from_bytes(digest.digest(), "little"))


def _codec_floor_snr(kind: str, param: float) -> float:
    lo, hi = KIND_RANGES[kind]
    fraction = (param - lo) / (hi - lo)
    snr_lo, snr_hi = _SS_FLOOR_SNR if kind == "soundstream_like" else _EC_FLOOR_SNR
    return snr_lo + (snr_hi - snr_lo) * float(np.clip(fraction, 0.0, 1.0))


def _stand_in_codec(
    wave: Waveform,
    stages: int,
    bandwidth_hz: float | None,
    floor_snr_db: float,
    tag: str,
) -> Waveform:
    sg = stft(wave, _RQ_PARAMS)
    coeffs = sg.to_complex()
    cut = None
    if bandwidth_hz is not None:
        cut = int(np.floor(bandwidth_hz * _RQ_PARAMS.window_size / wave.sample_rate))
        coeffs[:, cut + 1 :] = 0.0
    coeffs = _residual_quantize(coeffs, stages)
    out = synthesize(np.abs(coeffs), np.angle(coeffs), _RQ_PARAMS, sg.original_length)
    decoded = Waveform(out, wave.sample_rate)
    if float(np.sum(out**2)) == 0.0:
        return decoded
    noise = _content_rng(wave, tag).standard_normal(len(wave))
    if cut is not None:
        # keep the floor inside the surviving band
        shaped = np.fft.rfft(noise)
        edge = int(np.floor(bandwidth_hz * len(wave) / wave.sample_rate))
        shaped[edge + 1 :] = 0.0
        noise = np.fft.irfft(shaped, len(wave))
    return Waveform(_scaled_noise(decoded, noise, floor_snr_db), wave.sample_rate)


def _apply_soundstream(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    template = _codec_template(spec.kind)
    if template is not None:
        decoded = _run_codec(template, spec, wave)
        return _finish_codec_output(decoded, wave)
    return _stand_in_codec(
        wave,
        stages=int(round(spec.param)),
        bandwidth_hz=None,
        floor_snr_db=_codec_floor_snr(spec.kind, spec.param),
        tag=f"soundstream/{spec.param!r}",
    )


def _apply_encodec(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    template = _codec_template(spec.kind)
    if template is not None:
        decoded = _run_codec(template, spec, wave)
        return _finish_codec_output(decoded, wave)
    return _stand_in_codec(
        wave,
        stages=_ENCODEC_STAGES,
        bandwidth_hz=spec.param * 1000.0,
        floor_snr_db=_codec_floor_snr(spec.kind, spec.param),
        tag=f"encodec/{spec.param!r}",
    )


def _finish_codec_output(decoded: Waveform, original: Waveform) -> Waveform:
    from .audio import resample

    decoded = resample(decoded, original.sample_rate)
    return Waveform(
        _match_length(decoded.samples, len(original)), original.sample_rate
    )


def _apply_external(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    template = _codec_template(spec.kind)
    if template is None:
        name = _KIND_CODEC_NAME[spec.kind]
        raise CodecUnavailable(
            f"{spec.kind} needs a codec command; register_codec({name!r}, ...) "
            f"or set {CODEC_ENV_PREFIX + name.upper()}"
        )
    decoded = _run_codec(template, spec, wave)
    return _finish_codec_output(decoded, wave)


_APPLY = {
    "gaussian_noise": _apply_gaussian,
    "background_noise": _apply_background,
    "time_stretch": _apply_time_stretch,
    "quantization": _apply_quantization,
    "highpass_filter": lambda s, w: _apply_butterworth(s, w, "highpass"),
    "lowpass_filter": lambda s, w: _apply_butterworth(s, w, "lowpass"),
    "smooth": _apply_smooth,
    "echo": _apply_echo,
    "soundstream_like": _apply_soundstream,
    "encodec_like": _apply_encodec,
    "opus_ext": _apply_external,
    "mp3_ext": _apply_external,
}


def apply(spec: PerturbationSpec, wave: Waveform) -> Waveform:
    return _APPLY[spec.kind](spec, wave)


def apply_pipeline(pipeline: PerturbationPipeline, wave: Waveform) -> Waveform:
    out = wave
    for index, stage in enumerate(pipeline.stages):
        try:
            out = apply(stage, out)
        except Exception as exc:
            raise PipelineError(index, stage.kind, exc) from exc
    return out
