"""Perturbation behaviors: ranges, exactness, codecs, composition."""

import os
import sys

import numpy as np
import pytest

from audiomark.audio import Waveform, read_wav, write_wav
from audiomark.errors import (
    CodecError,
    CodecUnavailable,
    PipelineError,
    RangeError,
    TemplateError,
    UndefinedSnr,
)
from audiomark.metrics import snr
from audiomark.perturb import (
    CODEC_ENV_PREFIX,
    KIND_RANGES,
    PerturbationPipeline,
    PerturbationSpec,
    apply,
    apply_pipeline,
    canonical_kind,
    register_codec,
    unregister_codec,
)

from .conftest import noise_burst, sine


class TestSpecValidation:
    def test_twelve_kinds(self):
        assert len(KIND_RANGES) == 12

    @pytest.mark.parametrize(
        "alias,canon",
        [
            ("GaussianNoise", "gaussian_noise"),
            ("gaussian-noise", "gaussian_noise"),
            ("TimeStretch", "time_stretch"),
            ("SoundStreamLike", "soundstream_like"),
            ("soundstream", "soundstream_like"),
            ("EncodecLike", "encodec_like"),
            ("OpusExt", "opus_ext"),
            ("mp3", "mp3_ext"),
            ("Lowpass", "lowpass_filter"),
            ("HighpassFilter", "highpass_filter"),
        ],
    )
    def test_kind_aliases(self, alias, canon):
        assert canonical_kind(alias) == canon
        assert PerturbationSpec(alias, KIND_RANGES[canon][0]).kind == canon

    def test_unknown_kind(self):
        with pytest.raises(RangeError):
            canonical_kind("reverb")
        with pytest.raises(RangeError):
            PerturbationSpec("reverb", 0.5)

    @pytest.mark.parametrize("kind", sorted(KIND_RANGES))
    def test_range_endpoints_accepted(self, kind):
        lo, hi = KIND_RANGES[kind]
        assert PerturbationSpec(kind, lo).param == lo
        assert PerturbationSpec(kind, hi).param == hi

    @pytest.mark.parametrize("kind", sorted(KIND_RANGES))
    def test_out_of_range_rejected(self, kind):
        lo, hi = KIND_RANGES[kind]
        span = hi - lo
        with pytest.raises(RangeError):
            PerturbationSpec(kind, lo - 0.01 * span)
        with pytest.raises(RangeError):
            PerturbationSpec(kind, hi + 0.01 * span)

    def test_pipeline_needs_stages(self):
        with pytest.raises(ValueError):
            PerturbationPipeline(())
        with pytest.raises(TypeError):
            PerturbationPipeline(("gaussian_noise",))
        pipe = PerturbationPipeline([PerturbationSpec("echo", 0.2)])
        assert isinstance(pipe.stages, tuple)


class TestNoise:
    def test_gaussian_snr_exact(self):
        x = noise_burst(3)
        for target in (5.0, 17.3, 40.0):
            y = apply(PerturbationSpec("gaussian_noise", target, seed=9), x)
            assert abs(snr(x, y) - target) < 1e-9

    def test_gaussian_deterministic(self):
        x = noise_burst(4)
        spec = PerturbationSpec("gaussian_noise", 20.0, seed=5)
        assert np.array_equal(apply(spec, x).samples, apply(spec, x).samples)
        other = apply(PerturbationSpec("gaussian_noise", 20.0, seed=6), x)
        assert not np.array_equal(apply(spec, x).samples, other.samples)

    def test_gaussian_silent_clip(self):
        silent = Waveform(np.zeros(8000), 16000)
        with pytest.raises(UndefinedSnr):
            apply(PerturbationSpec("gaussian_noise", 20.0), silent)

    def test_background_pink_fallback_snr(self):
        x = noise_burst(5)
        y = apply(PerturbationSpec("background_noise", 12.0, seed=2), x)
        assert abs(snr(x, y) - 12.0) < 1e-9

    def test_background_from_corpus_dir(self, speech_corpus_dir):
        root, _ = speech_corpus_dir
        x = noise_burst(6)
        spec = PerturbationSpec("background_noise", 10.0, seed=3, noise_corpus=str(root))
        y = apply(spec, x)
        assert abs(snr(x, y) - 10.0) < 1e-9
        assert np.array_equal(y.samples, apply(spec, x).samples)

    def test_background_from_single_file(self, tmp_path):
        write_wav(tmp_path / "amb.wav", noise_burst(7, duration_s=0.3))
        x = noise_burst(8)
        spec = PerturbationSpec(
            "background_noise", 15.0, noise_corpus=str(tmp_path / "amb.wav")
        )
        assert abs(snr(x, apply(spec, x)) - 15.0) < 1e-9

    def test_background_silent_excerpt(self, tmp_path):
        write_wav(tmp_path / "flat.wav", Waveform(np.zeros(4000), 16000))
        x = noise_burst(9)
        spec = PerturbationSpec(
            "background_noise", 15.0, noise_corpus=str(tmp_path / "flat.wav")
        )
        with pytest.raises(UndefinedSnr):
            apply(spec, x)


class TestEditsAndFilters:
    def test_time_stretch_length(self):
        x = noise_burst(10)
        for rate in (0.7, 0.85, 1.0, 1.5):
            y = apply(PerturbationSpec("time_stretch", rate), x)
            assert len(y) == int(np.floor(len(x) / rate + 0.5))

    def test_time_stretch_unit_rate_is_identity(self):
        x = noise_burst(11)
        y = apply(PerturbationSpec("time_stretch", 1.0), x)
        assert np.allclose(y.samples, x.samples, atol=1e-10)

    def test_quantization_idempotent(self):
        x = noise_burst(12, amp=0.7)
        for levels in (4, 17, 64):
            once = apply(PerturbationSpec("quantization", levels), x)
            twice = apply(PerturbationSpec("quantization", levels), once)
            assert np.array_equal(once.samples, twice.samples)

    def test_quantization_error_bound(self):
        # half a step everywhere the input stays inside [-1, 1]
        x = sine(440, amp=0.9)
        y = apply(PerturbationSpec("quantization", 32), x)
        assert np.max(np.abs(y.samples - x.samples)) <= 1.0 / 32 + 1e-12

    def test_lowpass_blocks_high_passes_low(self):
        # cutoff parameter is a fraction of Nyquist: 0.25 -> 2 kHz at 16 kHz
        lo, hi = sine(300), sine(6000)
        spec = PerturbationSpec("lowpass_filter", 0.25)
        out_lo = apply(spec, lo).samples[2000:]
        out_hi = apply(spec, hi).samples[2000:]
        assert np.sqrt(np.mean(out_lo**2)) > 0.9 * np.sqrt(np.mean(lo.samples[2000:] ** 2))
        assert np.sqrt(np.mean(out_hi**2)) < 0.02 * np.sqrt(np.mean(hi.samples[2000:] ** 2))

    def test_highpass_blocks_low_passes_high(self):
        lo, hi = sine(300), sine(7000)
        spec = PerturbationSpec("highpass_filter", 0.5)
        out_lo = apply(spec, lo).samples[2000:]
        out_hi = apply(spec, hi).samples[2000:]
        assert np.sqrt(np.mean(out_lo**2)) < 0.02 * np.sqrt(np.mean(lo.samples[2000:] ** 2))
        assert np.sqrt(np.mean(out_hi**2)) > 0.9 * np.sqrt(np.mean(hi.samples[2000:] ** 2))

    def test_smooth_preserves_dc_attenuates_treble(self):
        flat = Waveform(np.full(8000, 0.25), 16000)
        assert np.allclose(apply(PerturbationSpec("smooth", 11), flat).samples, 0.25)
        buzz = sine(6000)
        out = apply(PerturbationSpec("smooth", 11), buzz).samples[100:-100]
        assert np.sqrt(np.mean(out**2)) < 0.05 * np.sqrt(np.mean(buzz.samples**2))

    def test_echo_adds_delayed_copy(self):
        x = noise_burst(14, amp=0.2)
        y = apply(PerturbationSpec("echo", 0.1), x)
        d = int(round(0.1 * 16000))
        assert np.array_equal(y.samples[:d], x.samples[:d])
        assert np.allclose(y.samples[d:], x.samples[d:] + 0.5 * x.samples[:-d])

    def test_echo_renormalizes_only_on_clip(self):
        loud = Waveform(0.95 * np.ones(4000), 16000)
        y = apply(PerturbationSpec("echo", 0.1), loud)
        assert np.abs(y.samples).max() <= 1.0

    def test_echo_longer_than_clip_is_noop(self):
        x = noise_burst(15, duration_s=0.5)
        y = apply(PerturbationSpec("echo", 0.9), x)
        assert np.array_equal(y.samples, x.samples)


class TestCodecStandIns:
    def test_soundstream_severity_monotone(self):
        x = noise_burst(16)
        values = [
            snr(x, apply(PerturbationSpec("soundstream_like", q), x))
            for q in (4, 8, 12, 16)
        ]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_encodec_severity_monotone(self):
        x = noise_burst(17)
        values = [
            snr(x, apply(PerturbationSpec("encodec_like", bw), x))
            for bw in (1.5, 6.0, 24.0)
        ]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_encodec_truncates_bandwidth(self):
        x = noise_burst(18)
        y = apply(PerturbationSpec("encodec_like", 1.5), x)
        spec = np.abs(np.fft.rfft(y.samples)) ** 2
        edge = int(np.ceil(2000 * len(x) / 16000))
        assert spec[edge:].sum() < 0.01 * spec.sum()

    def test_stand_in_content_keyed_determinism(self):
        x = noise_burst(19)
        spec = PerturbationSpec("soundstream_like", 8)
        assert np.array_equal(apply(spec, x).samples, apply(spec, x).samples)
        other = noise_burst(20)
        delta = apply(spec, x).samples - x.samples
        delta_other = apply(spec, other).samples - other.samples
        assert not np.allclose(delta, delta_other)

    def test_stand_in_silence_passes_through(self):
        silent = Waveform(np.zeros(8000), 16000)
        y = apply(PerturbationSpec("soundstream_like", 4), silent)
        assert np.allclose(y.samples, 0.0)


# Stub codec commands, exercised through the template mechanism.

COPY_CODEC = """\
import shutil, sys
shutil.copy(sys.argv[1], sys.argv[2])
"""

PARAM_CODEC = """\
import shutil, sys
shutil.copy(sys.argv[1], sys.argv[2])
with open(sys.argv[4], "a") as fh:
    fh.write(sys.argv[3] + "\\n")
"""

HALF_RATE_CODEC = """\
import sys
from audiomark.audio import Waveform, read_wav, write_wav
w = read_wav(sys.argv[1])
write_wav(sys.argv[2], Waveform(w.samples[::2], w.sample_rate // 2))
"""

FAIL_CODEC = """\
import sys
sys.stderr.write("transcoder kaboom")
sys.exit(3)
"""

SILENT_FAIL_CODEC = """\
import sys
sys.exit(0)
"""


@pytest.fixture
def stub_codec(tmp_path):
    made = []

    def make(name, source, extra=""):
        script = tmp_path / f"{name}.py"
        script.write_text(source)
        register_codec(
            name, f"{sys.executable} {script} {{in}} {{out}} {{param}} {extra}".strip()
        )
        made.append(name)
        return script

    yield make
    for name in made:
        unregister_codec(name)


class TestCodecTemplates:
    def test_template_requires_placeholders(self):
        with pytest.raises(TemplateError) as err:
            register_codec("mp3", "lame -b {param} input.wav")
        assert "{in}" in str(err.value) and "{out}" in str(err.value)

    def test_missing_template_is_unavailable(self):
        x = noise_burst(21)
        with pytest.raises(CodecUnavailable) as err:
            apply(PerturbationSpec("mp3_ext", 24.0), x)
        assert "register_codec" in str(err.value)
        assert CODEC_ENV_PREFIX + "MP3" in str(err.value)

    def test_copy_codec_roundtrip(self, stub_codec):
        stub_codec("opus", COPY_CODEC)
        x = noise_burst(22)
        y = apply(PerturbationSpec("opus_ext", 64.0), x)
        assert y.sample_rate == x.sample_rate
        assert len(y) == len(x)
        # lossless stub; only the 16-bit WAV leg quantizes
        assert np.max(np.abs(y.samples - x.samples)) <= 2.0**-15

    def test_param_formatting(self, stub_codec, tmp_path):
        log = tmp_path / "params.log"
        stub_codec("mp3", PARAM_CODEC, extra=str(log))
        x = noise_burst(23, duration_s=0.2)
        apply(PerturbationSpec("mp3_ext", 16.0), x)
        apply(PerturbationSpec("mp3_ext", 22.5), x)
        assert log.read_text().split() == ["16", "22.5"]

    def test_rate_changing_codec_output_restored(self, stub_codec):
        stub_codec("opus", HALF_RATE_CODEC)
        # below the decimated Nyquist, so the content survives the rate trip
        x = sine(500, amp=0.4)
        y = apply(PerturbationSpec("opus_ext", 32.0), x)
        assert y.sample_rate == x.sample_rate
        assert len(y) == len(x)
        assert snr(x, y) > 10.0

    def test_codec_failure_carries_stderr(self, stub_codec):
        stub_codec("mp3", FAIL_CODEC)
        with pytest.raises(CodecError) as err:
            apply(PerturbationSpec("mp3_ext", 16.0), noise_burst(25))
        assert "transcoder kaboom" in str(err.value)

    def test_codec_without_output_file(self, stub_codec):
        stub_codec("mp3", SILENT_FAIL_CODEC)
        with pytest.raises(CodecError) as err:
            apply(PerturbationSpec("mp3_ext", 16.0), noise_burst(26))
        assert "no output" in str(err.value)

    def test_env_template(self, tmp_path, monkeypatch):
        script = tmp_path / "copy.py"
        script.write_text(COPY_CODEC)
        monkeypatch.setenv(
            CODEC_ENV_PREFIX + "OPUS",
            f"{sys.executable} {script} {{in}} {{out}} {{param}}",
        )
        x = noise_burst(27)
        y = apply(PerturbationSpec("opus_ext", 48.0), x)
        assert np.max(np.abs(y.samples - x.samples)) <= 2.0**-15

    def test_env_template_validated(self, monkeypatch):
        monkeypatch.setenv(CODEC_ENV_PREFIX + "OPUS", "opusenc {in} {out}")
        with pytest.raises(TemplateError):
            apply(PerturbationSpec("opus_ext", 48.0), noise_burst(28))

    def test_registry_overrides_stand_in(self, stub_codec):
        x = noise_burst(29)
        builtin = apply(PerturbationSpec("soundstream_like", 4), x)
        stub_codec("soundstream", COPY_CODEC)
        through_stub = apply(PerturbationSpec("soundstream_like", 4), x)
        assert not np.allclose(builtin.samples, through_stub.samples)
        assert np.max(np.abs(through_stub.samples - x.samples)) <= 2.0**-15


class TestPipeline:
    def test_matches_manual_composition(self):
        x = noise_burst(30)
        pipe = PerturbationPipeline(
            [
                PerturbationSpec("gaussian_noise", 20.0, seed=4),
                PerturbationSpec("quantization", 16),
                PerturbationSpec("lowpass_filter", 0.3),
            ]
        )
        manual = x
        for stage in pipe.stages:
            manual = apply(stage, manual)
        assert np.array_equal(apply_pipeline(pipe, x).samples, manual.samples)

    def test_stage_failure_is_located(self):
        # quantizing to 4 levels keeps signal; the silent clip kills stage 1
        silent = Waveform(np.zeros(8000), 16000)
        pipe = PerturbationPipeline(
            [
                PerturbationSpec("quantization", 5),
                PerturbationSpec("gaussian_noise", 20.0),
            ]
        )
        quantized_silence = apply(pipe.stages[0], silent)
        assert not np.any(quantized_silence.samples)
        with pytest.raises(PipelineError) as err:
            apply_pipeline(pipe, silent)
        assert err.value.stage_index == 1
        assert err.value.stage_kind == "gaussian_noise"
        assert isinstance(err.value.cause, UndefinedSnr)


class TestCompositionSeverity:
    def test_codec_stack_outmisses_either_stage(self, stub_codec):
        """A codec chain misses more watermarks than its worst single stage."""
        from audiomark.harness import synthesize_speech_like
        from audiomark.schemes import SchemeConfig, make_scheme, random_bits

        stub_codec("mp3", _DEGRADE_CODEC)
        scheme = make_scheme(SchemeConfig(kind="spread_spectrum", seed=5))
        stages = {
            "encodec": PerturbationPipeline([PerturbationSpec("encodec_like", 24.0)]),
            "mp3": PerturbationPipeline([PerturbationSpec("mp3_ext", 16.0)]),
            "both": PerturbationPipeline(
                [PerturbationSpec("encodec_like", 24.0), PerturbationSpec("mp3_ext", 16.0)]
            ),
        }
        misses = dict.fromkeys(stages, 0)
        clips = 16
        for i in range(clips):
            wave = synthesize_speech_like(
                seed=4600 + i, duration_s=1.0, rate=16000, sex="female" if i % 2 else "male"
            )
            bits = random_bits(16, 700 + i)
            marked = scheme.embed(wave, bits)
            for label, pipe in stages.items():
                out = apply_pipeline(pipe, marked)
                misses[label] += not scheme.decode(out, bits).decision
        assert misses["both"] > misses["encodec"]
        assert misses["both"] > misses["mp3"]


_DEGRADE_CODEC = """\
import sys
import numpy as np
from audiomark.audio import Waveform, read_wav, write_wav
w = read_wav(sys.argv[1])
levels = max(8, int(round(float(sys.argv[3]) * 1.5)))
peak = float(np.abs(w.samples).max()) or 1.0
x = w.samples / peak
step = 2.0 / levels
cells = np.clip(np.floor((x + 1.0) / step), 0, levels - 1)
write_wav(sys.argv[2], Waveform((-1.0 + (cells + 0.5) * step) * peak, w.sample_rate))
"""
