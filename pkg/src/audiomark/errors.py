"""Exception taxonomy shared across the toolkit.

Every failure mode a caller is expected to branch on gets its own class;
generic programming errors stay ValueError/TypeError.
"""


class AudiomarkError(Exception):
    """Base class for all toolkit-specific errors."""


# audio core

class SignalTooShort(AudiomarkError):
    """Waveform shorter than the operation's minimum length."""


class InvalidOverlap(AudiomarkError):
    """STFT window/hop pair violates the constant-overlap-add condition."""


class FormatError(AudiomarkError):
    """File is not structurally valid RIFF/WAVE."""


class UnsupportedEncoding(AudiomarkError):
    """WAV encoding other than 16-bit integer PCM."""


# metrics

class ShapeError(AudiomarkError):
    """Operands have mismatched lengths or shapes."""


class UndefinedSnr(AudiomarkError):
    """SNR requested against an all-zero reference."""


class UndefinedRate(AudiomarkError):
    """Detection rate requested over an empty sample set."""


class DegenerateVariance(AudiomarkError):
    """t-test on groups with no variance (or fewer than two samples)."""


# watermark schemes

class GradientUnavailable(AudiomarkError):
    """Loss gradient requested from a scheme that cannot provide one."""


class AdapterError(AudiomarkError):
    """External scheme subprocess failed, timed out, or died."""


class ProtocolError(AudiomarkError):
    """External scheme replied with malformed or incomplete JSON."""


class CalibrationInfeasible(AudiomarkError):
    """No threshold on the grid meets both error-rate targets.

    Carries the measured (tau, fnr, fpr) curve for diagnostics.
    """

    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = curve if curve is not None else []


# perturbations

class RangeError(AudiomarkError):
    """Parameter outside its documented operating range."""


class TemplateError(AudiomarkError):
    """Codec command template is missing a required placeholder."""


class CodecUnavailable(AudiomarkError):
    """External codec kind used with no registered command."""


class CodecError(AudiomarkError):
    """External codec subprocess failed or produced unreadable output."""


class PipelineError(AudiomarkError):
    """A perturbation pipeline stage failed; records which one."""

    def __init__(self, stage_index, stage_kind, cause):
        super().__init__(f"pipeline stage {stage_index} ({stage_kind}): {cause}")
        self.stage_index = stage_index
        self.stage_kind = stage_kind
        self.cause = cause


# black-box attacks

class InitializationFailed(AudiomarkError):
    """Attack could not find any adversarial starting point."""


class OracleError(AudiomarkError):
    """Decision/score oracle raised or returned an unusable value."""


# harness / reporting

class ManifestError(AudiomarkError):
    """Corpus manifest line is malformed or references a missing file."""


class EmptyReport(AudiomarkError):
    """Report emission requested with no rows."""
