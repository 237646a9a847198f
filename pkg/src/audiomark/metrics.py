"""Fidelity and detection metrics: SNR, bitwise accuracy, a perceptual-quality
proxy on a 1..5 scale, detection rates, and Welch's t-test."""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .audio import StftParams, Waveform, stft, write_wav
from .errors import (
    DegenerateVariance,
    ProtocolError,
    ShapeError,
    UndefinedRate,
    UndefinedSnr,
)

QUALITY_CMD_ENV = "AUDIOMARK_QUALITY_CMD"

# Log-spectral distance (dB) at which the proxy reads 3.0. Frozen from
# demos/calibrate_quality_proxy.py: mean distance of Gaussian noise at
# SNR 20 dB over the seeded synthetic corpus, divided by ln 2.
_QUALITY_D0_DB = 15.133


def snr(reference: np.ndarray | Waveform, perturbed: np.ndarray | Waveform) -> float:
    """Signal-to-noise ratio of perturbed against reference, in dB.

    +inf when the two are identical. The reference must carry energy.
    """
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    per = perturbed.samples if isinstance(perturbed, Waveform) else np.asarray(perturbed, dtype=np.float64)
    if ref.shape != per.shape:
        raise ShapeError(f"length mismatch: {ref.shape} vs {per.shape}")
    p_ref = np.mean(ref**2)
    if p_ref == 0.0:
        raise UndefinedSnr("all-zero reference")
    p_err = np.mean((per - ref) ** 2)
    if p_err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(p_ref / p_err))


def bitwise_accuracy(a, b) -> float:
    """Fraction of matching bit positions between two equal-length bit vectors."""
    av = np.asarray(getattr(a, "bits", a), dtype=np.int64).ravel()
    bv = np.asarray(getattr(b, "bits", b), dtype=np.int64).ravel()
    if av.shape != bv.shape:
        raise ShapeError(f"bit length mismatch: {av.size} vs {bv.size}")
    if av.size == 0:
        raise ShapeError("empty bit vectors")
    return float(np.mean(av == bv))


def _log_spectral_distance(ref: Waveform, per: Waveform) -> float:
    if len(ref) != len(per):
        raise ShapeError(f"length mismatch: {len(ref)} vs {len(per)}")
    params = StftParams()
    if len(ref) < params.window_size:
        # short snippets: fall back to a single full-length window
        w = 1 << int(np.floor(np.log2(max(16, len(ref)))))
        params = StftParams(max(16, w), max(16, w) // 2)
    a = stft(ref, params).amplitude
    b = stft(per, params).amplitude
    # floor relative to the reference's peak bin: silent cells contribute a
    # bounded amount and common gain changes cancel out
    eps = 1e-3 * max(a.max(), 1e-12)
    diff_db = 20.0 * (np.log10(a + eps) - np.log10(b + eps))
    return float(np.mean(np.sqrt(np.mean(diff_db**2, axis=1))))


def quality_proxy(reference: Waveform, perturbed: Waveform) -> float:
    """Built-in quality estimate in [1, 5]; identical audio scores 5.0.

    Mean log-spectral distance D mapped through 1 + 4*exp(-D/D0); D0 is
    calibrated so that additive Gaussian noise at SNR 20 dB sits near 3.0.
    """
    d = _log_spectral_distance(reference, perturbed)
    return float(1.0 + 4.0 * np.exp(-d / _QUALITY_D0_DB))


def quality_score(reference: Waveform, perturbed: Waveform) -> float:
    """Quality via the external tool named by AUDIOMARK_QUALITY_CMD, when set;
    the built-in proxy otherwise.

    The hook is invoked as ``<cmd> <reference.wav> <perturbed.wav>`` and must
    print one decimal number in [1, 5] on stdout.
    """
    cmd = os.environ.get(QUALITY_CMD_ENV, "").strip()
    if not cmd:
        return quality_proxy(reference, perturbed)
    with tempfile.TemporaryDirectory(prefix="audiomark-q") as td:
        ref_path = os.path.join(td, "ref.wav")
        per_path = os.path.join(td, "per.wav")
        write_wav(ref_path, reference)
        write_wav(per_path, perturbed)
        argv = shlex.split(cmd) + [ref_path, per_path]
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=60, check=False
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProtocolError(f"quality hook failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise ProtocolError(
            f"quality hook exited {proc.returncode}: {proc.stderr.strip()[:200]}"
        )
    try:
        value = float(proc.stdout.strip().split()[0])
    except (ValueError, IndexError) as exc:
        raise ProtocolError(f"quality hook stdout not a number: {proc.stdout!r}") from exc
    if not (1.0 <= value <= 5.0):
        raise ProtocolError(f"quality hook value {value} outside [1, 5]")
    return value


def detection_rates(watermarked_decisions, unwatermarked_decisions):
    """(FNR, FPR) from detector decisions on watermarked and clean samples."""
    wm = np.asarray(watermarked_decisions, dtype=bool)
    un = np.asarray(unwatermarked_decisions, dtype=bool)
    if wm.size == 0 or un.size == 0:
        raise UndefinedRate("no samples in at least one branch")
    fnr = float(np.mean(~wm))
    fpr = float(np.mean(un))
    return fnr, fpr


@dataclass(frozen=True)
class TtestResult:
    statistic: float
    dof: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def two_tailed_ttest(group_a, group_b) -> TtestResult:
    """Welch's unequal-variance t-test, two tailed.

    Degenerate inputs (under two samples per group, or both variances zero)
    raise instead of returning NaN.
    """
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise DegenerateVariance("need at least two samples per group")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        raise DegenerateVariance("both groups have zero variance")
    se2 = va / a.size + vb / b.size
    t = float((a.mean() - b.mean()) / np.sqrt(se2))
    dof = se2**2 / (
        (va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1)
    )
    p = float(2.0 * scipy.stats.t.sf(abs(t), dof))
    return TtestResult(t, float(dof), p)
