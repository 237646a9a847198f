"""Audio watermarking robustness benchmark toolkit.

Reference watermarking schemes, signal-level perturbations, black- and
white-box attacks, and an evaluation harness with group-level statistics.
"""

__version__ = "0.1.0"

from .audio import (
    Spectrogram,
    StftParams,
    Waveform,
    derive_seed,
    istft,
    read_wav,
    resample,
    rng_for,
    stft,
    write_wav,
)
from .blackbox import (
    AttackResult,
    OracleBudget,
    SchemeOracle,
    hsja,
    square_attack,
)
from .errors import AudiomarkError
from .harness import (
    CorpusManifest,
    EvalReport,
    ReportRow,
    RunConfig,
    emit_report,
    generate_synthetic_corpus,
    group_analysis,
    run_attack,
    run_nobox,
    suite_table3,
)
from .metrics import (
    bitwise_accuracy,
    detection_rates,
    quality_proxy,
    snr,
    two_tailed_ttest,
)
from .perturb import (
    PerturbationPipeline,
    PerturbationSpec,
    apply,
    apply_pipeline,
    register_codec,
)
from .schemes import (
    SchemeConfig,
    WatermarkBits,
    calibrate_threshold,
    make_scheme,
    random_bits,
)
from .whitebox import (
    WhiteboxConfig,
    ifgsm,
    scaling_factor,
    whitebox_forge,
    whitebox_remove,
)

__all__ = [
    "AttackResult",
    "AudiomarkError",
    "CorpusManifest",
    "EvalReport",
    "OracleBudget",
    "PerturbationPipeline",
    "PerturbationSpec",
    "ReportRow",
    "RunConfig",
    "SchemeConfig",
    "SchemeOracle",
    "Spectrogram",
    "StftParams",
    "Waveform",
    "WatermarkBits",
    "WhiteboxConfig",
    "apply",
    "apply_pipeline",
    "bitwise_accuracy",
    "calibrate_threshold",
    "derive_seed",
    "detection_rates",
    "emit_report",
    "generate_synthetic_corpus",
    "group_analysis",
    "hsja",
    "ifgsm",
    "istft",
    "make_scheme",
    "quality_proxy",
    "random_bits",
    "read_wav",
    "register_codec",
    "resample",
    "rng_for",
    "run_attack",
    "run_nobox",
    "scaling_factor",
    "snr",
    "square_attack",
    "stft",
    "suite_table3",
    "two_tailed_ttest",
    "whitebox_forge",
    "whitebox_remove",
    "write_wav",
    "__version__",
]
