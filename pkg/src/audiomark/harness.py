"""Evaluation harness: corpus handling, benchmark runs, group statistics,
and report emission."""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape as _xml_escape

import numpy as np
import scipy.signal

from .audio import (
    DEFAULT_SAMPLE_RATE,
    StftParams,
    Waveform,
    derive_seed,
    istft,
    read_wav,
    rng_for,
    stft,
    write_wav,
)
from .blackbox import (
    DOMAIN_SPECTROGRAM,
    DOMAIN_WAVEFORM,
    GOAL_FORGERY,
    GOAL_REMOVAL,
    OracleBudget,
    SchemeOracle,
    hsja,
    square_attack,
)
from .errors import (
    DegenerateVariance,
    EmptyReport,
    InitializationFailed,
    ManifestError,
    RangeError,
)
from .metrics import quality_score, snr, two_tailed_ttest
from .perturb import PerturbationSpec, apply, codec_available
from .schemes import (
    SchemeConfig,
    calibrate_threshold,
    make_scheme,
    random_bits,
)
from .whitebox import AMPLITUDE_EXACT, IFGSM, WhiteboxConfig
from .whitebox import whitebox_forge, whitebox_remove

SEXES = ("male", "female")
AGES = ("teens", "twenties", "thirties", "forties")
LANGUAGES = ("lang0", "lang1", "lang2", "lang3", "lang4")

_VALID_SEX = set(SEXES) | {"unknown"}
_VALID_AGE = set(AGES) | {"unknown"}


@dataclass(frozen=True)
class CorpusEntry:
    path: str
    language: str
    sex: str
    age: str

    def __post_init__(self):
        if self.sex not in _VALID_SEX:
            raise ManifestError(f"bad sex label {self.sex!r}")
        if self.age not in _VALID_AGE:
            raise ManifestError(f"bad age label {self.age!r}")


@dataclass
class CorpusManifest:
    """Clip list plus attribute labels, stored as one JSON object per line."""

    entries: list[CorpusEntry] = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: CorpusEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "path": e.path,
                            "language": e.language,
                            "sex": e.sex,
                            "age": e.age,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    entries.append(
                        CorpusEntry(
                            path=obj["path"],
                            language=obj.get("language", "unknown"),
                            sex=obj.get("sex", "unknown"),
                            age=obj.get("age", "unknown"),
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        manifest = cls(entries, root=path.parent)
        for e in entries:
            if not manifest.resolve(e).exists():
                raise ManifestError(f"{path}: missing clip file {e.path}")
        return manifest


# Synthetic speech-like corpus. Filtered-noise excitation shaped by slowly
# drifting formant resonators plus a syllable-rate amplitude envelope; not
# speech, but spectrally and dynamically in the same neighborhood, with
# essentially all energy below 6 kHz.

_BLOCK = 256


def _formant_tracks(rng, n_blocks, sex):
    shift = 1.17 if sex == "female" else 1.0
    bases = np.array([450.0, 1500.0, 2900.0]) * shift
    spans = np.array([220.0, 550.0, 380.0]) * shift
    walk = rng.standard_normal((n_blocks, 3)).cumsum(axis=0)
    walk -= walk.mean(axis=0)
    denom = max(1.0, np.abs(walk).max())
    return bases + spans * walk / denom


def _resonator_sos(freqs_hz, rate):
    sos = np.zeros((len(freqs_hz), 6))
    for i, f in enumerate(freqs_hz):
        bw = 90.0 + 30.0 * i
        r = np.exp(-np.pi * bw / rate)
        theta = 2.0 * np.pi * f / rate
        sos[i] = [1.0 - r, 0.0, 0.0, 1.0, -2.0 * r * np.cos(theta), r * r]
    return sos


def synthesize_speech_like(
    seed: int, duration_s: float = 1.0, rate: int = DEFAULT_SAMPLE_RATE, sex: str = "male"
) -> Waveform:
    """One deterministic speech-like clip for the given seed and sex label."""
    rng = rng_for(seed)
    n = int(round(duration_s * rate))
    n_blocks = int(np.ceil(n / _BLOCK))
    excitation = rng.standard_normal(n_blocks * _BLOCK)
    # gentle spectral tilt so energy leans low like voiced speech
    tilt = np.exp(-2.0 * np.pi * 350.0 / rate)
    excitation = scipy.signal.lfilter([1.0 - tilt], [1.0, -tilt], excitation)
    tracks = _formant_tracks(rng, n_blocks, sex)
    out = np.empty_like(excitation)
    zi = np.zeros((3, 2))
    for b in range(n_blocks):
        sos = _resonator_sos(tracks[b], rate)
        seg, zi = scipy.signal.sosfilt(sos, excitation[b * _BLOCK : (b + 1) * _BLOCK], zi=zi)
        out[b * _BLOCK : (b + 1) * _BLOCK] = seg
    out = out[:n]
    t = np.arange(n) / rate
    f_syl = 2.5 + 2.0 * rng.random()
    env = 0.25 + 0.75 * (0.5 + 0.5 * np.sin(2 * np.pi * f_syl * t + rng.random() * 7)) ** 1.3
    out = out * env
    rms = np.sqrt(np.mean(out**2))
    out *= 0.08 / max(rms, 1e-12)
    peak = np.abs(out).max()
    if peak > 0.95:
        out *= 0.95 / peak
    return Waveform(out, rate)


def _attenuate_band(wave: Waveform, gain_db: float, lo_hz=1000.0, hi_hz=6000.0) -> Waveform:
    sg = stft(wave, StftParams())
    freqs = np.arange(sg.amplitude.shape[1]) * wave.sample_rate / sg.params.window_size
    band = (freqs >= lo_hz) & (freqs <= hi_hz)
    sg.amplitude[:, band] *= 10.0 ** (gain_db / 20.0)
    return istft(sg)


def generate_synthetic_corpus(
    n_clips: int,
    out_dir,
    seed: int,
    duration_s: float = 1.0,
    rate: int = DEFAULT_SAMPLE_RATE,
    group_bias: dict | None = None,
) -> CorpusManifest:
    """Generate n speech-like clips with round-robin attribute labels.

    Labels cycle so that n = 8 covers every (sex, age) cell exactly once.
    ``group_bias`` maps an attribute value to a dB gain applied to the
    1..6 kHz band of matching clips (used to manufacture group disparities
    on purpose); clips are bit-identical for identical arguments.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_clips):
        sex = SEXES[i % 2]
        age = AGES[(i // 2) % 4]
        language = LANGUAGES[i % 5]
        clip_seed = rng_for(seed, f"corpus/{i}").integers(0, 2**63 - 1)
        wave = synthesize_speech_like(clip_seed, duration_s, rate, sex)
        bias_db = 0.0
        if group_bias:
            for key, db in group_bias.items():
                if key in (sex, age, language):
                    bias_db += db
        if bias_db != 0.0:
            wave = _attenuate_band(wave, bias_db)
        name = f"clip_{i:04d}.wav"
        write_wav(out_dir / name, wave)
        rows.append(CorpusEntry(path=name, language=language, sex=sex, age=age))
    manifest = CorpusManifest(rows, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# Benchmark runs.

ATTACKS = ("hsja", "square", "whitebox", "ifgsm")

# low / mid / high of each published parameter range
_SUITE_POINTS = {
    "time_stretch": (0.7, 1.1, 1.5),
    "gaussian_noise": (5.0, 20.0, 40.0),
    "background_noise": (5.0, 20.0, 40.0),
    "soundstream_like": (4.0, 10.0, 16.0),
    "opus_ext": (16.0, 64.0, 256.0),
    "encodec_like": (1.5, 12.0, 24.0),
    "quantization": (4.0, 16.0, 64.0),
    "highpass_filter": (0.1, 0.3, 0.5),
    "lowpass_filter": (0.1, 0.3, 0.5),
    "smooth": (6.0, 14.0, 22.0),
    "echo": (0.1, 0.5, 0.9),
    "mp3_ext": (8.0, 24.0, 40.0),
}


def suite_table3() -> tuple[PerturbationSpec, ...]:
    """Low/mid/high sweep over every perturbation kind runnable here.

    The external-codec kinds (opus, mp3) join the grid only when a codec
    command is registered; everything else is always available.
    """
    specs = []
    for kind, points in _SUITE_POINTS.items():
        if not codec_available(kind):
            continue
        specs.extend(PerturbationSpec(kind, p) for p in points)
    return tuple(specs)


@dataclass
class RunConfig:
    """One evaluation run: schemes x conditions, plus policy knobs.

    ``grid`` holds PerturbationSpec entries for no-box runs and bare floats
    (SNR budget, linf bound, or iteration budget, per attack) for attack
    runs. ``tau`` is a fixed threshold, the string "calibrate", or None for
    the per-family default.
    """

    schemes: tuple = ()
    grid: tuple = ()
    tau: float | str | None = None
    sample_cap: int | None = None
    attack_cap: int = 200
    seed: int = 0
    out_dir: Path | str | None = None
    attack_options: dict = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        self.schemes = tuple(self.schemes)
        self.grid = tuple(self.grid)
        if not self.schemes:
            raise RangeError("need at least one scheme config")
        if not self.grid:
            raise RangeError("grid must be non-empty")
        if self.sample_cap is not None and int(self.sample_cap) < 1:
            raise RangeError(f"sample_cap must be >= 1, got {self.sample_cap}")
        if int(self.attack_cap) < 1:
            raise RangeError(f"attack_cap must be >= 1, got {self.attack_cap}")
        if int(self.jobs) < 1:
            raise RangeError(f"jobs must be >= 1, got {self.jobs}")


@dataclass(frozen=True)
class ReportRow:
    scheme: str
    condition: str
    param: float
    group: str
    n: int
    fnr: float
    fpr: float
    mean_snr_db: float
    mean_quality: float
    seed: int


@dataclass(frozen=True)
class SampleOutcome:
    """Per-clip result under one condition; the unit the t-tests run on.

    For attack runs, snr/quality/trace/queries describe the removal side;
    the forgery side contributes only its success flag.
    """

    clip: int
    sex: str
    age: str
    language: str
    missed: bool | None
    false_alarm: bool | None
    snr_db: float
    quality: float
    trace: tuple = ()
    queries: int = 0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    # (scheme, condition, param) -> list of SampleOutcome
    samples: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _scheme_label(cfg: SchemeConfig) -> str:
    return cfg.name or cfg.kind


def _group_order(outcomes):
    """Deterministic group labels present in the outcomes, overall first."""
    labels = ["overall"]
    present_sex = {o.sex for o in outcomes}
    present_age = {o.age for o in outcomes}
    present_lang = sorted({o.language for o in outcomes})
    for s in (*SEXES, "unknown"):
        if s in present_sex:
            labels.append(f"sex={s}")
    for a in (*AGES, "unknown"):
        if a in present_age:
            labels.append(f"age={a}")
    labels.extend(f"language={lang}" for lang in present_lang)
    return labels


def _in_group(outcome: SampleOutcome, label: str) -> bool:
    if label == "overall":
        return True
    key, value = label.split("=", 1)
    return getattr(outcome, key if key != "language" else "language") == value


def _rate(values) -> float:
    vals = [v for v in values if v is not None]
    if not vals:
        return float("nan")
    return float(np.mean([bool(v) for v in vals]))


def _finite_mean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    if not vals:
        return float("nan")
    return float(np.mean(vals))


def _rows_for(scheme, condition, param, outcomes, seed):
    rows = []
    for label in _group_order(outcomes):
        sub = [o for o in outcomes if _in_group(o, label)]
        if not sub:
            continue
        rows.append(
            ReportRow(
                scheme=scheme,
                condition=condition,
                param=float(param),
                group=label,
                n=len(sub),
                fnr=_rate(o.missed for o in sub),
                fpr=_rate(o.false_alarm for o in sub),
                mean_snr_db=_finite_mean([o.snr_db for o in sub]),
                mean_quality=_finite_mean([o.quality for o in sub]),
                seed=seed,
            )
        )
    return rows


def _config_echo(run: RunConfig, corpus_size: int, run_kind: str) -> dict:
    grid = [
        dataclasses.asdict(g) if isinstance(g, PerturbationSpec) else float(g)
        for g in run.grid
    ]
    return {
        "run_kind": run_kind,
        "schemes": [dataclasses.asdict(cfg) for cfg in run.schemes],
        "grid": grid,
        "tau_policy": run.tau,
        "sample_cap": run.sample_cap,
        "attack_cap": run.attack_cap,
        "seed": run.seed,
        "attack_options": dict(run.attack_options),
        "corpus_size": corpus_size,
    }


def _tool_version() -> str:
    from . import __version__

    return __version__


def _load_clips(corpus: CorpusManifest, entries):
    return [read_wav(corpus.resolve(e)) for e in entries]


def _payloads(cfg: SchemeConfig, run_seed: int, n: int):
    return [
        random_bits(cfg.payload_bits, run_seed, tag=f"payload/{i}") for i in range(n)
    ]


def _resolve_tau(run: RunConfig, cfg: SchemeConfig, marked, waves, payloads):
    """Fixed tau, family default, or a calibration pass over this corpus."""
    if run.tau == "calibrate":
        wm_pairs = list(zip(marked, payloads))
        un_pairs = list(zip(waves, payloads))
        return calibrate_threshold(cfg, wm_pairs, un_pairs).tau
    if run.tau is None:
        return cfg.tau
    return float(run.tau)


def _effective_jobs(run: RunConfig, cfg: SchemeConfig) -> int:
    # the external adapter multiplexes one stdin/stdout pipe; keep it serial
    if cfg.kind == "external":
        return 1
    return int(run.jobs)


def _map_clips(fn, n: int, jobs: int):
    """fn over clip indices, results in index order regardless of workers."""
    if jobs <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, range(n)))


def run_nobox(run: RunConfig, corpus: CorpusManifest) -> EvalReport:
    """Scheme x perturbation x parameter sweep over the corpus.

    Watermarked clips that stop being detected count toward FNR;
    unwatermarked clips that start being detected count toward FPR. SNR and
    quality compare the perturbed watermarked clip against its unperturbed
    version (undefined for length-changing kinds, recorded as NaN).
    """
    entries = corpus.entries[: run.sample_cap] if run.sample_cap else corpus.entries
    if not entries:
        raise ManifestError("corpus is empty")
    waves = _load_clips(corpus, entries)
    report = EvalReport()
    failures = []
    attempted = 0
    taus = {}
    for cfg in run.schemes:
        label = _scheme_label(cfg)
        payloads = _payloads(cfg, run.seed, len(entries))
        base = make_scheme(cfg)
        marked = [base.embed(w, b) for w, b in zip(waves, payloads)]
        tau = _resolve_tau(run, cfg, marked, waves, payloads)
        scheme = make_scheme(cfg.with_tau(tau))
        taus[label] = tau
        for spec in run.grid:

            def eval_clip(i, spec=spec):
                entry = entries[i]
                try:
                    seeded = dataclasses.replace(
                        spec,
                        seed=derive_seed(run.seed, f"perturb/{spec.kind}/{spec.param!r}/{i}"),
                    )
                    pm = apply(seeded, marked[i])
                    pu = apply(seeded, waves[i])
                    missed = not scheme.detect(pm, payloads[i])
                    false_alarm = scheme.detect(pu, payloads[i])
                    if len(pm) == len(marked[i]):
                        s_db = snr(marked[i], pm)
                        q = quality_score(marked[i], pm)
                    else:
                        s_db = q = float("nan")
                    return SampleOutcome(
                        i, entry.sex, entry.age, entry.language,
                        missed, false_alarm, s_db, q,
                    )
                except Exception as exc:
                    return {
                        "scheme": label,
                        "condition": spec.kind,
                        "param": spec.param,
                        "clip": i,
                        "error": f"{type(exc).__name__}: {exc}"[:200],
                    }

            results = _map_clips(eval_clip, len(entries), _effective_jobs(run, cfg))
            attempted += len(entries)
            outcomes = [r for r in results if isinstance(r, SampleOutcome)]
            failures.extend(r for r in results if not isinstance(r, SampleOutcome))
            if outcomes:
                report.rows.extend(
                    _rows_for(label, spec.kind, spec.param, outcomes, run.seed)
                )
                report.samples[(label, spec.kind, float(spec.param))] = outcomes
    report.metadata = {
        "tool_version": _tool_version(),
        "stft_params": dataclasses.asdict(StftParams()),
        "tau": taus,
        "rescale_mode": run.attack_options.get("rescale_mode", AMPLITUDE_EXACT),
        "config": _config_echo(run, len(entries), "nobox"),
        "failures": failures,
        "degraded": bool(attempted) and len(failures) > 0.1 * attempted,
    }
    return report


def stratified_subsample(entries, cap: int, seed: int):
    """Round-robin over (sex, age) cells, shuffled within cells; caps the
    clip count while keeping every attribute cell represented."""
    if cap >= len(entries):
        return list(range(len(entries)))
    rng = rng_for(seed, "subsample")
    cells = {}
    for i, e in enumerate(entries):
        cells.setdefault((e.sex, e.age), []).append(i)
    pools = [cells[key] for key in sorted(cells)]
    for pool in pools:
        rng.shuffle(pool)
    picked = []
    depth = 0
    while len(picked) < cap:
        advanced = False
        for pool in pools:
            if depth < len(pool):
                picked.append(pool[depth])
                advanced = True
                if len(picked) == cap:
                    break
        if not advanced:
            break
        depth += 1
    return sorted(picked)


def _whitebox_cfg(param: float, opts: dict, variant=None) -> WhiteboxConfig:
    kwargs = {
        "snr_budget": float(param),
        "iterations": int(opts.get("iterations", 1000)),
        "learning_rate": float(opts.get("learning_rate", 1e-3)),
        "rescale_mode": opts.get("rescale_mode", AMPLITUDE_EXACT),
    }
    if variant is not None:
        kwargs["variant"] = variant
    return WhiteboxConfig(**kwargs)


def _attack_once(attack, scheme, marked, clean, bits, param, opts, seed):
    """(removal result, forgery result) for one clip under one budget.

    Either side is None when the attack cannot even initialize there; that
    is an honest miss for the attacker, not an operational error.
    """
    tau = opts.get("tau")
    if attack in ("whitebox", "ifgsm"):
        wb = _whitebox_cfg(param, opts, IFGSM if attack == "ifgsm" else None)
        rem = whitebox_remove(marked, bits, scheme, tau=tau, cfg=wb)
        forg = whitebox_forge(clean, bits, scheme, tau=tau, cfg=wb)
        return rem, forg
    oracle = SchemeOracle(scheme, truth=bits)
    if attack == "square":
        budget = OracleBudget(
            max_queries=int(opts.get("max_queries", int(opts.get("iterations", 2000)) + 2)),
            max_iterations=int(opts.get("iterations", 2000)),
        )

        def once(wave, goal):
            return square_attack(
                oracle, wave, goal, float(param), budget, seed=seed, tau=tau
            )

    else:
        budget = OracleBudget(
            max_queries=int(opts.get("max_queries", 12000)),
            max_iterations=int(param),
            grad_est_init=int(opts.get("grad_est_init", 10)),
            grad_est_cap=int(opts.get("grad_est_cap", 40)),
        )
        domain = opts.get("domain", DOMAIN_WAVEFORM)

        def once(wave, goal):
            return hsja(oracle, wave, goal, domain=domain, budget=budget, seed=seed)

    try:
        rem = once(marked, GOAL_REMOVAL)
    except InitializationFailed:
        rem = None
    try:
        forg = once(clean, GOAL_FORGERY)
    except InitializationFailed:
        forg = None
    return rem, forg


def run_attack(run: RunConfig, corpus: CorpusManifest, attack: str) -> EvalReport:
    """Removal and forgery sweep of one attack over a stratified subsample.

    Removal runs on watermarked clips (success = detector miss, i.e. FNR);
    forgery runs on the matching unwatermarked clips (success = false alarm).
    An attack that cannot even initialize counts as an honest failure, not an
    operational error.
    """
    attack = str(attack).lower()
    if attack not in ATTACKS:
        raise ValueError(f"unknown attack {attack!r}; expected one of {ATTACKS}")
    picked = stratified_subsample(corpus.entries, run.attack_cap, run.seed)
    entries = [corpus.entries[i] for i in picked]
    waves = _load_clips(corpus, entries)
    opts = dict(run.attack_options)
    condition = attack
    if attack == "hsja":
        domain = opts.get("domain", DOMAIN_WAVEFORM)
        if domain not in (DOMAIN_WAVEFORM, DOMAIN_SPECTROGRAM):
            raise ValueError(f"bad hsja domain {domain!r}")
        condition = f"hsja_{domain}"
    report = EvalReport()
    failures = []
    attempted = 0
    taus = {}
    for cfg in run.schemes:
        label = _scheme_label(cfg)
        payloads = _payloads(cfg, run.seed, len(entries))
        base = make_scheme(cfg)
        marked = [base.embed(w, b) for w, b in zip(waves, payloads)]
        tau = _resolve_tau(run, cfg, marked, waves, payloads)
        scheme = make_scheme(cfg.with_tau(tau))
        taus[label] = tau
        for param in run.grid:

            def eval_clip(i, param=param):
                entry = entries[i]
                seed_i = derive_seed(run.seed, f"{condition}/{param!r}/{i}")
                try:
                    rem, forg = _attack_once(
                        attack, scheme, marked[i], waves[i],
                        payloads[i], param, opts, seed_i,
                    )
                    return SampleOutcome(
                        picked[i], entry.sex, entry.age, entry.language,
                        bool(rem.success) if rem else False,
                        bool(forg.success) if forg else False,
                        float(rem.final_snr) if rem else float("nan"),
                        float(rem.final_quality) if rem else float("nan"),
                        trace=tuple(rem.trace) if rem else (),
                        queries=int(rem.queries_used) if rem else 0,
                    )
                except Exception as exc:
                    return {
                        "scheme": label,
                        "condition": condition,
                        "param": float(param),
                        "clip": picked[i],
                        "error": f"{type(exc).__name__}: {exc}"[:200],
                    }

            results = _map_clips(eval_clip, len(entries), _effective_jobs(run, cfg))
            attempted += len(entries)
            outcomes = [r for r in results if isinstance(r, SampleOutcome)]
            failures.extend(r for r in results if not isinstance(r, SampleOutcome))
            if outcomes:
                report.rows.extend(
                    _rows_for(label, condition, param, outcomes, run.seed)
                )
                report.samples[(label, condition, float(param))] = outcomes
    report.metadata = {
        "tool_version": _tool_version(),
        "stft_params": dataclasses.asdict(StftParams()),
        "tau": taus,
        "rescale_mode": opts.get("rescale_mode", AMPLITUDE_EXACT),
        "config": _config_echo(run, len(entries), f"attack:{condition}"),
        "failures": failures,
        "degraded": bool(attempted) and len(failures) > 0.1 * attempted,
    }
    return report


# ---------------------------------------------------------------------------
# Grouped fairness analysis.

_ATTRIBUTES = ("sex", "age", "language")
_SMALL_GROUP = 30


@dataclass(frozen=True)
class GapRow:
    scheme: str
    condition: str
    param: float | None  # None = pooled across the condition's parameters
    attribute: str
    group_a: str
    group_b: str
    n_a: int
    n_b: int
    mean_a: float
    mean_b: float
    statistic: float
    p_value: float
    significant: bool
    small_sample: bool
    degenerate: bool


def _attribute_values(attribute, outcomes):
    present = {getattr(o, attribute) for o in outcomes}
    if attribute == "sex":
        ordered = [s for s in (*SEXES, "unknown") if s in present]
    elif attribute == "age":
        ordered = [a for a in (*AGES, "unknown") if a in present]
    else:
        ordered = sorted(present)
    return ordered


def _gap_rows(scheme, condition, param, attribute, outcomes, indicator):
    picker = (lambda o: o.missed) if indicator == "fnr" else (lambda o: o.false_alarm)
    rows = []
    values = _attribute_values(attribute, outcomes)
    for va, vb in itertools.combinations(values, 2):
        a = [float(bool(picker(o))) for o in outcomes
             if getattr(o, attribute) == va and picker(o) is not None]
        b = [float(bool(picker(o))) for o in outcomes
             if getattr(o, attribute) == vb and picker(o) is not None]
        if not a or not b:
            continue
        degenerate = False
        try:
            t = two_tailed_ttest(a, b)
            stat, p, sig = t.statistic, t.p_value, t.significant
        except DegenerateVariance:
            degenerate = True
            stat = p = float("nan")
            sig = False
        rows.append(
            GapRow(
                scheme=scheme,
                condition=condition,
                param=param,
                attribute=attribute,
                group_a=va,
                group_b=vb,
                n_a=len(a),
                n_b=len(b),
                mean_a=float(np.mean(a)),
                mean_b=float(np.mean(b)),
                statistic=stat,
                p_value=p,
                significant=sig,
                small_sample=min(len(a), len(b)) < _SMALL_GROUP,
                degenerate=degenerate,
            )
        )
    return rows


def group_analysis(report: EvalReport, attribute: str, indicator: str = "fnr"):
    """Pairwise Welch t-tests on per-clip indicators, grouped by attribute.

    Emits one comparison per (scheme, condition, parameter, group pair) plus
    a pooled comparison per condition (param None) aggregating across its
    parameters. Degenerate pairs (too few samples, or no variance anywhere)
    are flagged rather than raised. Groups under 30 samples carry a
    small-sample flag; treat those p-values as unstable.
    """
    if attribute not in _ATTRIBUTES:
        raise ValueError(f"attribute must be one of {_ATTRIBUTES}, got {attribute!r}")
    if indicator not in ("fnr", "fpr"):
        raise ValueError(f"indicator must be fnr or fpr, got {indicator!r}")
    out = []
    by_condition = {}
    for (scheme, condition, param), outcomes in report.samples.items():
        out.extend(_gap_rows(scheme, condition, param, attribute, outcomes, indicator))
        by_condition.setdefault((scheme, condition), []).extend(outcomes)
    for (scheme, condition), pooled in by_condition.items():
        out.extend(_gap_rows(scheme, condition, None, attribute, pooled, indicator))
    return out


# ---------------------------------------------------------------------------
# Report emission.

CSV_HEADER = "scheme,condition,param,group,n,fnr,fpr,mean_snr_db,mean_quality,seed"

_SVG_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(report: EvalReport) -> str:
    lines = [CSV_HEADER]
    for r in report.rows:
        lines.append(
            ",".join(
                _fmt(v)
                for v in (
                    r.scheme, r.condition, r.param, r.group, r.n,
                    r.fnr, r.fpr, r.mean_snr_db, r.mean_quality, r.seed,
                )
            )
        )
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str):
    """Rows back out of the CSV emitted above."""
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("not a report CSV")
    rows = []
    for ln in lines[1:]:
        f = ln.split(",")
        rows.append(
            ReportRow(
                scheme=f[0], condition=f[1], param=float(f[2]), group=f[3],
                n=int(f[4]), fnr=float(f[5]), fpr=float(f[6]),
                mean_snr_db=float(f[7]), mean_quality=float(f[8]), seed=int(f[9]),
            )
        )
    return rows


def _json_payload(report: EvalReport) -> dict:
    samples = {}
    for (scheme, condition, param), outcomes in report.samples.items():
        key = f"{scheme}|{condition}|{param!r}"
        samples[key] = [dataclasses.asdict(o) for o in outcomes]
    return {
        "metadata": report.metadata,
        "rows": [dataclasses.asdict(r) for r in report.rows],
        "samples": samples,
    }


def _svg_chart(condition: str, series: dict) -> str:
    """FNR against the condition's parameter, one polyline per scheme."""
    width, height = 480, 320
    ml, mr, mt, mb = 56, 16, 28, 44
    px = [p for pts in series.values() for p, _ in pts]
    lo, hi = min(px), max(px)
    span = (hi - lo) or 1.0

    def sx(p):
        return ml + (p - lo) / span * (width - ml - mr)

    def sy(v):
        return mt + (1.0 - v) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{_xml_escape(condition)}: FNR vs parameter</text>',
        f'<line x1="{ml}" y1="{sy(0):.1f}" x2="{width - mr}" y2="{sy(0):.1f}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{ml}" y1="{sy(0):.1f}" x2="{ml}" y2="{sy(1):.1f}" '
        'stroke="black" stroke-width="1"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{ml - 6}" y="{sy(frac) + 4:.1f}" text-anchor="end" '
            f'font-size="10" font-family="sans-serif">{frac:.1f}</text>'
        )
    for p in sorted({round(v, 6) for v in px}):
        parts.append(
            f'<text x="{sx(p):.1f}" y="{height - mb + 16}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{p:g}</text>'
        )
    for k, (scheme, pts) in enumerate(sorted(series.items())):
        color = _SVG_PALETTE[k % len(_SVG_PALETTE)]
        coords = " ".join(f"{sx(p):.2f},{sy(v):.2f}" for p, v in sorted(pts))
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{width - mr - 4}" y="{mt + 14 + 14 * k}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif" fill="{color}">'
            f"{_xml_escape(scheme)}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, out_dir, formats=("csv", "json", "svg")):
    """Write the report as report.csv / report.json / per-condition SVGs,
    plus run.json with the full metadata; returns the written paths."""
    if not report.rows:
        raise EmptyReport("report has no rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = out_dir / "report.csv"
        path.write_text(_csv_text(report), encoding="utf-8")
        written.append(path)
    if "json" in formats:
        path = out_dir / "report.json"
        path.write_text(
            json.dumps(_json_payload(report), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        written.append(path)
    if "svg" in formats:
        charts = {}
        for r in report.rows:
            if r.group != "overall" or np.isnan(r.fnr):
                continue
            charts.setdefault(r.condition, {}).setdefault(r.scheme, []).append(
                (r.param, r.fnr)
            )
        for condition, series in sorted(charts.items()):
            path = out_dir / f"{condition}_fnr.svg"
            path.write_text(_svg_chart(condition, series), encoding="utf-8")
            written.append(path)
    run_json = out_dir / "run.json"
    run_json.write_text(
        json.dumps({"metadata": report.metadata}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    written.append(run_json)
    return written
