"""Acceptance gate: desk-scale end-to-end checks with wall-clock budgets.

One test per headline behavior, ordered cheap to expensive; each prints a
summary line with the measured numbers. Run with -v for one pass/fail line
per check. Everything derives from --seed 7 style fan-out so reruns are
byte-for-byte comparable.
"""

import dataclasses
import time

import numpy as np
import pytest

from audiomark.audio import Waveform, derive_seed, istft, read_wav, stft
from audiomark.blackbox import OracleBudget, SchemeOracle, hsja, square_attack
from audiomark.cli import main
from audiomark.errors import InitializationFailed
from audiomark.harness import (
    RunConfig,
    generate_synthetic_corpus,
    group_analysis,
    run_nobox,
)
from audiomark.metrics import bitwise_accuracy, snr, two_tailed_ttest
from audiomark.perturb import (
    PerturbationPipeline,
    PerturbationSpec,
    apply,
    apply_pipeline,
)
from audiomark.schemes import (
    SchemeConfig,
    WatermarkBits,
    calibrate_threshold,
    make_scheme,
    random_bits,
)
from audiomark.whitebox import (
    PAPER_POWER,
    SNR_GRID,
    WhiteboxConfig,
    ifgsm,
    scaling_factor,
    whitebox_forge,
    whitebox_remove,
)

KINDS = ("spread_spectrum", "sync_payload", "probability")
SEED = 7


def _scheme(kind):
    return make_scheme(SchemeConfig(kind=kind, seed=derive_seed(SEED, f"scheme/{kind}")))


def _report(label, elapsed, detail):
    print(f"[gate] {label}: PASS ({elapsed:.1f} s) {detail}")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("gate-corpus")
    manifest = generate_synthetic_corpus(200, root, seed=SEED)
    waves = [read_wav(manifest.resolve(e)) for e in manifest.entries]
    bits = [random_bits(16, SEED, tag=f"payload/{i}") for i in range(len(waves))]
    return manifest, waves, bits


def test_calibration_separates_marked_from_clean(corpus):
    _, waves, bits = corpus
    t0 = time.perf_counter()
    taus = {}
    for kind in KINDS:
        cfg = SchemeConfig(kind=kind, seed=derive_seed(SEED, f"scheme/{kind}"))
        scheme = make_scheme(cfg)
        marked = [scheme.embed(w, b) for w, b in zip(waves, bits)]
        result = calibrate_threshold(
            cfg, list(zip(marked, bits)), list(zip(waves, bits))
        )
        # independent re-decision at the returned threshold
        tuned = make_scheme(
            dataclasses.replace(cfg, detector_threshold=result.tau)
        )
        fnr = np.mean([not tuned.decode(m, b).decision for m, b in zip(marked, bits)])
        fpr = np.mean([bool(tuned.decode(w, b).decision) for w, b in zip(waves, bits)])
        assert fnr < 0.01, f"{kind}: FNR {fnr} at tau={result.tau}"
        assert fpr < 0.01, f"{kind}: FPR {fpr} at tau={result.tau}"
        taus[kind] = result.tau
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _report("calibration", elapsed, f"200 clips x 3 schemes, taus={taus}")


@pytest.fixture(scope="module")
def whitebox_sweep(corpus):
    """Removal and forgery over the SNR budget grid, 8 clips per scheme."""
    _, waves, bits = corpus
    n = 8
    removal, forgery = {}, {}
    t0 = time.perf_counter()
    for kind in KINDS:
        scheme = _scheme(kind)
        marked = [scheme.embed(waves[i], bits[i]) for i in range(n)]
        for budget in SNR_GRID:
            cfg = WhiteboxConfig(snr_budget=budget)
            removal[kind, budget] = [
                whitebox_remove(marked[i], bits[i], scheme, cfg=cfg)
                for i in range(n)
            ]
    removal_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    for kind in KINDS:
        scheme = _scheme(kind)
        for budget in SNR_GRID:
            cfg = WhiteboxConfig(snr_budget=budget)
            forgery[kind, budget] = [
                whitebox_forge(waves[i], bits[i], scheme, cfg=cfg)
                for i in range(n)
            ]
    forgery_s = time.perf_counter() - t0
    return {
        "n": n,
        "removal": removal,
        "forgery": forgery,
        "removal_s": removal_s,
        "forgery_s": forgery_s,
    }


def _ladder(results, kind, n):
    return [
        sum(r.success for r in results[kind, budget]) / n for budget in SNR_GRID
    ]


def test_gradient_removal_defeats_every_scheme_at_20db(whitebox_sweep):
    n = whitebox_sweep["n"]
    ladders = {}
    for kind in KINDS:
        ladder = _ladder(whitebox_sweep["removal"], kind, n)
        assert ladder[0] >= 0.95, f"{kind}: FNR {ladder[0]} at budget 20"
        assert all(
            b <= a + 1e-12 for a, b in zip(ladder, ladder[1:])
        ), f"{kind}: FNR not monotone over budgets: {ladder}"
        assert all(
            r.queries_used <= 1000 for r in whitebox_sweep["removal"][kind, 20.0]
        )
        ladders[kind] = ladder
    elapsed = whitebox_sweep["removal_s"]
    assert elapsed < 300.0
    _report("whitebox removal", elapsed, f"FNR over {SNR_GRID}: {ladders}")


def test_gradient_forgery_fools_every_detector(whitebox_sweep):
    n = whitebox_sweep["n"]
    ladders = {}
    for kind in KINDS:
        ladder = _ladder(whitebox_sweep["forgery"], kind, n)
        assert ladder[0] >= 0.9, f"{kind}: FPR {ladder[0]} at budget 20"
        assert ladder[1] >= 0.9, f"{kind}: FPR {ladder[1]} at budget 30"
        assert all(
            b <= a + 1e-12 for a, b in zip(ladder, ladder[1:])
        ), f"{kind}: FPR not monotone over budgets: {ladder}"
        ladders[kind] = ladder
    elapsed = whitebox_sweep["forgery_s"]
    assert elapsed < 300.0
    _report("whitebox forgery", elapsed, f"FPR over {SNR_GRID}: {ladders}")


def test_snr_budget_soundness_and_power_rescale_factor(corpus, whitebox_sweep):
    _, waves, bits = corpus
    t0 = time.perf_counter()
    checked = 0
    for table in (whitebox_sweep["removal"], whitebox_sweep["forgery"]):
        for (kind, budget), results in table.items():
            for r in results:
                assert r.final_snr >= budget - 0.01, (
                    f"{kind} at budget {budget}: snr {r.final_snr}"
                )
                checked += 1
    # sign-step variant under the same constraint
    scheme = _scheme("spread_spectrum")
    cfg = WhiteboxConfig(snr_budget=20.0, iterations=300, learning_rate=2e-4)
    for i in (0, 1):
        marked = scheme.embed(waves[i], bits[i])
        r = ifgsm(marked, "removal", bits[i], scheme, cfg=cfg)
        assert r.final_snr >= 20.0 - 0.01
        checked += 1
    r = ifgsm(waves[2], "forgery", bits[2], scheme, cfg=cfg)
    assert r.final_snr >= 20.0 - 0.01
    checked += 1

    # power-mode factor on fixtures whose arithmetic is float-exact:
    # equal powers and a 100x power ratio, budgets on the decade grid
    s = Waveform(np.ones(1600), 16000)
    assert scaling_factor(s, np.ones(1600), 20.0, PAPER_POWER) == 100.0
    assert scaling_factor(s, np.ones(1600), 30.0, PAPER_POWER) == 1000.0
    assert scaling_factor(s, 10.0 * np.ones(1600), 20.0, PAPER_POWER) == 10000.0
    for delta, budget in ((np.ones(1600), 20.0), (10.0 * np.ones(1600), 20.0)):
        before = snr(s, Waveform(s.samples + delta, 16000))
        assert scaling_factor(s, delta, budget, PAPER_POWER) == 10.0 ** (
            (budget - before) / 10.0
        )
    elapsed = time.perf_counter() - t0
    _report("snr soundness", elapsed, f"{checked} attack results >= budget - 0.01 dB")


def test_hsja_successes_reverify_and_snr_improves(corpus):
    _, waves, bits = corpus
    scheme = _scheme("spread_spectrum")
    budget = OracleBudget(
        max_queries=12_000, max_iterations=2000, grad_est_init=10, grad_est_cap=40
    )
    t0 = time.perf_counter()
    margins, successes = [], 0
    for i in range(20):
        marked = scheme.embed(waves[i], bits[i])
        oracle = SchemeOracle(scheme, bits[i])
        try:
            res = hsja(
                oracle,
                marked,
                "removal",
                domain="spectrogram",
                budget=budget,
                seed=derive_seed(SEED, f"hsja/{i}"),
            )
        except InitializationFailed:
            margins.append(float("-inf"))
            continue
        snrs = [v for _, v in res.trace]
        assert all(b >= a for a, b in zip(snrs, snrs[1:])), f"clip {i}: trace dips"
        if res.success:
            successes += 1
            assert not oracle.decide(res.perturbed), f"clip {i}: success lied"
        margins.append(res.final_snr - snrs[0])
    elapsed = time.perf_counter() - t0
    gained = sum(m >= 5.0 for m in margins)
    assert successes >= 16, f"only {successes}/20 removals succeeded"
    assert gained >= 16, f"only {gained}/20 clips gained >= 5 dB over init: {margins}"
    assert elapsed < 900.0
    _report(
        "hsja",
        elapsed,
        f"{successes}/20 verified successes, {gained}/20 gained >= 5 dB",
    )


def test_square_attack_bound_and_direction(corpus, monkeypatch):
    _, waves, bits = corpus
    scheme = _scheme("probability")
    bounds = (0.05, 0.1, 0.15, 0.2)
    budget = OracleBudget(max_queries=2002, max_iterations=2000)

    import audiomark.blackbox as bb

    state = {"amp0": None, "bound": 0.0, "violation": -1.0}
    real = bb.synthesize

    def spy(amp, phase, params, length):
        if state["amp0"] is not None:
            gap = float(np.max(np.abs(amp - state["amp0"]))) - state["bound"]
            state["violation"] = max(state["violation"], gap)
        return real(amp, phase, params, length)

    monkeypatch.setattr("audiomark.blackbox.synthesize", spy)

    t0 = time.perf_counter()
    fnr, mean_snr = [], []
    for bound in bounds:
        hits, snrs = 0, []
        for i in range(20):
            marked = scheme.embed(waves[i], bits[i])
            state["amp0"] = stft(marked).amplitude
            state["bound"] = bound
            res = square_attack(
                SchemeOracle(scheme),
                marked,
                "removal",
                bound,
                budget=budget,
                seed=derive_seed(SEED, f"square/{bound}/{i}"),
            )
            state["amp0"] = None
            scores = [v for _, v in res.trace]
            assert all(
                b <= a + 1e-12 for a, b in zip(scores, scores[1:])
            ), f"bound {bound} clip {i}: best score rose"
            hits += int(res.success)
            snrs.append(res.final_snr)
        fnr.append(hits / 20)
        mean_snr.append(float(np.mean(snrs)))
    elapsed = time.perf_counter() - t0
    assert state["violation"] <= 1e-12, f"linf exceeded by {state['violation']}"
    assert all(
        b >= a for a, b in zip(fnr, fnr[1:])
    ), f"FNR not non-decreasing over bounds: {fnr}"
    assert all(
        b < a for a, b in zip(mean_snr, mean_snr[1:])
    ), f"SNR not decreasing over bounds: {mean_snr}"
    assert elapsed < 600.0
    _report("square", elapsed, f"FNR {fnr}, mean SNR {mean_snr} over {bounds}")


def test_analytic_gradients_match_finite_differences():
    h = 1e-5
    t0 = time.perf_counter()
    worst_by_kind = {}
    for kind in KINDS:
        cfg = SchemeConfig(kind=kind, seed=derive_seed(SEED, f"scheme/{kind}"))
        scheme = make_scheme(cfg)
        worst = 0.0
        for c in range(10):
            rng = np.random.default_rng(1000 + c)
            wave = Waveform(0.1 * rng.standard_normal(8000), 16000)
            payload = random_bits(16, SEED, tag=f"fd/{c}")
            if kind == "probability":
                surfaces = (
                    ("hinge", None, scheme.embed(wave, payload)),
                    ("hinge_forge", None, wave),
                )
            else:
                surfaces = (
                    ("ce", scheme.removal_target(payload), scheme.embed(wave, payload)),
                    ("ce", scheme.forgery_target(payload), wave),
                )
            coords = rng.choice(wave.samples.size, 100, replace=False)
            for loss, target, base in surfaces:
                _, grad = scheme.loss_and_gradient(base.samples, 16000, target, loss)
                gmax = float(np.abs(grad).max())
                assert gmax > 0, f"{kind} {loss}: dead gradient"

                def loss_at(x):
                    c_ = scheme._correlations(
                        stft(Waveform(x, 16000), cfg.stft_params).amplitude, 16000
                    )
                    return scheme.loss_value(c_, target, loss)

                for i in coords:
                    xp = base.samples.copy()
                    xp[i] += h
                    xm = base.samples.copy()
                    xm[i] -= h
                    fd = (loss_at(xp) - loss_at(xm)) / (2 * h)
                    worst = max(worst, abs(fd - grad[i]) / gmax)
        assert worst < 1e-4, f"{kind}: worst relative error {worst}"
        worst_by_kind[kind] = worst
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _report(
        "gradient oracle",
        elapsed,
        "worst rel err "
        + ", ".join(f"{k}={v:.2e}" for k, v in worst_by_kind.items()),
    )


def test_dsp_invariants(corpus):
    _, waves, _ = corpus
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    probes = list(waves[:5]) + [
        Waveform(0.2 * rng.standard_normal(12345), 16000),
        Waveform(rng.uniform(-0.5, 0.5, 16001), 16000),
    ]
    for w in probes:
        back = istft(stft(w))
        rel = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
        assert rel < 1e-6

    for kind, target in (
        ("gaussian_noise", 5.0),
        ("gaussian_noise", 17.5),
        ("gaussian_noise", 40.0),
        ("background_noise", 10.0),
        ("background_noise", 30.0),
    ):
        pm = apply(PerturbationSpec(kind, target, seed=11), waves[0])
        assert abs(snr(waves[0], pm) - target) <= 0.01

    q_spec = PerturbationSpec("quantization", 16.0)
    once = apply(q_spec, waves[1])
    twice = apply(q_spec, once)
    assert np.array_equal(once.samples, twice.samples)

    stages = (
        PerturbationSpec("quantization", 32.0, seed=1),
        PerturbationSpec("gaussian_noise", 25.0, seed=2),
        PerturbationSpec("echo", 0.4, seed=3),
    )
    piped = apply_pipeline(PerturbationPipeline(stages), waves[2])
    chained = waves[2]
    for spec in stages:
        chained = apply(spec, chained)
    assert np.array_equal(piped.samples, chained.samples)
    elapsed = time.perf_counter() - t0
    _report("dsp invariants", elapsed, "round trip, snr targets, idempotence, pipeline")


# Welch fixtures frozen from an independent high-precision computation
WELCH_FIXTURES = [
    ([2.1, 2.5, 2.3, 2.7, 2.4], [1.9, 2.0, 2.2, 1.8, 2.1],
     3.265986323711, 7.200000000000, 0.013217901195),
    ([10.0, 12.0, 11.0, 13.0], [10.5, 11.5, 12.5, 9.5, 10.0, 12.0],
     0.620173672946, 6.144626986264, 0.557429071535),
    ([0.0, 0.1, -0.1, 0.2, -0.2, 0.05], [1.0, 1.1, 0.9, 1.2],
     -11.972828565264, 7.071182002143, 0.000005962176),
    ([5.0, 5.0, 5.1, 4.9], [5.0, 5.05, 4.95, 5.0],
     0.000000000000, 4.411764705882, 1.000000000000),
    ([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], [2.0, 2.1, 1.9, 2.05, 1.95],
     2.884348722689, 7.023318636646, 0.023420079190),
]


def test_metric_fixtures_and_group_fairness_protocol(corpus, tmp_path):
    manifest, waves, bits = corpus
    t0 = time.perf_counter()

    ones = WatermarkBits((1,) * 16)
    zeros = WatermarkBits((0,) * 16)
    one_off = WatermarkBits((0,) + (1,) * 15)
    assert bitwise_accuracy(ones, ones) == 1.0
    assert bitwise_accuracy(ones, zeros) == 0.0
    assert bitwise_accuracy(ones, one_off) == 15 / 16

    for a, b, t_ref, dof_ref, p_ref in WELCH_FIXTURES:
        r = two_tailed_ttest(a, b)
        assert abs(r.statistic - t_ref) < 1e-6
        assert abs(r.dof - dof_ref) < 1e-6
        assert abs(r.p_value - p_ref) < 1e-6

    # constructed gap: one sex gets 6 dB less noise headroom than the other
    scheme = _scheme("spread_spectrum")
    marked = [scheme.embed(w, b) for w, b in zip(waves, bits)]

    def missed(i, level):
        spec = PerturbationSpec(
            "gaussian_noise", level, seed=derive_seed(SEED, f"p/{level}/{i}")
        )
        return 0.0 if scheme.decode(apply(spec, marked[i]), bits[i]).decision else 1.0

    harsh = [missed(i, 10.0) for i, e in enumerate(manifest.entries) if e.sex == "female"]
    gentle = [missed(i, 16.0) for i, e in enumerate(manifest.entries) if e.sex == "male"]
    gap = two_tailed_ttest(harsh, gentle)
    assert gap.significant and gap.p_value < 0.05

    # unbiased corpus: same noise for everyone, at a stress level where the
    # sexes respond alike (mid levels have a real f0-linked robustness gap)
    run = RunConfig(
        schemes=(SchemeConfig(
            kind="spread_spectrum", seed=derive_seed(SEED, "scheme/spread_spectrum")
        ),),
        grid=(PerturbationSpec("gaussian_noise", 6.0),),
        tau=None,
        seed=SEED,
        out_dir=str(tmp_path),
    )
    report = run_nobox(run, manifest)
    flagged = [
        (g.attribute, g.group_a, g.group_b)
        for attr in ("sex", "age")
        for g in group_analysis(report, attr)
        if g.significant
    ]
    assert not flagged, f"unbiased corpus flagged pairs: {flagged}"
    elapsed = time.perf_counter() - t0
    _report(
        "metric fixtures",
        elapsed,
        f"gap p={gap.p_value:.2e}, unbiased pairs clean",
    )


def test_bench_reruns_byte_identical_within_time_budget(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    elapsed = []
    for out in (out_a, out_b):
        t0 = time.perf_counter()
        rc = main([
            "bench", "--suite", "table3", "--seed", str(SEED),
            "--synthetic", "200", "--out", str(out),
        ])
        elapsed.append(time.perf_counter() - t0)
        assert rc == 0
        assert elapsed[-1] < 600.0
    csv_a = (out_a / "report.csv").read_bytes()
    assert csv_a == (out_b / "report.csv").read_bytes()
    assert (out_a / "run.json").read_bytes() == (out_b / "run.json").read_bytes()
    _report(
        "bench reproducibility",
        sum(elapsed),
        f"two 200-clip x 3-scheme runs, {len(csv_a)} byte CSVs identical",
    )
