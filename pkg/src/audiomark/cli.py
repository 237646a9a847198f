"""Command-line front-end binding the toolkit into reproducible runs.

Exit codes: 0 success (or watermark detected), 1 watermark not detected
(detect only), 2 operational error, 3 infeasible calibration. One --seed
drives every random choice through the documented fan-out in derive_seed
(seed XOR a stable hash of the consumer's tag).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .audio import derive_seed, read_wav, write_wav
from .errors import AudiomarkError, CalibrationInfeasible
from .harness import (
    CorpusManifest,
    EvalReport,
    RunConfig,
    emit_report,
    generate_synthetic_corpus,
    parse_report_csv,
    run_attack,
    run_nobox,
    suite_table3,
)
from .perturb import PerturbationPipeline, PerturbationSpec, apply, apply_pipeline
from .schemes import (
    SchemeConfig,
    WatermarkBits,
    calibrate_threshold,
    make_scheme,
    random_bits,
)

EXIT_OK = 0
EXIT_NOT_DETECTED = 1
EXIT_ERROR = 2
EXIT_INFEASIBLE = 3

_BUILTIN_KINDS = ("spread_spectrum", "sync_payload", "probability")
_ALL_KINDS = _BUILTIN_KINDS + ("external",)


def _parse_bits(text: str, n: int) -> WatermarkBits:
    text = text.strip()
    if len(text) != n or set(text) - {"0", "1"}:
        raise ValueError(
            f"--bits must be exactly {n} characters of 0/1, got {text!r}"
        )
    return WatermarkBits(tuple(int(c) for c in text))


def _scheme_config(args) -> SchemeConfig:
    kwargs = {
        "kind": args.scheme,
        # one --seed reproduces the key as well
        "seed": derive_seed(args.seed, f"scheme/{args.scheme}"),
    }
    if getattr(args, "strength", None) is not None:
        kwargs["embed_strength"] = args.strength
    if getattr(args, "payload_bits", None) is not None:
        kwargs["payload_bits"] = args.payload_bits
    if getattr(args, "tau", None) is not None:
        kwargs["detector_threshold"] = args.tau
    if args.scheme == "external":
        if not getattr(args, "command", None):
            raise ValueError("--scheme external needs --command")
        kwargs["command"] = args.command
        kwargs["name"] = "external"
    return SchemeConfig(**kwargs)


def _default_bits(args, cfg: SchemeConfig) -> WatermarkBits:
    if args.bits is not None:
        return _parse_bits(args.bits, cfg.payload_bits)
    return random_bits(cfg.payload_bits, args.seed, tag="payload")


def _parse_tau_policy(text: str):
    if text == "calibrate":
        return "calibrate"
    if text == "default":
        return None
    return float(text)


def _parse_schemes(args) -> tuple:
    names = [s.strip() for s in args.schemes.split(",") if s.strip()]
    if not names:
        raise ValueError("--schemes must name at least one scheme")
    configs = []
    for name in names:
        if name not in _BUILTIN_KINDS:
            raise ValueError(
                f"unknown scheme {name!r}; choose from {', '.join(_BUILTIN_KINDS)}"
            )
        configs.append(
            SchemeConfig(kind=name, seed=derive_seed(args.seed, f"scheme/{name}"))
        )
    return tuple(configs)


def _resolve_corpus(args) -> CorpusManifest:
    if args.corpus:
        return CorpusManifest.load(args.corpus)
    return generate_synthetic_corpus(
        args.synthetic,
        Path(args.out) / "corpus",
        seed=args.seed,
        duration_s=args.duration,
    )


def _attack_options(args) -> dict:
    opts = {}
    for key in (
        "iterations",
        "learning_rate",
        "rescale_mode",
        "domain",
        "max_queries",
        "grad_est_init",
        "grad_est_cap",
    ):
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    if getattr(args, "tau", None) is not None:
        opts["tau"] = args.tau
    return opts


# subcommand bodies


def cmd_embed(args) -> int:
    cfg = _scheme_config(args)
    bits = _default_bits(args, cfg)
    wave = read_wav(args.input)
    marked = make_scheme(cfg).embed(wave, bits)
    write_wav(args.output, marked)
    print(f"embedded {len(bits.array)} bits into {args.output}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _scheme_config(args)
    bits = _default_bits(args, cfg)
    wave = read_wav(args.input)
    outcome = make_scheme(cfg).decode(wave, bits)
    print(f"decision={int(bool(outcome.decision))} score={outcome.score!r}")
    return EXIT_OK if outcome.decision else EXIT_NOT_DETECTED


def _parse_pipeline_file(path, seed: int) -> PerturbationPipeline:
    stages = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'kind param'")
            try:
                stages.append(
                    PerturbationSpec(
                        parts[0],
                        float(parts[1]),
                        seed=derive_seed(seed, f"pipeline/{len(stages)}"),
                    )
                )
            except (AudiomarkError, ValueError) as exc:
                raise ValueError(f"pipeline stage {len(stages)}: {exc}") from exc
    return PerturbationPipeline(tuple(stages))


def cmd_perturb(args) -> int:
    wave = read_wav(args.input)
    if args.pipeline:
        out = apply_pipeline(_parse_pipeline_file(args.pipeline, args.seed), wave)
    else:
        if args.kind is None or args.param is None:
            raise ValueError("need --kind and --param (or --pipeline)")
        spec = PerturbationSpec(
            args.kind, args.param, seed=derive_seed(args.seed, "perturb")
        )
        out = apply(spec, wave)
    write_wav(args.output, out)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = _resolve_corpus(args)
    configs = _parse_schemes(args)
    for cfg in configs:
        waves = [read_wav(corpus.resolve(e)) for e in corpus.entries]
        payloads = [
            random_bits(cfg.payload_bits, args.seed, tag=f"payload/{i}")
            for i in range(len(waves))
        ]
        scheme = make_scheme(cfg)
        marked = [scheme.embed(w, b) for w, b in zip(waves, payloads)]
        result = calibrate_threshold(
            cfg, list(zip(marked, payloads)), list(zip(waves, payloads))
        )
        curve_path = out_dir / f"calibration_{cfg.kind}.csv"
        lines = ["tau,fnr,fpr"]
        lines += [f"{t!r},{fnr!r},{fpr!r}" for t, fnr, fpr in result.curve]
        curve_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"{cfg.kind}: tau={result.tau!r} curve={curve_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.suite != "table3":
        raise ValueError(f"unknown suite {args.suite!r}")
    corpus = _resolve_corpus(args)
    run = RunConfig(
        schemes=_parse_schemes(args),
        grid=suite_table3(),
        tau=_parse_tau_policy(args.tau),
        sample_cap=args.cap,
        seed=args.seed,
        out_dir=args.out,
        jobs=args.jobs,
    )
    report = run_nobox(run, corpus)
    paths = emit_report(report, args.out)
    print(f"{len(report.rows)} rows -> {paths[0].parent}")
    if report.metadata["degraded"]:
        print("warning: >10% of samples failed; run marked degraded", file=sys.stderr)
    return EXIT_OK


def cmd_attack(args) -> int:
    corpus = _resolve_corpus(args)
    params = args.snr if args.snr is not None else args.params
    if params is None:
        raise ValueError("need --params (or --snr for white-box methods)")
    if isinstance(params, float):
        grid = (params,)
    else:
        grid = tuple(float(p) for p in params.split(",") if p.strip())
    run = RunConfig(
        schemes=_parse_schemes(args),
        grid=grid,
        tau=_parse_tau_policy(args.tau_policy),
        attack_cap=args.cap,
        seed=args.seed,
        out_dir=args.out,
        attack_options=_attack_options(args),
        jobs=args.jobs,
    )
    report = run_attack(run, corpus, args.method)
    paths = emit_report(report, args.out)
    print(f"{len(report.rows)} rows -> {paths[0].parent}")
    return EXIT_OK


def cmd_report(args) -> int:
    text = Path(args.input).read_text(encoding="utf-8")
    report = EvalReport(rows=parse_report_csv(text))
    out = args.out or str(Path(args.input).parent)
    paths = emit_report(report, out, formats=("svg",))
    svg = [p for p in paths if p.suffix == ".svg"]
    print(f"{len(svg)} charts -> {out}")
    return EXIT_OK


# parser assembly


def _add_scheme_flags(p, single=True):
    if single:
        p.add_argument("--scheme", default="spread_spectrum", choices=_ALL_KINDS)
        p.add_argument("--bits", default=None, help="payload as a 0/1 string")
        p.add_argument("--strength", type=float, default=None)
        p.add_argument("--payload-bits", type=int, default=None, dest="payload_bits")
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--command", default=None, help="external scheme command line")
    else:
        p.add_argument(
            "--schemes",
            default=",".join(_BUILTIN_KINDS),
            help="comma-separated scheme kinds",
        )


def _add_corpus_flags(p):
    p.add_argument("--corpus", default=None, help="manifest.jsonl of WAV clips")
    p.add_argument("--synthetic", type=int, default=200,
                   help="clip count for the generated corpus (no --corpus)")
    p.add_argument("--duration", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audiomark",
        description="audio watermarking robustness benchmark",
    )
    parser.add_argument(
        "--config",
        default=None,
        help="key=value overlay file; explicit flags win",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("embed", help="embed a payload into a WAV file")
    p.add_argument("input")
    p.add_argument("output")
    _add_scheme_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("detect", help="decide whether a WAV carries the payload")
    p.add_argument("input")
    _add_scheme_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("perturb", help="apply one perturbation or a pipeline")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--kind", default=None)
    p.add_argument("--param", type=float, default=None)
    p.add_argument("--pipeline", default=None, help="file of 'kind param' lines")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("calibrate", help="pick tau from separated corpora")
    _add_scheme_flags(p, single=False)
    _add_corpus_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="audiomark-run")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", help="no-box robustness grid")
    p.add_argument("--suite", default="table3")
    _add_scheme_flags(p, single=False)
    _add_corpus_flags(p)
    p.add_argument("--tau", default="calibrate",
                   help='threshold policy: "calibrate", "default", or a number')
    p.add_argument("--cap", type=int, default=None, help="clip cap (default all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="audiomark-run")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attack", help="black/white-box attack sweep")
    p.add_argument("--method", required=True,
                   choices=("hsja", "square", "whitebox", "ifgsm"))
    p.add_argument("--params", default=None,
                   help="comma-separated budgets: SNR (whitebox/ifgsm), "
                        "linf bound (square), iterations (hsja)")
    p.add_argument("--snr", type=float, default=None,
                   help="single SNR budget, shorthand for --params")
    _add_scheme_flags(p, single=False)
    _add_corpus_flags(p)
    p.add_argument("--tau-policy", default="default", dest="tau_policy",
                   help='"calibrate", "default", or a number')
    p.add_argument("--tau", type=float, default=None,
                   help="explicit detector threshold override")
    p.add_argument("--cap", type=int, default=200)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--rescale-mode", default=None, dest="rescale_mode")
    p.add_argument("--domain", default=None, choices=("waveform", "spectrogram"))
    p.add_argument("--max-queries", type=int, default=None, dest="max_queries")
    p.add_argument("--grad-est-init", type=int, default=None, dest="grad_est_init")
    p.add_argument("--grad-est-cap", type=int, default=None, dest="grad_est_cap")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="audiomark-run")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="render a report CSV to SVG charts")
    p.add_argument("input")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def _read_config_pairs(path):
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            pairs.append((key.strip().replace("_", "-"), value.strip().strip('"')))
    return pairs


def _overlay_config(parser, argv):
    """Turn --config key=value pairs into flags placed before the user's,
    so explicitly passed flags keep precedence."""
    config_path = None
    argv = list(argv)
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            config_path = argv[i + 1]
            del argv[i : i + 2]
            break
        if tok.startswith("--config="):
            config_path = tok.split("=", 1)[1]
            del argv[i]
            break
    if not config_path:
        return argv
    sub_index = next(
        (i for i, tok in enumerate(argv) if not tok.startswith("-")), None
    )
    if sub_index is None:
        return argv
    sub_actions = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    sub_parser = sub_actions.choices.get(argv[sub_index])
    if sub_parser is None:
        return argv
    known = {
        opt: action
        for action in sub_parser._actions
        for opt in action.option_strings
    }
    flags = []
    for key, value in _read_config_pairs(config_path):
        opt = f"--{key}"
        action = known.get(opt)
        if action is None:
            raise ValueError(f"config key {key!r} not valid for {argv[sub_index]!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes"):
                flags.append(opt)
        else:
            flags.extend((opt, value))
    return argv[: sub_index + 1] + flags + argv[sub_index + 1 :]


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _overlay_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except CalibrationInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AudiomarkError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
