"""Command-line entry point: gen | train | eval | gradcheck | ablate.

All commands read a plain-text config (key = value lines) and write files
only; given identical inputs every command produces identical output bytes.
Exit codes: 0 success, 2 config/io problems, 3 numeric failures, 4
shape/compatibility mismatches.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import evalkit, persistence, synthdata, trainer
from .gradcheck import run_gradcheck
from .numerics import Rng
from .recognition import extract

EXIT_OK = 0
EXIT_CONFIG_IO = 2
EXIT_NUMERIC = 3
EXIT_COMPAT = 4

ABLATION_MATRIX = (
    ("baseline", "no-dvr,no-meandisc,no-corralign"),
    ("dvr", "no-meandisc,no-corralign"),
    ("dvr_meandisc", "no-corralign"),
    ("dvr_meandisc_corralign", ""),
)


def _fmt(x) -> str:
    return repr(float(x))


def _load_config(args) -> tuple[trainer.TrainConfig, synthdata.SynthSpec]:
    if args.config is None:
        config, spec = trainer.TrainConfig(), synthdata.SynthSpec()
    else:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {args.config!r}: {exc}") from exc
        config, spec = persistence.parse_config(text)
    if getattr(args, "seed", None) is not None:
        config = trainer.TrainConfig(**{**config.__dict__, "seed": args.seed})
        spec_kwargs = {**spec.__dict__, "seed": args.seed}
        spec = synthdata.SynthSpec(**spec_kwargs)
    return config, spec


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _gen_dataset(config, spec):
    dataset = synthdata.generate(spec)
    protocol = synthdata.split(
        dataset, config.train_fraction, Rng(spec.seed).child(0x5E17)
    )
    return dataset, protocol


def cmd_gen(args) -> int:
    config, spec = _load_config(args)
    out = _ensure_out(args)
    dataset, protocol = _gen_dataset(config, spec)
    path = os.path.join(out, "dataset.bin")
    persistence.save_dataset(dataset, protocol, path)
    print(f"wrote {path}: {len(dataset)} samples, {spec.num_identities} identities")
    return EXIT_OK


def _obtain_data(args, config, spec):
    if getattr(args, "data", None):
        return persistence.load_dataset(args.data)
    return _gen_dataset(config, spec)


def cmd_train(args) -> int:
    config, spec = _load_config(args)
    out = _ensure_out(args)
    dataset, protocol = _obtain_data(args, config, spec)
    ablation = trainer.Ablation.from_flags(args.ablation)
    if args.checkpoint:
        state = persistence.load_state(args.checkpoint)
    else:
        view = trainer.make_train_view(dataset, protocol)
        state = trainer.init_state(config, view.num_classes)
    log = trainer.train(state, dataset, protocol, config, ablation, out_dir=out)
    persistence.save_state(state, os.path.join(out, "checkpoint.bin"))
    log.to_csv(os.path.join(out, "trainlog.csv"))
    print(f"trained {len(log.records)} logged epochs -> {out}/checkpoint.bin")
    return EXIT_OK


def _eval_checkpoint(state, dataset, protocol, far_levels=evalkit.DEFAULT_FAR_LEVELS):
    if state.recog_arch.extractor.in_dim != dataset.spec.raw_dim:
        raise trainer.CompatibilityError(
            f"checkpoint raw_dim {state.recog_arch.extractor.in_dim} "
            f"!= dataset raw_dim {dataset.spec.raw_dim}"
        )
    probe = extract(state.recog, state.recog_arch, dataset.raws[protocol.probe_idx])
    gallery = extract(state.recog, state.recog_arch, dataset.raws[protocol.gallery_idx])
    return evalkit.evaluate(
        probe,
        gallery,
        dataset.labels[protocol.probe_idx],
        dataset.labels[protocol.gallery_idx],
        far_levels,
    )


def cmd_eval(args) -> int:
    out = _ensure_out(args)
    state = persistence.load_state(args.checkpoint)
    dataset, protocol = persistence.load_dataset(args.data)
    report = _eval_checkpoint(state, dataset, protocol)
    evalkit.write_metrics_csv(os.path.join(out, "metrics.csv"), report)
    evalkit.write_roc_csv(os.path.join(out, "roc.csv"), report.roc)
    print(f"rank1 {_fmt(report.rank1)} -> {out}/metrics.csv, {out}/roc.csv")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _ensure_out(args)
    report = run_gradcheck(perturb=args.perturb)
    for line in report.lines():
        print(line)
    with open(os.path.join(out, "gradcheck.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "worst_rel_err", "worst_param", "passed"])
        for e in report.entries:
            writer.writerow([e.check, _fmt(e.worst_rel_err), e.worst_param, e.passed])
    if not report.passed:
        failing = [e.check for e in report.entries if not e.passed]
        print(f"FAILED checks: {', '.join(failing)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args) -> int:
    config, spec = _load_config(args)
    out = _ensure_out(args)
    base_seed = config.seed
    rows = []
    medians = {}
    for label, flags in ABLATION_MATRIX:
        ablation = trainer.Ablation.from_flags(flags)
        scores = []
        for s in range(args.seeds):
            seed = base_seed + s
            run_config = trainer.TrainConfig(**{**config.__dict__, "seed": seed})
            run_spec = synthdata.SynthSpec(**{**spec.__dict__, "seed": seed})
            dataset, protocol = _gen_dataset(run_config, run_spec)
            view = trainer.make_train_view(dataset, protocol)
            state = trainer.init_state(run_config, view.num_classes)
            trainer.train(state, dataset, protocol, run_config, ablation)
            report = _eval_checkpoint(state, dataset, protocol)
            levels = sorted(report.vr_at_far, reverse=True)
            rows.append(
                [label, str(seed), _fmt(report.rank1)]
                + [_fmt(report.vr_at_far[lv]) for lv in levels]
            )
            scores.append((report.rank1, [report.vr_at_far[lv] for lv in levels]))
            print(f"{label:<24} seed {seed}: rank1 {_fmt(report.rank1)}")
        med_rank1 = float(np.median([r for r, _ in scores]))
        med_vr = [float(np.median([v[i] for _, v in scores])) for i in range(2)]
        medians[label] = med_rank1
        rows.append([label, "median", _fmt(med_rank1)] + [_fmt(v) for v in med_vr])
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["config", "seed", "rank1", "vr_at_far_0.01", "vr_at_far_0.001"]
        )
        writer.writerows(rows)
    print(f"wrote {path}")
    for label, med in medians.items():
        print(f"median rank1 {label:<24} {_fmt(med)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvr",
        description="Cross-modality matching benchmark: synthetic data, "
        "alternating variational training, retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", default="out", help="output directory (created)")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seeds")

    p = sub.add_parser("gen", help="generate and store a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model, write checkpoint + log")
    common(p)
    p.add_argument("--data", default=None, help="dataset file (else generated)")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--ablation", default=None,
                   help="comma list of no-dvr,no-meandisc,no-corralign")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's protocol")
    p.add_argument("--out", default="out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p.add_argument("--out", default="out")
    p.add_argument("--perturb", default=None,
                   help="fault-injection hook: parameter-block prefix to corrupt")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the 4-configuration study matrix")
    common(p)
    p.add_argument("--seeds", type=int, default=5, help="seeds per configuration")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except trainer.CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (trainer.NumericFailure, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (persistence.ConfigError, persistence.PersistenceError,
            FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_IO


if __name__ == "__main__":
    sys.exit(main())
