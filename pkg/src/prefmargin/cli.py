"""Command-line interface: ``prefmargin {gen,train,eval,gradcheck,margins,cases}``.

Exit codes: 0 success, 1 validation or input error, 2 acceptance failure
(gradient check or evaluation threshold not met). Errors go to stderr
prefixed with E_PARSE, E_VALIDATE, E_DIVERGE or E_GRADCHECK.
"""

from __future__ import annotations

import argparse
import io
import sys
from collections import OrderedDict

from . import __version__, backend
from .amapo import margin_rows, write_margins_csv
from .core import SPLIT_TAGS
from .data import GeneratorConfig, generate, read_dataset, read_logp_dump, write_dataset, write_logp_dump
from .diagnostics import (
    evaluate_scored_in_batches,
    format_cases,
    format_histograms,
    format_report,
    grad_check,
    ranking_accuracy,
    scored_report_row,
)
from .errors import PrefMarginError
from .fileio import atomic_write_text
from .methods import METHOD_NAMES, MethodConfig, registry_lookup
from .policy import Checkpoint
from .trainer import TrainConfig, score_instances, train

EXIT_OK, EXIT_INVALID, EXIT_ACCEPTANCE = 0, 1, 2

CASE_HELP = (
    "Case ids: 1 = correctly ranked and at or above the margin, 2 = correct but below, "
    "3 = misranked but at or above, 4 = misranked and below. A pair is correctly ranked "
    "only when r > 0 (r = 0 is misranked); r = gamma counts as above the margin."
)


class _Context:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def say(self, *lines):
        if not self.quiet:
            for line in lines:
                print(line)


def _method_args(p: argparse.ArgumentParser, default_method="amapo"):
    d = MethodConfig()
    p.add_argument("--method", default=default_method, choices=METHOD_NAMES)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--gamma", type=float, default=d.gamma_const, help="constant target margin (simpo, alpha_dpo)")
    p.add_argument("--tau", type=float, default=d.tau, help="hinge scale (slic)")
    p.add_argument("--lambda-sft", type=float, default=d.lambda_sft, help="chosen log-likelihood weight (slic, cpo)")
    p.add_argument("--lambda-w", type=float, default=d.lambda_w, help="desirable weight (kto)")
    p.add_argument("--lambda-l", type=float, default=d.lambda_l, help="undesirable weight (kto)")
    p.add_argument("--focal-gamma", type=float, default=d.focal_gamma, help="focusing exponent (focalpo)")
    p.add_argument("--alpha", type=float, default=d.alpha, help="adaptive-margin weight (alpha_dpo)")
    p.add_argument("--alpha-dataset-norm", action="store_true", help="normalize alpha_dpo gaps over the whole training set")
    p.add_argument("--no-oracle-offset", action="store_true", help="odpo: drop the oracle reward-gap offset")
    p.add_argument("--clamp-mu", action="store_true", help="amapo: clamp a negative batch mean to zero")


def _method_config(args) -> MethodConfig:
    return MethodConfig(
        beta=args.beta,
        gamma_const=args.gamma,
        tau=args.tau,
        delta_r_from_oracle=not args.no_oracle_offset,
        lambda_sft=args.lambda_sft,
        lambda_w=args.lambda_w,
        lambda_l=args.lambda_l,
        focal_gamma=args.focal_gamma,
        alpha=args.alpha,
        alpha_dataset_norm=args.alpha_dataset_norm,
        clamp_mu=args.clamp_mu,
    )


def _scored_source(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dump", help="JSONL log-probability dump")
    src.add_argument("--data", help="JSONL dataset, scored with --model")
    p.add_argument("--model", help="checkpoint used with --data")


def _load_scored(args):
    if args.dump:
        if args.model:
            raise PrefMarginError("--model is only used with --data")
        return read_logp_dump(args.dump)
    if not args.model:
        raise PrefMarginError("--data requires --model")
    ckpt = Checkpoint.load(args.model)
    return score_instances(ckpt.policy(), ckpt.reference(), read_dataset(args.data))


def _by_split(scored, from_dump=False):
    if from_dump:
        # dump records carry no split tag
        return OrderedDict([("all", list(scored))])
    groups = OrderedDict((tag, []) for tag in SPLIT_TAGS)
    for s in scored:
        groups[s.instance.split_tag].append(s)
    return OrderedDict((k, v) for k, v in groups.items() if v)


# --- subcommands ----------------------------------------------------------


def cmd_gen(args, ctx) -> int:
    cfg = GeneratorConfig.from_seed(
        args.seed,
        n_prompts_train=args.prompts,
        n_prompts_valid=args.valid_prompts,
        candidates_per_prompt=args.candidates,
        feature_dim=args.dim,
        preference_noise=args.noise,
        length_range=(args.min_length, args.max_length),
    )
    ds = generate(cfg)
    write_dataset(args.out, ds.all())
    ctx.say(*(f"{tag}: {len(ds.split(tag))} pairs" for tag in SPLIT_TAGS), f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args, ctx) -> int:
    cfg = TrainConfig(
        method=args.method,
        method_config=_method_config(args),
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        warmup_ratio=args.warmup,
        shuffle=not args.no_shuffle,
        eval_every=args.eval_every,
    )
    result = train(cfg, read_dataset(args.data))
    result.checkpoint().save(args.out)
    if args.report:
        atomic_write_text(args.report, format_report(result.rows))
    if args.histograms:
        atomic_write_text(args.histograms, format_histograms(result.histograms))
    if args.dump_out:
        write_logp_dump(args.dump_out, score_instances(result.model, result.reference, read_dataset(args.data)))
    final = [r for r in result.rows if r.epoch == result.rows[-1].epoch]
    ctx.say(*(f"epoch {r.epoch} {r.split}: ranking_accuracy={r.ranking_accuracy!r}" for r in final))
    ctx.say(f"wrote {args.out}")
    return _threshold(final, args.min_accuracy)


def _threshold(rows, min_accuracy) -> int:
    if min_accuracy is None:
        return EXIT_OK
    low = [r for r in rows if r.split in ("id", "all") and r.ranking_accuracy < min_accuracy]
    if low:
        print(
            f"E_VALIDATE: {low[0].split} ranking accuracy {low[0].ranking_accuracy!r} below threshold {min_accuracy!r}",
            file=sys.stderr,
        )
        return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_eval(args, ctx) -> int:
    scored = _load_scored(args)
    spec = registry_lookup(args.method, _method_config(args))
    rows = []
    for tag, group in _by_split(scored, bool(args.dump)).items():
        row = scored_report_row(0, tag, spec, group, args.batch_size)
        rows.append(row)
        norm = ranking_accuracy(group, "length_normalized", spec.config.beta)
        ctx.say(f"{tag}: n={len(group)} ranking_accuracy={row.ranking_accuracy!r} length_normalized={norm!r}")
    if args.report:
        atomic_write_text(args.report, format_report(rows))
    return _threshold(rows, args.min_accuracy)


def cmd_gradcheck(args, ctx) -> int:
    report = grad_check(args.method, args.trials, args.tol, args.seed, args.batch_size)
    for line in report.lines():
        if line.startswith("FAIL") or line.startswith("  "):
            print(("E_GRADCHECK: " + line.strip()) if line.startswith("FAIL") else line, file=sys.stderr)
        else:
            ctx.say(line)
    return EXIT_OK if report.passed else EXIT_ACCEPTANCE


def cmd_margins(args, ctx) -> int:
    rows = margin_rows(_load_scored(args), args.beta, args.batch_size, args.clamp_mu)
    buf = io.StringIO()
    write_margins_csv(buf, rows)
    _emit(args.out, buf.getvalue())
    if args.out:
        ctx.say(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_cases(args, ctx) -> int:
    spec = registry_lookup(args.method, _method_config(args))
    if not spec.has_margin:
        raise PrefMarginError(f"method {spec.name!r} has no margin to classify against")
    scored = _load_scored(args)
    scores, margins, _, _ = evaluate_scored_in_batches(spec, scored, args.batch_size)
    _emit(args.out, format_cases([s.instance.id for s in scored], scores, margins))
    if args.out:
        ctx.say(f"wrote {len(scored)} rows to {args.out}")
    return EXIT_OK


def _emit(path, text):
    if path:
        atomic_write_text(path, text)
    else:
        sys.stdout.write(text)


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress progress output")

    parser = argparse.ArgumentParser(prog="prefmargin", description=__doc__.splitlines()[0], epilog=CASE_HELP)
    parser.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({backend.NAME} kernels)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate the four-split synthetic dataset")
    d = GeneratorConfig()
    g.add_argument("--prompts", type=int, default=d.n_prompts_train)
    g.add_argument("--valid-prompts", type=int, default=d.n_prompts_valid)
    g.add_argument("--candidates", type=int, default=d.candidates_per_prompt)
    g.add_argument("--dim", type=int, default=d.feature_dim)
    g.add_argument("--min-length", type=int, default=d.length_range[0])
    g.add_argument("--max-length", type=int, default=d.length_range[1])
    g.add_argument("--noise", action="store_true", help="sample labels from the Bradley-Terry model")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train the toy policy on the id split")
    _method_args(t)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--warmup", type=float, default=0.1, help="warmup fraction of the cosine schedule")
    t.add_argument("--no-shuffle", action="store_true")
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="per-epoch report CSV")
    t.add_argument("--histograms", help="distribution snapshot CSV")
    t.add_argument("--dump-out", help="write final policy log-probabilities as a JSONL dump")
    t.add_argument("--min-accuracy", type=float, help="exit 2 if final id accuracy is below this")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="ranking accuracy and case counts per split", epilog=CASE_HELP)
    _scored_source(e)
    _method_args(e)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--report", help="write a report CSV")
    e.add_argument("--min-accuracy", type=float, help="exit 2 if id (or whole-dump) accuracy is below this")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss gradient")
    c.add_argument("--method", default="all", choices=("all",) + METHOD_NAMES)
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--batch-size", type=int, help="fixed batch size (default random 1-8)")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("margins", parents=[common], help="dump adaptive margins as CSV")
    _scored_source(m)
    m.add_argument("--beta", type=float, default=MethodConfig().beta)
    m.add_argument("--batch-size", type=int, default=32)
    m.add_argument("--clamp-mu", action="store_true")
    m.add_argument("--out", help="output CSV (default stdout)")
    m.set_defaults(func=cmd_margins)

    k = sub.add_parser("cases", parents=[common], help="per-instance case classification", epilog=CASE_HELP)
    _scored_source(k)
    _method_args(k)
    k.add_argument("--batch-size", type=int, default=32)
    k.add_argument("--out", help="output CSV (default stdout)")
    k.set_defaults(func=cmd_cases)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    ctx = _Context(args.quiet)
    try:
        return args.func(args, ctx)
    except PrefMarginError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"E_VALIDATE: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"E_VALIDATE: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
