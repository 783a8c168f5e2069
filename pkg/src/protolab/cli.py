"""``protolab`` command line: run, ablate-k, ablate-lambda, audit, export."""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import load_config
from .errors import ProtoLabError


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(run={"seed": args.seed})
    if args.out is not None:
        cfg = cfg.replace(run={"output_dir": args.out})
    return cfg


def cmd_run(args) -> int:
    res = harness.run_experiment(_load(args))
    s = res.summary
    print(f"{res.out_dir}: M={s['final_M']}/{res.report.K} "
          f"mlcd_entropy={s['final_mlcd_entropy']:.4f} purity={s['purity']:.4f}")
    return 0


def cmd_ablate_k(args) -> int:
    rows = harness.ablate_k(_load(args), args.k, args.variants)
    for row in rows:
        print(*row, sep=",")
    return 0


def cmd_ablate_lambda(args) -> int:
    rows = harness.ablate_lambda(_load(args), args.lambdas)
    for row in rows:
        print(*row, sep=",")
    return 0


def cmd_audit(args) -> int:
    print(harness.format_audit(harness.audit_bank(args.pbank, args.eps, args.out)))
    return 0


def cmd_export(args) -> int:
    for path in harness.export_run(args.run):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protolab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.output_dir")
        return p

    p = with_config(sub.add_parser("run", help="train one configuration"))
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("ablate-k", help="sweep K over KoLeo variants"))
    p.add_argument("--k", type=_ints, default=[64, 128, 256, 512])
    p.add_argument("--variants", type=_names, default=list(harness.VARIANTS))
    p.set_defaults(func=cmd_ablate_k)

    p = with_config(sub.add_parser("ablate-lambda", help="sweep the KoLeo-proto weight"))
    p.add_argument("--lambdas", type=_floats, default=[0.0, 0.02, 0.1, 0.5])
    p.set_defaults(func=cmd_ablate_lambda)

    p = sub.add_parser("audit", help="count unique prototypes in a .pbank file")
    p.add_argument("--pbank", required=True)
    p.add_argument("--eps", type=_floats, default=[0.01, 0.025, 0.05])
    p.add_argument("--out", help="directory for report.json (default: <pbank dir>/audit)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("export", help="write embeddings.csv and prototypes.csv for a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProtoLabError as exc:
        print(f"protolab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"protolab {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
