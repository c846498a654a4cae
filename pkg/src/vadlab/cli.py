"""``vadlab`` command line: train, sweep, report, preview, selftest.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 non-finite
loss, 4 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from . import experiments as ex
from . import selftest
from . import trainer as tr
from .errors import ConfigError, DataError, VadlabError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFTEST = 0, 1, 2, 3, 4

log = logging.getLogger("vadlab")


def cmd_train(args) -> int:
    cfg = tr.RunConfig.from_json(args.config)
    if args.out:
        cfg.output_dir = args.out
    if cfg.output_dir is None:
        cfg.output_dir = str(Path("runs") / cfg.resolved_run_id)
    if args.data_dir and cfg.dataset.data_dir is None:
        cfg.dataset.data_dir = args.data_dir
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def progress(epoch, step, loss):
        log.debug("epoch %d step %d loss %.5f", epoch, step, loss)

    _, rows = tr.train(cfg, on_step=progress)
    final = [r for r in rows if r.split == "test"]
    if final:
        r = final[-1]
        agg = "" if r.acc_agg is None else f" acc_agg={r.acc_agg:.4f}"
        print(f"{cfg.resolved_run_id}: epoch {r.epoch} acc_single={r.acc_single:.4f}{agg}")
    print(f"metrics: {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    plan = ex.load_plan(args.plan)
    root = ex.run_sweep(plan, args.out, jobs=args.jobs, data_dir=args.data_dir, log=print)
    print(f"combined metrics: {root / ex.SWEEP_CSV}")
    print(f"final accuracies: {root / ex.FINAL_CSV}")
    return EXIT_OK


def cmd_report(args) -> int:
    text, _ = ex.write_report(args.runs)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_preview(args) -> int:
    from .preview import render_preview
    try:
        paths = render_preview(args.spec, args.input, args.out, grid=args.grid)
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, VadlabError):
            raise
        raise ConfigError(str(exc)) from None
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run_selftest(args.inject_fault or [])
    sys.stdout.write(selftest.render(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vadlab", description="Multi-view self-supervised training experiments.")
    p.add_argument("--version", action="version", version=f"vadlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every optimisation step")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides output_dir in the config)")
    t.add_argument("--data-dir", help="dataset root (default: $VADLAB_DATA_DIR)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run every config of an experiment plan")
    s.add_argument("--plan", required=True, help="plan JSON path or the name of a bundled plan")
    s.add_argument("--out", help="output directory (overrides output_dir in the plan)")
    s.add_argument("--data-dir", help="dataset root (default: $VADLAB_DATA_DIR)")
    s.add_argument("--jobs", type=int, default=1, help="independent runs executed concurrently")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="tabulate final-epoch metrics of finished runs")
    r.add_argument("--runs", required=True)
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("preview", help="write one PPM per view of a transform expression")
    v.add_argument("--spec", required=True, help="e.g. 'perm:*' or 'rot:*+sharp:0|1'")
    v.add_argument("--in", dest="input", required=True, help="input P6 PPM image")
    v.add_argument("--out", required=True)
    v.add_argument("--grid", action="store_true", help="also write grid.ppm with all views side by side")
    v.set_defaults(func=cmd_preview)

    st = sub.add_parser("selftest", help="run gradient, transform, reduction and parser suites")
    st.add_argument("--inject-fault", action="append", metavar="OP",
                    help="corrupt the backward pass of OP (test hook)")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VadlabError as exc:
        print(f"vadlab {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
