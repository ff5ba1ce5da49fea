"""Command-line front door: ``run``, ``check-grads``, ``gen-corpus``, ``report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .config import MODES, PRESETS, parse_config
from .corpus import build_corpus, dump_corpus
from .errors import ATCError
from .experiment import run_experiment

log = logging.getLogger("atcsim")


def _config_from(args) -> object:
    overrides = {}
    for pair in args.set or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        overrides[key.strip()] = value
    for key in ("mode", "seed", "preset"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    return parse_config(args.config, overrides)


def cmd_run(args) -> int:
    cfg = _config_from(args)
    start = time.perf_counter()
    result = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    print(f"mode={cfg.mode} seed={cfg.seed} rounds={len(result.round_logs)} time={elapsed:.1f}s")
    for r in result.reports:
        print(f"  client {r.client_id} {r.task_kind:<16} {r.primary:.4f}")
    for kind, score in result.aggregate.items():
        print(f"  {kind:<18} {score:.4f}")
    if result.audit:
        print(f"audit violations: {len(result.audit)}", file=sys.stderr)
        return 1
    if cfg.out_dir:
        print(f"artifacts written to {cfg.out_dir}")
    return 0


def cmd_check_grads(args) -> int:
    from .gradcheck import run_suite

    start = time.perf_counter()
    reports = run_suite(seed=args.seed or 0, tol=args.tol)
    ok = True
    for name, rep in reports.items():
        key, err = rep.worst
        status = "ok" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{name:<16} max rel err {err:.2e} ({key}) {status}")
    print(f"{'passed' if ok else 'failed'} in {time.perf_counter() - start:.1f}s")
    return 0 if ok else 1


def cmd_gen_corpus(args) -> int:
    cfg = _config_from(args)
    datasets = build_corpus(
        plan=cfg.plan,
        sizes=(cfg.n_train, cfg.n_val, cfg.n_test),
        seed=cfg.seed,
        num_classes=cfg.num_classes,
        max_len=cfg.max_seq_len,
    )
    path = Path(args.out or "corpus.tsv")
    dump_corpus(datasets, path)
    print(f"wrote {sum(d.size + len(d.val) + len(d.test) for d in datasets)} instances to {path}")
    return 0


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_report(args) -> int:
    """Turn one or more run directories into plot-ready CSV tables."""
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    losses, sizes, summary = [], [], []
    for run_dir in map(Path, args.runs):
        if not (run_dir / "report.json").exists():
            raise ATCError(f"{run_dir} does not contain report.json")
        report = json.loads((run_dir / "report.json").read_text())
        tag = f"{report['mode']}:{report['seed']}"
        for kind, score in sorted(report["aggregate"].items()):
            summary.append((report["mode"], report["seed"], kind, score))
        with (run_dir / "rounds.jsonl").open() as fh:
            for line in fh:
                entry = json.loads(line)
                for client, loss in sorted(entry["loss"].items(), key=lambda kv: int(kv[0])):
                    losses.append((tag, entry["round"], entry["stage"], client, loss))
                if entry.get("clusters") is not None:
                    labels = entry["clusters"]
                    sizes.append((tag, entry["round"], len(set(labels)), max(labels.count(c) for c in set(labels))))
    _write_csv(out / "scores.csv", ("mode", "seed", "kind", "score"), summary)
    _write_csv(out / "loss_curves.csv", ("run", "round", "stage", "client", "loss"), losses)
    _write_csv(out / "cluster_sizes.csv", ("run", "round", "n_clusters", "largest"), sizes)
    print(f"wrote scores.csv, loss_curves.csv, cluster_sizes.csv to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atcsim", description="Assign-then-contrast federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p):
        p.add_argument("--config", type=Path, help="INI-style config file")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("run", help="run an experiment and write its artifacts")
    common(p)
    p.add_argument("--out", type=Path, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check-grads", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grads)

    p = sub.add_parser("gen-corpus", help="dump the synthetic corpus as TSV")
    common(p)
    p.add_argument("--out", type=Path, help="output file")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("report", help="plot-ready CSVs from run directories")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--out", type=Path, help="directory for the CSV tables")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ATCError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
