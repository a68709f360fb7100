"""Command-line front end: ``python -m waffle <subcommand>``.

Exit codes: 0 success (and every requested gate passed), 1 a gate failed,
2 bad usage or configuration, 3 runtime failure. Errors are also written to
stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, config_from_dict, dump_config, load_config
from .exceptions import ConfigError, WaffleError
from .experiments import (
    load_detector,
    read_report,
    run_detection,
    run_fl,
    run_theory_suite,
    save_detector,
    spectral_dump,
    train_detector_from_config,
    write_report,
)

log = logging.getLogger("waffle")

EXIT_OK, EXIT_GATE, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _gate(name, value, minimum, failures):
    if minimum is not None and not value >= minimum:
        failures.append(f"{name} {value:.4f} < {minimum}")


def cmd_train_detector(args, cfg, out):
    model, trace = train_detector_from_config(cfg, n_jobs=args.jobs)
    path = save_detector(out / "detector.json", model, cfg, trace)
    dump_config(cfg, out / "config.yaml")
    log.info("checkpoint written to %s (final loss %.4f)", path, trace[-1])
    return []


def cmd_detect(args, cfg, out):
    model = load_detector(args.checkpoint or out / "detector.json", cfg)
    payload, _ = run_detection(cfg, model, n_jobs=args.jobs)
    write_report(out / "detection.json", "detection", payload)
    m = payload["metrics"]
    log.info("precision %.3f recall %.3f f1 %.3f", m["precision"], m["recall"], m["f1"])
    failures = []
    _gate("f1", m["f1"], args.min_f1, failures)
    _gate("precision", m["precision"], args.min_precision, failures)
    return failures


def cmd_fl_run(args, cfg, out):
    detector = args.detector or cfg.federation.detector
    model = None
    if detector in ("waffle_wst", "waffle_ft"):
        rep = detector.split("_")[1]
        if args.checkpoint:
            model = load_detector(args.checkpoint, cfg, rep)
        else:
            model, trace = train_detector_from_config(cfg, representation=rep, n_jobs=args.jobs)
            save_detector(out / f"detector_{rep}.json", model, cfg, trace, rep)
    history = run_fl(cfg, model, detector, out, args.jobs)
    write_report(out / "fl_report.json", "federation", {
        "seed": cfg.seed, "detector": detector, "aggregator": cfg.federation.aggregator,
        "final_accuracy": history.final_accuracy, "filtered_ids": list(history.filtered_ids),
        "detection": history.detection,
    })
    log.info("final accuracy %.4f", history.final_accuracy)
    failures = []
    _gate("final accuracy", history.final_accuracy, args.min_accuracy, failures)
    return failures


def cmd_verify_theory(args, cfg, out):
    result = run_theory_suite(cfg)
    write_report(out / "theory.json", "theory", result)
    b = result["bias"]
    print(f"{'check':<44}{'result':>10}")
    print(f"{'bias: predicted ' + format(b['predicted_bias'], '.4f') + ', empirical ' + format(b['empirical_bias'], '.4f'):<44}"
          f"{'pass' if b['passed'] else 'FAIL':>10}")
    for row in result["variance_grid"]:
        s = row["scenario"]
        label = f"variance: B={s['B']} M={s['M']} sm^2={s['sigma_m'] ** 2:.2f}"
        print(f"{label:<44}{'pass' if row['variance']['passed'] else 'FAIL':>10}  ({row['proposition']['outcome']})")
    return [] if result["passed"] else ["theory checks failed"]


def cmd_spectral_dump(args, cfg, out):
    path = spectral_dump(cfg, out, args.jobs)
    log.info("embeddings written to %s", path)
    return []


def cmd_report(args, cfg, out):
    src = Path(args.in_dir or out)
    rows = []
    for path in sorted(src.glob("*.json")):
        if path.name.startswith("detector"):
            continue
        try:
            head = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        if not isinstance(head, dict) or "kind" not in head:
            continue  # configs and other non-report files
        doc = read_report(path)
        kind = doc.get("kind")
        if kind == "detection":
            m = doc["metrics"]
            rows.append([path.name, kind, f"f1={m['f1']:.4f}", f"precision={m['precision']:.4f}"])
        elif kind == "federation":
            rows.append([path.name, kind, f"accuracy={doc['final_accuracy']:.4f}", f"detector={doc['detector']}"])
        elif kind == "theory":
            rows.append([path.name, kind, f"passed={doc['passed']}", ""])
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "kind", "headline", "detail"])
        w.writerows(rows)
    for r in rows:
        print("  ".join(r))
    return []


COMMANDS = {
    "train-detector": cmd_train_detector,
    "detect": cmd_detect,
    "fl-run": cmd_fl_run,
    "verify-theory": cmd_verify_theory,
    "spectral-dump": cmd_spectral_dump,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waffle", description="Offline malicious-client detection for federated learning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out-dir", help="output directory (defaults to output_dir in the config)")
        p.add_argument("--jobs", type=int, default=None, help="worker processes for embedding/training")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("detect", "fl-run"):
            p.add_argument("--checkpoint", help="detector checkpoint to load")
        if name == "detect":
            p.add_argument("--min-f1", type=float)
            p.add_argument("--min-precision", type=float)
        if name == "fl-run":
            p.add_argument("--detector", choices=["none", "waffle_wst", "waffle_ft", "oracle"])
            p.add_argument("--min-accuracy", type=float)
        if name == "report":
            p.add_argument("--in-dir", help="directory holding report files (defaults to --out-dir)")
    return parser


def _error(kind, exc, code):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        out = _out_dir(args, cfg)
        failures = COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        return _error("config", exc, EXIT_USAGE)
    except (WaffleError, ValueError, OSError) as exc:
        return _error("runtime", exc, EXIT_RUNTIME)
    if failures:
        for f in failures:
            print(json.dumps({"error": "gate", "message": f}), file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
