"""Command-line entry point: generate, train, eval, report.

Every run directory receives a canonical config echo, per-stage text
checkpoints, per-iteration confidence tables, a JSON metrics report, and a
timestamp-free log, so any run can be reproduced byte for byte from its own
echo. Verbosity on stderr follows the H2E_LOG_LEVEL environment variable;
file outputs do not depend on it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import nn
from .config import METHODS, SCHEMA, ExperimentConfig, load_config
from .evaluation import (MetricsReport, baseline_ce, baseline_la,
                         baseline_smallloss, evaluate_method, reports_to_json,
                         true_noise_budget)
from .identifier import IdentifierDiverged, flag_below, load_identifier
from .pipeline import run_h2e, split_budget
from .streams import named_rng
from .synthdata import (ConfigError, DatasetBundle, ParseError,
                        build_bundle, make_generative_spec, read_csv,
                        write_csv)
from .training import TrainingDiverged

log = logging.getLogger("h2e")


def _setup_logging() -> None:
    level_name = os.environ.get("H2E_LOG_LEVEL", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def bundle_from_config(cfg: ExperimentConfig, seed: int) -> DatasetBundle:
    """Load the configured external dataset or forge a synthetic bundle."""
    if cfg["data.bundle"]:
        return read_csv(cfg["data.bundle"])
    rng = named_rng(seed, "data")
    spec = make_generative_spec(
        cfg["data.classes"], cfg["data.contexts"], cfg["data.feature_dim"], rng,
        signal_scale=cfg["data.signal_scale"],
        context_scale=cfg["data.context_scale"],
        noise_scale=cfg["data.noise_scale"],
        head_context_entropy=cfg["data.head_context_entropy"],
        tail_context_entropy=cfg["data.tail_context_entropy"])
    echo = {"classes": cfg["data.classes"], "contexts": cfg["data.contexts"],
            "feature_dim": cfg["data.feature_dim"], "n_max": cfg["data.n_max"],
            "imbalance": cfg["data.imbalance"],
            "noise_rate": cfg["data.noise_rate"],
            "blue_fraction": cfg["data.blue_fraction"],
            "test_per_class": cfg["data.test_per_class"],
            "noise_scale": cfg["data.noise_scale"], "seed": seed}
    return build_bundle(spec, cfg["data.n_max"], cfg["data.imbalance"],
                        cfg["data.noise_rate"], cfg["data.blue_fraction"],
                        cfg["data.test_per_class"], rng, config=echo)


def resolve_budget(cfg: ExperimentConfig, bundle: DatasetBundle) -> int:
    rule = cfg["eval.budget_rule"]
    if rule == "true_noise":
        return true_noise_budget(bundle)
    return int(rule.split(":", 1)[1])


def bundle_info(bundle: DatasetBundle) -> dict:
    kinds = {"blue": 0, "red": 0}
    for r in bundle.train:
        if r.is_noise:
            kinds[r.noise_kind] = kinds.get(r.noise_kind, 0) + 1
    return {"classes": bundle.class_count,
            "feature_dim": bundle.feature_dim,
            "train_size": len(bundle.train),
            "test_size": len(bundle.test),
            "class_counts": [int(c) for c in bundle.class_counts],
            "noise_counts": kinds}


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig.defaults()
    if args.seed is not None:
        cfg.values["seed"] = args.seed
        cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    cfg = _load_experiment(args)
    seed = cfg["seed"]
    bundle = bundle_from_config(cfg, seed)
    out = Path(args.out) if args.out else Path(cfg["out_dir"] or ".") / "dataset.csv"
    if out.is_dir():
        out = out / "dataset.csv"
    write_csv(bundle, out)
    info = bundle_info(bundle)
    counts = info["class_counts"]
    print(f"wrote {out} ({info['train_size']} train / {info['test_size']} test rows)")
    print(f"class counts: {counts} (max/min = {max(counts) / min(counts):.1f})")
    noise = info["noise_counts"]
    total_noise = noise["blue"] + noise["red"]
    print(f"noise: {total_noise} records "
          f"({noise['blue']} label flips, {noise['red']} open-set) "
          f"= {total_noise / info['train_size']:.3f} of train")
    return 0


def _print_schedule(cfg: ExperimentConfig) -> None:
    h2e = cfg.h2e_config()
    id_shares = split_budget(h2e.identifier_epochs, h2e.iterations)
    mix_shares = split_budget(h2e.mixup_epochs, h2e.iterations)
    print(f"stage schedule for {h2e.iterations} iteration(s), "
          f"{h2e.total_epochs} total epochs:")
    print(f"  warmup: {h2e.warmup_epochs} epochs")
    for t in range(h2e.iterations):
        print(f"  iteration {t + 1}: identifier {id_shares[t]} epochs, "
              f"mixup {mix_shares[t]} epochs")
    print(f"  stage2: {h2e.stage2_epochs} epochs (head only)")


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    seed = cfg["seed"]
    methods = [args.method] if args.method else ["h2e", *cfg["eval.baselines"]]
    if args.dry_run:
        print(f"config OK; methods: {', '.join(methods)}; seed {seed}")
        _print_schedule(cfg)
        return 0

    out_dir = Path(args.out or cfg["out_dir"] or f"runs/seed{seed}")
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo").write_text(cfg.echo_text())

    bundle = bundle_from_config(cfg, seed)
    budget = resolve_budget(cfg, bundle)
    h2e_cfg = cfg.h2e_config()
    epochs = h2e_cfg.total_epochs
    opt = cfg.optim_settings()
    hidden = cfg["train.hidden"]

    log_lines: list[str] = []
    def tee(line: str) -> None:
        log_lines.append(line)
        log.info(line)

    reports: list[MetricsReport] = []
    for method in methods:
        log.info("training method %s (seed %d, %d epochs)", method, seed, epochs)
        if method == "h2e":
            result = run_h2e(bundle, h2e_cfg, seed, out_dir=out_dir,
                             budget=budget, log=tee)
            report = result.report
            threshold = cfg["eval.flag_threshold"]
            if threshold is not None:
                flags = flag_below(result.table, threshold)
                report = evaluate_method("h2e", result.net, bundle,
                                         flagged_ids=flags.flagged_ids(),
                                         budget=budget, seed=seed)
                report.history = result.report.history
                report.epochs = result.report.epochs
                report.extras["flag_threshold"] = threshold
        elif method == "ce":
            net, report = baseline_ce(bundle, epochs, named_rng(seed, "baseline-ce"),
                                      hidden, opt, log=tee, seed=seed)
            nn.save_network(net, out_dir / "checkpoints" / "baseline_ce.txt")
        elif method == "la":
            net, report = baseline_la(bundle, epochs, named_rng(seed, "baseline-la"),
                                      hidden, opt, log=tee, seed=seed)
            nn.save_network(net, out_dir / "checkpoints" / "baseline_la.txt")
        elif method == "smallloss":
            drop = cfg["eval.smallloss_drop"]
            if drop is None:
                drop = true_noise_budget(bundle) / max(len(bundle.train), 1)
            warm = cfg["eval.smallloss_warm_epochs"] or None
            net, report = baseline_smallloss(
                bundle, epochs, drop, named_rng(seed, "baseline-smallloss"),
                hidden, opt, warm_epochs=warm, budget=budget, log=tee, seed=seed)
            nn.save_network(net, out_dir / "checkpoints" / "baseline_smallloss.txt")
        else:
            raise ConfigError(f"unknown method {method!r}")
        reports.append(report)
        print(report.to_text())

    (out_dir / "report.json").write_text(
        reports_to_json(reports, bundle_info(bundle), cfg.echo_dict()))
    (out_dir / "log.txt").write_text("\n".join(log_lines) + "\n" if log_lines else "")
    print(f"run written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    echo = run_dir / "config.echo"
    if not echo.exists():
        raise ConfigError(f"{run_dir} has no config.echo; not a run directory")
    cfg = load_config(echo)
    seed = args.seed if args.seed is not None else cfg["seed"]
    bundle = bundle_from_config(cfg, seed)

    method = args.method or "h2e"
    if method == "h2e":
        ckpt = run_dir / "checkpoints" / "stage2.txt"
    else:
        ckpt = run_dir / "checkpoints" / f"baseline_{method}.txt"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}")
    net = nn.load_network(ckpt)

    flags = None
    conf_dir = run_dir / "confidences"
    if method == "h2e" and conf_dir.exists():
        tables = sorted(conf_dir.glob("iter_*.csv"),
                        key=lambda p: int(p.stem.split("_")[1]))
        if tables:
            flags = _read_flagged_ids(tables[-1])
    offset = None
    if method == "la":
        offset = -np.log(bundle.prior)
    report = evaluate_method(method, net, bundle, flagged_ids=flags,
                             budget=resolve_budget(cfg, bundle),
                             logit_offset=offset, seed=seed)
    print(report.to_text())
    return 0


def _read_flagged_ids(path: Path) -> list[int]:
    flagged = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["flagged"]):
                flagged.append(int(row["sample_id"]))
    return flagged


_REPORT_COLUMNS = ("top1.overall", "top1.many", "top1.medium", "top1.few",
                   "noise_precision.overall", "noise_precision.few",
                   "noise_recall.overall")


def _report_row(method_dict: dict) -> dict:
    row = {}
    for col in _REPORT_COLUMNS:
        metric, split = col.split(".")
        row[col] = method_dict[metric].get(split)
    return row


def cmd_report(args) -> int:
    rows = []
    configs = {}
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise ConfigError(f"{run_dir} has no report.json")
        payload = json.loads(path.read_text())
        configs[run_dir] = {k: v for k, v in payload.get("config", {}).items()
                            if k not in ("seed", "out_dir")}
        for method, m in sorted(payload["methods"].items()):
            rows.append({"run": Path(run_dir).name, "method": method,
                         "seed": m.get("seed"), **_report_row(m)})

    base = next(iter(configs.values()), {})
    mismatched = {d: sorted(k for k in set(base) | set(c)
                            if base.get(k) != c.get(k))
                  for d, c in configs.items() if c != base}
    if mismatched:
        print("WARNING: run configs differ; comparisons may not be like for like")
        for d, keys in mismatched.items():
            print(f"  {d}: differs on {', '.join(keys)}")

    by_method: dict[str, list[dict]] = {}
    for row in rows:
        by_method.setdefault(row["method"], []).append(row)
    summary = []
    for method, group in sorted(by_method.items()):
        if len(group) < 2:
            continue
        agg = {"run": f"mean±std[{len(group)}]", "method": method, "seed": None}
        for col in _REPORT_COLUMNS:
            vals = [g[col] for g in group if g[col] is not None]
            if vals:
                agg[col] = (float(np.mean(vals)), float(np.std(vals)))
            else:
                agg[col] = None
        summary.append(agg)

    headers = ["run", "method", "seed", *_REPORT_COLUMNS]
    def fmt(value):
        if value is None:
            return "undef"
        if isinstance(value, tuple):
            return f"{value[0]:.4f}±{value[1]:.4f}"
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)
    table = [[fmt(r.get(h)) for h in headers] for r in rows + summary]
    widths = [max(len(h), *(len(row[i]) for row in table)) if table else len(h)
              for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for row in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers)
            for r in rows:
                writer.writerow([r.get(h) if not isinstance(r.get(h), tuple)
                                 else r.get(h)[0] for h in headers])
        print(f"csv written to {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="h2e",
        description="Desk-scale lab for hard-to-easy noise identification "
                    "on long-tailed data")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="output path (directory or file)")

    p_gen = sub.add_parser("generate", parents=[common],
                           help="forge a synthetic dataset and write CSVs")
    p_gen.set_defaults(fn=cmd_generate)

    p_train = sub.add_parser("train", parents=[common],
                             help="run the pipeline and/or baselines")
    p_train.add_argument("--method", choices=METHODS,
                         help="train only this method (default: h2e plus "
                              "the configured baselines)")
    p_train.add_argument("--dry-run", action="store_true",
                         help="validate config and print the stage schedule")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common],
                            help="re-evaluate a finished run directory")
    p_eval.add_argument("run_dir")
    p_eval.add_argument("--method", choices=METHODS)
    p_eval.set_defaults(fn=cmd_eval)

    p_rep = sub.add_parser("report", help="tabulate one or more run reports")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.add_argument("--csv", help="also write the table as CSV")
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, IdentifierDiverged) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
