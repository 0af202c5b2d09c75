"""Command-line entry point: ``weetherapy <subcommand> [--config ...]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, taskbench
from .config import RunConfig, load_config
from .errors import WeeError
from .model import VARIANTS


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.variant is not None:
        changes["variant"] = args.variant
    if args.out is not None:
        changes["out_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(cfg: RunConfig, args) -> None:
    out = Path(cfg.out_dir) / "data"
    params = {"sample_rate_hz": cfg.sample_rate_hz, "duration_s": cfg.duration_s}
    sizes = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    for seed in cfg.seeds:
        for split, n in sizes.items():
            for task in taskbench.TASKS:
                path = out / f"seed{seed}" / f"{task}_{split}.jsonl"
                path.parent.mkdir(parents=True, exist_ok=True)
                taskbench.save_dataset(taskbench.gen_task(task, n, seed, split, params), path)
                print(path)


def cmd_pretrain(cfg: RunConfig, args) -> None:
    from .decoder import pretrain_decoder
    res = pretrain_decoder(cfg.decoder_config(), steps=cfg.pretrain_steps, seed=cfg.pretrain_seed, log=_log)
    path = Path(cfg.decoder_checkpoint or Path(cfg.out_dir) / "decoder.ckpt")
    res.decoder.save(path)
    print(f"{path}: held-out copy accuracy {res.heldout_accuracy:.4f} after {res.steps} steps")


def _with_decoder(cfg: RunConfig) -> RunConfig:
    if cfg.decoder_checkpoint is None:
        return cfg.replace(decoder_checkpoint=str(Path(cfg.out_dir) / "decoder.ckpt"))
    return cfg


def cmd_train(cfg: RunConfig, args) -> None:
    cfg = _with_decoder(cfg)
    for seed in cfg.seeds:
        out = Path(cfg.out_dir) / cfg.variant / f"seed{seed}"
        res = harness.train(cfg, seed, out, log=_log)
        report = harness.RunReport(cfg.to_dict(), [seed])
        report.add(cfg.variant, seed, res.test)
        report.write(out)
        print(json.dumps({"variant": cfg.variant, "seed": seed, "test": res.test.metrics,
                          "aggregate": res.test.aggregate(), "usage": res.test.usage}, sort_keys=True))


def cmd_eval(cfg: RunConfig, args) -> None:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / cfg.variant / f"seed{cfg.seeds[0]}" / "model.ckpt"
    model, saved = harness.load_model(path, cfg if args.config else None)
    seed = cfg.seeds[0]
    test = harness.prepare_split(saved, seed, "test", cfg.n_test)
    ev = harness.evaluate(model, test, saved)
    print(json.dumps({"checkpoint": str(path), "seed": seed, "metrics": ev.metrics, "aggregate": ev.aggregate(),
                      "usage": ev.usage, "usage_entropy": ev.usage_entropy}, sort_keys=True))


def cmd_ablate(cfg: RunConfig, args) -> None:
    cfg = _with_decoder(cfg)
    report = harness.ablate(cfg, cfg.out_dir, log=_log)
    print(report.to_markdown())
    check = harness.check_ordering(report)
    print(f"ordering holds: {check.ok} (means ordered {check.means_ordered}, seed majority {check.majority})")


def cmd_sweep(cfg: RunConfig, args) -> None:
    cfg = _with_decoder(cfg)
    lambdas = [float(x) for x in args.lambdas.split(",")]
    rows = harness.sweep_routing(cfg, lambdas, (True, False), cfg.out_dir, log=_log)
    print(harness.csv_text(harness.SWEEP_FIELDS, rows), end="")


def cmd_grad_check(cfg: RunConfig, args) -> None:
    worst = 0.0
    for r in harness.run_grad_check(cfg.variant, cfg.seeds[0], cfg.lam):
        worst = max(worst, r.max_rel_error)
        print(f"{r.parameter_name:28s} max_rel {r.max_rel_error:.3e} max_abs {r.max_abs_error:.3e} n={r.num_entries_checked}")
    print(f"worst relative error {worst:.3e}")
    if worst >= 1e-4:
        raise SystemExit(1)


def cmd_report(cfg: RunConfig, args) -> None:
    src = Path(args.report_csv) if args.report_csv else Path(cfg.out_dir) / "report.csv"
    report = harness.report_from_csv(src)
    text = report.to_markdown()
    (src.parent / "report.md").write_text(text)
    print(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-decoder": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-routing": cmd_sweep,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weetherapy")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON file with RunConfig fields")
        s.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        s.add_argument("--variant", choices=VARIANTS)
        if name == "eval":
            s.add_argument("--checkpoint", help="trained model checkpoint")
        if name == "sweep-routing":
            s.add_argument("--lambdas", default="0.1", help="comma-separated lambda values")
        if name == "report":
            s.add_argument("--report-csv", help="long-format report.csv to render")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except WeeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
