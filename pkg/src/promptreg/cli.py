"""Command line entry point: pretrain, tune, fewshot, ablate, report.

Every RunConfig field has a flag; nested fields are prefixed with their
block name (``--data-noise-std``, ``--scl-matching-metric``,
``--prompt-J``).  ``--config file.json`` supplies any subset of fields in
the nested layout of ``RunConfig.to_dict()``; flags given on the command
line win over the file.  Artifacts go to ``$PROMPTREG_OUT`` (default
``./runs``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import io
from .harness import runner
from .harness.config import RunConfig
from .harness.training import prepare

OUT_ENV = "PROMPTREG_OUT"
DEFAULT_OUT = "runs"
NESTED = ("encoder", "data", "prompt", "scl")
SKIP = {("data", "seed")}  # per-run seeds come from --seeds

log = logging.getLogger("promptreg")


def output_dir():
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _flag(prefix, name):
    return "--" + (f"{prefix}-" if prefix else "") + name.replace("_", "-")


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _optional_int(s):
    return None if s.lower() in ("none", "null") else int(s)


def _parser_type(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if default is None:
        return _optional_int
    return str


def _config_fields():
    """(block or None, field name, default) for every overridable RunConfig field."""
    base = RunConfig()
    out = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(base, f.name)
        if f.name in NESTED:
            for g in dataclasses.fields(value):
                if (f.name, g.name) not in SKIP:
                    out.append((f.name, g.name, getattr(value, g.name)))
        elif f.name != "seeds":
            out.append((None, f.name, value))
    return out


def add_config_flags(p):
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    g.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], help="comma separated, e.g. 0,1,2")
    for block, name, default in _config_fields():
        g.add_argument(_flag(block, name), dest=f"{block or 'run'}__{name}", type=_parser_type(default),
                       default=None, metavar=type(default).__name__.upper() if default is not None else "INT",
                       help=f"default {default!r}")


def _deep_update(target, updates):
    for k, v in updates.items():
        if isinstance(v, dict) and isinstance(target.get(k), dict):
            _deep_update(target[k], v)
        else:
            target[k] = v


def build_config(args):
    d = RunConfig().to_dict()
    if args.config is not None:
        _deep_update(d, json.loads(Path(args.config).read_text()))
    for key, value in vars(args).items():
        if "__" not in key or value is None:
            continue
        block, name = key.split("__", 1)
        if block == "run":
            d[name] = value
        else:
            d[block][name] = value
    if args.seeds is not None:
        d["seeds"] = args.seeds
    return RunConfig.from_dict(d)


def _provenance(run):
    if run.use_gpa and run.prompt.J:
        prov = {"mode": run.ensembling_mode, "E": run.epochs}
        if run.ensembling_mode == "gpa":
            prov.update(mu=run.gpa_mu, sigma2=run.gpa_sigma2)
        if run.ensembling_mode == "ema":
            prov["beta"] = run.ema_beta
        return prov
    return {"mode": "final", "E": run.epochs}


def cmd_pretrain(args, run, out):
    for seed in run.seeds:
        data, pair = prepare(run, seed)
        path = out / f"encoder_seed{seed}.json"
        io.save_encoder(pair, path)
        zs = runner.zero_shot_report(run, seed)
        print(f"seed {seed}: zero-shot base {zs.base_acc:.2f} novel {zs.novel_acc:.2f} hm {zs.hm:.2f} -> {path}")
    return 0


def cmd_tune(args, run, out):
    reports = []
    for seed in run.seeds:
        rep, res = runner.run_single(run, seed, args.label)
        io.save_prompts(res.inference_prompts, out / f"prompts_{rep.config_hash}_seed{seed}.json", _provenance(run))
        reports.append(rep)
        print(rep.to_json())
    runner.emit_report(reports, out)
    if len(reports) > 1:
        s = runner.summarize(reports)
        print(f"mean over {s['n']} seeds: base {s['base']:.2f} novel {s['novel']:.2f} hm {s['hm']:.2f}",
              file=sys.stderr)
    return 0


def cmd_fewshot(args, run, out):
    run = runner.few_shot_config(run) if not args.keep_gpa else run
    reports, stats = runner.few_shot_sweep(run, args.shot_list, label=args.label or "fewshot")
    runner.emit_report(reports, out)
    for k, s in stats.items():
        print(f"K={k:<3d} all-class accuracy {s['mean']:.2f} +- {s['std']:.2f}")
    return 0


def cmd_ablate(args, run, out):
    rep = runner.run_ablation(run, args.axis)
    runner.emit_report(rep, out)
    print(rep.format())
    return 0


def cmd_report(args, run, out):
    src = Path(args.log) if args.log else out / runner.RESULTS_LOG
    if not src.exists():
        print(f"no results log at {src}", file=sys.stderr)
        return 1
    reports = runner.render_from_log(src, out)
    groups = {}
    for r in reports:
        groups.setdefault(r.label or r.config_hash, []).append(r)
    for label, reps in groups.items():
        s = runner.summarize(reps)
        print(f"{label:<16} n={s['n']:<3d} base {s['base']:6.2f} novel {s['novel']:6.2f} hm {s['hm']:6.2f}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(prog="promptreg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain and save the frozen encoder pair for each seed")
    add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="tune prompts for one configuration and evaluate base-to-novel")
    add_config_flags(p)
    p.add_argument("--label", default="tune")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("fewshot", help="accuracy as a function of shots per class")
    add_config_flags(p)
    p.add_argument("--shot-list", type=lambda s: [int(x) for x in s.split(",")], default=list(runner.DEFAULT_SHOTS))
    p.add_argument("--label", default="fewshot")
    p.add_argument("--keep-gpa", action="store_true", help="do not rescale mu, sigma2 to 0.6 E")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("ablate", help="sweep one ablation axis")
    add_config_flags(p)
    p.add_argument("--axis", required=True, choices=runner.AXES)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="rebuild CSV artifacts from the results log")
    add_config_flags(p)
    p.add_argument("--log", help="results log (default: <out>/results.jsonl)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = build_config(args)
    except (TypeError, ValueError, json.JSONDecodeError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    out = output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return args.func(args, run, out)


if __name__ == "__main__":
    sys.exit(main())
