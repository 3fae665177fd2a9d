"""Command-line entry point: generate, train, eval-e2e, ablate, gradcheck.

Settings live in one flat dict with dotted keys (``train.max_epochs``). A JSON
config file overrides the defaults and command-line flags override the file.
Every command writes the resolved dict to ``<out>/resolved_config.json``,
which can be fed back through ``--config`` to replay the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import pipeline
from .cohort import DESK_SCALE_COUNTS, FULL_SCALE_COUNTS, LABELS, BagFormatError, GeneratorConfig, ManifestError
from .cohort import generate_cohort, load_slides
from .trainer import TrainConfig, cross_validate, grad_check, gradcheck_instance, load_checkpoint, split_by_fold
from .trainer import predict, sub_seed

log = logging.getLogger("histomet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VALIDATION = 4

GRADCHECK_TOLERANCE = 1e-4
STUDIES = ("prototypes", "concept_alignment", "class_prompts", "multiscale")


class ConfigError(Exception):
    pass


class ValidationFailure(Exception):
    pass


def default_settings():
    s = {"seed": 0, "threads": 1, "eval.targets": list(pipeline.DEFAULT_TARGETS)}
    gen = GeneratorConfig()
    for f in fields(GeneratorConfig):
        if f.name != "seed":
            s[f"generate.{f.name}"] = getattr(gen, f.name)
    s["generate.bag_size"] = list(gen.bag_size)
    s["generate.scales"] = list(gen.scales)
    tr = TrainConfig()
    for f in fields(TrainConfig):
        if f.name != "seed":
            s[f"train.{f.name}"] = getattr(tr, f.name)
    return s


def resolve(args):
    settings = default_settings()
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        loaded.pop("command", None)  # informational field of snapshots
        unknown = sorted(set(loaded) - set(settings))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        settings.update(loaded)
    for key, value in getattr(args, "overrides", {}).items():
        if value is not None:
            settings[key] = value
    return settings


def generator_config(settings):
    kw = {k.split(".", 1)[1]: v for k, v in settings.items() if k.startswith("generate.")}
    kw["bag_size"] = tuple(kw["bag_size"])
    kw["scales"] = tuple(kw["scales"])
    cfg = GeneratorConfig(seed=sub_seed(settings["seed"], "generate"), **kw)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def train_config(settings, **extra):
    kw = {k.split(".", 1)[1]: v for k, v in settings.items() if k.startswith("train.")}
    kw.update(extra)
    try:
        return TrainConfig(seed=sub_seed(settings["seed"], "train"), **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def write_snapshot(out, settings, command, name="resolved_config.json"):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / name, "w") as fh:
        json.dump(dict(settings, command=command), fh, indent=2, sort_keys=True)


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _slides(settings, cohort):
    manifest = Path(cohort) / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    slides = load_slides(manifest)
    if not slides:
        raise ConfigError(f"cohort {cohort} is empty")
    k = settings["train.fold_count"]
    bad = sorted({s.fold for s in slides if not 0 <= s.fold < k})
    if bad:
        raise ConfigError(f"cohort fold indices {bad} do not fit {k} folds")
    dims = {b.shape[1] for s in slides for b in s.bags.values()}
    if len(dims) != 1:
        raise ConfigError(f"inconsistent feature dimensions in cohort: {sorted(dims)}")
    return slides


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, settings):
    out = Path(args.out)
    if not out.is_dir():
        if not args.create:
            raise FileNotFoundError(f"output directory {out} does not exist (use --create)")
        out.mkdir(parents=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    cfg = generator_config(settings)
    if sum(int(c) for c in cfg.counts.values()) == 0:
        log.warning("all class counts are zero; writing an empty manifest")
    write_snapshot(out, settings, "generate")
    records = generate_cohort(cfg, out)
    log.info("wrote %d slides to %s", len(records), out)
    return EXIT_OK


def cmd_train(args, settings):
    out = Path(args.out)
    slides = _slides(settings, args.cohort)
    cfg = train_config(settings)
    write_snapshot(out, settings, f"train --module {args.module}", f"resolved_config_module_{args.module}.json")
    results, summary = cross_validate(slides, cfg, args.module, out_dir=out, workers=settings["threads"])
    summary = {"module": args.module, "metrics": summary,
               "best_epochs": [r.best_epoch for r in results],
               "val_metrics": [r.val_metrics for r in results]}
    _dump(out / f"summary_module_{args.module}.json", summary)
    for name, stats in summary["metrics"].items():
        print(f"module {args.module} {name}: {stats['mean']:.4f} +/- {stats['std']:.4f}")
    return EXIT_OK


def _format_target(t):
    return f"{t:.2f}".rstrip("0").rstrip(".")


def cmd_eval_e2e(args, settings):
    targets = settings["eval.targets"]
    if isinstance(targets, str):
        targets = [float(t) for t in targets.split(",") if t.strip()]
    if not targets:
        raise ConfigError("target list is empty")
    settings["eval.targets"] = [float(t) for t in targets]
    slides = _slides(settings, args.cohort)
    k = settings["train.fold_count"]
    ckpt_root = Path(args.checkpoints)
    out = Path(args.out)
    write_snapshot(out, settings, "eval-e2e")
    rows = []
    for fold in range(k):
        pa_path = ckpt_root / f"fold{fold}" / "module_a.hmck"
        pb_path = ckpt_root / f"fold{fold}" / "module_b.hmck"
        for p in (pa_path, pb_path):
            if not p.exists():
                raise FileNotFoundError(f"missing checkpoint {p}")
        params_a, _ = load_checkpoint(pa_path)
        params_b, _ = load_checkpoint(pb_path)
        _, val, test = split_by_fold(slides, fold, k)
        val_scores = predict(val, params_a)[:, 1]
        val_labels = [s.label > 0 for s in val]
        for t in settings["eval.targets"]:
            op = pipeline.select_threshold(val_scores, val_labels, t)
            report, decisions = pipeline.evaluate_e2e(test, params_a, params_b, op)
            d = out / f"fold{fold}" / f"target_{_format_target(t)}"
            d.mkdir(parents=True, exist_ok=True)
            pipeline.write_report(report, d / "report.json")
            pipeline.write_decision_log(decisions, d / "decisions.csv")
            rows.append({"fold": fold, "target": t, "threshold": op.threshold,
                         "accuracy": report.five_class_accuracy, "macro_f1": report.macro_f1,
                         "sensitivity": report.module_a_sensitivity, "specificity": report.module_a_specificity,
                         "forwarded": report.workload_forwarded_fraction,
                         "conditional_site_accuracy": report.conditional_site_accuracy})
    summary = {}
    for t in settings["eval.targets"]:
        sel = [r for r in rows if r["target"] == t]
        summary[_format_target(t)] = {
            key: {"mean": float(np.mean([r[key] for r in sel])), "std": float(np.std([r[key] for r in sel]))}
            for key in ("accuracy", "macro_f1", "sensitivity", "specificity", "forwarded",
                        "conditional_site_accuracy")
        }
    _dump(out / "summary.json", {"per_fold": rows, "by_target": summary})
    for t, stats in summary.items():
        print(f"target {t}: acc {stats['accuracy']['mean']:.4f} macro-F1 {stats['macro_f1']['mean']:.4f} "
              f"forwarded {stats['forwarded']['mean']:.4f}")
    return EXIT_OK


def ablation_arms(study):
    if study == "prototypes":
        arms = {"no condensation": {"no_condensation": True}}
        arms.update({f"P={p}": {"prototype_count": p} for p in (4, 8, 16, 32, 64)})
        return arms
    if study == "concept_alignment":
        return {"with concept alignment": {}, "without concept alignment": {"no_concept_alignment": True}}
    if study == "class_prompts":
        return {"with class prompts": {}, "without class prompts": {"no_class_prompts": True}}
    if study == "multiscale":
        return {"10x only": {"single_scale": "10x"}, "20x only": {"single_scale": "20x"}, "fused": {}}
    raise ConfigError(f"unknown study {study!r}; choose from {STUDIES}")


def run_ablation(slides, settings, study, module="b", out=None):
    """Train every arm of `study` under identical seeds and folds; returns {arm: summary}."""
    table = {}
    for arm, overrides in ablation_arms(study).items():
        cfg = train_config(settings, **overrides)
        arm_dir = None if out is None else out / arm.replace(" ", "_").replace("=", "")
        _, summary = cross_validate(slides, cfg, module, out_dir=arm_dir, workers=settings["threads"])
        table[arm] = summary
    return table


def cmd_ablate(args, settings):
    arms = ablation_arms(args.study)  # validate the name before any work
    slides = _slides(settings, args.cohort)
    out = Path(args.out)
    write_snapshot(out, settings, f"ablate --study {args.study}")
    table = run_ablation(slides, settings, args.study, out=out)
    _dump(out / f"ablation_{args.study}.json", table)
    lines = ["| arm | ACC | macro-F1 | OVR macro AUC |", "|---|---|---|---|"]
    for arm in arms:
        cells = [f"{table[arm][m]['mean']:.4f} +/- {table[arm][m]['std']:.4f}" for m in ("acc", "macro_f1", "auc")]
        lines.append(f"| {arm} | " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    (out / f"ablation_{args.study}.md").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args, settings):
    params, bags, label = gradcheck_instance(seed=settings["seed"])
    report = grad_check(params, bags, label, lambda_compact=settings["train.lambda_compact"],
                        break_gradient=args.break_gradient)
    failed = []
    for name, err in report.items():
        ok = err <= GRADCHECK_TOLERANCE
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e}")
        if not ok:
            failed.append(name)
    if args.out:
        out = Path(args.out)
        write_snapshot(out, settings, "gradcheck")
        _dump(out / "gradcheck.json", {"tolerance": GRADCHECK_TOLERANCE, "groups": report})
    if failed:
        raise ValidationFailure(f"gradient check failed for {failed}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _parse_counts(text):
    if text.strip() in ("0", "zero", "none"):
        return {k: 0 for k in LABELS}
    if text.strip() == "full":
        return dict(FULL_SCALE_COUNTS)
    counts = dict(DESK_SCALE_COUNTS)
    for part in text.split(","):
        name, _, value = part.partition("=")
        name = name.strip()
        if name not in LABELS:
            raise argparse.ArgumentTypeError(f"unknown label {name!r}")
        counts[name] = int(value)
    return counts


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes across folds (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="histomet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic cohort")
    g.add_argument("--create", action="store_true", help="create the output directory if missing")
    g.add_argument("--counts", type=_parse_counts, help="'Primary=193,Brain=13,...', '0' or 'full'")
    g.add_argument("--full-scale", action="store_true", help="use the full-size class counts")
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--multi-slide-fraction", type=float)

    def training_flags(sp):
        sp.add_argument("--cohort", required=True, help="directory holding manifest.jsonl")
        sp.add_argument("--max-epochs", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--folds", type=int)

    t = sub.add_parser("train", parents=[common], help="k-fold training of one module")
    t.add_argument("--module", choices=("a", "b"), required=True)
    training_flags(t)

    e = sub.add_parser("eval-e2e", parents=[common], help="two-stage evaluation at target sensitivities")
    e.add_argument("--cohort", required=True)
    e.add_argument("--checkpoints", required=True, help="directory with fold*/module_{a,b}.hmck")
    e.add_argument("--targets", help="comma-separated target sensitivities")
    e.add_argument("--folds", type=int)

    a = sub.add_parser("ablate", parents=[common], help="ablation study over Module B")
    a.add_argument("--study", required=True)
    training_flags(a)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--break-gradient", action="store_true", help="perturb one analytic gradient (self-test)")
    return p


def _overrides(args):
    o = {"seed": args.seed, "threads": args.threads}
    if args.command == "generate":
        counts = args.counts
        if args.full_scale:
            counts = dict(FULL_SCALE_COUNTS)
        o.update({"generate.counts": counts, "generate.feature_dim": args.feature_dim,
                  "generate.multi_slide_fraction": args.multi_slide_fraction})
    if args.command in ("train", "ablate"):
        o.update({"train.max_epochs": args.max_epochs, "train.patience": args.patience,
                  "train.learning_rate": args.lr, "train.fold_count": args.folds})
    if args.command == "eval-e2e":
        o.update({"eval.targets": args.targets, "train.fold_count": args.folds})
    return o


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval-e2e": cmd_eval_e2e,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command != "gradcheck" and not args.out:
        log.error("--out is required")
        return EXIT_CONFIG
    args.overrides = _overrides(args)
    try:
        settings = resolve(args)
        if settings["threads"] < 1:
            raise ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](args, settings)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, BagFormatError, ManifestError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValidationFailure as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
