"""Command-line entry point: gen, teach, unlearn, eval, report.

Every artifact of a run lives under one run directory::

    <run-dir>/config.txt       resolved UnlearnConfig (flat key=value)
    <run-dir>/dataset/         images/, masks/, manifest.tsv, genspec.txt
    <run-dir>/checkpoints/     teacher.bin, adapters.bin
    <run-dir>/logs/            per-step and per-epoch CSV, run summaries
    <run-dir>/reports/         report.json, metrics.csv, figures/, diffmaps/
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from . import container, data, engine, lora, nets
from .config import ConfigError, UnlearnConfig, default_schedule, parse_kv
from .evalkit import report as rpt
from .presets import PRESETS

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_THRESHOLD = 0, 2, 3, 4

log = logging.getLogger("loraforget")


class UsageError(Exception):
    pass


class IOFailure(Exception):
    """Missing or unreadable run artifact."""


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.txt")
    dataset = property(lambda self: self.root / "dataset")
    checkpoints = property(lambda self: self.root / "checkpoints")
    logs = property(lambda self: self.root / "logs")
    reports = property(lambda self: self.root / "reports")
    teacher = property(lambda self: self.checkpoints / "teacher.bin")
    adapters = property(lambda self: self.checkpoints / "adapters.bin")

    def claim(self, path: Path, overwrite: bool) -> None:
        """Refuse to clobber an existing artifact unless asked to."""
        if path.exists() and not overwrite:
            raise UsageError(f"{path} already exists (pass --overwrite to replace it)")

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise IOFailure(f"missing {what}: {path}")
        return path

    def load_dataset(self) -> data.SplitDataset:
        try:
            return data.load(self.require(self.dataset, "dataset (run `gen` first)"))
        except data.DatasetError as exc:
            raise IOFailure(str(exc)) from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextmanager
def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        yield
        return
    with threadpool_limits(limits=n):
        yield


# -- config resolution ------------------------------------------------------

def _base_config(args, run: RunDir) -> UnlearnConfig:
    """Defaults < run-dir config.txt < preset < --config file < flags."""
    cfg = UnlearnConfig()
    if run.config.exists():
        cfg = UnlearnConfig.from_text(run.config.read_text(), cfg)
    if getattr(args, "preset", None):
        cfg = UnlearnConfig.from_text(PRESETS[args.preset], cfg)
    if args.config:
        cfg = UnlearnConfig.from_text(Path(args.config).read_text(), cfg)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for item in getattr(args, "set", None) or []:
        overrides.update(parse_kv(item))
    for flag, key in _FLAG_KEYS.get(args.command, ()):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if overrides:
        cfg = UnlearnConfig.from_dict(overrides, cfg)
    rebuild = args.command == "unlearn" and not args.schedule and (
        args.epochs or (args.mode and args.mode != cfg.mode))
    if rebuild:
        epochs = args.epochs or cfg.epochs
        sched = default_schedule(args.mode or cfg.mode, epochs)
        cfg = UnlearnConfig.from_dict({"schedule": ",".join(p.to_text() for p in sched),
                                       "epochs": str(epochs)}, cfg)
    return cfg


_FLAG_KEYS = {
    "teach": (("teacher_epochs", "teacher_epochs"), ("teacher_lr", "teacher_lr"),
              ("batch_size", "batch_size"), ("min_epochs", "teacher_min_epochs")),
    "unlearn": (("lr", "lr"), ("batch_size", "batch_size"), ("schedule", "schedule"),
                ("forget_objective", "forget_objective"), ("lora_r", "lora_r"),
                ("lora_alpha", "lora_alpha"), ("lora_dropout", "lora_dropout")),
}


def _task_config(cfg: UnlearnConfig, ds: data.SplitDataset) -> UnlearnConfig:
    """Align the config's task (and its objective) with the dataset."""
    task = "segmentation" if ds.task == "seg" else "classification"
    if cfg.task == task:
        return cfg
    objective = cfg.forget_objective
    if task == "classification" and objective in ("background", "ascent-composite"):
        objective = "random-label"
    elif task == "segmentation" and objective in ("random-label", "entropy"):
        objective = "ascent-composite"
    return UnlearnConfig.from_dict({"task": task, "forget_objective": objective}, cfg)


def _write_config(run: RunDir, cfg: UnlearnConfig) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.write_text(cfg.to_text())


# -- subcommands -----------------------------------------------------------

def cmd_gen(args, run: RunDir) -> int:
    spec = data.GenSpec(
        task=args.task, count=args.count, height=args.size, width=args.size,
        forget_mode=args.forget_mode, forget_ratio=args.forget_ratio, val_count=args.val_count,
        noise_sigma=args.noise, seed=args.seed if args.seed is not None else 0,
    )
    run.claim(run.dataset, args.overwrite)
    ds = data.make(spec)
    data.save(ds, run.dataset)
    if args.overwrite or not run.config.exists():
        task = "segmentation" if spec.task == "seg" else "classification"
        objective = "ascent-composite" if spec.task == "seg" else "random-label"
        _write_config(run, UnlearnConfig(task=task, forget_objective=objective, seed=spec.seed))
    c = ds.counts()
    print(f"retain={c['retain']} forget={c['forget']} val={c['val']} ({c['retain']}/{c['forget']}/{c['val']})")
    return EXIT_OK


def cmd_teach(args, run: RunDir) -> int:
    ds = run.load_dataset()
    cfg = _task_config(_base_config(args, run), ds)
    run.claim(run.teacher, args.overwrite)
    tlog = engine.TrainLog()
    try:
        teacher = engine.train_teacher(ds, cfg, tlog)
    except engine.TeacherThresholdError as exc:
        run.checkpoints.mkdir(parents=True, exist_ok=True)
        if exc.teacher is not None:
            nets.save(exc.teacher, run.checkpoints / "teacher_below_threshold.bin")
        tlog.write(run.logs, "teacher")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    _write_config(run, cfg)
    run.checkpoints.mkdir(parents=True, exist_ok=True)
    nets.save(teacher, run.teacher)
    tlog.write(run.logs, "teacher")
    val = tlog.epochs[-1]["val"]
    print(f"teacher: {len(tlog.epochs)} epochs, val {'dice' if ds.task == 'seg' else 'accuracy'} {val:.4f}")
    return EXIT_OK


def cmd_unlearn(args, run: RunDir) -> int:
    ds = run.load_dataset()
    cfg = _task_config(_base_config(args, run), ds)
    teacher = nets.load(run.require(run.teacher, "teacher checkpoint (run `teach` first)"),
                        feature_point=cfg.feature_point)
    run.claim(run.adapters, args.overwrite)
    student, aset, trace = engine.unlearn(teacher, ds, cfg)
    _write_config(run, cfg)
    lora.save(aset, run.adapters)
    trace.write(run.logs, "unlearn")
    trainable, total, pct = lora.budget(student, aset)
    summary = {"mode": cfg.mode, "schedule": [p.to_text() for p in cfg.schedule], "steps": len(trace.steps),
               "trainable": trainable, "total": total, "pct": pct, "final_epoch": trace.epochs[-1] if trace.epochs else {}}
    (run.logs / "unlearn_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"unlearn ({cfg.mode}): {len(trace.steps)} steps, {trainable} trainable / {total} ({pct:.2f}%)")
    return EXIT_OK


def evaluate_run(run: RunDir, cfg: UnlearnConfig | None = None) -> tuple[rpt.EvalReport, object, object, object]:
    """Rebuild teacher and student from the persisted checkpoints and score them."""
    ds = run.load_dataset()
    if cfg is None:
        cfg = UnlearnConfig.from_text(run.require(run.config, "config.txt").read_text())
    teacher = nets.load(run.require(run.teacher, "teacher checkpoint"), feature_point=cfg.feature_point)
    student = nets.clone_frozen(teacher)
    aset = lora.load(run.require(run.adapters, "adapter checkpoint (run `unlearn` first)"), student)
    meta = {
        "seed": cfg.seed,
        "mode": cfg.mode,
        "schedule": [p.to_text() for p in cfg.schedule],
        "forget_objective": cfg.forget_objective,
        "sha256": {"config": _sha256(run.config), "teacher": _sha256(run.teacher),
                   "adapters": _sha256(run.adapters), "manifest": _sha256(run.dataset / "manifest.tsv")},
    }
    return rpt.evaluate(student, teacher, ds, aset, meta), student, teacher, ds


def cmd_eval(args, run: RunDir) -> int:
    cfg = UnlearnConfig.from_text(run.require(run.config, "config.txt").read_text())
    rep, student, teacher, ds = evaluate_run(run, cfg)
    run.claim(run.reports / "report.json", args.overwrite)
    rpt.write_report(rep, run.reports)
    if ds.task == "seg":
        items = ds.split(args.diff_split)
        if args.diff_limit:
            items = items[: args.diff_limit]
        stats = rpt.diff_maps(student, teacher, items, run.reports / "diffmaps")
        (run.reports / "fg_means.csv").write_text(rpt.fg_table(stats))
    _print_summary(rep)
    return EXIT_OK


def cmd_report(args, run: RunDir) -> int:
    """Re-render CSV and figures from report.json (optionally recomputed)."""
    if args.recompute:
        rep, *_ = evaluate_run(run)
        (run.reports).mkdir(parents=True, exist_ok=True)
    else:
        rep = rpt.EvalReport.from_json(run.require(run.reports / "report.json", "report.json").read_text())
    rpt.write_report(rep, run.reports)
    _print_summary(rep)
    return EXIT_OK


def _print_summary(rep: rpt.EvalReport) -> None:
    m = rep.headline
    print(f"{'split':<8}{'teacher':>10}{'student':>10}{'delta':>10}{'l1_gap':>10}{'feat_gap':>10}")
    for split in data.SPLITS:
        s, d = rep.splits[split], rep.divergence[split]
        print(f"{split:<8}{s['teacher'][m]:>10.4f}{s['student'][m]:>10.4f}{s['delta'][m]:>10.4f}"
              f"{d['l1_logit_gap']:>10.4f}{d['feature_gap']:>10.4f}")
    print(f"selectivity {rep.selectivity:.4f}")


# -- parser -----------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for flags that fall back to the config."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--run-dir", default="run", help="directory holding every artifact of the run")
    g.add_argument("--seed", type=int, default=None, help="seed (default: from config, else 0)")
    g.add_argument("--config", default=None, help="flat key=value config file")
    g.add_argument("--overwrite", action="store_true", help="replace existing artifacts")
    g.add_argument("--threads", type=int, default=1, help="BLAS threads")
    g.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    p = argparse.ArgumentParser(prog="loraforget", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], formatter_class=fmt, help="generate a synthetic dataset")
    s.add_argument("--task", choices=("seg", "cls"), default="seg", help="segmentation or classification data")
    s.add_argument("--count", type=int, default=200, help="total images")
    s.add_argument("--size", type=int, default=32, help="image height and width")
    s.add_argument("--forget-ratio", type=float, default=0.10, help="forget fraction of the training pool (paper)")
    s.add_argument("--forget-mode", choices=data.FORGET_MODES, default="random", help="how forget ids are chosen")
    s.add_argument("--val-count", type=int, default=40, help="validation images")
    s.add_argument("--noise", type=float, default=0.06, help="Gaussian noise sigma")

    cfg_help = "named preset config: " + ", ".join(sorted(PRESETS))
    s = sub.add_parser("teach", parents=[common], formatter_class=fmt, help="train the teacher")
    s.add_argument("--preset", choices=sorted(PRESETS), default=None, help=cfg_help)
    s.add_argument("--teacher-epochs", type=int, default=None, help="epoch cap (config default 60)")
    s.add_argument("--teacher-lr", type=float, default=None, help="Adam step size (config default 3e-3)")
    s.add_argument("--batch-size", type=int, default=None, help="batch size (config default 16)")
    s.add_argument("--min-epochs", type=int, default=None, help="epochs before early stop is allowed")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    s = sub.add_parser("unlearn", parents=[common], formatter_class=fmt, help="run LoRA unlearning")
    s.add_argument("--preset", choices=sorted(PRESETS), default=None, help=cfg_help)
    s.add_argument("--mode", choices=("two-phase", "joint"), default=None,
                   help="schedule family (default two-phase)")
    s.add_argument("--epochs", type=int, default=None, help="total unlearning epochs (paper: 15)")
    s.add_argument("--schedule", default=None, help="explicit phase:epochs:scope[:lr],... list")
    s.add_argument("--lr", type=float, default=None, help="Adam step size (paper: 1e-4)")
    s.add_argument("--batch-size", type=int, default=None, help="retain batch size (desk default 16)")
    s.add_argument("--forget-objective", default=None,
                   choices=("background", "ascent-composite", "random-label", "entropy"),
                   help="forgetting term (default ascent-composite)")
    s.add_argument("--lora-r", type=int, default=None, help="adapter rank (paper: 8)")
    s.add_argument("--lora-alpha", type=float, default=None, help="adapter alpha (paper: 32)")
    s.add_argument("--lora-dropout", type=float, default=None, help="adapter dropout (paper: 0.05)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    s = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="score student vs teacher")
    s.add_argument("--diff-split", choices=data.SPLITS, default="forget", help="split exported as diff maps")
    s.add_argument("--diff-limit", type=int, default=0, help="max diff-map items (0 = all)")

    s = sub.add_parser("report", parents=[common], formatter_class=fmt, help="re-render report files")
    s.add_argument("--recompute", action="store_true", help="re-evaluate from checkpoints first")
    return p


COMMANDS = {"gen": cmd_gen, "teach": cmd_teach, "unlearn": cmd_unlearn, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    run = RunDir(args.run_dir)
    try:
        with _threads(args.threads):
            return COMMANDS[args.command](args, run)
    except engine.TeacherThresholdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (IOFailure, OSError, container.ContainerError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, data.DatasetError, lora.AdapterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
