"""Command line front end: ``apart run|ablate|report``."""
from __future__ import annotations

import argparse
import contextlib
import glob
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .estimator import APARTClassifier
from .experiment import (MEMORY_NOTE, ExperimentResult, RunDirError, _csv_text, class_weights,
                         frequency_weights, read_csv_with_hash, read_metrics, read_summary,
                         run_experiment)
from .metrics import average_and_last, spearman
from .seeding import sub_seed
from .stream import LabeledImages, TaskStream, build_counts, load_cifar100_dir, make_stream, \
    synth_dataset

logger = logging.getLogger("apart")

ABLATION_MODES = ("full", "no_routing", "no_aux_pool", "no_pool")
LOCK_NAME = ".lock"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"{stage}: {cause}")


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@contextlib.contextmanager
def output_lock(out_dir: str):
    """Exclusive per-directory lock; a second writer fails instead of interleaving."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is locked by another run ({path} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


# --- data and streams --------------------------------------------------------

def load_data(config: ExperimentConfig, seed: int):
    if config.dataset_kind == "cifar100-binary":
        return load_cifar100_dir(config.cifar_path)
    num, per = config.synthetic_shape
    templates = sub_seed(seed, "templates")
    common = dict(image_size=config.image_size, noise=config.synthetic_noise,
                  family_size=config.synthetic_family_size, template_seed=templates)
    train = synth_dataset(num, per, seed=sub_seed(seed, "train-data"), **common)
    test = synth_dataset(num, config.synthetic_test_per_class,
                         seed=sub_seed(seed, "test-data"), **common)
    return train, test


def build_stream(config: ExperimentConfig, seed: int, train: LabeledImages,
                 test: LabeledImages) -> TaskStream:
    plan = build_counts(config.num_classes, config.n_max, config.rho, config.scenario,
                        seed=sub_seed(seed, "stream"))
    return make_stream(plan, config.split, train, test, seed=sub_seed(seed, "stream-sample"))


def run_one(config: ExperimentConfig, out_dir: str, mode: Optional[str] = None,
            seed: Optional[int] = None, stream: Optional[TaskStream] = None) -> ExperimentResult:
    seed = config.seed if seed is None else seed
    mode = mode or config.mode
    if stream is None:
        with stage("load-data"):
            train, test = load_data(config, seed)
        with stage("build-stream"):
            stream = build_stream(config, seed, train, test)
    with stage("train"):
        est = APARTClassifier(**config.estimator_params(mode=mode, seed=seed))
        with output_lock(out_dir):
            return run_experiment(stream, est, config.bounds(), out_dir=out_dir,
                                  config_hash=config.config_hash(),
                                  meta={"dataset": config.dataset, "split": config.split,
                                        "scenario": config.scenario,
                                        "precision": config.precision})


# --- subcommands ------------------------------------------------------------

def cmd_run(config: ExperimentConfig, out_dir: str) -> int:
    result = run_one(config, out_dir)
    s = result.summary
    print(f"run complete: {s['num_tasks']} tasks, average {s['average_accuracy']:.2f}, "
          f"last {s['last_accuracy']:.2f} -> {out_dir}")
    return 0


def _fmt(x) -> str:
    return "absent" if x is None else f"{x:.2f}"


def cmd_ablate(config: ExperimentConfig, out_dir: str) -> int:
    rows = []
    for seed in config.ablation_seeds:
        with stage("load-data"):
            train, test = load_data(config, seed)
        with stage("build-stream"):
            stream = build_stream(config, seed, train, test)
        for mode in ABLATION_MODES:
            run_dir = os.path.join(out_dir, mode, f"seed{seed}")
            res = run_one(config, run_dir, mode=mode, seed=seed, stream=stream)
            s = res.summary
            rows.append({"mode": mode, "seed": seed, "average": s["average_accuracy"],
                         "last": s["last_accuracy"], **s["subgroup_accuracy"],
                         "spearman_w": weight_trend(res.weights),
                         "manifest_hash": s["manifest_hash"]})
            print(f"{mode:12s} seed {seed}: average {s['average_accuracy']:.2f} "
                  f"last {s['last_accuracy']:.2f} few {_fmt(s['subgroup_accuracy']['few'])}")
    means = {}
    for mode in ABLATION_MODES:
        sel = [r for r in rows if r["mode"] == mode]
        means[mode] = {k: _mean([r[k] for r in sel])
                       for k in ("average", "last", "many", "medium", "few")}
    ordering = {k: sorted(ABLATION_MODES, key=lambda m: -np.inf if means[m][k] is None
                          else -means[m][k])
                for k in ("average", "last", "few")}
    report = {"config_hash": config.config_hash(), "seeds": list(config.ablation_seeds),
              "rows": rows, "means": means, "ordering": ordering}
    with stage("write-outputs"):
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
        cols = ["mode", "seed", "average", "last", "many", "medium", "few", "spearman_w",
                "manifest_hash"]
        with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
            fh.write(f"# config_hash={config.config_hash()}\n")
            fh.write(_csv_text(cols, [[r[c] for c in cols] for r in rows]))
    print(render_ablation(report))
    return 0


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def weight_trend(weights: Sequence[dict]) -> Optional[float]:
    """Spearman correlation between N(y) and the class-mean assigner weight."""
    per_class = class_weights(weights)
    n_y = [n for _, n, _ in per_class]
    w = [m for _, _, m in per_class]
    if len(set(n_y)) < 2 or len(set(w)) < 2:
        return None
    return spearman(n_y, w)


def render_ablation(report: dict) -> str:
    lines = [f"ablation over seeds {report['seeds']} (config {report['config_hash']})",
             f"{'mode':12s} {'average':>8s} {'last':>8s} {'many':>8s} {'medium':>8s} "
             f"{'few':>8s}"]
    for mode, m in report["means"].items():
        lines.append(f"{mode:12s} " + " ".join(f"{_fmt(m[k]):>8s}" for k in
                                              ("average", "last", "many", "medium", "few")))
    for key, order in report["ordering"].items():
        lines.append(f"mean {key} ordering: " + " >= ".join(order))
    return "\n".join(lines)


def _collect_hashes(run_dir: str) -> dict:
    hashes = {}
    header, tasks = read_metrics(os.path.join(run_dir, "metrics.jsonl"))
    hashes["metrics.jsonl"] = {header.get("config_hash")} | {t.get("config_hash") for t in tasks}
    hashes["summary.json"] = {read_summary(os.path.join(run_dir, "summary.json"))
                              .get("config_hash")}
    for name in ("per_class_accuracy.csv", "assigner_weights.csv"):
        path = os.path.join(run_dir, name)
        if os.path.exists(path):
            hashes[name] = {read_csv_with_hash(path)[0]}
    manifest = os.path.join(run_dir, "manifest.jsonl")
    if os.path.exists(manifest):
        with open(manifest) as fh:
            hashes["manifest.jsonl"] = {json.loads(fh.readline()).get("config_hash")}
    for path in sorted(glob.glob(os.path.join(run_dir, "checkpoints", "*.ckpt"))):
        try:
            hashes[os.path.relpath(path, run_dir)] = {load_checkpoint(path)[0]["config_hash"]}
        except CheckpointError as exc:
            raise RunDirError(str(exc)) from None
    return hashes


def render_report(run_dir: str) -> str:
    hashes = _collect_hashes(run_dir)
    distinct = set().union(*hashes.values())
    if len(distinct) != 1:
        detail = ", ".join(f"{k}={sorted(v)}" for k, v in sorted(hashes.items()))
        raise RunDirError(f"{run_dir} mixes outputs of different configs: {detail}")
    config_hash = distinct.pop()
    _, tasks = read_metrics(os.path.join(run_dir, "metrics.jsonl"))
    summary = read_summary(os.path.join(run_dir, "summary.json"))
    accs = [t["accuracy"] for t in tasks]
    avg, last = average_and_last(accs)
    if (avg, last) != (summary["average_accuracy"], summary["last_accuracy"]):
        raise RunDirError(f"{run_dir}/summary.json disagrees with metrics.jsonl: "
                          f"recomputed ({avg}, {last}), stored "
                          f"({summary['average_accuracy']}, {summary['last_accuracy']})")
    lines = [f"run {run_dir} (config {config_hash}, mode {summary.get('mode')}, "
             f"seed {summary.get('seed')})", "", "task  seen  test  accuracy"]
    for t in tasks:
        lines.append(f"{t['task']:4d}  {t['seen_classes']:4d}  {t['test_size']:4d}  "
                     f"{t['accuracy']:8.2f}")
    hi, lo = summary["subgroup_bounds"]
    groups = summary["subgroup_accuracy"]
    sizes = summary["subgroup_test_sizes"]
    lines += ["", f"average accuracy  {avg:.2f}", f"last accuracy     {last:.2f}", "",
              f"subgroups (many: N >= {hi:g}, few: N <= {lo:g}, medium in between)"]
    for name in ("many", "medium", "few"):
        lines.append(f"  {name:6s} {_fmt(groups[name]):>8s}  ({sizes[name]} test images)")
    shape = "x".join(str(s) for s in summary["image_shape"])
    lines += ["", f"trainable parameters  {summary['trainable_parameters']:,}",
              f"exemplar equivalent   {summary['exemplar_equivalent']} images of {shape}",
              "", "note: " + MEMORY_NOTE]
    return "\n".join(lines)


def cmd_report(run_dir: str) -> int:
    if os.path.exists(os.path.join(run_dir, "ablation.json")):
        report = read_summary(os.path.join(run_dir, "ablation.json"))
        text = render_ablation(report)
        with open(os.path.join(run_dir, "report.txt"), "w") as fh:
            fh.write(text + "\n")
        print(text)
        return 0
    text = render_report(run_dir)
    config_hash, rows = read_csv_with_hash(os.path.join(run_dir, "assigner_weights.csv"))
    freq = frequency_weights(rows)
    with open(os.path.join(run_dir, "frequency_weights.csv"), "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(_csv_text(["n_y", "mean_w", "instances"],
                           [(n, repr(w), k) for n, w, k in freq]))
    per_class = class_weights(rows)
    with open(os.path.join(run_dir, "class_weights.csv"), "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(_csv_text(["class", "n_y", "mean_w"], [(c, n, repr(w)) for c, n, w in per_class]))
    if freq:
        text += (f"\n\nassigner weight: mean w {freq[0][1]:.4f} at N(y) = {freq[0][0]}, "
                 f"{freq[-1][1]:.4f} at N(y) = {freq[-1][0]}")
        rho = weight_trend(rows)
        if rho is not None:
            text += f"\nspearman(N(y), class-mean w) = {rho:.3f}"
    with open(os.path.join(run_dir, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apart", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "train and evaluate one configuration"),
                            ("ablate", "compare full, no_routing, no_aux_pool and no_pool")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--precision", choices=("f32", "f64"))
        if name == "run":
            p.add_argument("--mode", help="training mode (overrides mode)")
    p = sub.add_parser("report", help="summarise a finished run directory")
    p.add_argument("run_dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        overrides = {"precision": args.precision, "output_dir": args.out,
                     "mode": getattr(args, "mode", None), "seed": args.seed}
        if args.command == "ablate" and args.seed is not None:
            overrides["ablation_seeds"] = [args.seed]
        config = load_config(args.config, overrides)
        if args.command == "run":
            return cmd_run(config, config.output_dir)
        return cmd_ablate(config, config.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.__cause__}", file=sys.stderr)
        return 1
    except (RunDirError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
