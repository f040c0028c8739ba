"""Operator surface: the five-phase pipeline plus inspection commands.

    kdfs train-teacher --config cfg.ini      # reference network
    kdfs prune         --config cfg.ini      # mask-sampling training
    kdfs finetune      --config cfg.ini      # extract + fine-tune
    kdfs export        --config cfg.ini      # write the final model file
    kdfs eval          --config cfg.ini      # accuracy of the exported model
    kdfs flops         --config cfg.ini      # cost table of the architecture
    kdfs report        --config cfg.ini      # pruned-vs-teacher comparison

Every phase writes its artifacts under [run] out_dir and echoes the
effective configuration there. KDFS_LOG=debug|info|warning|quiet controls
verbosity. --out, --seed and --r override the corresponding config fields.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .datasets import Dataset, load_cifar_binary, load_idx, synthetic
from .decoder import build_stage_decoders
from .errors import ConfigError, DependencyError, KdfsError, LockError
from .layers import build_resnet
from .objective import build_flops_model, flops_of
from .pruner import extract, load_model, report, report_csv, report_table, save_model
from .sampler import SamplerParams
from .trainer import (evaluate, finetune, kdfs_train, load_checkpoint,
                      realize_masks, train_teacher)

log = logging.getLogger("kdfs")


def _setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING,
             "quiet": logging.ERROR}.get(os.environ.get("KDFS_LOG", "info").lower(),
                                         logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out_dir} is locked by another run; remove {lock} if stale")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# data assembly


def _split_per_class(ds: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = [], []
    for k in range(ds.classes):
        rows = np.flatnonzero(ds.labels == k)
        train_idx.append(rows[:train_per_class])
        test_idx.append(rows[train_per_class:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def load_data(cfg: cfgmod.RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg["dataset"]
    kind = d["kind"]
    if kind == "synthetic":
        per_class = d["per_class"]
        test_per_class = max(per_class // 4, 1)
        full = synthetic(d["classes"], per_class + test_per_class, d["image_size"],
                         cfg["run"]["seed"], channels=d["channels"])
        train, test = _split_per_class(full, per_class)
    elif kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d[key]:
                raise ConfigError(f"dataset kind 'idx' needs [dataset] {key}")
        train = load_idx(d["train_images"], d["train_labels"])
        test = load_idx(d["test_images"], d["test_labels"])
        classes = max(train.classes, test.classes)
        train.classes = test.classes = classes
        test.use_normalization_of(train)
    elif kind == "cifar":
        if not d["dir"]:
            raise ConfigError("dataset kind 'cifar' needs [dataset] dir")
        train = load_cifar_binary_pattern(d["dir"], "data_batch_*.bin")
        test = load_cifar_binary_pattern(d["dir"], "test_batch*.bin")
        test.use_normalization_of(train)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if d["train_limit"]:
        train = train.subset(np.arange(min(d["train_limit"], len(train))))
    if d["test_limit"]:
        test = test.subset(np.arange(min(d["test_limit"], len(test))))
    train.augment = d["augment"]
    return train, test


def load_cifar_binary_pattern(directory: str, pattern: str) -> Dataset:
    from .errors import FormatError
    directory = Path(directory)
    if not sorted(directory.glob(pattern)):
        raise FormatError(f"no files matching {pattern} under {directory}")
    import tempfile

    # reuse the plain loader by linking matching files into a scratch dir
    with tempfile.TemporaryDirectory() as tmp:
        for f in sorted(directory.glob(pattern)):
            os.symlink(f.resolve(), Path(tmp) / f.name)
        return load_cifar_binary(tmp)


def _arch_for(cfg: cfgmod.RunConfig, train: Dataset):
    return cfg.architecture(train.channels, train.images.shape[-1], train.classes)


def _file_digest(path: Path) -> str:
    return hashlib.blake2b(path.read_bytes(), digest_size=8).hexdigest()


def _require(path: Path, phase: str, hint: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{phase} needs {path}; run `kdfs {hint}` first")
    return path


# ---------------------------------------------------------------------------
# phases


def cmd_train_teacher(cfg: cfgmod.RunConfig, out: Path, args) -> int:
    train, test = load_data(cfg)
    net = build_resnet(_arch_for(cfg, train), cfg["run"]["seed"])
    tcfg = cfg.train_config("teacher")
    with output_lock(out):
        cfg.echo(out)
        rows = train_teacher(net, train, test, tcfg, out / "teacher_metrics.csv")
        save_model(out / "teacher.kdfs", net,
                   provenance={"config": cfg.digest(), "phase": "teacher"})
    acc = rows[-1]["eval_acc"]
    print(f"teacher saved to {out / 'teacher.kdfs'}  eval_acc={acc:.4f}")
    return 0


def cmd_prune(cfg: cfgmod.RunConfig, out: Path, args) -> int:
    teacher_path = _require(out / "teacher.kdfs", "prune", "train-teacher")
    train, test = load_data(cfg)
    teacher, _ = load_model(teacher_path)
    seed = cfg["run"]["seed"]
    student = build_resnet(teacher.arch, seed)
    if cfg["model"]["student_init"] == "teacher":
        for (_, src), (_, dst) in zip(teacher.named_params(), student.named_params()):
            dst.data = src.data.copy()
        for (_, src), (_, dst) in zip(teacher.named_buffers(), student.named_buffers()):
            dst[...] = src
    sampler = SamplerParams.init(student.mask_sizes(), seed)
    decoders = build_stage_decoders(teacher.arch.widths, cfg["mfm"]["decoder_depth"], seed)
    tcfg = cfg.train_config("prune")
    with output_lock(out):
        cfg.echo(out)
        rows = kdfs_train(student, teacher, sampler, decoders, train, test, tcfg,
                          out / "prune_metrics.csv", out / "prune.ckpt")
    last = rows[-1]
    print(f"pruning finished  flops_ratio={last['flops_ratio']:.4f}  "
          f"eval_acc={last['eval_acc']:.4f}" if last["eval_acc"] is not None else
          f"pruning finished  flops_ratio={last['flops_ratio']:.4f}")
    return 0


def _student_from_checkpoint(cfg: cfgmod.RunConfig, out: Path):
    teacher, _ = load_model(_require(out / "teacher.kdfs", "finetune", "train-teacher"))
    ck_path = _require(out / "prune.ckpt", "finetune", "prune")
    desc, arrays = load_checkpoint(ck_path)
    seed = cfg["run"]["seed"]
    student = build_resnet(teacher.arch, seed)
    sampler = SamplerParams.init(student.mask_sizes(), seed)
    decoders = build_stage_decoders(teacher.arch.widths, cfg["mfm"]["decoder_depth"], seed)
    for name, p in student.named_params():
        p.data = arrays[name].copy()
    for name, buf in student.named_buffers():
        buf[...] = arrays[name]
    for i, p in enumerate(sampler.ps):
        p.data = arrays[f"sampler.p{i}"].copy()
    return teacher, student, sampler, decoders, ck_path


def cmd_finetune(cfg: cfgmod.RunConfig, out: Path, args) -> int:
    train, test = load_data(cfg)
    teacher, student, sampler, _, ck_path = _student_from_checkpoint(cfg, out)
    masks = realize_masks(sampler)
    pruned = extract(student, masks)
    tcfg = cfg.train_config("prune")
    with output_lock(out):
        cfg.echo(out)
        finetune(pruned, teacher, train, test, tcfg, out / "finetune_metrics.csv")
        save_model(out / "finetuned.kdfs", pruned,
                   provenance={"config": cfg.digest(), "phase": "finetune",
                               "source_checkpoint": _file_digest(ck_path)})
    acc = evaluate(pruned, test)
    rep = report(pruned, teacher)
    print(f"fine-tuned model saved  eval_acc={acc:.4f}  "
          f"flops_reduction={rep['flops_reduction_pct']:.2f}%")
    return 0


def cmd_export(cfg: cfgmod.RunConfig, out: Path, args) -> int:
    path = _require(out / "finetuned.kdfs", "export", "finetune")
    pruned, desc = load_model(path)
    with output_lock(out):
        prov = dict(desc.get("provenance", {}))
        prov["phase"] = "export"
        save_model(out / "model.kdfs", pruned, provenance=prov)
    print(f"exported {out / 'model.kdfs'}")
    return 0


def cmd_eval(cfg: cfgmod.RunConfig, out: Path, args) -> int:
    path = Path(args.model) if args.model else _require(out / "model.kdfs", "eval", "export")
    net, _ = load_model(path)
    _, test = load_data(cfg)
    acc = evaluate(net, test)
    flops = flops_of(build_flops_model(net))
    print(f"model={path}  test_acc={acc:.4f}  flops={flops:,}")
    return 0


def cmd_flops(cfg: cfgmod.RunConfig, out: Path, args) -> int:
    train, _ = load_data(cfg)
    net = build_resnet(_arch_for(cfg, train), cfg["run"]["seed"])
    model = build_flops_model(net)
    total = flops_of(model)
    print(f"teacher flops: {total:,} MACs")
    print(f"teacher params: {net.param_count():,}")
    if args.model:
        pruned, _ = load_model(Path(args.model))
        print(f"model flops: {flops_of(build_flops_model(pruned)):,} MACs")
    return 0


def cmd_report(cfg: cfgmod.RunConfig, out: Path, args) -> int:
    teacher, _ = load_model(_require(out / "teacher.kdfs", "report", "train-teacher"))
    model_path = Path(args.model) if args.model else _require(out / "model.kdfs", "report", "export")
    pruned, _ = load_model(model_path)
    rep = report(pruned, teacher)
    with output_lock(out):
        (out / "report.csv").write_text(report_csv(rep))
    print(report_table(rep))
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "export": cmd_export,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kdfs", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config-help", action="store_true", help="print the config schema and exit")
    sub = ap.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", help="override [run] out_dir")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--r", type=float, help="override [loss] compression_rate")
        if name in ("eval", "flops", "report"):
            p.add_argument("--model", help="model file to inspect")
    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config_help", False):
        print(cfgmod.describe())
        return 0
    if not args.command:
        ap.print_help()
        return 2
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.defaults()
        if args.out:
            cfg["run"]["out_dir"] = args.out
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.r is not None:
            cfg["loss"]["compression_rate"] = args.r
        if cfg["run"]["name"] == "run":
            cfg["run"]["name"] = f"kdfs-{cfg['loss']['compression_rate']}"
        out = Path(cfg["run"]["out_dir"])
        return COMMANDS[args.command](cfg, out, args)
    except KdfsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
