"""Run configuration: INI-style key/value sections with a strict schema.

Unknown sections or keys are rejected, every field has a documented
default, and the effective configuration (defaults merged with the file
and any CLI overrides) is echoed into the output directory so a run can
always be reproduced from its artifacts alone.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .layers import Architecture
from .objective import LossWeights
from .sampler import TemperatureSchedule
from .trainer import TrainConfig


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


# section -> key -> (parser, default, doc)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "name": (str, "run", "run label; conventionally embeds the rate, e.g. kdfs-0.5"),
        "out_dir": (str, "runs/out", "artifact directory"),
        "seed": (int, 0, "root seed for every random stream"),
    },
    "dataset": {
        "kind": (str, "synthetic", "synthetic | idx | cifar"),
        "train_images": (str, "", "IDX image file (kind=idx)"),
        "train_labels": (str, "", "IDX label file (kind=idx)"),
        "test_images": (str, "", "IDX image file (kind=idx)"),
        "test_labels": (str, "", "IDX label file (kind=idx)"),
        "dir": (str, "", "directory of .bin batches (kind=cifar)"),
        "classes": (int, 4, "class count (kind=synthetic)"),
        "per_class": (int, 128, "samples per class (kind=synthetic)"),
        "image_size": (int, 16, "square image size (kind=synthetic)"),
        "channels": (int, 1, "image channels (kind=synthetic)"),
        "train_limit": (int, 0, "keep only the first N training samples (0 = all)"),
        "test_limit": (int, 0, "keep only the first N test samples (0 = all)"),
        "augment": (_bool, False, "horizontal flip + pad-crop on training batches"),
    },
    "model": {
        "widths": (_ints, [16, 32, 64], "channel width per stage"),
        "blocks": (_ints, [1, 1, 1], "residual blocks per stage"),
        "stem_stride": (int, 1, "stride of the stem convolution"),
        "student_init": (str, "teacher", "teacher | random: pruning-phase weight init"),
    },
    "train": {
        "epochs": (int, 30, "total epochs E (pruning + fine-tune)"),
        "finetune_epochs": (int, 5, "fine-tuning epochs E_ft"),
        "teacher_epochs": (int, 20, "epochs for the train-teacher phase"),
        "lr": (float, 1e-2, "initial learning rate"),
        "lr_min": (float, 1e-4, "cosine floor"),
        "weight_decay": (float, 1e-4, "L2 decay on network weights only"),
        "batch_size": (int, 64, "samples per step"),
        "checkpoint_interval": (int, 0, "epochs between checkpoints (0 = final only)"),
    },
    "loss": {
        "lambda_kd": (float, 0.05, "distillation weight"),
        "lambda_rl": (float, 1000.0, "reconstruction weight"),
        "lambda_reg": (float, 10000.0, "FLOPs budget weight"),
        "kd_temperature": (float, 3.0, "softening temperature"),
        "compression_rate": (float, 0.5, "global FLOPs fraction to remove"),
        "squared_regularizer": (_bool, False, "square the budget gap instead of |.|"),
    },
    "sampler": {
        "schedule": (str, "linear", "linear | exponential annealing"),
        "tau0": (float, 1.0, "initial temperature"),
        "tau_end": (float, 0.1, "final temperature"),
    },
    "mfm": {
        "decoder_depth": (int, 1, "hidden conv layers per stage decoder (1 or 2)"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    # -- assembled objects -------------------------------------------------

    def architecture(self, in_channels: int, image_size: int, classes: int) -> Architecture:
        m = self.values["model"]
        return Architecture(widths=list(m["widths"]), blocks=list(m["blocks"]),
                            classes=classes, in_channels=in_channels,
                            image_size=image_size, stem_stride=m["stem_stride"])

    def loss_weights(self) -> LossWeights:
        s = self.values["loss"]
        return LossWeights(lambda_kd=s["lambda_kd"], lambda_rl=s["lambda_rl"],
                           lambda_reg=s["lambda_reg"], kd_temperature=s["kd_temperature"],
                           compression_rate=s["compression_rate"],
                           squared_regularizer=s["squared_regularizer"])

    def train_config(self, phase: str = "prune") -> TrainConfig:
        t = self.values["train"]
        s = self.values["sampler"]
        if phase == "teacher":
            epochs, ft = t["teacher_epochs"], 0
        else:
            epochs, ft = t["epochs"], t["finetune_epochs"]
        schedule = TemperatureSchedule(s["schedule"], s["tau0"], s["tau_end"],
                                       epochs=max(epochs - ft, 1))
        return TrainConfig(epochs=epochs, finetune_epochs=ft, lr=t["lr"],
                           lr_min=t["lr_min"], weight_decay=t["weight_decay"],
                           batch_size=t["batch_size"], seed=self.values["run"]["seed"],
                           loss=self.loss_weights(), schedule=schedule,
                           checkpoint_interval=t["checkpoint_interval"])

    # -- serialization ------------------------------------------------------

    def dump(self) -> str:
        cp = configparser.ConfigParser()
        for section in SCHEMA:
            cp[section] = {}
            for key in SCHEMA[section]:
                v = self.values[section][key]
                if isinstance(v, list):
                    v = ",".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                cp[section][key] = str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def echo(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.ini"
        path.write_text(self.dump())
        return path

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]


def defaults() -> RunConfig:
    return RunConfig({sec: {k: (list(v[1]) if isinstance(v[1], list) else v[1])
                            for k, v in keys.items()}
                      for sec, keys in SCHEMA.items()})


def parse(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc
    cfg = defaults()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] in {source}")
        for key, raw in cp[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}] of {source}")
            parser = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(), source=str(path))


def describe() -> str:
    """Documented defaults, one line per key."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, doc) in keys.items():
            if isinstance(default, list):
                default = ",".join(str(x) for x in default)
            lines.append(f"  {key} = {default}  ; {doc}")
    return "\n".join(lines)
