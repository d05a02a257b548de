"""Experiment configs, single runs and ablation grids.

Config files are flat ``key=value`` lines with dotted section prefixes::

    output_dir=runs/d3
    model.embed_dim=64
    train.branch_design=D3
    train.seed=0
    data.seed=0
    aug.mix=tokenmix

``#`` starts a comment. ``train.seed`` and ``data.seed`` are mandatory; every
other key falls back to its default.
"""
from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import SplitSpec, evaluate, make_splits
from .errors import ConfigError, NonFiniteError
from .model import ModelConfig, save_checkpoint
from .trainer import AugConfig, SSLTrainer, TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SplitSpec, "aug": AugConfig}
REQUIRED_KEYS = ("train.seed", "data.seed")
AXES = {
    "augmentation": "aug.mix",
    "branch_design": "train.branch_design",
    "rho": "train.rho",
    "theta": "train.theta",
}
WORKERS_ENV = "TOKENMIX_WORKERS"


class ConfigSyntaxError(ConfigError):
    """A config line is not ``key=value``."""


class UnknownKeyError(ConfigError):
    """A config key does not name any field."""


class MissingKeyError(ConfigError):
    """A mandatory key is absent."""


class RunAborted(RuntimeError):
    """Training hit a non-finite loss; ``tail`` holds the last metric lines."""

    def __init__(self, message: str, tail: Sequence[str]):
        super().__init__(message + "\n" + "\n".join(tail))
        self.tail = list(tail)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: SplitSpec = SplitSpec()
    aug: AugConfig = AugConfig()
    output_dir: str = "runs/default"

    def replace(self, key: str, value) -> "ExperimentConfig":
        """Copy with one dotted key changed, e.g. ``replace("train.rho", 0.9)``."""
        if key == "output_dir":
            return dataclasses.replace(self, output_dir=str(value))
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in _field_types(SECTIONS[section]):
            raise UnknownKeyError(f"unknown key {key!r}")
        sub = dataclasses.replace(getattr(self, section), **{name: value})
        return dataclasses.replace(self, **{section: sub})


def _field_types(cls) -> dict[str, type]:
    return {f.name: type(f.default) for f in dataclasses.fields(cls)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"output_dir={cfg.output_dir}"]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name}={_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> ExperimentConfig:
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    output_dir = ExperimentConfig.output_dir
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigSyntaxError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key == "output_dir":
            output_dir = raw
            continue
        section, _, name = key.partition(".")
        types = _field_types(SECTIONS[section]) if section in SECTIONS else {}
        if name not in types:
            raise UnknownKeyError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _parse_value(key, raw, types[name])
    for key in REQUIRED_KEYS:
        if key not in seen:
            raise MissingKeyError(f"missing required key {key!r}")
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values[section])
        except ConfigError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return ExperimentConfig(output_dir=output_dir, **built)


def parse_config(path) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        return loads_config(fh.read())


# -- single run --------------------------------------------------------

@dataclass
class RunRecord:
    config: ExperimentConfig
    metric_lines: list[str]
    eval_lines: list[str]
    final_miou: float
    per_class_iou: list[float]
    wall_clock: float
    seed: int

    def summary(self) -> str:
        ious = " ".join("nan" if np.isnan(v) else f"{v:.4f}" for v in self.per_class_iou)
        return (f"seed={self.seed} miou={self.final_miou:.4f} per_class=[{ious}] "
                f"wall_clock={self.wall_clock:.1f}s")


def run_experiment(cfg: ExperimentConfig, write: bool = True, verbose: bool = False) -> RunRecord:
    """Build data, train for ``train.epochs``, evaluate the student after each epoch.

    With ``write`` the run directory receives ``config.txt``, an append-only
    ``metrics.txt`` (one line per step), ``eval.txt`` (one line per epoch),
    ``report.txt`` and student/teacher checkpoints.
    """
    start = time.perf_counter()
    labeled, unlabeled, val = make_splits(cfg.data, cfg.model.image_size, cfg.model.num_classes)
    per_epoch = math.ceil(len(unlabeled) / cfg.train.batch_unlabeled)
    trainer = SSLTrainer(cfg.model, cfg.train, cfg.aug, total_iters=per_epoch * cfg.train.epochs,
                         burn_in_steps=per_epoch * cfg.train.burn_in_epochs)

    metric_lines: list[str] = []
    eval_lines: list[str] = []
    out = cfg.output_dir
    metrics_fh = eval_fh = None
    if write:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.txt"), "w") as fh:
            fh.write(serialize_config(cfg))
        metrics_fh = open(os.path.join(out, "metrics.txt"), "w")
        eval_fh = open(os.path.join(out, "eval.txt"), "w")

    def on_step(m):
        line = m.line()
        metric_lines.append(line)
        if metrics_fh is not None:
            metrics_fh.write(line + "\n")
            metrics_fh.flush()

    try:
        score, per_class = float("nan"), np.array([])
        for epoch in range(cfg.train.epochs):
            try:
                trainer.fit_epoch(labeled, unlabeled, on_step)
            except NonFiniteError as exc:
                raise RunAborted(f"non-finite loss in epoch {epoch}: {exc}", metric_lines[-10:]) from exc
            score, per_class = evaluate(trainer.student, val)
            line = f"epoch={epoch} step={trainer.step} miou={score!r}"
            eval_lines.append(line)
            if eval_fh is not None:
                eval_fh.write(line + "\n")
                eval_fh.flush()
            if verbose:
                print(line, flush=True)
    finally:
        for fh in (metrics_fh, eval_fh):
            if fh is not None:
                fh.close()

    record = RunRecord(cfg, metric_lines, eval_lines, score, [float(v) for v in per_class],
                       time.perf_counter() - start, cfg.train.seed)
    if write:
        save_checkpoint(trainer.student, os.path.join(out, "student.ckpt"))
        save_checkpoint(trainer.teacher, os.path.join(out, "teacher.ckpt"))
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(record.summary() + "\n")
    return record


# -- grids -------------------------------------------------------------

def axis_key(axis: str) -> str:
    key = AXES.get(axis, axis)
    section, _, name = key.partition(".")
    if section not in SECTIONS or name not in _field_types(SECTIONS[section]):
        raise UnknownKeyError(f"unknown grid axis {axis!r}")
    return key


def _default_for(key: str):
    section, _, name = key.partition(".")
    return getattr(getattr(ExperimentConfig(), section), name)


def parse_axis_values(axis: str, csv: str) -> list:
    key = axis_key(axis)
    kind = type(_default_for(key))
    return [_parse_value(key, v, kind) for v in csv.split(",") if v.strip()]


@dataclass
class GridTable:
    axis: str
    values: list
    seeds: list[int]
    cells: dict = field(default_factory=dict)  # (value, seed) -> mIoU float or error string
    summaries: dict = field(default_factory=dict)  # (value, seed) -> RunRecord.summary()

    def scores(self, value) -> list[float]:
        return [c for s in self.seeds if isinstance(c := self.cells.get((value, s)), float)]

    def mean_std(self, value) -> tuple[float, float]:
        xs = self.scores(value)
        if not xs:
            return float("nan"), float("nan")
        return float(np.mean(xs)), float(np.std(xs))

    def missing(self) -> list:
        return [(v, s) for v in self.values for s in self.seeds if (v, s) not in self.cells]

    def failed(self) -> list:
        return [k for k, c in self.cells.items() if not isinstance(c, float)]

    def render(self) -> str:
        if len(self.values) == 1 and len(self.seeds) == 1:
            key = (self.values[0], self.seeds[0])
            if key in self.summaries:
                return f"{self.axis}={_format(key[0])} {self.summaries[key]}\n"
        head = [self.axis] + [_format(v) for v in self.values]
        row = ["mIoU"]
        for v in self.values:
            m, s = self.mean_std(v)
            n_bad = sum(1 for seed in self.seeds if not isinstance(self.cells.get((v, seed)), float))
            cell = f"{100 * m:.2f}±{100 * s:.2f}"
            row.append(cell + (f" ({n_bad} failed)" if n_bad else ""))
        rows = [row]
        for seed in self.seeds:
            cells = [f"seed {seed}"]
            for v in self.values:
                c = self.cells.get((v, seed))
                cells.append(f"{100 * c:.2f}" if isinstance(c, float) else "FAILED")
            rows.append(cells)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = " | ".join("{:>%d}" % w for w in widths)
        lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)]
        lines += [fmt.format(*r) for r in rows]
        return "\n".join(lines) + "\n"


def _run_cell(args) -> tuple:
    cfg, value, seed = args
    try:
        record = run_experiment(cfg)
        return value, seed, record.final_miou, record.summary()
    except Exception as exc:  # a failed cell is recorded, the grid goes on
        return value, seed, f"{type(exc).__name__}: {exc}", None


def run_ablation_grid(base: ExperimentConfig, axis: str, values: Sequence, seeds: Sequence[int],
                      workers: Optional[int] = None) -> GridTable:
    """Run every (value, seed) cell and tabulate mean ± std of final val mIoU.

    ``axis`` is one of ``augmentation``, ``branch_design``, ``rho``, ``theta``
    or any dotted config key. Each cell trains with ``train.seed=seed`` and
    writes to ``<output_dir>/grid_<axis>/<value>_s<seed>``.
    """
    if not values:
        raise ConfigError("grid needs at least one value")
    key = axis_key(axis)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    jobs = []
    for v in values:
        for s in seeds:
            cfg = base.replace(key, v).replace("train.seed", int(s))
            cfg = cfg.replace("output_dir", os.path.join(base.output_dir, f"grid_{axis}", f"{_format(v)}_s{s}"))
            jobs.append((cfg, v, s))
    table = GridTable(axis, list(values), [int(s) for s in seeds])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    for v, s, result, summary in results:
        table.cells[(v, s)] = result
        if summary is not None:
            table.summaries[(v, s)] = summary
    os.makedirs(os.path.join(base.output_dir, f"grid_{axis}"), exist_ok=True)
    with open(os.path.join(base.output_dir, f"grid_{axis}", "table.txt"), "w") as fh:
        fh.write(table.render())
    return table
