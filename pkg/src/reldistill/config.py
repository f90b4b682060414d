"""Experiment configuration stored as flat INI text with one section per stage."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import re
import typing
from dataclasses import dataclass, field
from typing import Optional

from .trainer import DistillConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str = "digits"
    path: Optional[str] = None
    resolution: int = 8
    conditional: bool = False
    grayscale: bool = True


@dataclass
class ModelSpec:
    base_channels: int = 16
    channel_mults: tuple = (1, 2)
    num_res_blocks: int = 1
    dropout: float = 0.0
    classifier_widths: tuple = (16, 32)


@dataclass
class ClassifierTraining:
    iterations: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    warmup_iters: int = 50
    holdout: float = 0.2


@dataclass
class BaseTraining:
    iterations: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    warmup_iters: int = 100
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    loss_weighting: str = "truncated_snr"


@dataclass
class DistillSection:
    """Distillation chain settings; stages whose teacher has more than
    ``method_from_steps`` steps always use plain PD (the base-model recipe)."""

    method: str = "rdd"
    start_steps: int = 64
    end_steps: int = 1
    method_from_steps: int = 8
    stage_iterations: int = 400
    final_stage_iterations: int = 4000
    stage_tau_cfd: tuple = (0.9, 1.0, 0.85)
    alpha: float = 1.0
    beta: float = 0.1
    tau_isp2p: float = 1.0
    tau_mp2p: float = 0.1
    no_cfd: bool = False
    no_isp2p: bool = False
    no_mp2p: bool = False
    ii_p2p: bool = False
    pd_mse: bool = False
    queue_size: int = 4000
    queue_sample: int = 512
    queue_push: int = 4
    batch_size: int = 32
    lr: float = 2e-4
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    export: str = "ema"


@dataclass
class EvalSpec:
    n_samples: int = 1000
    steps: tuple = (1, 2, 4)
    splits: int = 1


@dataclass
class RunSpec:
    output_dir: str = "runs/default"
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    classifier: ClassifierTraining = field(default_factory=ClassifierTraining)
    base: BaseTraining = field(default_factory=BaseTraining)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSpec = field(default_factory=EvalSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def to_ini(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            lines.append(f"[{sec.name}]")
            for f in dataclasses.fields(getattr(self, sec.name)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, sec.name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        sections = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for sec_name in parser.sections():
            if sec_name not in sections:
                raise ConfigError(f"line {_line_of(text, sec_name)}: unknown section [{sec_name}]")
            sec_cls = sections[sec_name].default_factory
            hints = typing.get_type_hints(sec_cls)
            known = {f.name for f in dataclasses.fields(sec_cls)}
            kwargs = {}
            for key, raw in parser.items(sec_name):
                if key not in known:
                    raise ConfigError(f"line {_line_of(text, key, sec_name)}: unknown key "
                                      f"{sec_name}.{key}")
                try:
                    kwargs[key] = _parse(raw, hints[key], getattr(sec_cls(), key))
                except ValueError as exc:
                    raise ConfigError(f"line {_line_of(text, key, sec_name)}: bad value for "
                                      f"{sec_name}.{key}: {exc}") from exc
            values[sec_name] = sec_cls(**kwargs)
        cfg = cls(**values)
        try:
            cfg.stage_configs()
            cfg.train_config("classifier")
            cfg.train_config("base")
        except ValueError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def train_config(self, section: str) -> TrainConfig:
        if section == "classifier":
            c = self.classifier
            return TrainConfig(iterations=c.iterations, batch_size=c.batch_size, lr=c.lr,
                               warmup_iters=c.warmup_iters, ema_decay=0.0, seed=self.run.seed)
        b = self.base
        return TrainConfig(iterations=b.iterations, batch_size=b.batch_size, lr=b.lr,
                           warmup_iters=b.warmup_iters, ema_decay=b.ema_decay, grad_clip=b.grad_clip,
                           loss_weighting=b.loss_weighting, seed=self.run.seed)

    def stage_configs(self, metrics_path: Optional[str] = None) -> list[tuple[int, DistillConfig]]:
        """One ``(teacher_steps, DistillConfig)`` per stage of the chain."""
        from .trainer import stage_plan

        d = self.distill
        plan = stage_plan(d.start_steps, d.end_steps)
        out = []
        method_stage = 0
        for k, (n_teacher, n_student) in enumerate(plan):
            use_method = n_teacher <= d.method_from_steps
            if use_method:
                taus = d.stage_tau_cfd
                tau = taus[min(method_stage, len(taus) - 1)]
                method_stage += 1
            else:
                tau = d.stage_tau_cfd[0]
            final = k == len(plan) - 1 and n_student == 1
            cfg = DistillConfig(
                method=d.method if use_method else "pd",
                alpha=d.alpha, beta=d.beta, tau_cfd=tau, tau_isp2p=d.tau_isp2p, tau_mp2p=d.tau_mp2p,
                no_cfd=d.no_cfd, no_isp2p=d.no_isp2p, no_mp2p=d.no_mp2p, ii_p2p=d.ii_p2p,
                pd_mse=d.pd_mse if use_method else False,
                queue_size=d.queue_size, queue_sample=d.queue_sample, queue_push=d.queue_push,
                batch_size=d.batch_size, lr=d.lr, ema_decay=d.ema_decay, grad_clip=d.grad_clip,
                iterations=d.final_stage_iterations if final else d.stage_iterations,
                export=d.export, seed=self.run.seed + 1000 * k, metrics_path=metrics_path)
            out.append((n_teacher, cfg))
        return out


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, hint, default):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    if origin is typing.Union:  # Optional[...]
        if raw == "":
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is tuple:
        elem = type(default[0]) if default else float
        return tuple(elem(p.strip()) for p in raw.split(",") if p.strip())
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def _line_of(text: str, key: str, section: Optional[str] = None) -> int:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            current = m.group(1)
            if section is None and current == key:
                return i
            continue
        if (section is None or current == section) and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return 0
