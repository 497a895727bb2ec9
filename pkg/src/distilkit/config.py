"""Run configuration: an INI file with [run], [paths], [teacher], [student],
[pretrain] and one [task.NAME] section per downstream task.

Relative paths resolve against the directory of the config file (the current
directory for the shipped profiles). ``RunConfig.to_text`` writes the
effective configuration with absolute paths, so reading it back gives an
equal ``RunConfig``.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .distill import DistillWeights, PretrainConfig
from .finetune import SEQUENCE, TOKEN, TaskSpec
from .model import ConfigError, ModelConfig

PROFILES = ("full", "desk")
PATH_KEYS = ("corpus", "processed", "vocab", "checkpoints", "reports", "teacher", "student")


@dataclass(frozen=True)
class TeacherInit:
    """How ``pretrain --init-teacher`` builds a toy teacher: seeded init, then plain MLM."""

    mlm_steps: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 16


@dataclass(frozen=True)
class TaskEntry:
    name: str
    kind: str
    format: str  # "conll" or "tsv"
    train: Path
    test: Path | None = None
    split: Path | None = None
    epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 5e-5
    folds: int | None = None
    metric: str | None = None
    head_init_std: float = 0.02

    def spec(self, num_labels: int) -> TaskSpec:
        return TaskSpec(self.kind, num_labels, self.epochs, self.batch_size, self.learning_rate,
                        self.folds, self.metric, self.head_init_std)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    paths: dict[str, Path]
    teacher: ModelConfig
    student: ModelConfig
    pretrain: PretrainConfig
    weights: DistillWeights
    word_limit: int = 400
    teacher_init: TeacherInit = TeacherInit()
    allow_depth_override: bool = False
    tasks: dict[str, TaskEntry] = field(default_factory=dict)

    def __post_init__(self):
        if self.student.num_layers * 2 != self.teacher.num_layers and not self.allow_depth_override:
            raise ConfigError(
                f"student layers = teacher layers / 2 violated: teacher has "
                f"{self.teacher.num_layers}, student {self.student.num_layers} "
                "(set allow_depth_override = true in [run] to permit)")
        for name in ("hidden_size", "num_heads", "intermediate_size", "vocab_size",
                     "max_seq_len"):
            if getattr(self.student, name) != getattr(self.teacher, name):
                raise ConfigError(f"student {name} must equal the teacher's")
        missing = [k for k in PATH_KEYS if k not in self.paths]
        if missing:
            raise ConfigError(f"[paths] is missing {', '.join(missing)}")

    def task(self, name: str) -> TaskEntry:
        if name not in self.tasks:
            known = ", ".join(sorted(self.tasks)) or "none"
            raise ConfigError(f"unknown task {name!r} (configured: {known})")
        return self.tasks[name]

    def with_overrides(self, seed=None, epochs=None, max_steps=None, word_limit=None):
        pre = self.pretrain
        if seed is not None:
            pre = dataclasses.replace(pre, global_seed=seed)
        if epochs is not None:
            pre = dataclasses.replace(pre, epochs=epochs)
        if max_steps is not None:
            pre = dataclasses.replace(pre, max_steps=max_steps)
        return dataclasses.replace(
            self, seed=self.seed if seed is None else seed, pretrain=pre,
            word_limit=self.word_limit if word_limit is None else word_limit)

    # ------------------------------------------------------------ serialization

    def to_text(self) -> str:
        cp = _parser()
        cp["run"] = {"seed": str(self.seed), "word_limit": str(self.word_limit),
                     "allow_depth_override": str(self.allow_depth_override).lower()}
        cp["paths"] = {k: str(v) for k, v in self.paths.items()}
        cp["teacher"] = {**_fields_text(self.teacher), **_fields_text(self.teacher_init, "init_")}
        cp["student"] = {"num_layers": str(self.student.num_layers)}
        pre = self.pretrain
        cp["pretrain"] = {
            "batch_size": str(pre.batch_size), "learning_rate": repr(pre.learning_rate),
            "epochs": str(pre.epochs), "beta1": repr(pre.betas[0]), "beta2": repr(pre.betas[1]),
            "eps": repr(pre.eps), "max_steps": "" if pre.max_steps is None else str(pre.max_steps),
            "mask_prob": repr(pre.mask_prob), "temperature": repr(pre.temperature),
            "lr_schedule": pre.lr_schedule, **_fields_text(self.weights)}
        for name, t in self.tasks.items():
            cp[f"task.{name}"] = {
                "kind": t.kind, "format": t.format, "train": str(t.train),
                "test": "" if t.test is None else str(t.test),
                "split": "" if t.split is None else str(t.split),
                "epochs": str(t.epochs), "batch_size": str(t.batch_size),
                "learning_rate": repr(t.learning_rate),
                "folds": "" if t.folds is None else str(t.folds), "metric": t.metric or "",
                "head_init_std": repr(t.head_init_std)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    return cp


def _fields_text(obj, prefix: str = "") -> dict[str, str]:
    return {prefix + f.name: repr(getattr(obj, f.name)) if isinstance(getattr(obj, f.name), float)
            else str(getattr(obj, f.name)) for f in fields(obj)}


def _typed(cls, section, prefix: str = "") -> dict:
    out = {}
    for f in fields(cls):
        key = prefix + f.name
        if key in section:
            conv = float if f.type in ("float", float) else int
            try:
                out[f.name] = conv(section[key])
            except ValueError:
                raise ConfigError(f"[{section.name}] {key}: expected {conv.__name__}, "
                                  f"got {section[key]!r}") from None
    return out


def _opt(section, key, conv, default=None):
    raw = section.get(key, "").strip()
    if not raw:
        return default
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key}: cannot parse {raw!r}") from None


def _require(cp, name):
    if name not in cp:
        raise ConfigError(f"missing section [{name}]")
    return cp[name]


def parse_config(text: str, base_dir=".") -> RunConfig:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base = Path(base_dir).resolve()

    def path(raw: str | None) -> Path | None:
        if raw is None or not raw.strip():
            return None
        p = Path(raw.strip()).expanduser()
        return p if p.is_absolute() else base / p

    run = _require(cp, "run")
    paths_sec = _require(cp, "paths")
    paths = {k: path(v) for k, v in paths_sec.items()}
    unknown = set(paths) - set(PATH_KEYS)
    if unknown:
        raise ConfigError(f"[paths] has unknown keys: {', '.join(sorted(unknown))}")

    t_sec = _require(cp, "teacher")
    teacher = ModelConfig(**_typed(ModelConfig, t_sec))
    init = TeacherInit(**_typed(TeacherInit, t_sec, "init_"))
    s_sec = cp["student"] if "student" in cp else {}
    layers = _opt(s_sec, "num_layers", int) if s_sec else None
    if layers is None:
        student = teacher.student()
    else:
        student = dataclasses.replace(teacher, num_layers=layers)

    p = _require(cp, "pretrain")
    pre = PretrainConfig(
        batch_size=_opt(p, "batch_size", int, 6), learning_rate=_opt(p, "learning_rate", float, 5e-4),
        epochs=_opt(p, "epochs", int, 3),
        betas=(_opt(p, "beta1", float, 0.9), _opt(p, "beta2", float, 0.999)),
        eps=_opt(p, "eps", float, 1e-8), global_seed=_opt(run, "seed", int, 0),
        max_steps=_opt(p, "max_steps", int), mask_prob=_opt(p, "mask_prob", float, 0.15),
        temperature=_opt(p, "temperature", float, 1.0),
        lr_schedule=p.get("lr_schedule", "constant").strip() or "constant")
    weights = DistillWeights(**_typed(DistillWeights, p))

    tasks = {}
    for section in cp.sections():
        if not section.startswith("task."):
            continue
        name = section[len("task."):]
        s = cp[section]
        kind = s.get("kind", TOKEN).strip()
        if kind not in (TOKEN, SEQUENCE):
            raise ConfigError(f"[{section}] kind must be {TOKEN} or {SEQUENCE}, got {kind!r}")
        fmt = s.get("format", "conll" if kind == TOKEN else "tsv").strip()
        if fmt not in ("conll", "tsv"):
            raise ConfigError(f"[{section}] format must be conll or tsv, got {fmt!r}")
        train = path(s.get("train"))
        if train is None:
            raise ConfigError(f"[{section}] needs a train path")
        tasks[name] = TaskEntry(
            name, kind, fmt, train, path(s.get("test")), path(s.get("split")),
            epochs=_opt(s, "epochs", int, 4), batch_size=_opt(s, "batch_size", int, 32),
            learning_rate=_opt(s, "learning_rate", float, 5e-5), folds=_opt(s, "folds", int),
            metric=s.get("metric", "").strip() or None,
            head_init_std=_opt(s, "head_init_std", float, 0.02))

    override = run.get("allow_depth_override", "false").strip().lower()
    if override not in ("true", "false"):
        raise ConfigError(f"[run] allow_depth_override must be true or false, got {override!r}")
    return RunConfig(seed=_opt(run, "seed", int, 0), paths=paths, teacher=teacher,
                     student=student, pretrain=pre, weights=weights,
                     word_limit=_opt(run, "word_limit", int, 400), teacher_init=init,
                     allow_depth_override=override == "true", tasks=tasks)


def profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; shipped profiles: {', '.join(PROFILES)}")
    return resources.files("distilkit.profiles").joinpath(f"{name}.ini").read_text("utf-8")


def load_config(source) -> RunConfig:
    """``source`` is a shipped profile name or a path to an INI file."""
    if str(source) in PROFILES and not Path(source).exists():
        return parse_config(profile_text(str(source)), Path.cwd())
    path = Path(source)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
