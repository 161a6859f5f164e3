"""
utils/spec_utils.py

Experiment spec files: flat `key = value` lines with dotted section prefixes,
`#` comments, dotenv quoting rules. Example:

    algorithm = deprl
    seeds = 1, 12, 123, 1234
    topology.kind = ring
    task.kind = planted
    task.n_workers = 8
    run.schedule = corollary
    run.rounds = 2000

Grammar: one binding per line, `<section>.<field> = <value>` (or a bare
top-level field). Lists are comma separated. `run.batch_size = full` means
full-batch gradients. Unknown keys, duplicate keys and unparsable values are
errors that name the line and the field.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

from dotenv.parser import parse_stream

import data
import engine
import model
import topology
from errors import SpecError

ALGORITHMS = (engine.DEPRL, engine.DPSGD)
TOPOLOGIES = ("ring", "complete", "random")
TASK_KINDS = ("planted", "dirichlet", "shard-file")


@dataclass
class TopologySpec:
    kind: str = "ring"
    edge_prob: float = 0.5
    seed: Optional[int] = None


@dataclass
class TaskSpec:
    kind: str = "planted"
    path: Optional[str] = None
    n_workers: int = 8
    d: int = 20
    z: int = 3
    samples_per_worker: int = 100
    noise_std: float = 0.01
    heterogeneity: float = 0.5
    output: str = data.REGRESSION
    n_classes: int = 10
    output_dim: int = 1
    pool_size: int = 2000
    pi: float = 0.5
    test_fraction: float = data.TEST_FRACTION
    seed: Optional[int] = None


@dataclass
class ModelSpec:
    kind: str = model.LINEAR
    z: Optional[int] = None
    hidden: Optional[int] = None


@dataclass
class LossSection:
    kind: Optional[str] = None


@dataclass
class RunSpec:
    alpha: float = 0.005
    beta: float = 0.01
    tau: Optional[int] = None
    head_epochs: Optional[int] = None
    rounds: int = 100
    batch_size: Optional[int] = 16
    schedule: str = engine.CONSTANT
    decay: float = 0.96
    weight_decay: float = 0.0
    phi_steps: int = 1
    shared_head_init: bool = False
    diagnostic_every: int = 1
    theta_norm: str = "norm-of-mean"


@dataclass
class TheorySpec:
    lipschitz_l: Optional[float] = None
    sigma: Optional[float] = None
    varsigma: Optional[float] = None
    fstar: float = 0.0
    estimate: bool = False
    samples: int = 8


@dataclass
class GeneralizeSpec:
    new_workers: int = 8
    head_steps: int = 200
    alpha: float = 0.1
    shard_file: Optional[str] = None


@dataclass
class SweepSpec:
    worker_counts: List[int] = field(default_factory=list)
    epsilon: Optional[float] = None


@dataclass
class OutputSpec:
    dir: str = "results"


@dataclass
class ExperimentSpec:
    algorithm: str = engine.DEPRL
    seeds: List[int] = field(default_factory=lambda: [0])
    topology: TopologySpec = field(default_factory=TopologySpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossSection = field(default_factory=LossSection)
    run: RunSpec = field(default_factory=RunSpec)
    theory: TheorySpec = field(default_factory=TheorySpec)
    generalize: GeneralizeSpec = field(default_factory=GeneralizeSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    base_dir: str = field(default=".", compare=False, repr=False)

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


SECTIONS = ("topology", "task", "model", "loss", "run", "theory", "generalize", "sweep", "output")
TOP_LEVEL = ("algorithm", "seeds")

CHOICES = {
    "algorithm": ALGORITHMS,
    "topology.kind": TOPOLOGIES,
    "task.kind": TASK_KINDS,
    "task.output": (data.REGRESSION, data.CLASSIFICATION),
    "model.kind": model.REPRESENTATION_KINDS,
    "loss.kind": model.LOSS_KINDS,
    "run.schedule": engine.SCHEDULES,
    "run.theta_norm": ("norm-of-mean", "mean-of-norms"),
}


# ---------------------------
# Value codecs
# ---------------------------
def _field_type(section_cls, name: str) -> str:
    for f in fields(section_cls):
        if f.name == name:
            return f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    raise KeyError(name)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> List[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return [int(p) for p in parts]


def _parse_value(key: str, type_name: str, text: str):
    text = text.strip()
    if key == "run.batch_size" and text.lower() == "full":
        return None
    optional = type_name.startswith("Optional[")
    base = type_name[len("Optional[") : -1] if optional else type_name
    if optional and text.lower() in ("", "none"):
        return None
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    if base == "bool":
        return _parse_bool(text)
    if base == "List[int]":
        return _parse_int_list(text)
    return text


def _format_value(key: str, value) -> Optional[str]:
    if key == "run.batch_size" and value is None:
        return "full"
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def _lookup(spec: ExperimentSpec, key: str):
    """(owner object, attribute name, type name) for a dotted key."""
    if "." not in key:
        if key not in TOP_LEVEL:
            raise KeyError(key)
        return spec, key, _field_type(ExperimentSpec, key)
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise KeyError(key)
    owner = getattr(spec, section)
    return owner, name, _field_type(type(owner), name)


# ---------------------------
# Parse / dump
# ---------------------------
def parse_spec_text(text: str, base_dir: str = ".") -> ExperimentSpec:
    spec = ExperimentSpec(base_dir=base_dir)
    seen: Dict[str, int] = {}
    for binding in parse_stream(io.StringIO(text)):
        # the binding's mark sits before any blank lines that precede it
        raw = binding.original.string
        line = binding.original.line + raw[: len(raw) - len(raw.lstrip())].count("\n")
        if binding.error:
            raise SpecError(f"cannot parse {binding.original.string.strip()!r}", line=line)
        if binding.key is None:
            continue
        key = binding.key.strip()
        if key in seen:
            raise SpecError(f"duplicate key (first set on line {seen[key]})", line=line, field=key)
        seen[key] = line
        try:
            owner, name, type_name = _lookup(spec, key)
        except KeyError:
            raise SpecError("unknown field", line=line, field=key) from None
        if binding.value is None:
            raise SpecError("missing value", line=line, field=key)
        try:
            value = _parse_value(key, type_name, binding.value)
        except ValueError as e:
            raise SpecError(str(e), line=line, field=key) from None
        if key in CHOICES and value is not None and value not in CHOICES[key]:
            raise SpecError(f"must be one of {', '.join(CHOICES[key])}, got {value!r}", line=line, field=key)
        setattr(owner, name, value)
    return spec


def parse_spec(path: str) -> ExperimentSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise SpecError(f"cannot read spec file {path}: {e.strerror or e}") from e
    return parse_spec_text(text, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_spec(spec: ExperimentSpec) -> str:
    lines = []
    for key in TOP_LEVEL:
        text = _format_value(key, getattr(spec, key))
        if text is not None:
            lines.append(f"{key} = {text}")
    for section in SECTIONS:
        owner = getattr(spec, section)
        for f in fields(owner):
            key = f"{section}.{f.name}"
            text = _format_value(key, getattr(owner, f.name))
            if text is not None:
                lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def spec_to_json(spec: ExperimentSpec) -> dict:
    """Config echo for summaries."""
    doc = {key: getattr(spec, key) for key in TOP_LEVEL}
    for section in SECTIONS:
        owner = getattr(spec, section)
        doc[section] = {f.name: getattr(owner, f.name) for f in fields(owner)}
    return doc


def validate_spec(spec: ExperimentSpec) -> None:
    if not spec.seeds:
        raise SpecError("at least one seed is required", field="seeds")
    if any(s < 0 for s in spec.seeds):
        raise SpecError("seeds must be non-negative", field="seeds")
    if len(set(spec.seeds)) != len(spec.seeds):
        raise SpecError("seeds must be distinct", field="seeds")

    t = spec.task
    if t.kind == "shard-file":
        if not t.path:
            raise SpecError("shard-file task needs task.path", field="task.path")
        if not os.path.exists(spec.resolve(t.path)):
            raise SpecError(f"file not found: {t.path}", field="task.path")
    else:
        if t.n_workers < 1:
            raise SpecError("need at least one worker", field="task.n_workers")
        if t.z > t.d:
            raise SpecError(f"z={t.z} exceeds d={t.d}", field="task.z")
        if t.kind == "dirichlet" and t.n_workers < 2:
            raise SpecError("dirichlet partition needs at least 2 workers", field="task.n_workers")
    if t.kind == "dirichlet" or t.output == data.CLASSIFICATION:
        if t.n_classes < 2:
            raise SpecError("classification needs at least 2 classes", field="task.n_classes")

    g = spec.generalize
    if g.shard_file and not os.path.exists(spec.resolve(g.shard_file)):
        raise SpecError(f"file not found: {g.shard_file}", field="generalize.shard_file")

    r = spec.run
    if r.tau is not None and r.head_epochs is not None:
        raise SpecError("set run.tau or run.head_epochs, not both", field="run.head_epochs")
    if r.head_epochs is not None and r.batch_size is None:
        raise SpecError("run.head_epochs needs a finite run.batch_size", field="run.head_epochs")
    if r.rounds < 0:
        raise SpecError("rounds must be non-negative", field="run.rounds")
    if r.schedule != engine.COROLLARY and (r.alpha < 0 or r.beta < 0):
        raise SpecError("learning rates must be non-negative", field="run.alpha")
    if not 0.0 < r.decay <= 1.0:
        raise SpecError("decay must be in (0, 1]", field="run.decay")
    if spec.theory.samples < 2:
        raise SpecError("theory.samples must be at least 2", field="theory.samples")


# ---------------------------
# Materialization
# ---------------------------
def loss_spec_for(spec: ExperimentSpec, shards: Sequence[data.Shard]) -> model.LossSpec:
    if spec.loss.kind is not None:
        return model.LossSpec(spec.loss.kind)
    return model.LossSpec(model.CROSS_ENTROPY if shards[0].is_classification else model.SQUARED)


def build_task(spec: ExperimentSpec, seed: int, n_workers: Optional[int] = None):
    """(shards, planted task or None) for one seed."""
    t = spec.task
    task_seed = t.seed if t.seed is not None else seed
    n = n_workers if n_workers is not None else t.n_workers
    if t.kind == "shard-file":
        return data.load_shards(spec.resolve(t.path)), None
    if t.kind == "dirichlet":
        X, y = data.generate_labeled_pool(t.pool_size, t.d, t.z, t.n_classes, t.noise_std, task_seed)
        return data.dirichlet_partition(X, y, n, t.pi, task_seed, n_classes=t.n_classes, test_fraction=t.test_fraction), None
    n_out = t.n_classes if t.output == data.CLASSIFICATION else t.output_dim
    task = data.generate_planted(
        n, t.d, t.z, t.samples_per_worker, t.noise_std, t.heterogeneity, task_seed,
        output=t.output, n_outputs=n_out, test_fraction=t.test_fraction,
    )
    return task.shards, task


def build_graph(spec: ExperimentSpec, n_workers: int, seed: int) -> topology.Graph:
    g = spec.topology
    return topology.build_graph(g.kind, n_workers, g.edge_prob, g.seed if g.seed is not None else seed)


def build_run_config(spec: ExperimentSpec, seed: int, shards: Sequence[data.Shard]) -> engine.RunConfig:
    r = spec.run
    if r.head_epochs is not None:
        tau = data.steps_for_epochs(max(len(s.train) for s in shards), r.batch_size, r.head_epochs)
    else:
        tau = r.tau if r.tau is not None else 2
    z = spec.model.z if spec.model.z is not None else spec.task.z
    return engine.RunConfig(
        alpha=r.alpha,
        beta=r.beta,
        tau=tau,
        rounds=r.rounds,
        batch_size=r.batch_size,
        loss=loss_spec_for(spec, shards),
        schedule=r.schedule,
        decay=r.decay,
        seed=seed,
        model_kind=spec.model.kind,
        z=z,
        hidden=spec.model.hidden,
        weight_decay=r.weight_decay,
        phi_steps=r.phi_steps,
        shared_head_init=r.shared_head_init,
        diagnostic_every=r.diagnostic_every,
        theta_norm=r.theta_norm,
    )
