"""Experiment configs, training loops, evaluation and parameter reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from . import tensor as T
from . import toy_tasks
from .adapters import (FUSION, SINGLE, STACK, AdapterTaskModule, adapter_param_count,
                       build_task_module, fusion_param_count)
from .backbone import ModelConfig, UnifiedModel, count_parameters, decoder_stack_param_count
from .decoding import DecodeConfig, joint_beam_search
from .objective import LossBreakdown, ObjectiveConfig, total_objective
from .optim import Adam, AdamConfig
from .taskspace import (CLASSIFICATION, TRANSDUCTION, TargetSequence, Vocabulary, allocate_task_tokens,
                        build_frequency_table, default_vocabulary, extract_slots, format_target, parse_output,
                        sf_payload, slot_label, task_kind, with_frequency)

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------- configs


@dataclass
class ModuleSpec:
    kind: str = "none"
    members: list[str] = field(default_factory=list)
    tasks: list[str] = field(default_factory=lambda: ["asr"])
    fusion_name: str | None = None

    @property
    def classification_task(self) -> str | None:
        return next((t for t in self.tasks if task_kind(t) == CLASSIFICATION), None)

    @property
    def owner(self) -> str | None:
        if self.kind == FUSION:
            return self.fusion_name or "+".join(self.members)
        return self.members[-1] if self.members else None


@dataclass
class ExperimentConfig:
    name: str = "base"
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    module: ModuleSpec = field(default_factory=ModuleSpec)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    data: dict[str, str] = field(default_factory=lambda: {
        "train": "asr_train.jsonl", "dev": "asr_dev.jsonl", "test": "asr_test.jsonl"})
    lambda_presets: dict[str, dict[str, float]] = field(default_factory=dict)
    lambda_preset: str | None = None
    log_every: int = 50

    def __post_init__(self):
        if self.lambda_preset is not None:
            if self.lambda_preset not in self.lambda_presets:
                raise ValueError(f"unknown lambda preset {self.lambda_preset!r}")
            self.objective.lambda_task = dict(self.lambda_presets[self.lambda_preset])

    def with_lambda_preset(self, preset: str) -> "ExperimentConfig":
        return dataclasses.replace(self, objective=dataclasses.replace(self.objective),
                                   lambda_preset=preset)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sub = {"model": ModelConfig.from_dict, "objective": lambda x: ObjectiveConfig(**x),
               "module": lambda x: ModuleSpec(**x), "decode": lambda x: DecodeConfig(**x),
               "optimizer": lambda x: AdamConfig(**x)}
        for key, build in sub.items():
            if key in d:
                d[key] = build(d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(str(path))
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def vocab_path(self) -> Path:
        return self.data_dir / "vocab.tsv"

    @property
    def base_checkpoint(self) -> Path:
        return self.root / "base.ckpt"

    def adapter_checkpoint(self, name: str) -> Path:
        return self.root / "adapters" / f"{name}.ckpt"

    def fusion_checkpoint(self, name: str) -> Path:
        return self.root / "fusions" / f"{name}.ckpt"

    def dataset(self, exp: ExperimentConfig, split: str) -> Path:
        return self.data_dir / exp.data[split]

    def require(self, path: Path) -> Path:
        if not Path(path).exists():
            raise MissingArtifact(str(path))
        return Path(path)


# ---------------------------------------------------------------- data to targets


def task_payload(ex: toy_tasks.ToyExample, task: str) -> str:
    if task == "asr":
        return ex.transcript
    if task == "pr":
        return "".join(ex.phones)
    if task == "sf":
        return sf_payload(ex.transcript, ex.slots or [])
    if task_kind(task) == CLASSIFICATION:
        if ex.label is None:
            raise ValueError(f"example has no label for task {task!r}")
        return ex.label
    raise ValueError(f"no payload rule for task {task!r}")


@dataclass
class Item:
    features: np.ndarray
    target: TargetSequence
    ctc_label: list[int] | None
    class_label: int | None


def ctc_label_for(ex: toy_tasks.ToyExample, tasks: Sequence[str], vocab: Vocabulary) -> list[int]:
    if tasks[0] == "pr":
        return vocab.encode_text("".join(ex.phones))
    return vocab.encode_text(ex.transcript)


def make_items(examples: Sequence[toy_tasks.ToyExample], spec: ModuleSpec, vocab: Vocabulary,
               objective: ObjectiveConfig) -> list[Item]:
    cls_task = spec.classification_task
    items = []
    for ex in examples:
        target = format_target([(t, task_payload(ex, t)) for t in spec.tasks], vocab)
        ctc = ctc_label_for(ex, spec.tasks, vocab) if objective.lambda_ctc > 0 else None
        cls = vocab.label_index(cls_task, ex.label) if objective.is_classification and cls_task else None
        items.append(Item(ex.features, target, ctc, cls))
    return items


# ---------------------------------------------------------------- training


def params_digest(params) -> str:
    h = hashlib.sha256()
    for name, p in sorted(params, key=lambda x: x[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def frozen_digest(model: UnifiedModel) -> str:
    return params_digest([(n, p) for n, p in model.registry().items() if not p.trainable])


def forward_loss(model: UnifiedModel, module, batch: Sequence[Item], objective: ObjectiveConfig) -> LossBreakdown:
    enc = model.encode_batch([it.features for it in batch], module)
    prefixes = [it.target.tokens[:-1] for it in batch]
    logits = model.decode_batch(enc.states, enc.lengths, prefixes, module)
    ctc = [it.ctc_label for it in batch] if objective.lambda_ctc > 0 else None
    cls = [it.class_label for it in batch] if objective.is_classification else None
    return total_objective(enc, logits, [it.target for it in batch], objective, ctc, cls)


@dataclass
class TrainResult:
    history: list[dict]
    steps: int
    frozen_before: str
    frozen_after: str
    optimizer: Adam


def fit(model: UnifiedModel, module: AdapterTaskModule | None, items: Sequence[Item], exp: ExperimentConfig,
        steps: int | None = None, callback: Callable[[int, LossBreakdown], bool] | None = None,
        log_path=None) -> TrainResult:
    """Adam over the model's trainable parameters; ``callback`` returning True stops early.

    Frozen parameters are hashed before and after; any change raises.
    """
    steps = exp.steps if steps is None else steps
    opt = Adam(model.parameters(), exp.optimizer)
    if not opt.params:
        raise ValueError("nothing to train: trainable set is empty")
    before = frozen_digest(model)
    rng = np.random.default_rng(exp.seed)
    order: list[int] = []
    history = []
    log_file = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")
    step = 0
    try:
        for step in range(1, steps + 1):
            if len(order) < exp.batch_size:
                order.extend(rng.permutation(len(items)).tolist())
            idx, order = order[: exp.batch_size], order[exp.batch_size:]
            loss = forward_loss(model, module, [items[i] for i in idx], exp.objective)
            if not math.isfinite(loss.total.item()):
                raise NumericFailure(f"non-finite loss at step {step}: {loss.values()}")
            T.backward(loss.total)
            norm = opt.step()
            opt.zero_grad()
            if step == 1 or step % exp.log_every == 0 or step == steps:
                rec = {"step": step, "grad_norm": norm, **loss.values(),
                       "lambda_ctc": loss.lambda_ctc, "lambda_task": loss.lambda_task,
                       "indicator_ce": loss.indicator_ce}
                history.append(rec)
                log.info("%s step %d loss %.4f", exp.name, step, rec["total"])
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
            if callback is not None and callback(step, loss):
                break
    finally:
        if log_file:
            log_file.close()
    after = frozen_digest(model)
    if after != before:
        raise FreezeViolation(f"{exp.name}: frozen parameters changed during training")
    return TrainResult(history, step, before, after, opt)


def load_vocab(ws: Workspace) -> Vocabulary:
    return Vocabulary.load(ws.require(ws.vocab_path))


def load_split(ws: Workspace, exp: ExperimentConfig, split: str) -> list[toy_tasks.ToyExample]:
    return toy_tasks.read_jsonl(ws.require(ws.dataset(exp, split)))


def train_base(exp: ExperimentConfig, ws: Workspace, callback=None) -> tuple[Path, TrainResult]:
    """Train the whole backbone, no adapters, on the configured transduction data."""
    if exp.module.kind != "none":
        raise ValueError("base training runs without adapters")
    vocab = load_vocab(ws)
    items = make_items(load_split(ws, exp, "train"), exp.module, vocab, exp.objective)
    model = UnifiedModel(exp.model)
    model.set_trainable(model.registry())
    result = fit(model, None, items, exp, callback=callback, log_path=ws.root / "logs" / f"{exp.name}.jsonl")
    path = model.save_backbone(ws.base_checkpoint, {"name": exp.name, "steps": result.steps})
    return path, result


def member_checkpoints(spec: ModuleSpec, ws: Workspace, include_owner: bool) -> dict[str, str]:
    out = {}
    for m in spec.members:
        if spec.kind != FUSION and m == spec.members[-1] and not include_owner:
            continue
        out[m] = str(ws.require(ws.adapter_checkpoint(m)))
    if spec.kind == FUSION and include_owner:
        out[spec.owner] = str(ws.require(ws.fusion_checkpoint(spec.owner)))
    return out


def load_for_module(exp: ExperimentConfig, ws: Workspace, vocab: Vocabulary,
                    include_owner: bool) -> tuple[UnifiedModel, AdapterTaskModule | None]:
    model = UnifiedModel.from_checkpoint(ws.require(ws.base_checkpoint))
    spec = exp.module
    if spec.kind == "none":
        return model, None
    cls_task = spec.classification_task
    n_cls = len(vocab.labels(cls_task)) if cls_task else None
    module = build_task_module(spec.kind, spec.members, model, member_checkpoints(spec, ws, include_owner),
                               fusion_name=spec.owner if spec.kind == FUSION else None, n_class_labels=n_cls)
    return model, module


def train_adapter(exp: ExperimentConfig, ws: Workspace, steps: int | None = None, callback=None):
    """Train the module's own component against a frozen base; returns (checkpoint path, result, model, module)."""
    if exp.module.kind not in (SINGLE, STACK, FUSION):
        raise ValueError("adapter training needs a single, stack or fusion module")
    vocab = load_vocab(ws)
    model, module = load_for_module(exp, ws, vocab, include_owner=False)
    items = make_items(load_split(ws, exp, "train"), exp.module, vocab, exp.objective)
    result = fit(model, module, items, exp, steps=steps, callback=callback,
                 log_path=ws.root / "logs" / f"{exp.name}.jsonl")
    if set(result.optimizer.state) != set(module.trainable_set):
        raise FreezeViolation("optimizer state does not match the trainable set")
    owner = module.owner
    if exp.module.kind == FUSION:
        path = model.save_component(ws.fusion_checkpoint(owner), f"fusion/{owner}", {"name": exp.name})
    else:
        path = model.save_component(ws.adapter_checkpoint(owner), f"adapter/{owner}", {"name": exp.name})
    return path, result, model, module


# ---------------------------------------------------------------- evaluation


def decode_config_for(exp: ExperimentConfig, **overrides) -> DecodeConfig:
    cfg = dataclasses.replace(exp.decode, **overrides)
    if task_kind(exp.module.tasks[0]) != TRANSDUCTION or exp.objective.lambda_ctc == 0:
        cfg = dataclasses.replace(cfg, ctc_weight=0.0)
    return cfg


def decode_example(model, module, features, exp: ExperimentConfig, vocab: Vocabulary,
                   decode: DecodeConfig | None = None):
    decode = decode or decode_config_for(exp)
    with T.no_grad():
        enc, ctc, cls = model.encode(features, module)
    hyps = joint_beam_search(enc, ctc, model, module, decode, sep_id=vocab.sep)
    return hyps[0], cls.data


def score_outputs(examples: Sequence[toy_tasks.ToyExample], outputs: Sequence[Sequence[int]],
                  tasks: Sequence[str], vocab: Vocabulary) -> dict:
    """Metric report for decoded token sequences (``<s>`` optional, ``</s>`` expected)."""
    parsed = [parse_output(o, vocab, tasks) for o in outputs]
    report: dict = {"n": len(examples), "tasks": {}, "flags": {
        "absent": sum(bool(p.absent) for p in parsed),
        "empty": sum(bool(p.empty) for p in parsed),
        "malformed": sum(bool(p.malformed) for p in parsed),
        "surplus": sum(p.surplus > 0 for p in parsed),
        "truncated": sum(p.truncated for p in parsed),
    }}
    for task in tasks:
        hyp = [p.payloads.get(task, "") for p in parsed]
        if task == "asr":
            refs = [ex.transcript for ex in examples]
            report["tasks"][task] = {"wer": M.wer(refs, hyp), "cer": M.cer(refs, hyp)}
        elif task == "pr":
            report["tasks"][task] = {"per": M.per([ex.phones for ex in examples], hyp)}
        elif task == "sf":
            f1, vcer = M.corpus_slot_f1([ex.slots or [] for ex in examples], [extract_slots(h) for h in hyp])
            report["tasks"][task] = {"slot_f1": f1, "slot_cer": vcer}
        elif task_kind(task) == CLASSIFICATION:
            labels = [None if (task in p.absent or task in p.empty or task in p.malformed) else p.payloads[task]
                      for p in parsed]
            report["tasks"][task] = {"accuracy": M.accuracy([ex.label for ex in examples], labels)}
    return report


def report_lines(report: dict) -> list[str]:
    lines = []
    for task, vals in report["tasks"].items():
        for k, v in vals.items():
            lines.append(f"{task}/{k}\t{v:.6f}")
    for k, v in report["flags"].items():
        lines.append(f"flags/{k}\t{v}")
    return lines


def evaluate(exp: ExperimentConfig, ws: Workspace, split: str = "test", beam_size: int | None = None,
             limit: int | None = None, write: bool = True) -> dict:
    vocab = load_vocab(ws)
    model, module = load_for_module(exp, ws, vocab, include_owner=True)
    examples = load_split(ws, exp, split)[:limit]
    overrides = {"beam_size": beam_size} if beam_size else {}
    decode = decode_config_for(exp, **overrides)
    outputs, cls_hits = [], 0
    cls_task = exp.module.classification_task
    for ex in examples:
        best, cls_logits = decode_example(model, module, ex.features, exp, vocab, decode)
        outputs.append(best.tokens)
        if cls_task and ex.label is not None:
            cls_hits += int(np.argmax(cls_logits) == vocab.label_index(cls_task, ex.label))
    report = score_outputs(examples, outputs, exp.module.tasks, vocab)
    report.update({"name": exp.name, "split": split, "decode": dataclasses.asdict(decode)})
    if cls_task and exp.objective.is_classification:
        report["tasks"][cls_task]["encoder_head_accuracy"] = cls_hits / max(len(examples), 1)
    if write:
        out = ws.root / "reports"
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{exp.name}_{split}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / f"{exp.name}_{split}.tsv").write_text("\n".join(report_lines(report)) + "\n")
    return report


# ---------------------------------------------------------------- parameter accounting


@dataclass
class TaskEntry:
    task: str
    kind: str = SINGLE
    members: list[str] = field(default_factory=list)
    n_class_labels: int = 0


TABLE_TASKS_6 = [
    TaskEntry("asr", SINGLE, ["asr"]),
    TaskEntry("pr", SINGLE, ["pr"]),
    TaskEntry("er", STACK, ["asr_iemocap", "er"], 4),
    TaskEntry("ic_snips", FUSION, ["asr_snips", "sf", "ic_snips"], 3),
    TaskEntry("sf", SINGLE, ["sf"]),
    TaskEntry("ic_fsc", SINGLE, ["ic_fsc"], 3),
]
TABLE_TASKS_9 = TABLE_TASKS_6 + [
    TaskEntry("asr_iemocap", SINGLE, ["asr_iemocap"]),
    TaskEntry("asr_snips", SINGLE, ["asr_snips"]),
    TaskEntry("asr_fsc", SINGLE, ["asr_fsc"]),
]


def module_cost(cfg: ModelConfig, entry: TaskEntry) -> int:
    """Trainable parameters of one task module, by registry enumeration on a scratch model."""
    model = UnifiedModel(cfg)
    for m in entry.members[:-1] if entry.kind != FUSION else entry.members:
        model.add_adapter(m)
    n_cls = entry.n_class_labels or None
    module = build_task_module(entry.kind, entry.members, model,
                               fusion_name=entry.task if entry.kind == FUSION else None,
                               n_class_labels=n_cls)
    return count_parameters(model, module)


def module_cost_closed_form(cfg: ModelConfig, entry: TaskEntry) -> int:
    if entry.kind == FUSION:
        return fusion_param_count(cfg.n_layers, cfg.d_model, entry.n_class_labels)
    return adapter_param_count(cfg.n_layers, cfg.d_model, cfg.adapter_dim, entry.n_class_labels)


def report_params(cfg: ModelConfig, entries: Sequence[TaskEntry]) -> list[dict]:
    """Cumulative additional trainable parameters as tasks are added.

    Ours: one shared decoder stack plus each task's module. Baseline: one
    dedicated decoder stack per task.
    """
    dec = decoder_stack_param_count(cfg)
    rows, ours = [], dec if entries else 0
    for n, entry in enumerate(entries, start=1):
        cost = module_cost(cfg, entry)
        ours += cost
        base = n * dec
        rows.append({"tasks": n, "task": entry.task, "kind": entry.kind, "marginal": cost,
                     "ours": ours, "dedicated": base, "ratio": ours / base})
    return rows


def total_additional(cfg: ModelConfig, entries: Sequence[TaskEntry]) -> int:
    if not entries:
        return 0
    return report_params(cfg, entries)[-1]["ours"]


# ---------------------------------------------------------------- data generation


@dataclass
class DataSpec:
    n_asr: int = 500
    n_er: int = 500
    n_sf: int = 300
    noise: float = 0.05
    frames_per_char: int = 3
    d_in: int = 8


def corpus_builders(spec: DataSpec) -> dict[str, Callable[[int, int, int], list[toy_tasks.ToyExample]]]:
    common = {"noise": spec.noise, "frames_per_char": spec.frames_per_char, "d_in": spec.d_in}
    return {
        "asr": lambda seed, n, start: toy_tasks.gen_transduction(seed, n, start=start, **common),
        "er": lambda seed, n, start: toy_tasks.gen_classification(seed + 1, n, start=start, **common),
        "sf": lambda seed, n, start: toy_tasks.gen_slots(seed + 2, n, start=start, **common),
    }


def build_vocabulary(train_sets: dict[str, list[toy_tasks.ToyExample]]) -> Vocabulary:
    """Character vocabulary with task labels on the rarest transcript characters."""
    vocab = default_vocabulary()
    lines = [ex.transcript for exs in train_sets.values() for ex in exs]
    vocab = with_frequency(vocab, build_frequency_table(lines, vocab))
    vocab = allocate_task_tokens(vocab, list(toy_tasks.EMOTIONS), "er")
    intents = [intent for intent, _ in toy_tasks.DEFAULT_GRAMMAR["templates"]]
    vocab = allocate_task_tokens(vocab, intents, "ic")
    vocab = allocate_task_tokens(vocab, [slot_label(t) for t in sorted(toy_tasks.DEFAULT_GRAMMAR["values"])], "sf")
    return vocab


def generate_data(ws: Workspace, seed: int, spec: DataSpec = DataSpec()) -> dict[str, Path]:
    """Write ``<corpus>_<split>.jsonl`` for asr, er and sf plus ``vocab.tsv``."""
    sizes = {"asr": spec.n_asr, "er": spec.n_er, "sf": spec.n_sf}
    written, train_sets = {}, {}
    for corpus, build in corpus_builders(spec).items():
        for split in toy_tasks.SPLITS:
            lo, hi = toy_tasks.split_range(sizes[corpus], split)
            examples = build(seed, hi - lo, lo)
            if split == "train":
                train_sets[corpus] = examples
            written[f"{corpus}_{split}"] = toy_tasks.write_jsonl(ws.data_dir / f"{corpus}_{split}.jsonl", examples)
    written["vocab"] = build_vocabulary(train_sets).save(ws.vocab_path)
    return written
