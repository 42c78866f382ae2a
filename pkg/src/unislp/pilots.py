"""Small convergence runs used to calibrate and check training thresholds."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import toy_tasks
from .adapters import SINGLE, build_task_module
from .backbone import ModelConfig, UnifiedModel
from .decoding import greedy_decode
from .harness import ExperimentConfig, ModuleSpec, fit, make_items
from .objective import ObjectiveConfig
from .optim import AdamConfig
from .taskspace import Vocabulary, allocate_task_tokens, default_vocabulary, parse_output
from . import tensor as T


@dataclass
class PilotResult:
    reached: bool
    steps: int
    seconds: float
    trace: list[tuple[int, float]] = field(default_factory=list)
    frozen_unchanged: bool = True


def greedy_outputs(model, module, examples, max_len: int = 40) -> list[list[int]]:
    out = []
    with T.no_grad():
        for ex in examples:
            enc, _, _ = model.encode(ex.features, module)
            out.append(greedy_decode(enc, model, module, max_len))
    return out


def training_wer(model, module, examples, vocab: Vocabulary) -> float:
    hyps = [parse_output(o, vocab, ["asr"]).payloads["asr"] for o in greedy_outputs(model, module, examples)]
    return M.wer([ex.transcript for ex in examples], hyps)


def training_accuracy(model, module, examples, vocab: Vocabulary, task: str) -> float:
    outs = greedy_outputs(model, module, examples, max_len=4)
    parsed = [parse_output(o, vocab, [task]) for o in outs]
    hyps = [None if (p.malformed or p.absent or p.empty) else p.payloads[task] for p in parsed]
    return M.accuracy([ex.label for ex in examples], hyps)


def overfit_base(n: int = 32, max_steps: int = 3000, check_every: int = 100, seed: int = 0,
                 model_cfg: ModelConfig | None = None, batch_size: int = 16, lr: float = 1e-3) -> PilotResult:
    """Train a fresh backbone on ``n`` noiseless transcripts until greedy training WER is 0."""
    cfg = model_cfg or ModelConfig(seed=seed)
    vocab = default_vocabulary()
    examples = toy_tasks.gen_transduction(seed, n, noise=0.0, d_in=cfg.d_in)
    exp = ExperimentConfig(name="overfit_base", model=cfg, objective=ObjectiveConfig(lambda_ctc=0.3),
                           module=ModuleSpec("none", [], ["asr"]), optimizer=AdamConfig(lr=lr),
                           steps=max_steps, batch_size=batch_size, seed=seed, log_every=check_every)
    model = UnifiedModel(cfg)
    model.set_trainable(model.registry())
    items = make_items(examples, exp.module, vocab, exp.objective)
    trace: list[tuple[int, float]] = []

    def stop(step, _loss):
        if step % check_every:
            return False
        trace.append((step, training_wer(model, None, examples, vocab)))
        return trace[-1][1] == 0.0

    t0 = time.perf_counter()
    res = fit(model, None, items, exp, callback=stop)
    reached = bool(trace) and trace[-1][1] == 0.0
    return PilotResult(reached, res.steps, time.perf_counter() - t0, trace)


def adapter_classification(n: int = 64, max_steps: int = 2000, check_every: int = 50, seed: int = 0,
                           model_cfg: ModelConfig | None = None, batch_size: int = 16,
                           lr: float = 1e-3, backbone: UnifiedModel | None = None) -> PilotResult:
    """Single adapter on a frozen backbone, noiseless label-signature data, until training accuracy is 1."""
    cfg = model_cfg or (backbone.config if backbone is not None else ModelConfig(seed=seed))
    vocab = allocate_task_tokens(default_vocabulary(), list(toy_tasks.EMOTIONS), "er")
    examples = toy_tasks.gen_classification(seed, n, noise=0.0, d_in=cfg.d_in)
    model = backbone if backbone is not None else UnifiedModel(cfg)
    module = build_task_module(SINGLE, ["er"], model, n_class_labels=len(toy_tasks.EMOTIONS))
    exp = ExperimentConfig(name="adapter_er", model=cfg,
                           objective=ObjectiveConfig(lambda_ctc=0.0, is_classification=True),
                           module=ModuleSpec(SINGLE, ["er"], ["er"]), optimizer=AdamConfig(lr=lr),
                           steps=max_steps, batch_size=batch_size, seed=seed, log_every=check_every)
    items = make_items(examples, exp.module, vocab, exp.objective)
    trace: list[tuple[int, float]] = []

    def stop(step, _loss):
        if step % check_every:
            return False
        trace.append((step, training_accuracy(model, module, examples, vocab, "er")))
        return trace[-1][1] == 1.0

    t0 = time.perf_counter()
    res = fit(model, module, items, exp, callback=stop)
    reached = bool(trace) and trace[-1][1] == 1.0
    return PilotResult(reached, res.steps, time.perf_counter() - t0, trace,
                       frozen_unchanged=res.frozen_before == res.frozen_after)


def loss_decrease(seed: int, steps: int = 100, n: int = 64, model_cfg: ModelConfig | None = None) -> tuple[float, float]:
    """(mean loss over the first 10 steps, mean over the last 10) for default base training."""
    cfg = model_cfg or ModelConfig(seed=seed)
    vocab = default_vocabulary()
    examples = toy_tasks.gen_transduction(seed, n, noise=0.05, d_in=cfg.d_in)
    exp = ExperimentConfig(name="loss_decrease", model=cfg, module=ModuleSpec("none", [], ["asr"]),
                           steps=steps, batch_size=16, seed=seed, log_every=1)
    model = UnifiedModel(cfg)
    model.set_trainable(model.registry())
    res = fit(model, None, make_items(examples, exp.module, vocab, exp.objective), exp)
    totals = np.array([h["total"] for h in res.history])
    return float(totals[:10].mean()), float(totals[-10:].mean())
