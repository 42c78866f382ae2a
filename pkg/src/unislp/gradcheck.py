"""Central finite-difference checks for every differentiable op and the full objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .adapters import FUSION, SINGLE, STACK, build_task_module
from .backbone import ModelConfig, UnifiedModel, count_parameters
from .objective import ObjectiveConfig, total_objective
from .taskspace import TargetSequence
from .tensor import Tensor

TINY = ModelConfig(d_model=8, n_heads=2, d_ff=16, encoder_layers=1, decoder_layers=1, vocab_size=8,
                   n_class_labels=3, max_positions=16, adapter_dim=4, d_in=4, seed=7)
# gradients below this magnitude are compared absolutely: central differences
# on an O(1) loss carry ~1e-11 rounding noise
REL_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int


def _coords(size: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    return np.arange(size) if size <= cap else np.sort(rng.choice(size, cap, replace=False))


def check_fn(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray], eps: float = 1e-5,
             cap: int = 64, seed: int = 0) -> CheckResult:
    """Compare backprop of ``sum(fn(*inputs) * w)`` (random fixed ``w``) with central differences."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    w = rng.normal(size=out.shape)

    def scalar() -> float:
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(l.data) for l in leaves]).data * w))

    loss = T.sum_(T.mul(out, Tensor(w)))
    T.backward(loss)
    worst, n = 0.0, 0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in _coords(flat.size, cap, rng):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar()
            flat[i] = orig - eps
            fm = scalar()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, T.max_rel_error(analytic.reshape(-1)[i], num, REL_FLOOR))
            n += 1
    return CheckResult(name, worst, n)


def op_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    away = lambda *s: np.where(rng.random(s) < 0.5, -1, 1) * rng.uniform(0.1, 2.0, size=s)
    mask = rng.random((3, 4)) < 0.3
    ids = rng.integers(0, 5, size=(2, 3))
    targets = rng.integers(0, 5, size=6)
    tw = rng.uniform(0.0, 1.0, size=6)
    cases = [
        ("add_broadcast", T.add, [r(2, 3, 4), r(4)]),
        ("sub_broadcast", T.sub, [r(2, 3), r(2, 3)]),
        ("mul_broadcast", T.mul, [r(2, 3, 4), r(3, 4)]),
        ("exp", T.exp, [r(3, 4)]),
        ("log", T.log, [pos(3, 4)]),
        ("tanh", T.tanh, [r(3, 4)]),
        ("relu", T.relu, [away(3, 4)]),
        ("gelu", T.gelu, [r(3, 4)]),
        ("reshape", lambda x: T.reshape(x, (4, 6)), [r(2, 3, 4)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [r(2, 3, 4)]),
        ("swapaxes", lambda x: T.swapaxes(x, 1, 2), [r(2, 3, 4)]),
        ("getitem", lambda x: T.getitem(x, (slice(None), [0, 2, 2])), [r(3, 4)]),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [r(2, 3), r(2, 3)]),
        ("concat", lambda a, b: T.concat([a, b], axis=-1), [r(2, 3), r(2, 2)]),
        ("sum_axis", lambda x: T.sum_(x, axis=1, keepdims=True), [r(2, 3, 4)]),
        ("mean_axis", lambda x: T.mean(x, axis=0), [r(2, 3, 4)]),
        ("matmul_2d", T.matmul, [r(3, 4), r(4, 5)]),
        ("matmul_batch_weight", T.matmul, [r(2, 3, 4), r(4, 5)]),
        ("matmul_batched", T.matmul, [r(2, 3, 4), r(2, 4, 5)]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [r(3, 5)]),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), [r(3, 5)]),
        ("layer_norm_affine", T.layer_norm, [r(3, 6), r(6), r(6)]),
        ("layer_norm_plain", T.layer_norm, [r(3, 6)]),
        ("embedding", lambda w: T.embedding(w, ids), [r(5, 4)]),
        ("masked_fill", lambda x: T.masked_fill(x, mask, -3.0), [r(3, 4)]),
        ("weighted_nll", lambda x: T.weighted_nll(x, targets, tw), [r(6, 5)]),
        ("cross_entropy_rows", lambda x: T.cross_entropy_rows(x, targets[:4]), [r(4, 5)]),
    ]
    return [check_fn(name, fn, inputs, seed=seed + k) for k, (name, fn, inputs) in enumerate(cases)]


def _tiny_batch(cfg: ModelConfig, rng: np.random.Generator, n: int = 2):
    """Random two-task targets (transcript then label) over the tiny vocabulary."""
    label_ids = [cfg.vocab_size - 2, cfg.vocab_size - 1]
    normal = [4, 5]
    feats, targets, ctc, cls = [], [], [], []
    for b in range(n):
        u = int(rng.integers(1, 3))
        text = rng.choice(normal, size=u).tolist()
        feats.append(rng.normal(size=(3 + b, cfg.d_in)))
        toks = [cfg.bos_id] + text + [label_ids[b % 2], cfg.eos_id]
        own = [None] + ["asr"] * u + ["er", "er"]
        targets.append(TargetSequence(toks, own, ["asr", "er"]))
        ctc.append(text)
        cls.append(b % cfg.n_class_labels)
    return feats, targets, ctc, cls


def _perturb(params, rng, scale=0.3):
    for p in params:
        p.data = p.data + scale * rng.normal(size=p.shape)


def objective_check(kind: str | None, cfg: ModelConfig = TINY, seed: int = 0, cap: int = 10**9) -> CheckResult:
    """End-to-end check of the full weighted objective w.r.t. the trainable parameters.

    ``kind`` None trains the backbone; otherwise a Single, Stack or Fusion
    module is built over randomly perturbed (non-identity) adapters.
    """
    rng = np.random.default_rng(seed)
    model = UnifiedModel(cfg)
    module = None
    if kind is None:
        model.set_trainable(model.registry())
    else:
        members = {SINGLE: ["a"], STACK: ["a", "b"], FUSION: ["a", "b"]}[kind]
        for m in members if kind == FUSION else members[:-1]:
            model.add_adapter(m, cfg.n_class_labels)
        module = build_task_module(kind, members, model, n_class_labels=cfg.n_class_labels)
        _perturb([p for n, p in model.registry().items() if n.startswith(("adapter/", "fusion/"))], rng)
    objective = ObjectiveConfig(lambda_ctc=0.3, lambda_task={"asr": 0.9, "er": 0.1}, is_classification=True,
                                blank_id=cfg.blank_id, pad_id=cfg.pad_id)
    feats, targets, ctc, cls = _tiny_batch(cfg, rng)

    def loss_tensor():
        enc = model.encode_batch(feats, module)
        logits = model.decode_batch(enc.states, enc.lengths, [t.tokens[:-1] for t in targets], module)
        return total_objective(enc, logits, targets, objective, ctc, cls).total

    def scalar():
        with T.no_grad():
            return loss_tensor().item()

    T.backward(loss_tensor())
    worst, n = 0.0, 0
    for name, p in model.registry().items():
        if not p.trainable:
            continue
        analytic = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.data.size)
        flat = p.data.reshape(-1)
        for i in _coords(flat.size, cap, rng):
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = scalar()
            flat[i] = orig - 1e-5
            fm = scalar()
            flat[i] = orig
            worst = max(worst, T.max_rel_error(analytic[i], (fp - fm) / 2e-5, REL_FLOOR))
            n += 1
        p.grad = None
    label = "objective_" + (kind or "backbone")
    return CheckResult(label, worst, n)


def run_suite(seed: int = 0, cfg: ModelConfig = TINY) -> list[CheckResult]:
    results = op_suite(seed)
    for kind in (None, SINGLE, STACK, FUSION):
        results.append(objective_check(kind, cfg, seed))
    return results


def tiny_param_count(cfg: ModelConfig = TINY) -> int:
    return count_parameters(UnifiedModel(cfg), "all")
