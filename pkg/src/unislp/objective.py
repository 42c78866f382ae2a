"""Training objective: task-weighted decoder NLL, encoder CTC and encoder CE.

    L_nll = sum_task lambda_task * L_task
    L     = (1 - lambda_ctc) * L_nll + lambda_ctc * L_ctc + 1_ce * L_ce

``L_task`` is the mean token NLL over the decoder positions owned by that
task. Over a batch every term is the mean of the per-example values, which
equals evaluating the combination per example and averaging because all
examples of a batch share one config.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ObjectiveConfigError(ValueError):
    pass


class TargetFormatError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    lambda_ctc: float = 0.3
    lambda_task: dict[str, float] = field(default_factory=dict)
    is_classification: bool = False
    blank_id: int = 3
    pad_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ObjectiveConfigError("lambda_ctc must lie in [0, 1]")
        if any(v < 0 for v in self.lambda_task.values()):
            raise ObjectiveConfigError("lambda_task weights must be nonnegative")

    def weight(self, task: str) -> float:
        return float(self.lambda_task.get(task, 1.0))


@dataclass
class LossBreakdown:
    total: Tensor
    nll: Tensor
    ctc: Tensor | None
    ce: Tensor | None
    per_task: dict[str, float]
    lambda_ctc: float
    lambda_task: dict[str, float]
    indicator_ce: int

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "nll": self.nll.item(),
            "ctc": self.ctc.item() if self.ctc is not None else 0.0,
            "ce": self.ce.item() if self.ce is not None else 0.0,
            **{f"task/{k}": v for k, v in self.per_task.items()},
        }


# ---------------------------------------------------------------- CTC


def ctc_min_frames(label: Sequence[int]) -> int:
    """Shortest input admitting an alignment: one frame per label plus a blank between repeats."""
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def _ctc_forward_backward(logp: np.ndarray, labels: Sequence[Sequence[int]], lengths: np.ndarray, blank: int):
    """Batched log-space CTC. ``logp`` is [B, T, V] log-probabilities.

    Returns (log p(label | x) per example, occupancy gradient [B, T, V]).
    """
    b_sz, t_max, v = logp.shape
    s_len = np.array([2 * len(l) + 1 for l in labels])
    s_max = int(s_len.max())
    ext = np.full((b_sz, s_max), blank, dtype=np.int64)
    for b, l in enumerate(labels):
        ext[b, 1:2 * len(l):2] = l
    valid_s = np.arange(s_max)[None, :] < s_len[:, None]
    skip = np.zeros((b_sz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid_s
    neg = -np.inf
    bidx = np.arange(b_sz)[:, None, None]
    emit = logp[bidx, np.arange(t_max)[None, :, None], ext[:, None, :]]  # [B, T, S]
    emit = np.where(valid_s[:, None, :], emit, neg)

    alpha = np.full((b_sz, t_max, s_max), neg)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1:2] = emit[:, 0, 1:2]
    with np.errstate(invalid="ignore"):
        for t in range(1, t_max):
            prev = alpha[:, t - 1]
            acc = prev.copy()
            acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
            acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
            alpha[:, t] = acc + emit[:, t]

        last = lengths - 1
        a_end = alpha[np.arange(b_sz), last]  # [B, S]
        end1 = a_end[np.arange(b_sz), s_len - 1]
        end2 = np.where(s_len > 1, a_end[np.arange(b_sz), np.maximum(s_len - 2, 0)], neg)
        log_total = np.logaddexp(end1, end2)

        # beta excludes the emission at t
        beta = np.full((b_sz, t_max, s_max), neg)
        init = np.full((b_sz, s_max), neg)
        init[np.arange(b_sz), s_len - 1] = 0.0
        init[np.arange(b_sz), np.maximum(s_len - 2, 0)] = 0.0
        for t in range(t_max - 1, -1, -1):
            if t < t_max - 1:
                nxt = beta[:, t + 1] + emit[:, t + 1]
                acc = nxt.copy()
                acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
                acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
                beta[:, t] = np.where(valid_s, acc, neg)
            ends = t == last
            beta[ends, t] = init[ends]
            beta[t > last, t] = neg

        feasible = np.isfinite(log_total)
        occ = np.exp(alpha + beta - np.where(feasible, log_total, 0.0)[:, None, None])
    occ = np.where(np.isfinite(occ), occ, 0.0)
    occ[~feasible] = 0.0
    gamma = np.zeros((b_sz, t_max, v))
    for s in range(s_max):
        np.add.at(gamma, (np.arange(b_sz), slice(None), ext[:, s]), occ[:, :, s])
    return log_total, gamma


def ctc_loss_batch(logits: Tensor, labels: Sequence[Sequence[int]], lengths, blank_id: int) -> Tensor:
    """Mean over the batch of -log p(label | x). ``logits`` is [B, T, V], padded past ``lengths``.

    An infeasible example (input too short for its label) yields +inf with
    ``infeasible`` set on the returned tensor rather than NaN.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    b_sz, t_max, _ = logits.shape
    if len(labels) != b_sz or lengths.shape != (b_sz,):
        raise ValueError("one label and one length per example")
    for l in labels:
        if len(l) == 0:
            raise ValueError("CTC label must be nonempty")
        if blank_id in l:
            raise ValueError("CTC label contains the blank id")
    logp = T._log_softmax_np(logits.data)
    log_total, gamma = _ctc_forward_backward(logp, labels, lengths, blank_id)
    losses = -log_total
    infeasible = ~np.isfinite(losses)
    frame_mask = (np.arange(t_max)[None, :] < lengths[:, None])[:, :, None]

    def bw(g):
        grad = (np.exp(logp) - gamma) * frame_mask
        grad[infeasible] = 0.0
        logits._accumulate(g * grad / b_sz)

    out = T.make_op(np.asarray(losses.mean()), (logits,), bw)
    return _FlaggedTensor(out, bool(infeasible.any()), losses)


class _FlaggedTensor(Tensor):
    """A loss tensor that also reports per-example values and infeasibility."""

    __slots__ = ("infeasible", "per_example")

    def __init__(self, base: Tensor, infeasible: bool, per_example: np.ndarray):
        super().__init__(base.data, base.requires_grad)
        self._parents, self._backward = base._parents, base._backward
        self.infeasible = infeasible
        self.per_example = per_example


def ctc_loss(ctc_logits: Tensor, label: Sequence[int], blank_id: int) -> Tensor:
    """Single utterance CTC loss over ``ctc_logits`` [T, V]."""
    x = ctc_logits.reshape(1, *ctc_logits.shape)
    return ctc_loss_batch(x, [list(label)], [ctc_logits.shape[0]], blank_id)


def ctc_log_prob(log_probs: np.ndarray, label: Sequence[int], blank_id: int) -> float:
    """log p(label | x) for one [T, V] matrix of log-probabilities (no graph)."""
    if len(label) == 0:
        return float(np.sum(log_probs[:, blank_id]))
    lt, _ = _ctc_forward_backward(log_probs[None], [list(label)], np.array([len(log_probs)]), blank_id)
    return float(lt[0])


# ---------------------------------------------------------------- decoder NLL


def _row_weights(targets, cfg: ObjectiveConfig, n_rows: int):
    """Per-row weights realising sum_task lambda_task * mean-over-task-positions, averaged over the batch."""
    b_sz = len(targets)
    weights = np.zeros((b_sz, n_rows))
    ids = np.full((b_sz, n_rows), cfg.pad_id, dtype=np.int64)
    masks: dict[str, np.ndarray] = {}
    for b, tgt in enumerate(targets):
        toks = list(tgt.tokens)[1:]
        owners = list(tgt.ownership)[1:]
        if len(owners) != len(toks):
            raise TargetFormatError("ownership must cover every token")
        if any(o is None for o in owners):
            raise TargetFormatError("token position without a task owner")
        ids[b, : len(toks)] = toks
        counts: dict[str, int] = {}
        for o in owners:
            counts[o] = counts.get(o, 0) + 1
        for i, o in enumerate(owners):
            weights[b, i] = cfg.weight(o) / counts[o] / b_sz
            masks.setdefault(o, np.zeros((b_sz, n_rows)))[b, i] = 1.0
    return ids, weights, masks


def nll_task_weighted(dec_logits: Tensor, targets, cfg: ObjectiveConfig) -> tuple[Tensor, dict[str, float]]:
    """Eq.-(1) loss for a batch of decoder logits [B, U, V] (or one example [U, V])."""
    if dec_logits.ndim == 2:
        dec_logits = dec_logits.reshape(1, *dec_logits.shape)
        targets = [targets]
    b_sz, u, v = dec_logits.shape
    for tgt in targets:
        if len(tgt.tokens) - 1 > u:
            raise TargetFormatError("target longer than decoder logits")
    ids, weights, masks = _row_weights(targets, cfg, u)
    flat = dec_logits.reshape(b_sz * u, v)
    loss = T.weighted_nll(flat, ids.reshape(-1), weights.reshape(-1))
    logp = T._log_softmax_np(flat.data)
    tok_nll = -logp[np.arange(b_sz * u), ids.reshape(-1)].reshape(b_sz, u)
    per_task = {}
    for task, m in masks.items():
        rows = m.sum(axis=1)
        present = rows > 0
        per_task[task] = float(np.mean((np.where(m > 0, tok_nll, 0.0).sum(axis=1)[present]) / rows[present]))
    return loss, per_task


def encoder_ce(cls_logits: Tensor, label_index) -> Tensor:
    """Mean cross entropy of the pooled encoder classifier; accepts [C] or [B, C]."""
    if cls_logits.ndim == 1:
        cls_logits = cls_logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(label_index, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= cls_logits.shape[1]):
        raise ValueError("class label out of range")
    return T.cross_entropy_rows(cls_logits, labels)


# ---------------------------------------------------------------- combination


def combine(nll: Tensor, ctc: Tensor | None, ce: Tensor | None, cfg: ObjectiveConfig) -> Tensor:
    total = nll * (1.0 - cfg.lambda_ctc)
    if cfg.lambda_ctc > 0:
        total = total + ctc * cfg.lambda_ctc
    if cfg.is_classification:
        total = total + ce
    return total


def total_objective(enc, dec_logits: Tensor, targets, cfg: ObjectiveConfig,
                    ctc_labels: Sequence[Sequence[int]] | None = None,
                    class_labels: Sequence[int] | None = None) -> LossBreakdown:
    """Full objective over a batch. ``enc`` is an ``EncoderOutput``.

    The CTC term is only evaluated when ``lambda_ctc > 0``; the CE term only
    when ``is_classification``.
    """
    nll, per_task = nll_task_weighted(dec_logits, targets, cfg)
    ctc = ce = None
    if cfg.lambda_ctc > 0:
        if ctc_labels is None or any(len(l) == 0 for l in ctc_labels):
            raise ObjectiveConfigError("lambda_ctc > 0 needs a transduction label for every example")
        ctc = ctc_loss_batch(enc.ctc_logits, ctc_labels, enc.lengths, cfg.blank_id)
    if cfg.is_classification:
        if class_labels is None:
            raise ObjectiveConfigError("classification objective needs class labels")
        ce = encoder_ce(enc.cls_logits, class_labels)
    total = combine(nll, ctc, ce, cfg)
    weights = {t: cfg.weight(t) for t in per_task}
    return LossBreakdown(total, nll, ctc, ce, per_task, cfg.lambda_ctc, weights, int(cfg.is_classification))
