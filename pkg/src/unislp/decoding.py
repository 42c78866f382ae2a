"""Greedy and joint CTC/attention beam search.

Candidates are scored ``(1 - w) * att + w * ctc`` where ``att`` is the
cumulative decoder log-probability and ``ctc`` is the CTC prefix
log-probability of the hypothesis (the probability that the collapsed CTC
output starts with it). When a hypothesis ends, with ``</s>`` or with the
task separator, its CTC term switches to the exact probability of the
prefix as a complete label, and stays fixed for any later segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG = -np.inf


@dataclass
class DecodeConfig:
    beam_size: int = 4
    ctc_weight: float = 0.4
    max_len: int = 40
    length_bonus: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class Hypothesis:
    tokens: list[int]
    att_score: float
    ctc_score: float
    joint: float
    finished: bool = False
    truncated: bool = False
    _ctc_state: tuple | None = field(default=None, repr=False)

    @property
    def output(self) -> list[int]:
        return self.tokens[1:]


class CTCPrefixScorer:
    """Prefix probabilities from CTC log-posteriors [T, V] via the blank/non-blank split.

    A state is ``(r_nonblank, r_blank, last_token)``; ``r_*[t]`` is the log
    probability that frames ``0..t`` collapse to the prefix exactly, with the
    last frame non-blank / blank.
    """

    def __init__(self, log_probs: np.ndarray, blank_id: int):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank_id
        self.T = self.lp.shape[0]

    def initial_state(self):
        r_b = np.cumsum(self.lp[:, self.blank])
        return np.full(self.T, NEG), r_b, None

    def full_score(self, state) -> float:
        """log P(collapsed output == prefix)."""
        r_n, r_b, _ = state
        return float(np.logaddexp(r_n[-1], r_b[-1]))

    def extend(self, state, candidates: Sequence[int]):
        """Prefix scores and new states for appending each candidate."""
        r_n, r_b, last = state
        c = np.asarray(candidates, dtype=np.int64)
        lp_c = self.lp[:, c]  # [T, C]
        tot = np.logaddexp(r_n, r_b)
        phi = np.where((c == last)[None, :], r_b[:, None], tot[:, None])  # [T, C]
        new_n = np.full((self.T, len(c)), NEG)
        new_b = np.full((self.T, len(c)), NEG)
        if last is None:
            new_n[0] = lp_c[0]
        for t in range(1, self.T):
            new_n[t] = np.logaddexp(new_n[t - 1], phi[t - 1]) + lp_c[t]
            new_b[t] = np.logaddexp(new_n[t - 1], new_b[t - 1]) + self.lp[t, self.blank]
        if self.T > 1:
            psi = np.logaddexp(new_n[0], np.logaddexp.reduce(phi[:-1] + lp_c[1:], axis=0))
        else:
            psi = new_n[0]
        states = [(new_n[:, k], new_b[:, k], int(c[k])) for k in range(len(c))]
        return psi, states


def ctc_prefix_score(prefix: Sequence[int], ctc_logits, blank_id: int) -> float:
    """log P(collapsed CTC output begins with ``prefix``); 0.0 for the empty prefix."""
    data = ctc_logits.data if isinstance(ctc_logits, Tensor) else np.asarray(ctc_logits, dtype=np.float64)
    scorer = CTCPrefixScorer(T._log_softmax_np(data), blank_id)
    state, score = scorer.initial_state(), 0.0
    for tok in prefix:
        if tok == blank_id:
            raise ValueError("prefix contains the blank id")
        psi, states = scorer.extend(state, [tok])
        score, state = float(psi[0]), states[0]
    return score


def _candidate_ids(cfg, vocab_size: int) -> np.ndarray:
    banned = {cfg.pad_id, cfg.bos_id, cfg.blank_id}
    return np.array([i for i in range(vocab_size) if i not in banned], dtype=np.int64)


def _step_logprobs(model, enc_states: Tensor, prefixes: list[list[int]], module) -> np.ndarray:
    h = len(prefixes)
    states = Tensor(np.broadcast_to(enc_states.data, (h, *enc_states.shape)).copy())
    logits = model.decode_batch(states, [enc_states.shape[0]] * h, prefixes, module)
    last = logits.data[np.arange(h), [len(p) - 1 for p in prefixes]]
    return T._log_softmax_np(last)


def _order_key(h: Hypothesis):
    # best joint first; ties by token ids, then by length
    return (-h.joint, tuple(h.tokens), len(h.tokens))


def joint_beam_search(enc_states, ctc_logits, model, module=None, cfg: DecodeConfig | None = None,
                      sep_id: int | None = None) -> list[Hypothesis]:
    """Ranked hypotheses, best first. Unfinished ones are returned, flagged, only if none finished."""
    cfg = cfg or DecodeConfig()
    mcfg = model.config
    enc_states = T.as_tensor(enc_states)
    cands = _candidate_ids(mcfg, mcfg.vocab_size)
    w = cfg.ctc_weight
    scorer = None
    if w > 0:
        data = ctc_logits.data if isinstance(ctc_logits, Tensor) else np.asarray(ctc_logits, dtype=np.float64)
        scorer = CTCPrefixScorer(T._log_softmax_np(data), mcfg.blank_id)
    enders = {mcfg.eos_id} | ({sep_id} if sep_id is not None else set())

    root = Hypothesis([mcfg.bos_id], 0.0, 0.0, 0.0,
                      _ctc_state=scorer.initial_state() if scorer else None)
    alive, finished = [root], []
    with T.no_grad():
        # the decoder cannot see prefixes longer than its position table
        for step in range(min(cfg.max_len, mcfg.max_positions)):
            if not alive:
                break
            att = _step_logprobs(model, enc_states, [h.tokens for h in alive], module)
            expanded: list[Hypothesis] = []
            for k, hyp in enumerate(alive):
                a = hyp.att_score + att[k, cands]
                if scorer is None:
                    c_scores = np.zeros(len(cands))
                    c_states = [None] * len(cands)
                elif hyp._ctc_state == "frozen":
                    c_scores = np.full(len(cands), hyp.ctc_score)
                    c_states = ["frozen"] * len(cands)
                else:
                    c_scores, c_states = scorer.extend(hyp._ctc_state, cands)
                    c_scores = np.array(c_scores)
                    full = scorer.full_score(hyp._ctc_state)
                    for j, tok in enumerate(cands):
                        if tok in enders:
                            c_scores[j] = full
                            c_states[j] = "frozen"
                n_tok = len(hyp.tokens)
                joint = (1.0 - w) * a + w * c_scores + cfg.length_bonus * n_tok
                for j, tok in enumerate(cands):
                    expanded.append(Hypothesis(hyp.tokens + [int(tok)], float(a[j]), float(c_scores[j]),
                                               float(joint[j]), finished=int(tok) == mcfg.eos_id,
                                               _ctc_state=c_states[j]))
            expanded.sort(key=_order_key)
            kept = expanded[: cfg.beam_size]
            finished.extend(h for h in kept if h.finished)
            alive = [h for h in kept if not h.finished]
    if finished:
        return sorted(finished, key=_order_key)
    for h in alive:
        h.truncated = True
    return sorted(alive, key=_order_key)


def greedy_decode(enc_states, model, module=None, max_len: int = 40) -> list[int]:
    """Argmax decoding; returns the tokens after ``<s>``, ending with ``</s>`` unless cut at ``max_len``."""
    mcfg = model.config
    enc_states = T.as_tensor(enc_states)
    cands = _candidate_ids(mcfg, mcfg.vocab_size)
    tokens = [mcfg.bos_id]
    with T.no_grad():
        for _ in range(min(max_len, mcfg.max_positions)):
            lp = _step_logprobs(model, enc_states, [tokens], module)[0]
            tok = int(cands[np.argmax(lp[cands])])
            tokens.append(tok)
            if tok == mcfg.eos_id:
                break
    return tokens[1:]
