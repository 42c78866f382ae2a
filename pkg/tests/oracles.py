"""Independent brute-force references used by the test suite."""

import itertools
import math
from functools import lru_cache

import numpy as np


def collapse(path, blank):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


@lru_cache(maxsize=None)
def path_table(t: int, v: int, blank: int):
    """Every length-t frame path over v symbols, with its collapsed label."""
    paths = np.array(list(itertools.product(range(v), repeat=t)), dtype=np.int64).reshape(-1, t)
    return paths, [collapse(p, blank) for p in paths.tolist()]


def ctc_paths_logprob(logp: np.ndarray, keep, blank: int) -> float:
    """log of the summed probability of all frame paths whose collapse satisfies ``keep``."""
    t, v = logp.shape
    paths, collapsed = path_table(t, v, blank)
    mask = np.array([keep(c) for c in collapsed])
    if not mask.any():
        return -math.inf
    terms = logp[np.arange(t), paths[mask]].sum(axis=1)
    m = terms.max()
    return float(m + math.log(math.fsum(np.exp(terms - m))))


def ctc_brute(logp, label, blank) -> float:
    """log p(label) by enumerating all v^T paths."""
    label = tuple(label)
    return ctc_paths_logprob(logp, lambda c: c == label, blank)


def ctc_prefix_brute(logp, prefix, blank) -> float:
    """log P(collapsed output starts with ``prefix``)."""
    prefix = tuple(prefix)
    return ctc_paths_logprob(logp, lambda c: c[: len(prefix)] == prefix, blank)


def edit_distance(ref, hyp) -> int:
    """Plain exponential recursion on unit-cost edits."""
    ref, hyp = tuple(ref), tuple(hyp)

    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


def edit_distance_memo(ref, hyp) -> int:
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


def log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def exhaustive_joint(model, enc_states, ctc_logits, weight, max_len, blank, sep_id=None, module=None):
    """Best finished sequence over every token string of length <= max_len.

    Scores (1 - w) * sum of decoder log-probs + w * CTC, where the CTC term
    is the full-label probability of the segment before the first ``</s>``
    or separator once one has been emitted, and the prefix probability of
    the whole string otherwise (unreachable for finished strings).
    Returns (tokens including <s>, score).
    """
    cfg = model.config
    cands = [i for i in range(cfg.vocab_size) if i not in (cfg.pad_id, cfg.bos_id, cfg.blank_id)]
    enders = {cfg.eos_id} | ({sep_id} if sep_id is not None else set())
    lp_ctc = log_softmax(np.asarray(ctc_logits.data))
    best, best_score = None, -math.inf
    for n in range(1, max_len + 1):
        for body in itertools.product([c for c in cands if c != cfg.eos_id], repeat=n - 1):
            seq = [cfg.bos_id, *body, cfg.eos_id]
            logits = model.decode_logits(enc_states, seq[:-1], module).data
            att = float(sum(log_softmax(logits[i])[seq[i + 1]] for i in range(len(seq) - 1)))
            out = seq[1:]
            cut = next(i for i, t in enumerate(out) if t in enders)
            ctc = ctc_brute(lp_ctc, out[:cut], blank) if weight > 0 else 0.0
            score = (1 - weight) * att + weight * ctc
            key = (score, [-t for t in seq])
            if best is None or key > (best_score, [-t for t in best]):
                best, best_score = seq, score
    return best, best_score


def decoder_instance(seed, vocab_size=6, frames=4):
    """A small random model plus encoder outputs for decoding oracles."""
    from unislp.backbone import ModelConfig, UnifiedModel

    cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, encoder_layers=1, decoder_layers=1, vocab_size=vocab_size,
                      n_class_labels=2, max_positions=16, adapter_dim=4, d_in=4, seed=seed)
    model = UnifiedModel(cfg)
    rng = np.random.default_rng(seed)
    # sharpen the heads so scores are spread out rather than near-uniform
    for name, p in model.registry().items():
        if name.startswith(("out_proj", "ctc_head")) and name.endswith("weight"):
            p.data = p.data * 4
    enc, ctc, _ = model.encode(rng.normal(size=(frames, cfg.d_in)))
    return model, enc, ctc
