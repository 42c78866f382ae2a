"""Edit-distance error rates, accuracy and slot F1.

Rates are pooled over the corpus: total edits divided by total reference
length, not a mean of per-utterance rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence


@dataclass
class EditStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    hits: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        """Error rate; ``inf`` flags edits against an empty reference."""
        if self.reference_length == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.reference_length

    def __add__(self, other: "EditStats") -> "EditStats":
        return EditStats(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.hits + other.hits,
            self.reference_length + other.reference_length,
        )


def edit_distance_stats(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditStats:
    """Unit-cost Levenshtein alignment; traceback prefers hit, then substitution, deletion, insertion."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i - 1][j] + 1, d[i][j - 1] + 1)
    st = EditStats(reference_length=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i][j] == d[i - 1][j - 1]:
            st.hits += 1
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + 1:
            st.substitutions += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            st.deletions += 1
            i -= 1
        else:
            st.insertions += 1
            j -= 1
    return st


def tokens_for(text, unit: str) -> list:
    if unit == "word":
        return text.split() if isinstance(text, str) else list(text)
    if unit == "char":
        return list(text)
    if unit == "phone":
        return [c for c in text if c != " "] if isinstance(text, str) else list(text)
    raise ValueError(f"unknown unit {unit!r}")


def corpus_stats(refs: Sequence, hyps: Sequence, unit: str) -> EditStats:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = EditStats()
    for r, h in zip(refs, hyps):
        total = total + edit_distance_stats(tokens_for(r, unit), tokens_for(h, unit))
    return total


def wer(refs, hyps) -> float:
    return corpus_stats(refs, hyps, "word").rate


def per(refs, hyps) -> float:
    return corpus_stats(refs, hyps, "phone").rate


def cer(refs, hyps) -> float:
    return corpus_stats(refs, hyps, "char").rate


def accuracy(refs: Sequence, hyps: Sequence) -> float:
    """Exact-match fraction; a ``None`` hypothesis (absent output) counts as wrong."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        return 0.0
    return sum(1 for r, h in zip(refs, hyps) if h is not None and r == h) / len(refs)


def normalize_value(v: str) -> str:
    return " ".join(v.lower().split())


@dataclass
class SlotCounts:
    tp: int = 0
    n_hyp: int = 0
    n_ref: int = 0
    value_stats: EditStats = None

    def __post_init__(self):
        if self.value_stats is None:
            self.value_stats = EditStats()

    def __add__(self, other: "SlotCounts") -> "SlotCounts":
        return SlotCounts(self.tp + other.tp, self.n_hyp + other.n_hyp, self.n_ref + other.n_ref,
                          self.value_stats + other.value_stats)

    @property
    def f1(self) -> float:
        if self.n_ref == 0 and self.n_hyp == 0:
            return 1.0
        p = self.tp / self.n_hyp if self.n_hyp else 0.0
        r = self.tp / self.n_ref if self.n_ref else 0.0
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def value_cer(self) -> float:
        return self.value_stats.rate


def slot_counts(ref_slots: Sequence[tuple[str, str]], hyp_slots: Sequence[tuple[str, str]]) -> SlotCounts:
    ref = [(t, normalize_value(v)) for t, v in ref_slots]
    hyp = [(t, normalize_value(v)) for t, v in hyp_slots]
    used = [False] * len(ref)
    tp = 0
    for h in hyp:
        for k, r in enumerate(ref):
            if not used[k] and r == h:
                used[k] = True
                tp += 1
                break
    # value CER: pair ref slots with same-type hyp slots, exact matches first;
    # a ref slot left without a same-type hyp is scored against the empty string
    pending = list(range(len(hyp)))
    stats = EditStats()
    pairs: list[tuple[str, str]] = []
    order = sorted(range(len(ref)), key=lambda k: not any(h == ref[k] for h in hyp))
    for k in order:
        t, v = ref[k]
        match = next((j for j in pending if hyp[j] == ref[k]), None)
        if match is None:
            match = next((j for j in pending if hyp[j][0] == t), None)
        if match is None:
            pairs.append((v, ""))
        else:
            pending.remove(match)
            pairs.append((v, hyp[match][1]))
    for v_ref, v_hyp in pairs:
        stats = stats + edit_distance_stats(list(v_ref), list(v_hyp))
    return SlotCounts(tp, len(hyp), len(ref), stats)


def slot_f1(ref_slots, hyp_slots) -> tuple[float, float]:
    """(F1, slot-value CER) for one utterance."""
    c = slot_counts(ref_slots, hyp_slots)
    return c.f1, c.value_cer


def corpus_slot_f1(refs: Sequence, hyps: Sequence) -> tuple[float, float]:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = SlotCounts()
    for r, h in zip(refs, hyps):
        total = total + slot_counts(r, h)
    return total.f1, total.value_cer
