"""Vocabulary, task-token allocation and multi-task target formatting.

Task labels live on reserved vocabulary entries chosen among the least
frequent tokens of the transcript corpus. A multi-task target reads::

    <s> task1 tokens <sep> task2 tokens ... </s>

Inside text payloads a reserved token is written ``<name>``; a
classification payload is the bare label name.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

TRANSDUCTION, CLASSIFICATION, SLOTS = "transduction", "classification", "slots"
TASK_KINDS = {"asr": TRANSDUCTION, "pr": TRANSDUCTION, "er": CLASSIFICATION,
              "ic": CLASSIFICATION, "sf": SLOTS}

SPECIAL_ROLES = ("pad", "bos", "eos", "blank", "sep")
_MARKUP = re.compile(r"<([^<>]+)>")


class VocabularyError(ValueError):
    pass


class TargetFormatError(ValueError):
    pass


def task_kind(task: str) -> str:
    return TASK_KINDS.get(task, TRANSDUCTION)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    specials: dict[str, int]
    frequency: tuple[int, ...] = ()
    reserved: dict[int, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.specials) != set(SPECIAL_ROLES):
            raise VocabularyError(f"special roles must be exactly {SPECIAL_ROLES}")
        ids = list(self.specials.values())
        if len(set(ids)) != len(ids):
            raise VocabularyError("special ids collide")
        if set(ids) & set(self.reserved):
            raise VocabularyError("reserved ids overlap special ids")
        if any(not 0 <= i < len(self.tokens) for i in [*ids, *self.reserved]):
            raise VocabularyError("id outside the vocabulary")
        labels = list(self.reserved.values())
        if len(set(labels)) != len(labels):
            raise VocabularyError("a label is reserved twice")
        if not self.frequency:
            object.__setattr__(self, "frequency", (0,) * len(self.tokens))
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.tokens)})
        object.__setattr__(self, "_label_index", {v: k for k, v in self.reserved.items()})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self.specials["pad"]

    @property
    def bos(self) -> int:
        return self.specials["bos"]

    @property
    def eos(self) -> int:
        return self.specials["eos"]

    @property
    def blank(self) -> int:
        return self.specials["blank"]

    @property
    def sep(self) -> int:
        return self.specials["sep"]

    def labels(self, task: str) -> list[str]:
        return sorted(name for t, name in self.reserved.values() if t == task)

    def label_id(self, task: str, name: str) -> int:
        try:
            return self._label_index[(task, name)]
        except KeyError:
            raise TargetFormatError(f"unknown label {name!r} for task {task!r}") from None

    def label_index(self, task: str, name: str) -> int:
        """Position of ``name`` within the task's sorted label list (classifier target)."""
        labels = self.labels(task)
        if name not in labels:
            raise TargetFormatError(f"unknown label {name!r} for task {task!r}")
        return labels.index(name)

    def is_normal(self, i: int) -> bool:
        return i not in self.reserved and i not in self.specials.values()

    # ------------------------------------------------------------ text

    def encode_text(self, text: str, task: str | None = None) -> list[int]:
        """Characters to ids; ``<name>`` resolves to ``task``'s reserved label token."""
        ids, pos = [], 0
        for m in _MARKUP.finditer(text):
            ids.extend(self._chars(text[pos:m.start()]))
            ids.append(self.label_id(task, m.group(1)))
            pos = m.end()
        ids.extend(self._chars(text[pos:]))
        return ids

    def _chars(self, text: str) -> list[int]:
        out = []
        for ch in text:
            i = self._index.get(ch)
            if i is None or ch in ("<", ">"):
                raise TargetFormatError(f"character {ch!r} not in the vocabulary")
            if not self.is_normal(i):
                raise TargetFormatError(f"payload character {ch!r} is a reserved or special token")
            out.append(i)
        return out

    def render(self, ids: Iterable[int]) -> str:
        parts = []
        for i in ids:
            if i in self.reserved:
                parts.append(f"<{self.reserved[i][1]}>")
            elif self.is_normal(i):
                parts.append(self.tokens[i])
        return "".join(parts)

    # ------------------------------------------------------------ file format

    def role(self, i: int) -> str:
        for r, j in self.specials.items():
            if i == j:
                return r
        if i in self.reserved:
            task, name = self.reserved[i]
            return f"label:{task}:{name}"
        return "normal"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{i}\t{s}\t{self.frequency[i]}\t{self.role(i)}" for i, s in enumerate(self.tokens)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freq, specials, reserved = [], [], {}, {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            i, surface, count, role = line.split("\t")
            if int(i) != n:
                raise VocabularyError(f"vocabulary ids must be dense, line {n}")
            tokens.append(surface)
            freq.append(int(count))
            if role.startswith("label:"):
                _, task, name = role.split(":", 2)
                reserved[n] = (task, name)
            elif role != "normal":
                specials[role] = n
        return cls(tuple(tokens), specials, tuple(freq), reserved)


def default_vocabulary() -> Vocabulary:
    """42 entries: five specials, space, a-z and 0-9."""
    specials = ["<pad>", "<s>", "</s>", "<blank>", "<sep>"]
    tokens = tuple(specials + [" "] + list(string.ascii_lowercase) + list(string.digits))
    return Vocabulary(tokens, {r: i for i, r in enumerate(SPECIAL_ROLES)})


def build_frequency_table(corpus_lines: Iterable[str], vocab: Vocabulary) -> dict[int, int]:
    """Exact per-id character counts over the corpus; unseen ids count 0."""
    lines = list(corpus_lines)
    if not lines:
        raise VocabularyError("empty corpus")
    counts = Counter()
    for line in lines:
        counts.update(line)
    table = {i: 0 for i in range(len(vocab))}
    for ch, c in counts.items():
        i = vocab._index.get(ch)
        if i is None:
            raise VocabularyError(f"corpus character {ch!r} not in the vocabulary")
        table[i] += c
    return table


def with_frequency(vocab: Vocabulary, table: dict[int, int]) -> Vocabulary:
    return replace(vocab, frequency=tuple(table.get(i, 0) for i in range(len(vocab))))


def allocate_task_tokens(vocab: Vocabulary, needed_labels: Sequence[str], task: str) -> Vocabulary:
    """Reserve the least frequent eligible ids for ``task``'s labels (ties: higher id first).

    Labels already reserved for ``task`` keep their id.
    """
    reserved = dict(vocab.reserved)
    have = {name for t, name in reserved.values() if t == task}
    todo = [n for n in dict.fromkeys(needed_labels) if n not in have]
    eligible = [i for i in range(len(vocab)) if vocab.is_normal(i)]
    eligible.sort(key=lambda i: (vocab.frequency[i], -i))
    if len(todo) > len(eligible):
        raise VocabularyError(f"need {len(todo)} task tokens, only {len(eligible)} eligible")
    for name, i in zip(todo, eligible):
        reserved[i] = (task, name)
    return replace(vocab, reserved=reserved)


# ---------------------------------------------------------------- targets


@dataclass
class TargetSequence:
    tokens: list[int]
    ownership: list[str | None]
    tasks: list[str]

    def segment(self, task: str) -> list[int]:
        """Payload ids owned by ``task``, excluding its terminator."""
        return [t for t, o in zip(self.tokens[1:-1], self.ownership[1:-1]) if o == task]


def encode_payload(task: str, payload: str, vocab: Vocabulary) -> list[int]:
    if task_kind(task) == CLASSIFICATION:
        return [vocab.label_id(task, payload)]
    return vocab.encode_text(payload, task)


def format_target(outputs: Sequence[tuple[str, str]], vocab: Vocabulary) -> TargetSequence:
    """``[(task, payload), ...]`` -> ``<s> p1 <sep> p2 ... </s>`` with per-token task ownership.

    A separator belongs to the task it terminates; ``</s>`` to the last task.
    """
    if not outputs:
        raise TargetFormatError("no task outputs to format")
    tasks = [t for t, _ in outputs]
    if len(set(tasks)) != len(tasks):
        raise TargetFormatError(f"task listed twice: {tasks}")
    tokens, owners = [vocab.bos], [None]
    for k, (task, payload) in enumerate(outputs):
        ids = encode_payload(task, payload, vocab)
        tokens.extend(ids)
        owners.extend([task] * len(ids))
        tokens.append(vocab.sep if k < len(outputs) - 1 else vocab.eos)
        owners.append(task)
    return TargetSequence(tokens, owners, tasks)


@dataclass
class ParseResult:
    payloads: dict[str, str]
    absent: set[str] = field(default_factory=set)
    empty: set[str] = field(default_factory=set)
    malformed: set[str] = field(default_factory=set)
    surplus: int = 0
    truncated: bool = False

    @property
    def ok(self) -> bool:
        return not (self.absent or self.empty or self.malformed or self.surplus or self.truncated)


def parse_output(tokens: Sequence[int], vocab: Vocabulary, expected_tasks: Sequence[str]) -> ParseResult:
    """Split decoder output into per-task payloads. Never raises on malformed output."""
    toks = [int(t) for t in tokens]
    if toks and toks[0] == vocab.bos:
        toks = toks[1:]
    truncated = vocab.eos not in toks
    if not truncated:
        toks = toks[: toks.index(vocab.eos)]
    segments: list[list[int]] = [[]]
    for t in toks:
        if t == vocab.sep:
            segments.append([])
        else:
            segments[-1].append(t)
    res = ParseResult({}, truncated=truncated)
    res.surplus = max(0, len(segments) - len(expected_tasks))
    for k, task in enumerate(expected_tasks):
        if k >= len(segments):
            res.absent.add(task)
            res.payloads[task] = ""
            continue
        seg = segments[k]
        if not seg:
            res.empty.add(task)
            res.payloads[task] = ""
            continue
        if any(t in vocab.specials.values() or (t in vocab.reserved and vocab.reserved[t][0] != task)
               for t in seg):
            res.malformed.add(task)
        if task_kind(task) == CLASSIFICATION:
            if len(seg) == 1 and seg[0] in vocab.reserved and vocab.reserved[seg[0]][0] == task:
                res.payloads[task] = vocab.reserved[seg[0]][1]
            else:
                res.malformed.add(task)
                res.payloads[task] = vocab.render(seg)
        else:
            res.payloads[task] = vocab.render(seg)
    return res


# ---------------------------------------------------------------- slot payloads

SLOT_PREFIX = "slot:"


def slot_label(slot_type: str) -> str:
    return SLOT_PREFIX + slot_type


def sf_payload(transcript: str, slots: Sequence[tuple[str, str]]) -> str:
    """Prefix each slot value (a whole word of the transcript) with its slot-type token."""
    words = transcript.split(" ")
    used = set()
    for slot_type, value in slots:
        for i, w in enumerate(words):
            if w == value and i not in used:
                words[i] = f"<{slot_label(slot_type)}> {w}"
                used.add(i)
                break
        else:
            raise TargetFormatError(f"slot value {value!r} is not a word of {transcript!r}")
    return " ".join(words)


def extract_slots(payload: str) -> list[tuple[str, str]]:
    """``"book <slot:time> ten"`` -> ``[("time", "ten")]``; a dangling slot token yields an empty value."""
    out = []
    for m in re.finditer(r"<" + SLOT_PREFIX + r"([^<>]+)>\s?([^\s<]*)", payload):
        out.append((m.group(1), m.group(2)))
    return out


def strip_slots(payload: str) -> str:
    return " ".join(_MARKUP.sub(" ", payload).split())
