"""Seeded synthetic corpora standing in for speech datasets.

Every character has a fixed random code vector; an utterance's features
are each character's code repeated ``frames_per_char`` times plus Gaussian
noise. Classification corpora add a per-label signature vector to every
frame and tie the label to the first character, so transcript and label
carry shared signal. Example ``i`` of a corpus draws from
``default_rng([seed, i])`` and is independent of every other example.
"""

from __future__ import annotations

import itertools
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ALPHABET = "abcdefghijklmnop"
EMOTIONS = ("angry", "happy", "neutral", "sad")
PHONE_MAP = {"c": "k", "q": "k", "x": "k", "y": "i", "z": "s"}

DEFAULT_GRAMMAR = {
    "templates": [
        ["alarm", "wake me at {time}"],
        ["music", "play {song} now"],
        ["travel", "go to {city} at {time}"],
    ],
    "values": {
        "time": ["ten", "one", "nine"],
        "song": ["jazz", "hello"],
        "city": ["rome", "oslo", "lima"],
    },
}


class GeneratorConfigError(ValueError):
    pass


@dataclass
class ToyExample:
    features: np.ndarray
    transcript: str
    phones: list[str]
    label: str | None = None
    slots: list[tuple[str, str]] | None = None
    tasks: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "features": self.features.tolist(),
            "transcript": self.transcript,
            "phones": self.phones,
            "label": self.label,
            "slots": [list(s) for s in self.slots] if self.slots is not None else None,
            "tasks": self.tasks,
        })

    @classmethod
    def from_json(cls, line: str) -> "ToyExample":
        d = json.loads(line)
        slots = d.get("slots")
        return cls(
            features=np.asarray(d["features"], dtype=np.float64),
            transcript=d["transcript"],
            phones=list(d.get("phones") or []),
            label=d.get("label"),
            slots=[tuple(s) for s in slots] if slots is not None else None,
            tasks=list(d.get("tasks") or []),
        )


def write_jsonl(path, examples: Iterable[ToyExample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")
    return path


def read_jsonl(path) -> list[ToyExample]:
    with Path(path).open() as f:
        return [ToyExample.from_json(line) for line in f if line.strip()]


def to_phones(transcript: str) -> list[str]:
    return [PHONE_MAP.get(c, c) for c in transcript if c != " "]


def codebook(symbols: str, d_in: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Unit-variance code vector per symbol, independent of the symbol set it is drawn with."""
    return {s: np.random.default_rng([seed, ord(s)]).normal(size=d_in) for s in symbols}


def signature(label: str, d_in: int, seed: int = 0) -> np.ndarray:
    v = np.random.default_rng([seed, 1_000_003, zlib.crc32(label.encode())]).normal(size=d_in)
    return v / np.linalg.norm(v)


def render_features(transcript: str, rng: np.random.Generator, d_in: int, frames_per_char: int,
                    noise: float, jitter: int = 0, codebook_seed: int = 0) -> np.ndarray:
    codes = codebook("".join(sorted(set(transcript))), d_in, codebook_seed)
    frames = []
    for ch in transcript:
        k = frames_per_char + (int(rng.integers(-jitter, jitter + 1)) if jitter else 0)
        frames.extend([codes[ch]] * max(k, 1))
    x = np.array(frames)
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    return x


def random_transcript(rng: np.random.Generator, alphabet: str, len_range: tuple[int, int],
                      first: str | None = None) -> str:
    """Letters with single interior spaces; length drawn from ``len_range`` inclusive."""
    letters = alphabet.replace(" ", "")
    spaces = " " in alphabet
    n = int(rng.integers(len_range[0], len_range[1] + 1))
    out = [first or letters[rng.integers(len(letters))]]
    while len(out) < n:
        if spaces and out[-1] != " " and len(out) < n - 1 and rng.random() < 0.2:
            out.append(" ")
        else:
            out.append(letters[rng.integers(len(letters))])
    return "".join(out)


def _check(n, len_range, frames_per_char, noise):
    if n < 0 or len_range[0] < 1 or len_range[1] < len_range[0]:
        raise GeneratorConfigError("invalid size or length range")
    if frames_per_char < 1 or noise < 0:
        raise GeneratorConfigError("frames_per_char >= 1 and noise >= 0 required")


def gen_transduction(seed: int, n: int, alphabet: str = DEFAULT_ALPHABET + " ", len_range=(3, 8),
                     frames_per_char: int = 3, noise: float = 0.0, d_in: int = 8, jitter: int = 0,
                     codebook_seed: int = 0, start: int = 0) -> list[ToyExample]:
    _check(n, len_range, frames_per_char, noise)
    out = []
    for i in range(start, start + n):
        rng = np.random.default_rng([seed, i])
        text = random_transcript(rng, alphabet, len_range)
        feats = render_features(text, rng, d_in, frames_per_char, noise, jitter, codebook_seed)
        out.append(ToyExample(feats, text, to_phones(text), tasks=["asr", "pr"]))
    return out


def label_for_first_char(ch: str, alphabet: str, label_set: Sequence[str]) -> str:
    letters = alphabet.replace(" ", "")
    return label_set[letters.index(ch) % len(label_set)]


def gen_classification(seed: int, n: int, label_set: Sequence[str] = EMOTIONS, task: str = "er",
                       alphabet: str = DEFAULT_ALPHABET + " ", len_range=(3, 8), frames_per_char: int = 3,
                       noise: float = 0.0, signature_scale: float = 2.0, d_in: int = 8,
                       jitter: int = 0, codebook_seed: int = 0, start: int = 0) -> list[ToyExample]:
    """Label drawn uniformly; the transcript's first character encodes it; frames carry its signature."""
    _check(n, len_range, frames_per_char, noise)
    letters = alphabet.replace(" ", "")
    if len(letters) < len(label_set):
        raise GeneratorConfigError("alphabet smaller than the label set")
    out = []
    for i in range(start, start + n):
        rng = np.random.default_rng([seed, i])
        label = label_set[int(rng.integers(len(label_set)))]
        firsts = [c for c in letters if label_for_first_char(c, alphabet, label_set) == label]
        text = random_transcript(rng, alphabet, len_range, first=firsts[int(rng.integers(len(firsts)))])
        feats = render_features(text, rng, d_in, frames_per_char, noise, jitter, codebook_seed)
        feats = feats + signature_scale * signature(label, d_in, codebook_seed)
        out.append(ToyExample(feats, text, to_phones(text), label=label, tasks=["asr", task]))
    return out


def enumerate_grammar(grammar: dict = DEFAULT_GRAMMAR) -> list[tuple[str, str, list[tuple[str, str]]]]:
    """Every (intent, transcript, slots) the grammar can produce."""
    out = []
    for intent, template in grammar["templates"]:
        words = template.split(" ")
        slot_pos = [(k, w[1:-1]) for k, w in enumerate(words) if w.startswith("{")]
        choices = [grammar["values"][t] for _, t in slot_pos]
        for combo in itertools.product(*choices):
            filled = list(words)
            for (k, t), v in zip(slot_pos, combo):
                filled[k] = v
            out.append((intent, " ".join(filled), [(t, v) for (_, t), v in zip(slot_pos, combo)]))
    return out


def gen_slots(seed: int, n: int, grammar: dict = DEFAULT_GRAMMAR, frames_per_char: int = 3,
              noise: float = 0.0, signature_scale: float = 0.0, d_in: int = 8, jitter: int = 0,
              codebook_seed: int = 0, start: int = 0) -> list[ToyExample]:
    """Template-grammar utterances with slot annotations and the template's intent as label."""
    _check(n, (1, 1), frames_per_char, noise)
    space = enumerate_grammar(grammar)
    out = []
    for i in range(start, start + n):
        rng = np.random.default_rng([seed, i])
        intent, text, slots = space[int(rng.integers(len(space)))]
        feats = render_features(text, rng, d_in, frames_per_char, noise, jitter, codebook_seed)
        if signature_scale:
            feats = feats + signature_scale * signature(intent, d_in, codebook_seed)
        out.append(ToyExample(feats, text, to_phones(text), label=intent, slots=list(slots),
                              tasks=["asr", "sf", "ic"]))
    return out


SPLITS = {"train": (0.0, 0.8), "dev": (0.8, 0.9), "test": (0.9, 1.0)}


def split_range(n_total: int, split: str) -> tuple[int, int]:
    """Disjoint example-index ranges, 80/10/10."""
    lo, hi = SPLITS[split]
    return int(round(lo * n_total)), int(round(hi * n_total))
