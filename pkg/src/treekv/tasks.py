"""Byte tokenization, the synthetic motif corpus and passkey samples."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numerics import UsageError

VOCAB_SIZE = 256

BASE_ALPHABET = string.ascii_lowercase + " .,"
MOTIF_ALPHABET = string.ascii_uppercase + string.digits  # disjoint from the base text: a motif is visible once it starts

FILLER = ("The river runs past the old mill. Birds sing in the tall trees. "
          "The road turns west again. A cold wind comes down from the hills. ")
NEEDLE = "The pass key is {key}. Remember it. "
QUESTION = "What is the pass key? The pass key is "


class DataError(ValueError):
    pass


def byte_tokenize(text: bytes | str) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids: Iterable[int]) -> bytes:
    ids = list(ids)
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise DataError(f"token id {i} outside the byte vocabulary")
    return bytes(ids)


@dataclass
class TokenSplit:
    x_c: list[int]
    x_d: list[int]


def split_context_running(x: Sequence[int], running_len: int) -> TokenSplit:
    if not 0 < running_len <= len(x):
        raise DataError(f"running_len {running_len} not in (0, {len(x)}]")
    cut = len(x) - running_len
    return TokenSplit(list(x[:cut]), list(x[cut:]))


# -- motif corpus --------------------------------------------------------------

@dataclass
class Corpus:
    text: str
    topics: list[tuple[int, list[str]]] = field(default_factory=list)  # (start offset, motifs)

    @property
    def motifs(self) -> list[str]:
        return [m for _, ms in self.topics for m in ms]


def _markov_tables(rng: np.random.Generator, order: int, concentration: float = 0.15) -> np.ndarray:
    k = len(BASE_ALPHABET)
    probs = rng.dirichlet(np.full(k, concentration), size=k ** order)
    return np.cumsum(probs, axis=1)


def _markov_text(rng: np.random.Generator, cum: np.ndarray, order: int, n: int) -> list[int]:
    k = len(BASE_ALPHABET)
    state = [int(s) for s in rng.integers(0, k, size=order)]
    out = []
    u = rng.random(n)
    for i in range(n):
        idx = 0
        for s in state:
            idx = idx * k + s
        c = int(np.searchsorted(cum[idx], u[i], side="right"))
        c = min(c, k - 1)
        out.append(c)
        state = state[1:] + [c]
    return out


def generate_corpus(seed: int, n_chars: int, order: int = 2, topic_len: int = 2048,
                    motifs_per_topic: int = 1, motif_len: tuple[int, int] = (16, 32),
                    motif_gap: tuple[int, int] = (24, 56), motifs: bool = True) -> Corpus:
    """Character Markov text with per-topic motifs re-injected every ~64 chars.

    The transition tables are a pure function of (seed, order); each topic
    segment draws fresh motifs, so only text seen earlier in the same segment
    predicts them.
    """
    if not 1 <= order <= 3:
        raise UsageError(f"Markov order must be in [1, 3], got {order}")
    rng = np.random.default_rng([seed, order])
    cum = _markov_tables(rng, order)
    base = _markov_text(rng, cum, order, n_chars)
    text: list[str] = []
    topics: list[tuple[int, list[str]]] = []
    pos = 0
    n = 0
    topic: list[str] = []
    next_topic = 0
    next_motif = int(rng.integers(*motif_gap))
    while n < n_chars:
        if motifs and n >= next_topic:
            topic = ["".join(rng.choice(list(MOTIF_ALPHABET), size=int(rng.integers(motif_len[0], motif_len[1] + 1))))
                     for _ in range(motifs_per_topic)]
            topics.append((n, topic))
            next_topic = n + topic_len
        if motifs and n >= next_motif:
            piece = " " + topic[int(rng.integers(len(topic)))] + " "
            text.append(piece)
            n += len(piece)
            next_motif = n + int(rng.integers(*motif_gap))
            continue
        text.append(BASE_ALPHABET[base[pos]])
        pos += 1
        n += 1
    return Corpus("".join(text)[:n_chars], topics)


def gen_markov_corpus(seed: int, n_chars: int, order: int = 2) -> str:
    return generate_corpus(seed, n_chars, order).text


# -- passkey ---------------------------------------------------------------------

@dataclass
class PasskeySample:
    full_text: list[int]
    key: str
    key_span: tuple[int, int]
    query: list[int]
    answer: list[int]
    position: float = 0.0

    @property
    def prompt(self) -> list[int]:
        return self.full_text[: len(self.full_text) - len(self.answer)]

    def to_json(self) -> str:
        return json.dumps({
            "text": detokenize(self.full_text).decode("ascii"),
            "key": self.key, "key_start": self.key_span[0], "key_end": self.key_span[1],
            "query": detokenize(self.query).decode("ascii"),
            "answer": detokenize(self.answer).decode("ascii"),
        })

    @classmethod
    def from_json(cls, line: str) -> "PasskeySample":
        d = json.loads(line)
        return cls(byte_tokenize(d["text"]), d["key"], (d["key_start"], d["key_end"]),
                   byte_tokenize(d["query"]), byte_tokenize(d["answer"]))


def _filler(n: int, offset: int = 0) -> str:
    reps = (offset + n) // len(FILLER) + 2
    return (FILLER * reps)[offset: offset + n]


def gen_passkey_sample(total_len: int, key_digits: int = 5, position: float = 0.5,
                       seed: int = 0, running_len: int = 128) -> PasskeySample:
    """Filler text with one planted key inside the first total_len - running_len
    tokens; the question and gold answer close the running text."""
    if not 0.0 <= position <= 1.0:
        raise DataError("position must be in [0, 1]")
    if key_digits < 1:
        raise DataError("key_digits must be >= 1")
    rng = np.random.default_rng(seed)
    key = "".join(str(d) for d in rng.integers(0, 10, size=key_digits))
    needle = NEEDLE.format(key=key)
    answer = key
    context_len = total_len - running_len
    if running_len < len(QUESTION) + len(answer) + 8:
        raise DataError(f"running_len {running_len} too short for the question and answer")
    if context_len < len(needle):
        raise DataError(f"total_len {total_len} leaves no room for the needle")
    hay_len = total_len - len(needle) - len(QUESTION) - len(answer)
    at = round(position * (context_len - len(needle)))
    # snap back to a sentence start of the filler
    hay = _filler(hay_len)
    snapped = hay.rfind(". ", 0, at + 1)
    at = 0 if snapped < 0 or at == 0 else snapped + 2
    text = hay[:at] + needle + hay[at:] + QUESTION + answer
    tokens = byte_tokenize(text)
    assert len(tokens) == total_len
    key_start = at + NEEDLE.index("{key}")
    return PasskeySample(tokens, key, (key_start, key_start + key_digits),
                         byte_tokenize(QUESTION.split("?")[0] + "?"), byte_tokenize(answer), position)


def write_passkey_jsonl(path, samples: Sequence[PasskeySample]) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(s.to_json() + "\n")


def read_passkey_jsonl(path) -> list[PasskeySample]:
    with open(path) as f:
        return [PasskeySample.from_json(line) for line in f if line.strip()]
