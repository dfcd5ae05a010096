"""Tokenization, prompt template, sequence packing, token categories and MC tasks."""
from __future__ import annotations

import enum
import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError

PAD, BOS, EOS, INST, INST_END, UNK = "[PAD]", "[BOS]", "[EOS]", "[INST]", "[/INST]", "[UNK]"
SPECIAL_TOKENS = (PAD, BOS, EOS, INST, INST_END, UNK)

_WORD_RE = re.compile(r"\w+|\s+|[^\w\s]", re.UNICODE)


class Vocabulary:
    """Bijective token <-> id map; special tokens occupy ids 0-5.

    ``mode`` is ``"char"`` (one token per character) or ``"word"`` (runs of
    word characters, runs of whitespace, single punctuation marks).
    """

    def __init__(self, tokens: Sequence[str], mode: str = "char"):
        if mode not in ("char", "word"):
            raise DataError(f"unknown tokenizer mode {mode!r}")
        self.mode = mode
        self.itos: list[str] = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, text: str, mode: str = "char") -> "Vocabulary":
        pieces = list(text) if mode == "char" else _WORD_RE.findall(text)
        return cls(sorted(set(pieces)), mode)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.mode == other.mode

    def id(self, token: str) -> int:
        return self.stoi[token]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 5

    def is_special(self, i: int) -> bool:
        return i < len(SPECIAL_TOKENS)

    def split(self, text: str) -> list[str]:
        return list(text) if self.mode == "char" else _WORD_RE.findall(text)

    def tokenize(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(p, unk) if p not in SPECIAL_TOKENS else unk for p in self.split(text)]

    def detokenize(self, ids: Sequence[int]) -> str:
        return "".join(self.itos[int(i)] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "tokens": self.itos}, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        raw = json.loads(text)
        tokens = raw["tokens"]
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("vocabulary file does not start with the reserved special tokens")
        return cls(tokens[len(SPECIAL_TOKENS):], raw.get("mode", "char"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            return cls.from_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from None


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.tokenize(text)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return vocab.detokenize(ids)


# ---------------------------------------------------------------------------
# Prompt template and packing
# ---------------------------------------------------------------------------
@dataclass
class MCTask:
    sys_prompt: str
    context: str
    continuations: list[str]
    gold: int
    task: str = "tasks"

    def __post_init__(self):
        if not self.continuations:
            raise DataError("a task needs at least one continuation")
        if not 0 <= self.gold < len(self.continuations):
            raise DataError(f"gold index {self.gold} out of range")

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "sys_prompt": self.sys_prompt, "context": self.context,
                           "continuations": self.continuations, "gold": self.gold})


def load_tasks(path) -> list[MCTask]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read task file {path}: {exc.strerror}") from None
    tasks = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            tasks.append(MCTask(sys_prompt=raw.get("sys_prompt", ""), context=raw["context"],
                                continuations=list(raw["continuations"]), gold=int(raw["gold"]),
                                task=raw.get("task", path.stem)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{n}: malformed task ({exc})") from None
    return tasks


def save_tasks(tasks: Sequence[MCTask], path) -> None:
    Path(path).write_text("".join(t.to_json() + "\n" for t in tasks), encoding="utf-8")


def build_prompt(task: MCTask, continuation_index: int, vocab: Vocabulary,
                 sys_prompt: str | None = None) -> tuple[list[int], tuple[int, int]]:
    """``[BOS] [INST] sys [/INST] context continuation [EOS]`` and the continuation span."""
    if not 0 <= continuation_index < len(task.continuations):
        raise ContractError(f"continuation index {continuation_index} out of range")
    sys_text = task.sys_prompt if sys_prompt is None else sys_prompt
    ids = [vocab.bos_id, vocab.id(INST)] + vocab.tokenize(sys_text) + [vocab.id(INST_END)]
    ids += vocab.tokenize(task.context)
    start = len(ids)
    ids += vocab.tokenize(task.continuations[continuation_index])
    end = len(ids)
    ids.append(vocab.eos_id)
    return ids, (start, end)


def pack_sequences(stream: Sequence[int], seq_len: int, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Cut a token stream into non-overlapping windows; the last one is padded.

    Returns ``(windows, mask)`` where ``mask`` is False on padding.
    """
    if seq_len < 2:
        raise ContractError("seq_len must be >= 2")
    stream = np.asarray(stream, dtype=np.int64)
    n = len(stream)
    rows = max(1, -(-n // seq_len))
    windows = np.full((rows, seq_len), pad_id, dtype=np.int64)
    mask = np.zeros((rows, seq_len), dtype=bool)
    windows.reshape(-1)[:n] = stream
    mask.reshape(-1)[:n] = True
    return windows, mask


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask


# ---------------------------------------------------------------------------
# Token categories
# ---------------------------------------------------------------------------
class TokenCategory(enum.IntEnum):
    SPECIAL_PUNCT = 0
    CONTENT = 1
    FUNCTION = 2
    NUM_SYM_OTHER = 3


CATEGORY_NAMES = ("special_punct", "content", "function", "num_sym_other")


def _word_list(name: str) -> frozenset[str]:
    text = resources.files("intglab").joinpath("resources", name).read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


@lru_cache(maxsize=None)
def function_words() -> frozenset[str]:
    return _word_list("function_words.txt")


@lru_cache(maxsize=None)
def interjections() -> frozenset[str]:
    return _word_list("interjections.txt")


def _all_chars(text: str, prefix: str) -> bool:
    return bool(text) and all(unicodedata.category(c).startswith(prefix) for c in text)


def categorize_token(text: str, is_special: bool = False) -> TokenCategory:
    """Heuristic stand-in for a POS tagger with the four coarse groups."""
    if is_special or text in SPECIAL_TOKENS:
        return TokenCategory.SPECIAL_PUNCT
    word = text.strip()
    if not word:
        return TokenCategory.NUM_SYM_OTHER  # whitespace
    if _all_chars(word, "P"):
        return TokenCategory.SPECIAL_PUNCT
    low = word.lower()
    if low in function_words():
        return TokenCategory.FUNCTION
    if low in interjections():
        return TokenCategory.NUM_SYM_OTHER
    if word.isalpha():
        return TokenCategory.CONTENT
    if any(c.isalpha() for c in word) and all(c.isalpha() or c in "-'" for c in word):
        return TokenCategory.CONTENT
    return TokenCategory.NUM_SYM_OTHER


def categorize_sequence(ids: Sequence[int], vocab: Vocabulary) -> list[TokenCategory]:
    """Category per token; in char mode each letter inherits the category of its word."""
    ids = [int(i) for i in ids]
    if vocab.mode == "word":
        return [categorize_token(vocab.itos[i], vocab.is_special(i)) for i in ids]
    out: list[TokenCategory | None] = [None] * len(ids)
    i = 0
    while i < len(ids):
        tok = ids[i]
        ch = vocab.itos[tok]
        if vocab.is_special(tok) or not (ch.isalnum() or ch in "'"):
            out[i] = categorize_token(ch, vocab.is_special(tok))
            i += 1
            continue
        j = i
        while j < len(ids) and not vocab.is_special(ids[j]) and (vocab.itos[ids[j]].isalnum()
                                                                   or vocab.itos[ids[j]] == "'"):
            j += 1
        cat = categorize_token("".join(vocab.itos[k] for k in ids[i:j]))
        for k in range(i, j):
            out[k] = cat
        i = j
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Multiple-choice scoring
# ---------------------------------------------------------------------------
def _logits_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "logits"):
        return model.logits
    return model


def sequence_perplexities(model, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """``exp(mean NLL)`` of each full sequence under teacher forcing."""
    from .training import token_nll

    batch, mask = pad_batch(seqs)
    logits = np.asarray(_logits_fn(model)(batch[:, :-1]))
    nll = token_nll(logits, batch[:, 1:])
    tmask = mask[:, 1:]
    mean_nll = (nll * tmask).sum(axis=1) / tmask.sum(axis=1)
    return np.exp(mean_nll)


def score_mc_task(model, task: MCTask, vocab: Vocabulary,
                  sys_prompt: str | None = None) -> tuple[int, list[float]]:
    """Predicted continuation (lowest perplexity, ties to the lowest index) and all perplexities."""
    seqs = [build_prompt(task, i, vocab, sys_prompt)[0] for i in range(len(task.continuations))]
    ppl = sequence_perplexities(model, seqs)
    return int(np.argmin(ppl)), [float(p) for p in ppl]
