"""Tokenization and vocabularies, plus the synthetic sentiment corpus."""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
PAD_ID, CLS_ID, UNK_ID = 0, 1, 2
SPECIALS = (PAD, CLS, UNK)

# special_mask codes
ORDINARY, CLS_MARK, PAD_MARK = 0, 1, 2

DEFAULT_MAX_LEN = 32

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens=()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    @classmethod
    def from_list(cls, itos):
        if list(itos[: len(SPECIALS)]) != list(SPECIALS):
            raise InputError("vocabulary must start with the special tokens")
        return cls(itos[len(SPECIALS):])


@dataclass(frozen=True)
class TokenSequence:
    """One classified text: ``[CLS] tok tok ... [PAD] ...``.

    ``ids`` is usually padded to the corpus length; ``length`` is the
    unpadded span (CLS plus ordinary tokens).
    """

    ids: tuple
    special_mask: tuple
    text: str = ""
    label: int | None = None

    def __post_init__(self):
        if len(self.ids) != len(self.special_mask):
            raise InputError("ids and special_mask differ in length")
        if not self.ids or self.special_mask[0] != CLS_MARK:
            raise InputError("position 0 must be CLS")
        seen_pad = False
        for m in self.special_mask[1:]:
            if m == PAD_MARK:
                seen_pad = True
            elif m == CLS_MARK:
                raise InputError("CLS may only appear at position 0")
            elif seen_pad:
                raise InputError("ordinary token after PAD")

    @property
    def length(self) -> int:
        try:
            return self.special_mask.index(PAD_MARK)
        except ValueError:
            return len(self.special_mask)

    @property
    def n_ordinary(self) -> int:
        return self.length - 1

    def trimmed(self) -> "TokenSequence":
        n = self.length
        if n == len(self.ids):
            return self
        return TokenSequence(self.ids[:n], self.special_mask[:n], self.text, self.label)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    def ordinary_mask(self) -> np.ndarray:
        return np.asarray(self.special_mask) == ORDINARY


def encode(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN,
           label: int | None = None, pad: bool = True) -> TokenSequence:
    """Tokenize ``text`` into a CLS-prefixed sequence, right-truncated to ``max_len``."""
    toks = tokenize(text)[: max_len - 1]
    ids = [CLS_ID] + [vocab.id(t) for t in toks]
    mask = [CLS_MARK] + [ORDINARY] * len(toks)
    if pad:
        n_pad = max_len - len(ids)
        ids += [PAD_ID] * n_pad
        mask += [PAD_MARK] * n_pad
    return TokenSequence(tuple(ids), tuple(mask), text, label)


def detokenize(seq: TokenSequence, vocab: Vocab) -> list[str]:
    return [vocab.token(i) for i, m in zip(seq.ids, seq.special_mask) if m == ORDINARY]


@dataclass(frozen=True)
class Corpus:
    train: tuple
    test: tuple
    vocab: Vocab = field(compare=False)
    classes: int = 2
    max_len: int = DEFAULT_MAX_LEN

    def __post_init__(self):
        n = len(self.vocab)
        for seq in (*self.train, *self.test):
            if max(seq.ids) >= n:
                raise InputError("token id outside vocabulary")


def build_corpus(train_rows, test_rows, classes: int, max_len: int = DEFAULT_MAX_LEN) -> Corpus:
    """Build vocab from ``train_rows`` only, then encode both splits."""
    vocab = Vocab()
    for text, _ in train_rows:
        for t in tokenize(text)[: max_len - 1]:
            vocab.add(t)
    for _, label in (*train_rows, *test_rows):
        if not 0 <= label < classes:
            raise InputError(f"label {label} out of range for {classes} classes")
    train = tuple(encode(t, vocab, max_len, y) for t, y in train_rows)
    test = tuple(encode(t, vocab, max_len, y) for t, y in test_rows)
    return Corpus(train, test, vocab, classes, max_len)


def load_csv(path, text_column="text", label_column="label", split_column=None,
             classes=None, test_fraction=0.2, seed=0, max_len=DEFAULT_MAX_LEN) -> Corpus:
    """Read a ``text,label`` CSV.

    Rows go to the split named in ``split_column`` (values ``train``/``test``)
    when that column exists; otherwise a seeded shuffle holds out
    ``test_fraction`` of rows. A one-row file becomes a train-only corpus.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    for col in (text_column, label_column):
        if col not in header:
            raise InputError(f"missing column {col!r} in {path}")
    parsed = []
    for i, row in enumerate(rows):
        try:
            label = int(row[label_column])
        except (TypeError, ValueError) as exc:
            raise InputError(f"row {i}: bad label {row[label_column]!r}") from exc
        parsed.append((row[text_column] or "", label, row.get(split_column) if split_column else None))
    if not parsed:
        raise InputError(f"{path} has no rows")
    if classes is None:
        classes = max(2, max(p[1] for p in parsed) + 1)
    if split_column and split_column in header:
        train_rows = [(t, y) for t, y, s in parsed if s != "test"]
        test_rows = [(t, y) for t, y, s in parsed if s == "test"]
    else:
        order = list(range(len(parsed)))
        random.Random(seed).shuffle(order)
        n_test = int(len(parsed) * test_fraction) if len(parsed) > 1 else 0
        test_idx = set(order[:n_test])
        train_rows = [(t, y) for i, (t, y, _) in enumerate(parsed) if i not in test_idx]
        test_rows = [(t, y) for i, (t, y, _) in enumerate(parsed) if i in test_idx]
    return build_corpus(train_rows, test_rows, classes, max_len)


POSITIVE_CUES = (
    "charm", "charming", "fun", "delightful", "witty", "wonderful", "great",
    "masterful", "endearing", "exhilarating", "funny", "touching", "stunning",
    "brilliant", "lovely", "enjoyable",
)
NEGATIVE_CUES = (
    "slow", "fails", "disappointment", "boring", "dull", "flawed", "stupid",
    "inept", "unfunny", "tedious", "mess", "bland", "awful", "clumsy",
    "pointless", "weak",
)
FILLER = (
    "it", "is", "very", "the", "a", "movie", "film", "plot", "story", "this",
    "was", "and", "of", "with", "an", "really", "quite", "its", "cast", "score",
    "script", "at", "times", "overall", "just", "so", "director", "scenes",
    "ending", "acting", "feels", "seems", "new", "york", "comedy", "drama",
)

NEGATIVE, POSITIVE = 0, 1

# (majority cues, minority cues); every combination has a strict majority
_CUE_COUNTS = ((1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (1, 0), (2, 0))


def _synth_sentence(rng: random.Random, label: int) -> str:
    major, minor = rng.choice(_CUE_COUNTS)
    pos, neg = (major, minor) if label == POSITIVE else (minor, major)
    words = [rng.choice(POSITIVE_CUES) for _ in range(pos)]
    words += [rng.choice(NEGATIVE_CUES) for _ in range(neg)]
    words += [rng.choice(FILLER) for _ in range(rng.randint(2, 10))]
    rng.shuffle(words)
    return " ".join(words)


def synth_sentiment(seed: int = 0, n_train: int = 2000, n_test: int = 500,
                    max_len: int = DEFAULT_MAX_LEN) -> Corpus:
    """Deterministic binary sentiment corpus (0 = negative, 1 = positive).

    Labels alternate before a seeded shuffle, so each split is balanced to
    within one sentence. Texts are unique across both splits.
    """
    if n_train < 1 or n_test < 1:
        raise InputError("corpus sizes must be >= 1")
    rng = random.Random(seed)
    seen: set[str] = set()

    def draw(n):
        labels = [i % 2 for i in range(n)]
        rng.shuffle(labels)
        rows = []
        for y in labels:
            text = _synth_sentence(rng, y)
            for _ in range(1000):
                if text not in seen:
                    break
                text = _synth_sentence(rng, y)
            seen.add(text)
            rows.append((text, y))
        return rows

    train_rows = draw(n_train)
    test_rows = draw(n_test)
    return build_corpus(train_rows, test_rows, 2, max_len)


def cue_label(text: str) -> int | None:
    """Majority-cue label of ``text``; ``None`` when cues tie."""
    toks = tokenize(text)
    pos = sum(t in POSITIVE_CUES for t in toks)
    neg = sum(t in NEGATIVE_CUES for t in toks)
    if pos == neg:
        return None
    return POSITIVE if pos > neg else NEGATIVE


def split_sample(corpus: Corpus, n: int, seed: int = 0) -> list:
    """Uniform sample of ``n`` test sequences without replacement."""
    test = list(corpus.test)
    if n > len(test):
        log.warning("requested %d samples but test split has %d; using all", n, len(test))
        n = len(test)
    idx = random.Random(seed).sample(range(len(test)), n)
    return [test[i] for i in idx]


def export_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for split, seqs in (("train", corpus.train), ("test", corpus.test)):
            for seq in seqs:
                rec = {
                    "split": split,
                    "text": seq.text,
                    "label": seq.label,
                    "ids": list(seq.ids),
                    "tokens": [corpus.vocab.token(i) for i in seq.ids[: seq.length]],
                }
                fh.write(json.dumps(rec) + "\n")
