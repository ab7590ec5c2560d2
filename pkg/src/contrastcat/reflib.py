"""Cached low-activation references per target class.

For target class ``c`` the library keeps up to ``K`` training sequences
whose class-``c`` probability is below ``gamma``, lowest first, together
with their full activation stacks.
"""

from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import TokenSequence
from .encoder import batch_activations, batched_probs
from .errors import CompatibilityError, FormatError, InputError, LibraryError

log = logging.getLogger(__name__)

LIBRARY_MAGIC = b"CCATLIB\x00"
LIBRARY_VERSION = 1
DEFAULT_GAMMA = 1e-3
DEFAULT_K = 30


@dataclass
class ReferenceEntry:
    tokens: TokenSequence
    activations: list  # per layer, T_r x n
    score: float
    source: int

    @property
    def length(self) -> int:
        return len(self.tokens.ids)


@dataclass
class ReferenceLibrary:
    entries: dict  # class id -> list[ReferenceEntry], ascending score
    gamma: float
    K: int
    fingerprint: str
    warnings: list = field(default_factory=list)

    def for_class(self, c: int, count: int | None = None) -> list:
        refs = self.entries.get(c, [])
        return refs if count is None else refs[:count]


def _entries_for(model, seqs, indices, scores):
    acts, _ = batch_activations(model, [seqs[i] for i in indices])
    return [ReferenceEntry(seqs[i].trimmed(), a, float(s), int(i))
            for i, a, s in zip(indices, acts, scores)]


def build_library(model, corpus, gamma: float = DEFAULT_GAMMA, K: int = DEFAULT_K,
                  probs: np.ndarray | None = None) -> ReferenceLibrary:
    """Scan the training split once and keep the ``K`` lowest-scoring references per class.

    ``probs`` may carry precomputed training-split probabilities (for sweeps
    that rebuild the library at several ``gamma`` values).
    """
    if not gamma > 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    if K < 1:
        raise InputError(f"K must be >= 1, got {K}")
    seqs = list(corpus.train)
    if probs is None:
        probs = batched_probs(model, seqs)
    entries, warnings = {}, []
    for c in range(model.config.classes):
        pc = probs[:, c]
        qualifying = np.flatnonzero(pc < gamma)
        if qualifying.size == 0:
            raise LibraryError(f"no training sequence has prob < {gamma:g} for class {c}; raise gamma")
        ranked = qualifying[np.lexsort((qualifying, pc[qualifying]))][:K]
        if ranked.size < K:
            msg = f"class {c}: only {ranked.size} references below gamma={gamma:g} (wanted {K})"
            log.warning(msg)
            warnings.append(msg)
        entries[c] = _entries_for(model, seqs, ranked, pc[ranked])
    return ReferenceLibrary(entries, float(gamma), int(K), model.fingerprint(), warnings)


def reference_positions(ref_len: int, T: int) -> np.ndarray:
    """Reference position serving each input position.

    Truncates when the reference is at least as long; otherwise CLS stays
    pinned and the reference's ordinary span repeats cyclically.
    """
    if T <= ref_len:
        return np.arange(T)
    idx = np.zeros(T, dtype=np.int64)
    span = ref_len - 1
    if span > 0:
        idx[1:] = 1 + (np.arange(T - 1) % span)
    return idx


def reference_for(entry: ReferenceEntry, T: int) -> list:
    idx = reference_positions(entry.length, T)
    return [a[idx] for a in entry.activations]


def sample_references_online(model, corpus, c: int, gamma: float = DEFAULT_GAMMA,
                             K: int = DEFAULT_K, seed: int = 0, chunk: int = 64) -> list:
    """``K`` uniformly random qualifying references, found by scanning a shuffled train split."""
    if not gamma > 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    if K < 1:
        raise InputError(f"K must be >= 1, got {K}")
    seqs = corpus.train
    order = list(range(len(seqs)))
    random.Random(seed).shuffle(order)
    picks = []
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        acts, probs = batch_activations(model, [seqs[i] for i in idx])
        for i, a, p in zip(idx, acts, probs):
            if p[c] < gamma:
                picks.append(ReferenceEntry(seqs[i].trimmed(), a, float(p[c]), i))
                if len(picks) == K:
                    return picks
    if not picks:
        raise LibraryError(f"no training sequence has prob < {gamma:g} for class {c}; raise gamma")
    log.warning("class %d: only %d on-the-fly references below gamma=%g", c, len(picks), gamma)
    return picks


def _fp_bytes(fp: str) -> bytes:
    raw = bytes.fromhex(fp)
    if len(raw) != 32:
        raise FormatError("fingerprint must be a sha256 digest")
    return raw


def save_library(lib: ReferenceLibrary, path) -> None:
    classes = sorted(lib.entries)
    any_entry = next(e for c in classes for e in lib.entries[c])
    L, n = len(any_entry.activations), any_entry.activations[0].shape[1]
    with open(path, "wb") as fh:
        fh.write(LIBRARY_MAGIC)
        fh.write(struct.pack("<IdI", LIBRARY_VERSION, lib.gamma, lib.K))
        fh.write(_fp_bytes(lib.fingerprint))
        fh.write(struct.pack("<III", len(classes), L, n))
        for c in classes:
            fh.write(struct.pack("<II", c, len(lib.entries[c])))
            for e in lib.entries[c]:
                text = e.tokens.text.encode("utf-8")
                label = -1 if e.tokens.label is None else e.tokens.label
                fh.write(struct.pack("<IdIiI", e.source, e.score, e.length, label, len(text)))
                fh.write(np.asarray(e.tokens.ids, dtype="<u4").tobytes())
                fh.write(np.asarray(e.tokens.special_mask, dtype="u1").tobytes())
                fh.write(text)
                fh.write(np.ascontiguousarray(np.stack(e.activations), dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError("truncated library file")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_library(path, model=None, fingerprint: str | None = None) -> ReferenceLibrary:
    """Read a library file; rejects it unless it was built for ``model``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(LIBRARY_MAGIC)) != LIBRARY_MAGIC:
        raise FormatError("not a reference library file (bad magic)")
    version, gamma, K = r.unpack("<IdI")
    if version != LIBRARY_VERSION:
        raise FormatError(f"unsupported library version {version}")
    fp = r.take(32).hex()
    expected = fingerprint or (model.fingerprint() if model is not None else None)
    if expected is not None and fp != expected:
        raise CompatibilityError("library was built for a different model "
                                 f"(library {fp[:12]}, model {expected[:12]})")
    n_classes, L, n = r.unpack("<III")
    entries = {}
    for _ in range(n_classes):
        c, count = r.unpack("<II")
        rows = []
        for _ in range(count):
            source, score, T_r, label, tlen = r.unpack("<IdIiI")
            ids = tuple(int(i) for i in np.frombuffer(r.take(4 * T_r), dtype="<u4"))
            mask = tuple(int(m) for m in np.frombuffer(r.take(T_r), dtype="u1"))
            text = r.take(tlen).decode("utf-8")
            acts = np.frombuffer(r.take(8 * L * T_r * n), dtype="<f8").reshape(L, T_r, n)
            seq = TokenSequence(ids, mask, text, None if label < 0 else label)
            rows.append(ReferenceEntry(seq, [a.astype(np.float64) for a in acts], score, source))
        entries[c] = rows
    if r.off != len(r.data):
        raise FormatError("trailing bytes in library file")
    return ReferenceLibrary(entries, gamma, K, fp)
