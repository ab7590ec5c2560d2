"""Multi-reference aggregation filtered by a token deletion test."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from .attribution import AttributionMap, averaged_attention, contrast_map
from .corpus import PAD_ID
from .encoder import batch_activations, batched_probs, trace_and_gradients
from .errors import InputError, LibraryError
from .reflib import ReferenceEntry, reference_for

RHO_RULES = ("mean-std", "mean", "mean+std")
REMOVAL_MODES = ("cumulative", "individual")
ABLATION_MODES = ("random", "same", "contrasting")


@dataclass(frozen=True)
class RefinementConfig:
    fraction: float = 0.5
    rule: str = "mean+std"
    removal: str = "cumulative"
    target: str = "logit"
    aggregation: str = "column"

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise InputError(f"deletion fraction must be in (0, 1], got {self.fraction}")
        if self.rule not in RHO_RULES:
            raise InputError(f"threshold rule must be one of {RHO_RULES}")
        if self.removal not in REMOVAL_MODES:
            raise InputError(f"removal mode must be one of {REMOVAL_MODES}")


@dataclass
class DropScore:
    drops: np.ndarray
    mean: float


@dataclass
class Refinement:
    map: AttributionMap
    candidates: list
    scores: list  # DropScore per candidate
    rho: float
    members: list  # indices into candidates
    fallback: bool = False


def deletion_steps(n_ordinary: int, fraction: float) -> int:
    return min(n_ordinary, max(1, math.ceil(round(fraction * n_ordinary, 9))))


def deletion_scores(model, tokens, maps, c: int, fraction: float = 0.5,
                    removal: str = "cumulative") -> list:
    """Deletion test for several maps of one input, in a single batched forward.

    Step ``s`` replaces the top-``s`` ranked tokens (cumulative) or only the
    ``s``-th ranked token (individual) of the original input with PAD.
    """
    if not 0 < fraction <= 1:
        raise InputError(f"deletion fraction must be in (0, 1], got {fraction}")
    seq = tokens.trimmed()
    if seq.n_ordinary == 0:
        raise InputError("input has no ordinary tokens to delete")
    steps = deletion_steps(seq.n_ordinary, fraction)
    base = seq.array()
    rows = [base]
    for amap in maps:
        order = amap.order(descending=True)
        for s in range(1, steps + 1):
            ids = base.copy()
            ids[order[:s] if removal == "cumulative" else order[s - 1]] = PAD_ID
            rows.append(ids)
    probs = model.predict_proba(np.stack(rows))[:, c]
    drops = (probs[0] - probs[1:]).reshape(len(maps), steps)
    return [DropScore(d, float(d.mean())) for d in drops]


def deletion_score(model, tokens, amap, c: int, fraction: float = 0.5,
                   removal: str = "cumulative") -> DropScore:
    return deletion_scores(model, tokens, [amap], c, fraction, removal)[0]


def threshold(scores, rule: str = "mean+std") -> float:
    s = np.asarray(scores, dtype=np.float64)
    mu, sd = s.mean(), s.std()
    return float({"mean-std": mu - sd, "mean": mu, "mean+std": mu + sd}[rule])


def mean_map(maps, method: str = "contrast-cat") -> AttributionMap:
    scores = np.mean(np.stack([m.scores for m in maps]), axis=0)
    first = maps[0]
    return AttributionMap(scores, first.rankable.copy(), method, first.target_class,
                          [m.reference_id for m in maps])


def refine(model, tokens, c: int, references, config: RefinementConfig = RefinementConfig(),
           layers=None, precomputed=None) -> Refinement:
    """Contrast against each reference, score each map by deletion, keep those at or above rho.

    ``references`` is a list of :class:`ReferenceEntry`; an empty list means a
    single all-zero reference. ``precomputed`` may supply ``(trace, grads)``.
    """
    seq = tokens.trimmed()
    trace, grads = precomputed or trace_and_gradients(model, seq, c, config.target)
    abar = averaged_attention(trace, config.aggregation)
    rankable = seq.ordinary_mask()
    T = len(seq.ids)
    if references:
        candidates = [contrast_map(trace, grads, reference_for(e, T), abar, rankable,
                                   layers, e.source) for e in references]
    else:
        zeros = [np.zeros_like(a) for a in trace.activations]
        candidates = [contrast_map(trace, grads, zeros, abar, rankable, layers, "zero")]
    scores = deletion_scores(model, seq, candidates, c, config.fraction, config.removal)
    S = [s.mean for s in scores]
    rho = threshold(S, config.rule)
    members = [i for i, s in enumerate(S) if s >= rho]
    fallback = not members
    if fallback:
        members = [int(np.argmax(S))]
    return Refinement(mean_map([candidates[i] for i in members]), candidates, scores,
                      rho, members, fallback)


def refine_and_aggregate(model, tokens, c: int, library, config: RefinementConfig = RefinementConfig(),
                         count: int | None = None, layers=None, precomputed=None) -> AttributionMap:
    """Final contrastive map for target ``c`` using the library's class-``c`` references."""
    if not any(library.entries.values()):
        raise LibraryError("reference library is empty")
    refs = library.for_class(c, count)
    if not refs and count != 0:
        raise LibraryError(f"library has no references for class {c}")
    return refine(model, tokens, c, refs, config, layers, precomputed).map


def _fresh_entries(model, corpus, indices) -> list:
    seqs = [corpus.train[i] for i in indices]
    acts, probs = batch_activations(model, seqs)
    return [ReferenceEntry(s.trimmed(), a, float(p.max()), int(i))
            for s, a, p, i in zip(seqs, acts, probs, indices)]


def ablation_references(model, corpus, c: int, mode: str, seed: int, K: int = 30,
                        train_probs=None) -> list:
    """References for the ``random`` (any training sequence) or ``same`` (predicted ``c``) modes."""
    rng = random.Random(seed)
    if mode == "random":
        pool = range(len(corpus.train))
    elif mode == "same":
        if train_probs is None:
            train_probs = batched_probs(model, list(corpus.train))
        pool = np.flatnonzero(train_probs.argmax(axis=1) == c).tolist()
        if not pool:
            raise LibraryError(f"no training sequence is predicted as class {c}")
    else:
        raise InputError(f"no sampled references for mode {mode!r}")
    picks = rng.sample(list(pool), min(K, len(pool)))
    return _fresh_entries(model, corpus, picks)


def ablation_variants(model, tokens, c: int, corpus, mode: str, seed: int = 0, library=None,
                      config: RefinementConfig = RefinementConfig(), K: int = 30,
                      train_probs=None, precomputed=None) -> AttributionMap:
    if mode not in ABLATION_MODES:
        raise InputError(f"mode must be one of {ABLATION_MODES}")
    if mode == "contrasting":
        if library is None:
            raise LibraryError("contrasting mode needs a reference library")
        return refine_and_aggregate(model, tokens, c, library, config, precomputed=precomputed)
    refs = ablation_references(model, corpus, c, mode, seed, K, train_probs)
    out = refine(model, tokens, c, refs, config, precomputed=precomputed).map
    out.method = f"contrast-cat[{mode}]"
    return out
