"""Token attribution maps: contrastive activation maps and the baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

AGGREGATIONS = ("column", "row")


@dataclass
class AttributionMap:
    """Raw per-position relevance plus which positions may be ranked.

    ``scores`` has one entry per position of the (unpadded) input, special
    positions included; ``rankable`` is False on CLS/PAD so they never enter
    an ordering.
    """

    scores: np.ndarray
    rankable: np.ndarray
    method: str
    target_class: int | None = None
    reference_id: object = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.rankable = np.asarray(self.rankable, dtype=bool)
        if self.scores.shape != self.rankable.shape:
            raise InputError("scores and rankable mask differ in shape")

    @property
    def normalized_view(self) -> np.ndarray:
        """Min-max rescaled copy in [0, 1] for rendering; specials are 0."""
        out = np.zeros_like(self.scores)
        if not self.rankable.any():
            return out
        vals = self.scores[self.rankable]
        lo, hi = vals.min(), vals.max()
        out[self.rankable] = (vals - lo) / (hi - lo) if hi > lo else 0.0
        return out

    def order(self, descending: bool = True) -> np.ndarray:
        """Rankable positions sorted by score; ties keep position order."""
        pos = np.flatnonzero(self.rankable)
        keys = -self.scores[pos] if descending else self.scores[pos]
        return pos[np.argsort(keys, kind="stable")]

    def with_scores(self, scores, method=None) -> "AttributionMap":
        return AttributionMap(scores, self.rankable.copy(), method or self.method,
                              self.target_class, self.reference_id)


def averaged_attention(trace, how: str = "column") -> np.ndarray:
    """Per-layer, per-token attention weights, shape ``L x T``.

    ``column``: attention received by token i, averaged over heads and
    query rows. ``row``: attention paid by token i, averaged the same way
    (uniform 1/T for row-stochastic maps).
    """
    if how not in AGGREGATIONS:
        raise InputError(f"aggregation must be one of {AGGREGATIONS}")
    axis = 1 if how == "column" else 2
    return np.stack([att.mean(axis=axis).mean(axis=0) for att in trace.attentions])


def _check_shapes(acts, grads, refs, abar):
    L = len(acts)
    if len(grads) != L or len(refs) != L or np.shape(abar)[0] != L:
        raise InputError(f"layer count mismatch: {L} activations, {len(grads)} grads, "
                         f"{len(refs)} refs, {np.shape(abar)[0]} attention rows")
    for l, (a, g, r) in enumerate(zip(acts, grads, refs)):
        if a.shape != g.shape or a.shape != np.shape(r):
            raise InputError(f"layer {l + 1}: shapes {a.shape}, {g.shape}, {np.shape(r)} disagree")
        if np.shape(abar)[1] != a.shape[0]:
            raise InputError(f"layer {l + 1}: attention length {np.shape(abar)[1]} != {a.shape[0]}")


def layer_contributions(acts, grads, refs, abar) -> np.ndarray:
    """``L x T`` table of attention-weighted gradient-times-contrast sums."""
    _check_shapes(acts, grads, refs, abar)
    return np.stack([abar[l] * (g * (a - r)).sum(axis=-1)
                     for l, (a, g, r) in enumerate(zip(acts, grads, refs))])


def contrast_scores(acts, grads, refs, abar, layers=None) -> np.ndarray:
    table = layer_contributions(acts, grads, refs, abar)
    if layers is not None:
        table = table[list(layers)]
    return table.sum(axis=0)


def contrast_map(trace, grads, refs, abar, rankable, layers=None, reference_id=None) -> AttributionMap:
    """Contrastive map against one reference stack ``refs`` (per layer T x n).

    ``layers`` (0-based indices) restricts the sum over layers.
    """
    scores = contrast_scores(trace.activations, grads.grads, refs, abar, layers)
    return AttributionMap(scores, rankable, "contrast", grads.target_class, reference_id)


def raw_attention_map(trace, rankable) -> AttributionMap:
    """Head-mean CLS row of the final layer's attention."""
    return AttributionMap(trace.attentions[-1][:, 0, :].mean(axis=0), rankable, "rawatt")


def rollout_matrix(attentions) -> np.ndarray:
    T = attentions[0].shape[-1]
    eye = np.eye(T)
    out = eye
    for att in attentions:
        a = 0.5 * att.mean(axis=0) + 0.5 * eye
        a = a / a.sum(axis=-1, keepdims=True)
        out = a @ out
    return out


def rollout_map(trace, rankable) -> AttributionMap:
    return AttributionMap(rollout_matrix(trace.attentions)[0], rankable, "rollout")


def att_grad_maps(trace, grads, rankable):
    """(Att-grads, AttxAtt-grads): column means of dF/dalpha and alpha * dF/dalpha."""
    g = np.stack(grads.attention_grads)  # L x H x T x T
    a = np.stack(trace.attentions)
    plain = g.mean(axis=(0, 1, 2))
    weighted = (a * g).mean(axis=(0, 1, 2))
    c = grads.target_class
    return (AttributionMap(plain, rankable, "attgrads", c),
            AttributionMap(weighted, rankable, "attxgrads", c))


def cat_maps(trace, grads, abar, rankable):
    """(CAT, AttCAT): gradient-times-activation sums, unweighted and attention-weighted."""
    per_layer = np.stack([(g * a).sum(axis=-1) for a, g in zip(trace.activations, grads.grads)])
    c = grads.target_class
    return (AttributionMap(per_layer.sum(axis=0), rankable, "cat", c),
            AttributionMap((abar * per_layer).sum(axis=0), rankable, "attcat", c))


def write_jsonl(records, path) -> None:
    """``records``: iterable of (tokens: list[str], AttributionMap, text)."""
    with open(path, "w", encoding="utf-8") as fh:
        for tokens, amap, text in records:
            raw = [float(s) if r else None for s, r in zip(amap.scores, amap.rankable)]
            fh.write(json.dumps({
                "text": text,
                "tokens": tokens,
                "method": amap.method,
                "class": amap.target_class,
                "reference": amap.reference_id,
                "scores": raw,
                "normalized": [float(x) for x in amap.normalized_view],
            }) + "\n")


def read_jsonl(path) -> list[dict]:
    """Inverse of :func:`write_jsonl`; each record gains an ``map`` entry."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            rankable = np.array([s is not None for s in rec["scores"]])
            scores = np.array([0.0 if s is None else s for s in rec["scores"]])
            rec["map"] = AttributionMap(scores, rankable, rec["method"], rec["class"], rec["reference"])
            out.append(rec)
    return out

