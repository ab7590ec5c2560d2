"""Faithfulness metrics and the rank-correlation confidence test; also ablation sweeps and PCA export."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attribution import (AttributionMap, att_grad_maps, averaged_attention, cat_maps,
                          raw_attention_map, rollout_map)
from .corpus import PAD_ID
from .encoder import batched_probs, forward, trace_and_gradients
from .errors import ExportError, InputError
from .reflib import build_library, reference_for, sample_references_online
from .refine import (RHO_RULES, RefinementConfig, ablation_references, refine)

log = logging.getLogger(__name__)

K_GRID = tuple(range(10, 100, 10))
ORDERS = ("morf", "lerf")
METRICS = ("aopc", "lodds")
METHODS = ("rawatt", "rollout", "attgrads", "attxgrads", "cat", "attcat", "contrast-cat")
PROB_FLOOR = 1e-12
THREADS_ENV = "CONTRASTCAT_THREADS"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map; uses a thread pool when CONTRASTCAT_THREADS > 1."""
    workers = thread_count()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


class Attributor:
    """Computes any of :data:`METHODS` for one input from a single forward/backward pass."""

    def __init__(self, model, library=None, config: RefinementConfig = RefinementConfig()):
        self.model = model
        self.library = library
        self.config = config

    def prepare(self, seq, c):
        seq = seq.trimmed()
        trace, grads = trace_and_gradients(self.model, seq, c, self.config.target)
        return seq, trace, grads

    def maps(self, seq, c, methods=METHODS, refs=None, count=None, layers=None) -> dict:
        seq, trace, grads = self.prepare(seq, c)
        rankable = seq.ordinary_mask()
        abar = averaged_attention(trace, self.config.aggregation)
        out = {}
        if "rawatt" in methods:
            out["rawatt"] = raw_attention_map(trace, rankable)
        if "rollout" in methods:
            out["rollout"] = rollout_map(trace, rankable)
        if "attgrads" in methods or "attxgrads" in methods:
            out["attgrads"], out["attxgrads"] = att_grad_maps(trace, grads, rankable)
        if "cat" in methods or "attcat" in methods:
            out["cat"], out["attcat"] = cat_maps(trace, grads, abar, rankable)
        if "contrast-cat" in methods:
            if refs is None:
                refs = self.library.for_class(c, count)
            out["contrast-cat"] = refine(self.model, seq, c, refs, self.config, layers,
                                         (trace, grads)).map
        for m in out.values():
            m.target_class = c
        return {m: out[m] for m in methods}

    def method(self, name: str):
        """``(seq, c) -> AttributionMap`` for a single method."""
        return lambda seq, c: self.maps(seq, c, (name,))[name]


def removal_count(n_ordinary: int, k: float) -> int:
    """Tokens removed at ``k`` percent: rounded up, at least one."""
    return max(1, -(-int(round(k * n_ordinary)) // 100)) if n_ordinary else 0


def perturbed_ids(seq, amap: AttributionMap, k: float, order: str) -> np.ndarray:
    seq = seq.trimmed()
    ids = seq.array()
    ranking = amap.order(descending=(order == "morf"))
    ids[ranking[:removal_count(seq.n_ordinary, k)]] = PAD_ID
    return ids


def perturbation_probs(model, seq, amap, c, grid=K_GRID, orders=ORDERS):
    """``(y, {order: array over grid of perturbed probabilities})`` from one batched forward."""
    seq = seq.trimmed()
    rows = [seq.array()]
    for order in orders:
        rows.extend(perturbed_ids(seq, amap, k, order) for k in grid)
    p = model.predict_proba(np.stack(rows))[:, c]
    out, i = {}, 1
    for order in orders:
        out[order] = p[i:i + len(grid)]
        i += len(grid)
    return p[0], out


def _check_order(order):
    if order not in ORDERS:
        raise InputError(f"order must be one of {ORDERS}")


def _pairs(model, samples, maps, classes, k, order):
    _check_order(order)
    if not 0 < k < 100:
        raise InputError(f"k must be in (0, 100), got {k}")
    res = parallel_map(lambda t: perturbation_probs(model, t[0], t[1], t[2], (k,), (order,)),
                       list(zip(samples, maps, classes)))
    y = np.array([r[0] for r in res])
    yt = np.array([r[1][order][0] for r in res])
    return y, yt


def aopc_value(y, yt) -> float:
    return float(np.mean(np.asarray(y) - np.asarray(yt)))


def lodds_value(y, yt) -> float:
    y = np.maximum(np.asarray(y, dtype=np.float64), PROB_FLOOR)
    yt = np.maximum(np.asarray(yt, dtype=np.float64), PROB_FLOOR)
    return float(np.mean(np.log(yt / y)))


def aopc(model, samples, maps, classes, k, order="morf") -> float:
    return aopc_value(*_pairs(model, samples, maps, classes, k, order))


def lodds(model, samples, maps, classes, k, order="morf") -> float:
    return lodds_value(*_pairs(model, samples, maps, classes, k, order))


@dataclass
class PerturbationCurve:
    metric: str
    order: str
    grid: tuple
    values: list
    auc: float = field(init=False)

    def __post_init__(self):
        grid = list(self.grid)
        if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 10 or grid[-1] > 90:
            raise InputError(f"k grid must increase strictly within [10, 90]: {grid}")
        self.auc = float(np.mean(self.values))


def curves_from_probs(y, perturbed, grid=K_GRID) -> dict:
    """All (metric, order) curves from per-sample probabilities.

    ``perturbed[order]`` is an ``N x len(grid)`` array.
    """
    out = {}
    for order, yt in perturbed.items():
        out[("aopc", order)] = PerturbationCurve(
            "aopc", order, tuple(grid), [aopc_value(y, yt[:, j]) for j in range(len(grid))])
        out[("lodds", order)] = PerturbationCurve(
            "lodds", order, tuple(grid), [lodds_value(y, yt[:, j]) for j in range(len(grid))])
    return out


def evaluate_maps(model, samples, maps, classes, grid=K_GRID, orders=ORDERS) -> dict:
    res = parallel_map(lambda t: perturbation_probs(model, *t, grid, orders),
                       list(zip(samples, maps, classes)))
    y = np.array([r[0] for r in res])
    perturbed = {o: np.stack([r[1][o] for r in res]) for o in orders}
    return curves_from_probs(y, perturbed, grid)


def curve_and_auc(metric, model, samples, maps, classes, order="morf", grid=K_GRID) -> PerturbationCurve:
    if metric not in METRICS:
        raise InputError(f"metric must be one of {METRICS}")
    _check_order(order)
    return evaluate_maps(model, samples, maps, classes, grid, (order,))[(metric, order)]


@dataclass
class EvalReport:
    curves: dict  # method -> {(metric, order): PerturbationCurve}
    n_samples: int
    fingerprints: dict
    seconds: float = 0.0

    def auc_rows(self):
        rows = []
        for method, curves in self.curves.items():
            for (metric, order), cv in curves.items():
                rows.append({"method": method, "metric": metric, "order": order,
                             "auc": cv.auc, "abs_auc": abs(cv.auc)})
        return rows

    def curve_rows(self):
        rows = []
        for method, curves in self.curves.items():
            for (metric, order), cv in curves.items():
                for k, v in zip(cv.grid, cv.values):
                    rows.append({"method": method, "metric": metric, "order": order,
                                 "k": k, "value": v})
        return rows

    def auc(self, method, metric="aopc", order="morf") -> float:
        return self.curves[method][(metric, order)].auc


def predicted_classes(model, samples) -> list:
    return [int(c) for c in batched_probs(model, list(samples)).argmax(axis=1)]


def evaluate(model, samples, attributor: Attributor, methods=METHODS, grid=K_GRID,
             classes=None) -> EvalReport:
    """Every method on the identical sample set, each explaining the predicted class."""
    t0 = time.perf_counter()
    samples = [s.trimmed() for s in samples]
    if classes is None:
        classes = predicted_classes(model, samples)
    all_maps = parallel_map(lambda t: attributor.maps(t[0], t[1], methods), list(zip(samples, classes)))
    curves = {m: evaluate_maps(model, samples, [mp[m] for mp in all_maps], classes, grid)
              for m in methods}
    fps = {"model": model.fingerprint()}
    if attributor.library is not None:
        fps["library_model"] = attributor.library.fingerprint
    return EvalReport(curves, len(samples), fps, time.perf_counter() - t0)


def kendall_tau(perm_a, perm_b) -> float:
    """Kendall tau-a between two equal-length sequences (no ties expected)."""
    a = np.asarray(perm_a, dtype=np.float64)
    b = np.asarray(perm_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"length mismatch: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise InputError("need at least two elements")
    iu = np.triu_indices(n, 1)
    sa = np.sign(a[:, None] - a[None, :])[iu]
    sb = np.sign(b[:, None] - b[None, :])[iu]
    return float((sa * sb).sum() / (n * (n - 1) / 2))


def confidence_test(model, samples, method, classes=None) -> float:
    """Mean Kendall tau between descending token orders for the predicted class and the next class.

    ``method`` is a callable ``(seq, c) -> AttributionMap``. Inputs with fewer
    than two ordinary tokens carry no ordering and are skipped.
    """
    C = model.config.classes
    samples = [s.trimmed() for s in samples if s.n_ordinary >= 2]
    if classes is None:
        classes = predicted_classes(model, samples)

    def one(t):
        seq, c = t
        pa = method(seq, c).order()
        pb = method(seq, (c + 1) % C).order()
        return kendall_tau(pa, pb)

    taus = parallel_map(one, list(zip(samples, classes)))
    return float(np.mean(taus))


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepContext:
    """Per-sample traces shared by every configuration of a sweep."""

    model: object
    corpus: object
    samples: list
    classes: list
    library: object
    config: RefinementConfig
    grid: tuple = K_GRID
    prepared: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = [s.trimmed() for s in self.samples]
        if not self.prepared:
            self.prepared = [trace_and_gradients(self.model, s, c, self.config.target)
                             for s, c in zip(self.samples, self.classes)]

    def contrast_maps(self, refs_for, config=None, layers=None):
        """``refs_for(i, c)`` returns the reference list for sample ``i``."""
        config = config or self.config

        def one(i):
            s, c = self.samples[i], self.classes[i]
            return refine(self.model, s, c, refs_for(i, c), config, layers, self.prepared[i]).map

        return parallel_map(one, range(len(self.samples)))

    def score(self, maps) -> dict:
        curves = evaluate_maps(self.model, self.samples, maps, self.classes, self.grid)
        return {f"{metric}_{order}": curves[(metric, order)].auc
                for metric in METRICS for order in ORDERS}


def _row(name, value, scores):
    row = {name: value}
    row.update(scores)
    row["abs_lodds_morf"] = abs(scores["lodds_morf"])
    return row


def gamma_sweep(ctx: SweepContext, gammas=(0.1, 0.01, 0.001), K: int = 30):
    train_probs = batched_probs(ctx.model, list(ctx.corpus.train))
    rows = []
    for g in gammas:
        lib = build_library(ctx.model, ctx.corpus, g, K, probs=train_probs)
        maps = ctx.contrast_maps(lambda i, c: lib.for_class(c))
        rows.append(_row("gamma", g, ctx.score(maps)))
    return rows


def layer_sweep(ctx: SweepContext):
    """Layer sets ending at the penultimate layer, growing downward, then all layers."""
    L = ctx.model.config.layers
    sets = [list(range(L - 1 - m, L - 1)) for m in range(1, L)] if L > 1 else []
    sets.append(list(range(L)))
    rows = []
    for layers in sets:
        maps = ctx.contrast_maps(lambda i, c: ctx.library.for_class(c), layers=layers)
        label = "all" if len(layers) == L else "+".join(str(l + 1) for l in layers)
        rows.append(_row("layers", label, ctx.score(maps)))
    return rows


def refcount_sweep(ctx: SweepContext, counts=(0, 1, 5, 10, 15, 20, 25, 30)):
    rows = []
    for n in counts:
        maps = ctx.contrast_maps(lambda i, c: ctx.library.for_class(c, n))
        rows.append(_row("references", n, ctx.score(maps)))
    return rows


def rho_sweep(ctx: SweepContext, rules=RHO_RULES):
    rows = []
    for rule in rules:
        cfg = RefinementConfig(ctx.config.fraction, rule, ctx.config.removal,
                               ctx.config.target, ctx.config.aggregation)
        maps = ctx.contrast_maps(lambda i, c: ctx.library.for_class(c), config=cfg)
        rows.append(_row("rule", rule, ctx.score(maps)))
    return rows


def mode_sweep(ctx: SweepContext, seed: int = 0, K: int = 30):
    train_probs = batched_probs(ctx.model, list(ctx.corpus.train))
    rows = []
    for mode in ("random", "same", "contrasting"):
        if mode == "contrasting":
            refs_for = lambda i, c: ctx.library.for_class(c)  # noqa: E731
        else:
            refs_for = (lambda m: lambda i, c: ablation_references(
                ctx.model, ctx.corpus, c, m, seed + i, K, train_probs))(mode)
        rows.append(_row("mode", mode, ctx.score(ctx.contrast_maps(refs_for))))
    return rows


def library_vs_online(ctx: SweepContext, n: int | None = None, seed: int = 0):
    """Full attribution time and AOPC for cached library references versus on-the-fly sampling.

    Both paths recompute the trace per input so the timings cover the whole attribution.
    """
    idx = range(min(n or len(ctx.samples), len(ctx.samples)))
    samples = [ctx.samples[i] for i in idx]
    classes = [ctx.classes[i] for i in idx]
    gamma, K = ctx.library.gamma, ctx.library.K

    def attribute(refs_for):
        t0 = time.perf_counter()
        maps = []
        for i, (s, c) in enumerate(zip(samples, classes)):
            pre = trace_and_gradients(ctx.model, s, c, ctx.config.target)
            maps.append(refine(ctx.model, s, c, refs_for(i, c), ctx.config, None, pre).map)
        return maps, time.perf_counter() - t0

    lib_maps, lib_s = attribute(lambda i, c: ctx.library.for_class(c))
    fly_maps, fly_s = attribute(lambda i, c: sample_references_online(
        ctx.model, ctx.corpus, c, gamma, K, seed + i))
    rows = []
    for name, maps, secs in (("library", lib_maps, lib_s), ("online", fly_maps, fly_s)):
        curves = evaluate_maps(ctx.model, samples, maps, classes, ctx.grid)
        rows.append({"path": name, "aopc_morf": curves[("aopc", "morf")].auc,
                     "aopc_lerf": curves[("aopc", "lerf")].auc, "seconds": secs})
    return rows


SWEEPS = {
    "gamma": gamma_sweep,
    "layers": layer_sweep,
    "references": refcount_sweep,
    "rho": rho_sweep,
    "mode": mode_sweep,
    "online": library_vs_online,
}


def ablation_sweep(ctx: SweepContext, which=tuple(SWEEPS)) -> dict:
    if not which:
        raise InputError("no sweeps requested")
    return {name: SWEEPS[name](ctx) for name in which}


def fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(rows, path) -> None:
    if not rows:
        raise ExportError(f"nothing to write to {path}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: fmt(v) for k, v in r.items()})


# ------------------------------------------------------------------- PCA

def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project onto the top two covariance eigenvectors (sign-fixed)."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ExportError("PCA needs at least two points")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if not np.any(np.abs(cov) > 0):
        raise ExportError("degenerate covariance: all points identical")
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    if top.shape[1] < 2:
        top = np.hstack([top, np.zeros((top.shape[0], 1))])
    signs = np.sign(top[np.argmax(np.abs(top), axis=0), range(top.shape[1])])
    signs[signs == 0] = 1.0
    return Xc @ (top * signs)


def token_mean_activations(model, samples, layers, library=None, classes=None) -> dict:
    """``{layer: N x n}`` token-averaged activations, optionally minus the mean aligned reference."""
    out = {l: [] for l in layers}
    if classes is None:
        classes = predicted_classes(model, samples)
    for seq, c in zip(samples, classes):
        seq = seq.trimmed()
        trace = forward(model, seq)
        T = len(seq.ids)
        mean_ref = None
        if library is not None:
            refs = [reference_for(e, T) for e in library.for_class(c)]
            mean_ref = [np.mean([r[l] for r in refs], axis=0) for l in range(len(trace.activations))]
        for l in layers:
            a = trace.activations[l]
            if mean_ref is not None:
                a = a - mean_ref[l]
            out[l].append(a.mean(axis=0))
    return {l: np.stack(v) for l, v in out.items()}


def pca_activation_export(model, samples, layers, with_contrast=False, library=None):
    """Rows ``{layer (1-based), x, y, label}`` of per-layer 2-D projections."""
    if len(samples) < 3:
        raise ExportError("PCA export needs at least 3 samples")
    if with_contrast and library is None:
        raise ExportError("contrasted export needs a reference library")
    feats = token_mean_activations(model, samples, layers, library if with_contrast else None)
    rows = []
    for l in layers:
        xy = pca_2d(feats[l])
        for (x, y), s in zip(xy, samples):
            rows.append({"layer": l + 1, "x": x, "y": y, "label": s.label})
    return rows
