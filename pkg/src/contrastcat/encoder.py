"""Small post-LN transformer encoder classifier with attribution taps.

Every forward pass can hand back the per-layer activations, the per-head
attention maps, and gradients of a class score with respect to both.
PAD positions are masked out as attention keys, so a padded sequence and
its unpadded prefix give the same prediction.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkernel as nk
from .corpus import PAD_ID, Corpus, TokenSequence, Vocab
from .errors import FormatError, InputError, InvariantError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CCATMDL\x00"
MODEL_VERSION = 1

GRADIENT_TARGETS = ("logit", "prob")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 64
    head_dim: int = 16
    ffn_dim: int = 128
    vocab_size: int = 128
    max_len: int = 32
    classes: int = 2
    seed: int = 0

    def __post_init__(self):
        counts = (self.layers, self.heads, self.model_dim, self.head_dim,
                  self.ffn_dim, self.vocab_size, self.max_len)
        if min(counts) < 1:
            raise InvariantError(f"all config counts must be >= 1: {self}")
        if self.classes < 2:
            raise InvariantError(f"need at least 2 classes, got {self.classes}")
        if self.model_dim != self.heads * self.head_dim:
            raise InvariantError(
                f"model_dim {self.model_dim} != heads {self.heads} x head_dim {self.head_dim}")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    n, f = cfg.model_dim, cfg.ffn_dim
    shapes = {"tok_emb": (cfg.vocab_size, n), "pos_emb": (cfg.max_len, n)}
    for l in range(cfg.layers):
        for w in "qkvo":
            shapes[f"l{l}.W{w}"] = (n, n)
            shapes[f"l{l}.b{w}"] = (1, n)
        shapes[f"l{l}.ln1_g"] = (1, n)
        shapes[f"l{l}.ln1_b"] = (1, n)
        shapes[f"l{l}.W1"] = (n, f)
        shapes[f"l{l}.b1"] = (1, f)
        shapes[f"l{l}.W2"] = (f, n)
        shapes[f"l{l}.b2"] = (1, n)
        shapes[f"l{l}.ln2_g"] = (1, n)
        shapes[f"l{l}.ln2_b"] = (1, n)
    shapes["head_W"] = (n, cfg.classes)
    shapes["head_b"] = (1, cfg.classes)
    return shapes


def init_params(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        base = name.split(".")[-1]
        if name == "tok_emb":
            params[name] = rng.normal(0.0, 1.0, shape)
        elif name == "pos_emb":
            params[name] = rng.normal(0.0, 0.1, shape)
        elif base.endswith("_g"):
            params[name] = np.ones(shape)
        elif base.startswith("b") or base.endswith("_b") or name == "head_b":
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    return params


class Encoder:
    """Weights plus config (and optionally the vocabulary it was trained on)."""

    def __init__(self, config: EncoderConfig, params=None, vocab: Vocab | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        self.vocab = vocab
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            raise InvariantError("parameter set does not match config")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise InvariantError(f"{k}: shape {self.params[k].shape} != {shape}")

    @classmethod
    def for_corpus(cls, corpus: Corpus, **overrides) -> "Encoder":
        cfg = EncoderConfig(vocab_size=len(corpus.vocab), max_len=corpus.max_len,
                            classes=corpus.classes, **overrides)
        return cls(cfg, vocab=corpus.vocab)

    def predict_proba(self, ids) -> np.ndarray:
        """Class probabilities for a ``B x T`` id batch (no tape)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        logits, _, _ = run(self, ids)
        return _softmax(logits.value)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_model(self, buf)
        return buf.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layer(p, l, x, key_mask, cfg: EncoderConfig):
    B, T, n = x.shape
    H, d = cfg.heads, cfg.head_dim

    def heads(t):
        return nk.swapaxes(nk.reshape(t, (B, T, H, d)), 1, 2)

    q = heads(nk.add(nk.matmul(x, p[f"l{l}.Wq"]), p[f"l{l}.bq"]))
    k = heads(nk.add(nk.matmul(x, p[f"l{l}.Wk"]), p[f"l{l}.bk"]))
    v = heads(nk.add(nk.matmul(x, p[f"l{l}.Wv"]), p[f"l{l}.bv"]))
    scores = nk.matmul(q, nk.swapaxes(k, -1, -2))
    att = nk.softmax_rows(scores, 1.0 / np.sqrt(d), key_mask[:, None, None, :])
    ctx = nk.reshape(nk.swapaxes(nk.matmul(att, v), 1, 2), (B, T, n))
    proj = nk.add(nk.matmul(ctx, p[f"l{l}.Wo"]), p[f"l{l}.bo"])
    h = nk.layernorm(nk.add(proj, x), p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
    ff = nk.gelu(nk.add(nk.matmul(h, p[f"l{l}.W1"]), p[f"l{l}.b1"]))
    ff = nk.add(nk.matmul(ff, p[f"l{l}.W2"]), p[f"l{l}.b2"])
    out = nk.layernorm(nk.add(ff, h), p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
    return out, att


def run(model: Encoder, ids: np.ndarray, params=None, tape: nk.Tape | None = None,
        start_layer: int = 0, start_activation=None):
    """Batched forward over ``B x T`` ids.

    Returns ``(logits, activations, attentions)`` as tensors. With
    ``start_layer=s`` and ``start_activation=A`` the layers before ``s`` are
    skipped and ``A`` stands in for ``A^s``, the output of the ``s``-th layer
    (1-based); finite-difference checks perturb activations this way.
    """
    cfg = model.config
    p = model.params if params is None else params
    B, T = ids.shape
    if T > cfg.max_len:
        raise InputError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError("token id outside vocabulary")
    key_mask = ids != PAD_ID
    activations, attentions = [], []
    if start_activation is None:
        x = nk.add(nk.embedding(p["tok_emb"], ids), nk.getitem(p["pos_emb"], slice(0, T)))
        if tape is not None:
            tape.watch(x)
    else:
        x = start_activation
    for l in range(start_layer, cfg.layers):
        x, att = _layer(p, l, x, key_mask, cfg)
        activations.append(x)
        attentions.append(att)
    cls_vec = nk.getitem(x, (slice(None), 0))
    logits = nk.add(nk.matmul(cls_vec, p["head_W"]), p["head_b"])
    if not np.all(np.isfinite(logits.value)):
        raise InvariantError("non-finite logits")
    return logits, activations, attentions


@dataclass
class ForwardTrace:
    ids: np.ndarray
    activations: list  # per layer, T x n
    attentions: list  # per layer, H x T x T
    logits: np.ndarray
    probs: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))


@dataclass
class GradientTrace:
    grads: list  # per layer, T x n
    target_class: int
    target: str = "logit"
    attention_grads: list = field(default_factory=list)  # per layer, H x T x T


def _as_ids(model: Encoder, tokens) -> np.ndarray:
    if isinstance(tokens, TokenSequence):
        tokens = tokens.trimmed().ids
    ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    if ids.shape[1] > model.config.max_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_len {model.config.max_len}")
    return ids


def forward(model: Encoder, tokens) -> ForwardTrace:
    """Untaped forward over the unpadded span of ``tokens``."""
    ids = _as_ids(model, tokens)
    logits, acts, atts = run(model, ids)
    lv = logits.value[0]
    return ForwardTrace(ids[0], [a.value[0] for a in acts], [a.value[0] for a in atts],
                        lv, _softmax(lv))


def trace_and_gradients(model: Encoder, tokens, c: int, target: str = "logit"):
    """One forward + one backward: the trace and ``d f_c / d A^l`` for all layers.

    ``target="logit"`` differentiates the pre-softmax logit of ``c``;
    ``"prob"`` differentiates its softmax probability.
    """
    if not 0 <= c < model.config.classes:
        raise InputError(f"class id {c} out of range [0, {model.config.classes})")
    if target not in GRADIENT_TARGETS:
        raise InputError(f"gradient target must be one of {GRADIENT_TARGETS}")
    ids = _as_ids(model, tokens)
    tape = nk.Tape()
    logits, acts, atts = run(model, ids, tape=tape)
    if target == "logit":
        score = nk.getitem(logits, (0, c))
    else:
        score = nk.getitem(nk.softmax_rows(logits), (0, c))
    tape.backward(score)
    n = model.config.model_dim

    def grad_of(t, shape):
        return np.zeros(shape) if t.grad is None else t.grad[0]

    lv = logits.value[0]
    trace = ForwardTrace(ids[0], [a.value[0] for a in acts], [a.value[0] for a in atts],
                         lv, _softmax(lv))
    grads = GradientTrace(
        grads=[grad_of(a, (ids.shape[1], n)) for a in acts],
        target_class=c,
        target=target,
        attention_grads=[grad_of(a, a.value.shape[1:]) for a in atts],
    )
    return trace, grads


def class_gradients(model: Encoder, tokens, c: int, target: str = "logit") -> GradientTrace:
    return trace_and_gradients(model, tokens, c, target)[1]


def logits_from_layer(model: Encoder, ids, layer: int, activation: np.ndarray) -> np.ndarray:
    """Logits given the output of (1-based) layer ``layer``; later layers rerun."""
    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    x = nk.Tensor(np.asarray(activation, dtype=np.float64)[None])
    logits, _, _ = run(model, ids, start_layer=layer, start_activation=x)
    return logits.value[0]


def batch_activations(model: Encoder, seqs, chunk: int = 256):
    """Per-sequence activation stacks (trimmed) and probabilities, batched."""
    out_acts, out_probs = [], []
    for start in range(0, len(seqs), chunk):
        part = [s.trimmed() for s in seqs[start:start + chunk]]
        T = max(len(s.ids) for s in part)
        ids = np.full((len(part), T), PAD_ID, dtype=np.int64)
        for i, s in enumerate(part):
            ids[i, :len(s.ids)] = s.ids
        logits, acts, _ = run(model, ids)
        probs = _softmax(logits.value)
        for i, s in enumerate(part):
            out_acts.append([a.value[i, :len(s.ids)].copy() for a in acts])
            out_probs.append(probs[i])
    return out_acts, np.asarray(out_probs)


def padded_ids(seqs, length: int | None = None) -> np.ndarray:
    T = length or max(len(s.ids) for s in seqs)
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        row = s.ids[:T]
        ids[i, :len(row)] = row
    return ids


def batched_probs(model, seqs, chunk: int = 512) -> np.ndarray:
    parts = []
    for start in range(0, len(seqs), chunk):
        part = [s.trimmed() for s in seqs[start:start + chunk]]
        parts.append(model.predict_proba(padded_ids(part)))
    return np.concatenate(parts) if parts else np.zeros((0, model.config.classes))


@dataclass
class TrainingReport:
    train_accuracy: float
    test_accuracy: float
    losses: list
    epochs: int
    seconds: float

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


def accuracy(model: Encoder, seqs) -> float:
    if not seqs:
        return float("nan")
    probs = batched_probs(model, list(seqs))
    labels = np.asarray([s.label for s in seqs])
    return float((probs.argmax(axis=1) == labels).mean())


def train(model: Encoder, corpus: Corpus, hp: TrainParams = TrainParams()) -> TrainingReport:
    """Adam on mean cross-entropy; updates ``model.params`` in place."""
    if not corpus.train:
        raise InputError("empty training split")
    for s in corpus.train:
        if s.label is None or not 0 <= s.label < model.config.classes:
            raise InputError(f"bad label {s.label!r}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(hp.seed)
    train_seqs = [s.trimmed() for s in corpus.train]
    labels = np.asarray([s.label for s in train_seqs])
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    losses = []
    for epoch in range(hp.epochs):
        order = rng.permutation(len(train_seqs))
        epoch_loss = 0.0
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            ids = padded_ids([train_seqs[i] for i in idx])
            tape = nk.Tape()
            leaves = {k: tape.leaf(w) for k, w in model.params.items()}
            logits, _, _ = run(model, ids, params=leaves)
            loss = nk.cross_entropy(logits, labels[idx])
            tape.backward(loss)
            step += 1
            for k, leaf in leaves.items():
                g = leaf.grad if leaf.grad is not None else 0.0
                m[k] = hp.beta1 * m[k] + (1 - hp.beta1) * g
                v[k] = hp.beta2 * v[k] + (1 - hp.beta2) * g * g
                mhat = m[k] / (1 - hp.beta1 ** step)
                vhat = v[k] / (1 - hp.beta2 ** step)
                model.params[k] = model.params[k] - hp.lr * mhat / (np.sqrt(vhat) + hp.eps)
            epoch_loss += float(loss.value) * len(idx)
        losses.append(epoch_loss / len(order))
        log.info("epoch %d loss %.4f", epoch + 1, losses[-1])
    return TrainingReport(
        train_accuracy=accuracy(model, corpus.train),
        test_accuracy=accuracy(model, corpus.test),
        losses=losses,
        epochs=hp.epochs,
        seconds=time.perf_counter() - t0,
    )


def write_model(model: Encoder, fh) -> None:
    header = {"config": asdict(model.config),
              "vocab": model.vocab.itos if model.vocab is not None else None}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(MODEL_MAGIC)
    fh.write(struct.pack("<II", MODEL_VERSION, len(blob)))
    fh.write(blob)
    for name, shape in param_shapes(model.config).items():
        fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def read_model(data: bytes) -> Encoder:
    if len(data) < len(MODEL_MAGIC) + 8 or data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    off = len(MODEL_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    if off + hlen > len(data):
        raise FormatError("truncated model header")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt model header: {exc}") from exc
    off += hlen
    cfg = EncoderConfig(**header["config"])
    params = {}
    for name, shape in param_shapes(cfg).items():
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(data):
            raise FormatError(f"truncated model file at {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off) \
            .astype(np.float64).reshape(shape)
        off += nbytes
    if off != len(data):
        raise FormatError("trailing bytes after model weights")
    vocab = Vocab.from_list(header["vocab"]) if header.get("vocab") else None
    return Encoder(cfg, params, vocab)


def save_model(model: Encoder, path) -> None:
    with open(path, "wb") as fh:
        write_model(model, fh)


def load_model(path) -> Encoder:
    with open(path, "rb") as fh:
        return read_model(fh.read())


def file_fingerprint(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
