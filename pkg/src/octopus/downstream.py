"""Server-side consumers of latent codes: task classifiers, adversaries, entropy."""
from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from . import quantizer as vq

VIEWS = ("public", "private", "both")
PROB_FLOOR = 1e-12


class EmptyDataError(ValueError):
    pass


class IdentityOverlapError(ValueError):
    pass


@dataclass
class ClassifierConfig:
    hidden: tuple = (256, 128)
    steps: int = 300
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    standardize: bool = True


class MultiHeadClassifier:
    """Shared affine/ReLU trunk feeding independent softmax heads and an optional sigmoid head."""

    def __init__(self, n_features, heads=(2,), multilabel=0, hidden=(256, 128), seed=0):
        rng = np.random.default_rng(seed)
        layers, width = [], n_features
        for i, h in enumerate(hidden):
            layers += [nx.Affine(width, h, rng, f"trunk{i}"), nx.ReLU()]
            width = h
        self.trunk = nx.LayerStack(layers, (n_features,))
        self.heads = [nx.Affine(width, c, rng, f"head{i}") for i, c in enumerate(heads)]
        self.sigmoid_head = nx.Affine(width, multilabel, rng, "multilabel") if multilabel else None
        self.n_features = n_features
        self.head_sizes = tuple(heads)
        self.multilabel = multilabel
        self.hidden = tuple(hidden)
        self.mean = np.zeros(n_features)
        self.scale = np.ones(n_features)

    def parameters(self):
        ps = self.trunk.parameters() + [p for h in self.heads for p in h.parameters()]
        return ps + (self.sigmoid_head.parameters() if self.sigmoid_head else [])

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def _prep(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if x.shape[1] != self.n_features:
            raise nx.ShapeError(f"classifier expects {self.n_features} features, got {x.shape[1]}")
        return (x - self.mean) / self.scale

    def forward(self, x, zero_heads=()):
        """List of logits, one array per softmax head (then the sigmoid head, if any)."""
        hidden = self.trunk.forward(self._prep(x))
        outs = []
        for i, head in enumerate(self.heads + ([self.sigmoid_head] if self.sigmoid_head else [])):
            outs.append(head.forward(np.zeros_like(hidden) if i in zero_heads else hidden))
        return outs

    def predict_proba(self, x, head=0):
        logits = self.forward(x)[head]
        return np.exp(nx.log_softmax(logits))

    def log2_proba(self, x, head=0):
        return log2_softmax(self.forward(x)[head])

    def predict(self, x, head=0):
        return self.forward(x)[head].argmax(axis=1)

    def accuracy(self, x, labels, head=0):
        labels = np.asarray(labels)
        return float(np.mean(self.predict(x, head) == labels))

    def loss_and_grads(self, x, labels, multilabels=None):
        hidden = self.trunk.forward(self._prep(x))
        total, g_hidden = 0.0, np.zeros_like(hidden)
        labels = np.asarray(labels).reshape(len(hidden), -1)
        for i, head in enumerate(self.heads):
            loss, g = nx.softmax_cross_entropy(head.forward(hidden), labels[:, i])
            total += loss
            g_hidden += head.backward(g)
        if self.sigmoid_head is not None:
            loss, g = nx.sigmoid_cross_entropy(self.sigmoid_head.forward(hidden), multilabels)
            total += loss
            g_hidden += self.sigmoid_head.backward(g)
        self.trunk.backward(g_hidden)
        return total

    # -------------------------------------------------------- serialization
    def to_bytes(self):
        cfg = json.dumps({"n_features": self.n_features, "heads": list(self.head_sizes),
                          "multilabel": self.multilabel, "hidden": list(self.hidden)}, sort_keys=True).encode()
        params = b"".join(p.value.astype("<f8").tobytes() for p in self.parameters())
        norm = self.mean.astype("<f8").tobytes() + self.scale.astype("<f8").tobytes()
        return b"OCTC" + struct.pack("<I", len(cfg)) + cfg + norm + params

    @classmethod
    def from_bytes(cls, buf):
        if buf[:4] != b"OCTC":
            raise ValueError("not a classifier blob")
        n = struct.unpack_from("<I", buf, 4)[0]
        cfg = json.loads(buf[8:8 + n])
        clf = cls(cfg["n_features"], cfg["heads"], cfg["multilabel"], cfg["hidden"])
        off = 8 + n
        f = clf.n_features
        clf.mean = np.frombuffer(buf, "<f8", f, off).copy()
        clf.scale = np.frombuffer(buf, "<f8", f, off + 8 * f).copy()
        off += 16 * f
        for p in clf.parameters():
            p.value[...] = np.frombuffer(buf, "<f8", p.size, off).reshape(p.shape)
            off += 8 * p.size
        if off != len(buf):
            raise ValueError("classifier blob has trailing bytes")
        return clf


def train_classifier(features, labels, config=None, heads=None, multilabels=None):
    """Minibatch Adam on summed cross entropy. ``labels`` is (N,) or (N, n_heads)."""
    config = config or ClassifierConfig()
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if len(x) == 0:
        raise EmptyDataError("cannot train a classifier on an empty set")
    y = np.asarray(labels, dtype=np.int64).reshape(len(x), -1)
    if heads is None:
        heads = tuple(int(y[:, i].max()) + 1 for i in range(y.shape[1]))
    ml = 0 if multilabels is None else np.asarray(multilabels).shape[1]
    clf = MultiHeadClassifier(x.shape[1], heads, ml, config.hidden, config.seed)
    if config.standardize:
        clf.mean = x.mean(axis=0)
        sd = x.std(axis=0)
        clf.scale = np.where(sd > 1e-8, sd, 1.0)
    rng = np.random.default_rng(config.seed + 1)
    params = clf.parameters()
    order, pos = rng.permutation(len(x)), 0
    bs = min(config.batch_size, len(x))
    for _ in range(config.steps):
        if pos + bs > len(x):
            order, pos = rng.permutation(len(x)), 0
        idx = order[pos:pos + bs]
        pos += bs
        ml_batch = None if multilabels is None else np.asarray(multilabels)[idx]
        clf.loss_and_grads(x[idx], y[idx], ml_batch)
        nx.adam_step(params, config.lr)
    return clf


# ------------------------------------------------------------- features

def latent_features(indices, codebook, mode="atoms"):
    """Public-only features: atom lookup flattened, or one-hot of the indices."""
    indices = np.asarray(indices)
    if mode == "atoms":
        return vq.lookup(indices, codebook).reshape(len(indices), -1)
    if mode == "onehot":
        flat = indices.reshape(len(indices), -1)
        out = np.zeros((len(indices), flat.shape[1] * codebook.K))
        rows = np.repeat(np.arange(len(indices)), flat.shape[1])
        cols = (np.arange(flat.shape[1]) * codebook.K)[None, :] + flat
        out[rows, cols.ravel()] = 1.0
        return out
    raise ValueError(f"unknown feature mode {mode!r}")


def train_latent_classifier(indices, codebook, labels, config=None, mode="atoms"):
    if len(indices) == 0:
        raise EmptyDataError("latent store is empty")
    return train_classifier(latent_features(indices, codebook, mode), labels, config)


def train_raw_baseline(samples, labels, config=None):
    if len(samples) == 0:
        raise EmptyDataError("raw training set is empty")
    return train_classifier(np.asarray(samples).reshape(len(samples), -1), labels, config)


def view_features(model, samples, private_labels, view, group_size=None):
    """Adversary input for one view of the released latents.

    ``public``: flattened quantised grid; ``private``: the group residual;
    ``both``: the two concatenated (everything a node could release).
    """
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}")
    feats = []
    for s in range(0, len(samples), 500):
        sl = slice(s, s + 500)
        split = model.split_latent(samples[sl], group_size, private_labels[sl])
        pub = split.public.quantized.reshape(len(split.public.quantized), -1)
        priv = split.private_per_sample()
        feats.append({"public": pub, "private": priv, "both": np.hstack([pub, priv])}[view])
    return np.vstack(feats)


# -------------------------------------------------------------- privacy

@dataclass
class PrivacyReport:
    view: str
    entropy_bits: float
    accuracy: float
    class_count: int
    n_test: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def log2_softmax(logits):
    """Base-2 log-probabilities; equal logits give exactly -log2(C)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted / math.log(2.0) - np.log2(np.exp(shifted).sum(axis=1, keepdims=True))


def _exact_mean(values):
    # mean over repeated values stays exact for constant predictors
    counts = Counter(np.asarray(values).tolist())
    n = len(values)
    return math.fsum(v * (c / n) for v, c in counts.items())


def entropy_from_log2(log2_probs, labels):
    """-mean log2 q(y|z) over the test set, probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyDataError("entropy needs a non-empty test set")
    lp = np.asarray(log2_probs)[np.arange(len(labels)), labels]
    return _exact_mean(-np.maximum(lp, math.log2(PROB_FLOOR)))


def conditional_entropy_bits(probs, labels):
    """Same quantity from plain probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyDataError("entropy needs a non-empty test set")
    p = np.maximum(np.asarray(probs, dtype=np.float64)[np.arange(len(labels)), labels], PROB_FLOOR)
    return _exact_mean(-np.log2(p))


class UniformAdversary:
    """Control predictor: identical logits for every class."""

    def __init__(self, class_count):
        self.class_count = class_count

    def log2_proba(self, x, head=0):
        return log2_softmax(np.zeros((len(x), self.class_count)))


def conditional_entropy(adversary, features, labels, view="public", class_count=None):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyDataError("entropy needs a non-empty test set")
    lp = adversary.log2_proba(features)
    c = class_count or lp.shape[1]
    acc = float(np.mean(lp.argmax(axis=1) == labels))
    return PrivacyReport(view, entropy_from_log2(lp, labels), acc, c, len(labels))


def stratified_holdout(labels, test_fraction=0.1, seed=0):
    """(train_idx, test_idx) with ``test_fraction`` of every class held out (at least one)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in np.unique(labels):
        m = np.flatnonzero(labels == c)
        m = m[rng.permutation(len(m))]
        k = max(1, int(round(test_fraction * len(m)))) if len(m) > 1 else 0
        te.append(m[:k])
        tr.append(m[k:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))


def evaluate_adversary(train_x, train_y, test_x, test_y, view, config=None, class_count=None):
    if len(test_y) == 0:
        raise EmptyDataError("adversary test set is empty")
    train_y = np.asarray(train_y)
    c = class_count or int(max(np.max(train_y), np.max(test_y))) + 1
    adv = train_classifier(train_x, train_y, config, heads=(c,))
    return conditional_entropy(adv, test_x, test_y, view, c)


def uniform_report(labels, class_count, view="uniform"):
    return conditional_entropy(UniformAdversary(class_count), np.zeros((len(labels), 1)), labels, view, class_count)


def disentanglement_score(model, eval_data, trained_identities, config=None, group_size=None,
                          test_fraction=0.1, seed=0):
    """Identity accuracy of an adversary on public codes of identities the model never saw."""
    ids = set(np.unique(eval_data.private).tolist())
    overlap = ids & set(np.asarray(list(trained_identities)).tolist())
    if overlap:
        raise IdentityOverlapError(f"evaluation identities {sorted(overlap)} were used to train the model")
    if len(ids) == 1:
        return 1.0
    feats = view_features(model, eval_data.samples, eval_data.private, "public", group_size)
    tr, te = stratified_holdout(eval_data.private, test_fraction, seed)
    # relabel to dense ids so the head size matches the evaluated population
    _, dense = np.unique(eval_data.private, return_inverse=True)
    rep = evaluate_adversary(feats[tr], dense[tr], feats[te], dense[te], "public", config)
    return rep.accuracy
