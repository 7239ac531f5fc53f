"""In-process simulation of the compressed-latent collection protocol.

Nodes fine-tune a shared autoencoder once, then upload only packed codebook
indices. Codebook refreshes are the only other upstream traffic. Every byte
that crosses the node/server boundary is a ``WireMessage`` and is tallied in an
``OverheadLedger`` that can be compared against closed-form cost models.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datasets as ds
from . import downstream as dn
from . import dvqae as dv
from . import numerics as nx
from . import quantizer as vq

log = logging.getLogger(__name__)

LATENT_BATCH = "LATENT_BATCH"
CODEBOOK_DELTA = "CODEBOOK_DELTA"
MODEL_DOWNLOAD = "MODEL_DOWNLOAD"
UPLOAD_KINDS = (LATENT_BATCH, CODEBOOK_DELTA)
SCHEMES = ("iid", "noniid_worst", "noniid_moderate")
RECORD_HEADER = struct.Struct("<H")  # content label in front of each sample's indices


class ProtocolError(RuntimeError):
    pass


class PrivacyViolation(RuntimeError):
    pass


class PhaseError(RuntimeError):
    def __init__(self, phase, cause):
        super().__init__(f"phase '{phase}' failed: {cause}")
        self.phase = phase


# ---------------------------------------------------------------- partition

class Partition(list):
    """List of index arrays, one per node; ``sorted_count`` samples were dealt label-sorted."""

    def __init__(self, shards, scheme, sorted_count=0):
        super().__init__(shards)
        self.scheme = scheme
        self.sorted_count = sorted_count

    def take(self, dataset):
        return [dataset.subset(idx) for idx in self]


def partition(dataset, scheme="iid", node_count=1, seed=0, fraction=0.2, label_key="content"):
    if node_count < 1:
        raise ValueError("node_count must be >= 1")
    if scheme not in SCHEMES:
        raise ValueError(f"partition scheme must be one of {SCHEMES}")
    labels = dataset.labels(label_key)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    if scheme == "iid":
        return Partition([np.sort(s) for s in np.array_split(order, node_count)], scheme)
    if scheme == "noniid_worst":
        classes = np.unique(labels)
        if node_count >= len(classes):
            shards = [None] * node_count
            for ci, c in enumerate(classes):
                owners = list(range(ci, node_count, len(classes)))
                members = order[labels[order] == c]
                for owner, part in zip(owners, np.array_split(members, len(owners))):
                    shards[owner] = np.sort(part)
            for j in range(len(classes), node_count):
                if shards[j] is None:
                    shards[j] = np.array([], dtype=np.int64)
        else:
            by_label = order[np.argsort(labels[order], kind="stable")]
            shards = [np.sort(s) for s in np.array_split(by_label, node_count)]
        return Partition(shards, scheme, len(dataset))
    n_sorted = int(round(fraction * len(dataset)))
    head, rest = order[:n_sorted], order[n_sorted:]
    head = head[np.argsort(labels[head], kind="stable")]
    shards = [np.sort(np.concatenate([a, b])) for a, b in
              zip(np.array_split(head, node_count), np.array_split(rest, node_count))]
    return Partition(shards, scheme, n_sorted)


# --------------------------------------------------------------- bit packing

def bits_per_index(K):
    """Index width in bits, at least 1."""
    return max(1, math.ceil(math.log2(K)))


def packed_size(count, K):
    return (count * bits_per_index(K) + 7) // 8


def pack_indices(indices, K):
    """MSB-first bit packing of non-negative indices below ``K``."""
    flat = np.asarray(indices).reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= K):
        raise ValueError(f"index out of range for K={K}: min {flat.min()}, max {flat.max()}")
    b = bits_per_index(K)
    shifts = np.arange(b - 1, -1, -1, dtype=np.int64)
    bits = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_indices(buf, H, W, K, slices=1):
    b = bits_per_index(K)
    n = H * W * slices
    if len(buf) != packed_size(n, K):
        raise ValueError(f"payload is {len(buf)} bytes, expected {packed_size(n, K)}")
    bits = np.unpackbits(np.frombuffer(buf, np.uint8))[:n * b].reshape(n, b).astype(np.int64)
    vals = bits @ (1 << np.arange(b - 1, -1, -1, dtype=np.int64))
    if vals.size and vals.max() >= K:
        raise ValueError(f"decoded index {vals.max()} >= K={K}")
    shape = (H, W) if slices == 1 else (H, W, slices)
    return vals.reshape(shape)


def record_size(H, W, K, slices=1):
    """Bytes per uploaded sample: label header plus packed indices."""
    return RECORD_HEADER.size + packed_size(H * W * slices, K)


# ------------------------------------------------------------------ messages

@dataclass(frozen=True)
class WireMessage:
    kind: str
    payload: bytes
    sender: str
    round: int = 0

    @property
    def size(self):
        return len(self.payload)


def encode_latent_batch(indices, content, K):
    """Concatenated per-sample records ``<u16 label><packed indices>``."""
    out = bytearray()
    for idx, c in zip(indices, content):
        out += RECORD_HEADER.pack(int(c))
        out += pack_indices(idx, K)
    return bytes(out)


def decode_latent_batch(payload, H, W, K, slices=1):
    size = record_size(H, W, K, slices)
    if len(payload) % size:
        raise ProtocolError(f"latent batch of {len(payload)} bytes is not a multiple of {size}")
    labels, idx = [], []
    for off in range(0, len(payload), size):
        labels.append(RECORD_HEADER.unpack_from(payload, off)[0])
        idx.append(unpack_indices(payload[off + RECORD_HEADER.size:off + size], H, W, K, slices))
    shape = (0, H, W) if slices == 1 else (0, H, W, slices)
    return (np.array(idx) if idx else np.zeros(shape, np.int64)), np.array(labels, dtype=np.int64)


# -------------------------------------------------------------- cost models

@dataclass
class CostModelParams:
    N_C: float = 0
    N_M: float = 0
    N_D: float = 0
    N_E: float = 1
    N_Z: float = 0
    N_S: float = 0
    eta: float = 0
    pi: float = 0
    N_B: float = 0
    N_A: float = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"cost parameter {k} must be non-negative")


def cost_fl(p):
    return 2 * p.N_C * p.N_M * p.N_E


def cost_split(p):
    return (2 * p.N_S * p.N_D + p.eta * p.N_C * p.N_M) * p.N_E


def cost_octopus(p):
    return p.N_D * p.N_Z + p.N_M + p.pi * p.N_B + p.N_A


def efficiency_ratio(p):
    denom = cost_split(p)
    if denom == 0:
        raise ZeroDivisionError("split-learning cost is zero; ratio undefined")
    return cost_fl(p) / denom


# ------------------------------------------------------------------- ledger

PHASES = ("model_distribution", "collection", "codebook_sync", "model_download")


@dataclass
class OverheadLedger:
    bytes: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    params: CostModelParams = None
    sync_round_bytes: list = field(default_factory=list)

    def add(self, phase, n):
        self.bytes[phase] += n

    @property
    def total(self):
        return sum(self.bytes.values())

    def analytic(self):
        p = self.params
        return {"model_distribution": p.N_M, "collection": p.N_D * p.N_Z,
                "codebook_sync": p.pi * p.N_B, "model_download": p.N_A}

    def analytic_total(self):
        return cost_octopus(self.params)

    def rows(self, metrics=None):
        metrics = metrics or {}
        ana = self.analytic()
        rows = [{"phase": ph, "bytes": self.bytes[ph], "analytic_bytes": ana[ph],
                 "accuracy": "", "entropy_bits": ""} for ph in PHASES]
        rows.append({"phase": "total", "bytes": self.total, "analytic_bytes": self.analytic_total(),
                     "accuracy": metrics.get("accuracy", ""), "entropy_bits": metrics.get("entropy_bits", "")})
        return rows

    def to_dict(self):
        return {"bytes": dict(self.bytes), "analytic_bytes": self.analytic(), "total": self.total,
                "analytic_total": self.analytic_total(), "params": asdict(self.params),
                "sync_round_bytes": list(self.sync_round_bytes)}


def write_ledger(ledger, json_path=None, csv_path=None, metrics=None):
    if json_path:
        with open(json_path, "w") as fh:
            json.dump({"ledger": ledger.to_dict(), "metrics": metrics or {}}, fh, indent=2, sort_keys=True)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, ["phase", "bytes", "analytic_bytes", "accuracy", "entropy_bits"])
            wr.writeheader()
            wr.writerows(ledger.rows(metrics))


# -------------------------------------------------------------- node/server

class NodeState:
    def __init__(self, node_id, shard, model):
        self.node_id = node_id
        self.shard = shard
        self.model = model
        self.published = model.codebook.copy()  # the codebook the server can decode against
        self.outbox = []
        self.uploaded = 0
        self.downloaded = 0

    def emit(self, kind, payload, rnd=0):
        if kind not in UPLOAD_KINDS:
            raise PrivacyViolation(f"node {self.node_id} may not send {kind}")
        msg = WireMessage(kind, bytes(payload), f"node{self.node_id}", rnd)
        self.outbox.append(msg)
        self.uploaded += msg.size
        return msg

    def receive(self, msg):
        if msg.kind != MODEL_DOWNLOAD:
            raise ProtocolError(f"node cannot receive {msg.kind}")
        self.downloaded += msg.size

    def encode_window(self, idx, rnd=0):
        x = self.shard.samples[idx]
        z = self.model.encode(x)
        res = self.published.quantize(z)
        return self.emit(LATENT_BATCH, encode_latent_batch(res.slice_indices, self.shard.content[idx],
                                                           self.published.K), rnd)

    def ema_refresh(self, idx, batch_size=100):
        dv.ema_refresh(self.model, self.shard.samples[idx], batch_size)


def codebook_sync(node, server, rnd=0):
    """Node sends its refreshed codebook; the server records it and queues it for merging."""
    msg = node.emit(CODEBOOK_DELTA, node.model.codebook.to_bytes(), rnd)
    server.receive_codebook(node.node_id, msg)
    node.published = node.model.codebook.copy()
    return msg


class ServerState:
    def __init__(self, model):
        self.model = model
        self.version = 0
        self.node_codebooks = {}  # node id -> (version, Codebook)
        self.pending = []
        self.store = []  # (node id, content labels, indices, codebook)
        self.received = 0
        self.inbox = []

    def _check(self, cb):
        g = self.model.codebook
        if (cb.K, cb.M, cb.slice_count, cb.group_count) != (g.K, g.M, g.slice_count, g.group_count):
            raise ProtocolError(f"codebook shape K={cb.K} M={cb.M} does not match global K={g.K} M={g.M}")

    def receive_codebook(self, node_id, msg):
        cb = vq.Codebook.from_bytes(msg.payload)
        self._check(cb)
        self.inbox.append(msg)
        self.received += msg.size
        self.node_codebooks[node_id] = cb
        self.pending.append(cb)

    def merge_pending(self):
        """Count-weighted row average of the queued node codebooks into the global one."""
        if not self.pending:
            return
        merge_codebooks(self.model.codebook, self.pending)
        self.pending = []
        self.version += 1

    def receive_latents(self, node_id, msg):
        if msg.kind != LATENT_BATCH:
            raise ProtocolError(f"expected {LATENT_BATCH}, got {msg.kind}")
        self.inbox.append(msg)
        self.received += msg.size
        cb = self.node_codebooks.get(node_id, self.model.codebook)
        h, w = self.model.grid_shape
        idx, labels = decode_latent_batch(msg.payload, h, w, cb.K, cb.slice_count)
        self.store.append((node_id, labels, idx, cb.copy()))

    def store_size(self):
        return sum(len(e[1]) for e in self.store)

    def gathered_features(self, mode="atoms"):
        feats = [dn.latent_features(idx, cb, mode) for _, _, idx, cb in self.store if len(idx)]
        labels = [lab for _, lab, idx, _ in self.store if len(idx)]
        if not feats:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.vstack(feats), np.concatenate(labels)


def merge_codebooks(target, sources):
    for cb in sources:
        if (cb.K, cb.M, cb.slice_count) != (target.K, target.M, target.slice_count):
            raise ProtocolError("cannot merge codebooks of different shape")
    d = target.slice_dim
    for j in range(target.slice_count):
        cols = slice(j * d, (j + 1) * d)
        counts = np.stack([cb.ema_counts[j] for cb in sources])  # (n, K)
        total = counts.sum(axis=0)
        live = total > 0
        if len(sources) == 1:
            target.atoms[live, cols] = sources[0].atoms[live, cols]
        else:
            weighted = sum(c[:, None] * cb.atoms[:, cols] for c, cb in zip(counts, sources))
            target.atoms[live, cols] = weighted[live] / total[live, None]
        target.ema_counts[j] = total / len(sources)
    target.ema_sums[...] = target.atoms * np.repeat(target.ema_counts, d, axis=0).T


# ---------------------------------------------------------------- simulator

@dataclass
class OctopusConfig:
    nodes: int = 4
    partition: str = "iid"
    partition_fraction: float = 0.2
    partition_label: str = "content"
    K: int = 64
    M: int = 16
    G: int = 1
    n_c: int = 1
    decay: float = 0.99
    arch: str = "conv"
    hidden: tuple = (16, 32)
    grid: tuple = (2, 2)
    global_steps: int = 200
    batch_size: int = 100
    lr: float = 1e-3
    lam: float = 0.01
    alpha: float = 1.0
    beta: float = 0.25
    in_eps: float = 1e-5
    residual_source: str = "raw"
    fine_tune_mode: str = "encoder_decoder_only"
    fine_tune_epochs: int = 1
    sync_period: int = 0  # number of codebook sync rounds
    classifier_steps: int = 300
    classifier_hidden: tuple = (256, 128)
    download_model: bool = True
    group_size: int = 0
    seed: int = 0

    def validate(self):
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if self.fine_tune_mode not in dv.FINE_TUNE_MODES:
            raise ValueError(f"fine_tune_mode must be one of {dv.FINE_TUNE_MODES}")
        if self.sync_period < 0:
            raise ValueError("sync_period must be >= 0")
        if self.fine_tune_mode != "encoder_decoder_only" and self.sync_period == 0:
            raise ValueError(f"fine_tune_mode {self.fine_tune_mode} changes the codebook; "
                             "sync_period must be >= 1 so the server can decode against it")
        if self.partition not in SCHEMES:
            raise ValueError(f"partition must be one of {SCHEMES}")


@dataclass
class OctopusResult:
    server: ServerState
    ledger: OverheadLedger
    metrics: dict
    nodes: list
    messages: list
    classifier: object = None


def _phase(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (PrivacyViolation, ProtocolError):
        raise
    except Exception as exc:  # tag the failing phase for the caller
        raise PhaseError(name, exc) from exc


def build_global(cfg, atd):
    weights = dv.LossWeights(cfg.alpha, cfg.beta, cfg.lam)
    model = dv.build_model(atd.sample_shape, cfg.K, cfg.M, cfg.G, cfg.n_c, cfg.arch, cfg.hidden, cfg.grid,
                           cfg.seed, atd.samples[:max(cfg.batch_size, 1)], weights, cfg.decay, cfg.in_eps,
                           cfg.residual_source)
    dv.train_global(model, atd.samples, atd.private, cfg.global_steps, cfg.batch_size, cfg.lr, cfg.seed,
                    group_size=cfg.group_size or None)
    return model


def run_octopus(cfg, splits, global_model=None):
    """All six protocol steps on in-process nodes; returns server, ledger and metrics."""
    cfg.validate()
    ledger = OverheadLedger()
    messages = []

    # step 1: initial global model from the additional public data
    model = global_model.copy() if global_model is not None else _phase("global_init", build_global, cfg, splits.atd)
    server = ServerState(model)
    parts = _phase("partition", partition, splits.nodes, cfg.partition, cfg.nodes, cfg.seed,
                   cfg.partition_fraction, cfg.partition_label)
    shards = parts.take(splits.nodes)

    # step 2: distribute and fine-tune once
    blob = dv.model_to_bytes(model)
    nodes = []
    for i, shard in enumerate(shards):
        msg = WireMessage(MODEL_DOWNLOAD, blob, "server")
        messages.append(msg)
        ledger.add("model_distribution", msg.size)
        local = model
        if len(shard):
            local = _phase("fine_tune", dv.fine_tune_local, model, shard.samples, shard.private, cfg.fine_tune_mode,
                           cfg.fine_tune_epochs, cfg.batch_size, cfg.lr, cfg.seed + i, cfg.group_size or None)
        node = NodeState(i, shard, local.copy() if local is model else local)
        node.receive(msg)
        nodes.append(node)

    # steps 3-5: windows of uploads separated by codebook syncs
    n_sync = cfg.sync_period
    h, w = model.grid_shape
    for rnd in range(n_sync + 1):
        if rnd > 0:
            round_bytes = 0
            for node in nodes:
                win = np.array_split(np.arange(len(node.shard)), n_sync + 1)[rnd - 1]
                if len(win):
                    _phase("codebook_sync", node.ema_refresh, win, cfg.batch_size)
                msg = _phase("codebook_sync", codebook_sync, node, server, rnd)
                messages.append(msg)
                round_bytes += msg.size
            server.merge_pending()
            ledger.add("codebook_sync", round_bytes)
            ledger.sync_round_bytes.append(round_bytes)
        for node in nodes:
            win = np.array_split(np.arange(len(node.shard)), n_sync + 1)[rnd]
            if len(win) == 0:
                continue
            msg = _phase("collection", node.encode_window, win, rnd)
            server.receive_latents(node.node_id, msg)
            messages.append(msg)
            ledger.add("collection", msg.size)

    # step 6: downstream task on gathered codes
    feats, labels = server.gathered_features()
    ccfg = dn.ClassifierConfig(hidden=tuple(cfg.classifier_hidden), steps=cfg.classifier_steps,
                               batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    clf = _phase("downstream", dn.train_classifier, feats, labels, ccfg,
                 (splits.nodes.content_count,)) if len(labels) else None
    metrics = {"store_size": server.store_size(), "codebook_version": server.version}
    if clf is not None and len(splits.test):
        test_idx = model.quantize(model.encode(splits.test.samples)).slice_indices
        acc = clf.accuracy(dn.latent_features(test_idx, model.codebook), splits.test.content)
        metrics["accuracy"] = acc

    if cfg.download_model and clf is not None:
        blob = clf.to_bytes()
        for node in nodes:
            msg = WireMessage(MODEL_DOWNLOAD, blob, "server", n_sync + 1)
            node.receive(msg)
            messages.append(msg)
            ledger.add("model_download", msg.size)

    per_round = ledger.sync_round_bytes
    if per_round and len(set(per_round)) != 1:
        raise ProtocolError(f"sync rounds carried unequal byte counts {per_round}")
    n_d = server.store_size()
    ledger.params = CostModelParams(
        N_C=len(nodes), N_M=ledger.bytes["model_distribution"], N_D=n_d,
        N_Z=record_size(h, w, model.codebook.K, model.codebook.slice_count),
        pi=n_sync, N_B=per_round[0] if per_round else 0, N_A=ledger.bytes["model_download"])
    metrics["bytes_total"] = ledger.total
    metrics["analytic_total"] = ledger.analytic_total()
    return OctopusResult(server, ledger, metrics, nodes, messages, clf)


def node_private_vectors(nodes, group_size=None):
    """Every private residual row the nodes hold locally (what must never leave them)."""
    out = []
    for node in nodes:
        if len(node.shard):
            split = node.model.split_latent(node.shard.samples, group_size, node.shard.private)
            out.extend(np.unique(split.private_per_sample(), axis=0))
    return out


def scan_messages(messages, raw_samples=(), private_vectors=(), chunk=4):
    """Structural privacy scan. Returns a list of violations (empty when clean).

    Checks message kinds against the allowed upstream set, and looks for any
    run of ``chunk`` consecutive float64 values of a raw sample or of a private
    residual vector inside any payload.
    """
    problems = []
    needles = []
    for arr in list(raw_samples) + list(private_vectors):
        flat = np.asarray(arr, dtype="<f8").reshape(-1)
        nz = np.flatnonzero(flat)
        if len(nz):
            start = min(nz[0], max(0, len(flat) - chunk))
            needles.append(flat[start:start + chunk].tobytes())
    for m in messages:
        if m.sender.startswith("node") and m.kind not in UPLOAD_KINDS:
            problems.append(f"{m.sender} sent forbidden kind {m.kind}")
        if m.sender.startswith("node"):
            for nd in needles:
                if nd and nd in m.payload:
                    problems.append(f"{m.sender} {m.kind} payload contains protected bytes")
                    break
    return problems


# ------------------------------------------------------------------ FedAvg

@dataclass
class FedAvgConfig:
    clients: int = 4
    rounds: int = 5
    local_epochs: int = 1
    batch_size: int = 100
    lr: float = 1e-3
    hidden: tuple = (256, 128)
    partition: str = "iid"
    partition_fraction: float = 0.2
    label_key: str = "content"
    seed: int = 0


@dataclass
class FedAvgLedger:
    parameter_units: int = 0
    bytes: int = 0
    params: CostModelParams = None

    def analytic(self):
        return cost_fl(self.params)


def local_epoch(clf, x, y, batch_size, lr, seed, epochs=1):
    """Fresh Adam state, shuffled minibatches from ``seed``."""
    for p in clf.parameters():
        p.state = nx.AdamState(np.zeros_like(p.value), np.zeros_like(p.value))
        p.zero_grad()
    rng = np.random.default_rng(seed)
    params = clf.parameters()
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), batch_size):
            idx = order[s:s + batch_size]
            clf.loss_and_grads(x[idx], y[idx])
            nx.adam_step(params, lr)
    return clf


def _get_weights(clf):
    return [p.value.copy() for p in clf.parameters()]


def _set_weights(clf, ws):
    for p, w in zip(clf.parameters(), ws):
        p.value[...] = w


def run_fedavg_baseline(cfg, train, test=None, class_count=None, shards=None):
    """Plain FedAvg on raw samples with full participation."""
    y_all = train.labels(cfg.label_key)
    c = class_count or int(y_all.max()) + 1
    x_all = train.samples.reshape(len(train), -1)
    if shards is None:
        shards = partition(train, cfg.partition, cfg.clients, cfg.seed, cfg.partition_fraction, cfg.label_key)
    glob = dn.MultiHeadClassifier(x_all.shape[1], (c,), 0, cfg.hidden, cfg.seed)
    n_m = glob.parameter_count()
    units = 0
    for rnd in range(cfg.rounds):
        base = _get_weights(glob)
        acc_w, total = None, sum(len(i) for i in shards)
        for idx in shards:
            units += n_m  # download of the global model
            if len(idx) == 0:
                units += n_m
                continue
            _set_weights(glob, base)
            local_epoch(glob, x_all[idx], y_all[idx], cfg.batch_size, cfg.lr, cfg.seed * 100003 + rnd,
                        cfg.local_epochs)
            ws = _get_weights(glob)
            units += n_m  # upload of the local model
            frac = len(idx) / total
            acc_w = [frac * w for w in ws] if acc_w is None else [a + frac * w for a, w in zip(acc_w, ws)]
        _set_weights(glob, acc_w if acc_w else base)
    ledger = FedAvgLedger(units, 8 * units, CostModelParams(N_C=len(shards), N_M=n_m, N_E=cfg.rounds))
    metrics = {"parameter_units": units, "analytic_units": ledger.analytic()}
    if test is not None and len(test):
        metrics["accuracy"] = glob.accuracy(test.samples.reshape(len(test), -1), test.labels(cfg.label_key))
    return glob, ledger, metrics
