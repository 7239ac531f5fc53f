"""Distributed VQ autoencoder: encoder -> instance norm -> codebook -> decoder.

Latent grids are channel-last, ``(B, h, w, M)``. The public component of a
sample is its quantised grid; the private component is one length-M residual
per group of samples that share a private class.
"""
from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import quantizer as vq

log = logging.getLogger(__name__)

FINE_TUNE_MODES = ("encoder_decoder_only", "codebook_ema_only", "both")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class ModelFormatError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.25
    lam: float = 0.01


@dataclass
class LatentSplit:
    public: vq.QuantizeResult
    private: np.ndarray  # (M,) group residual, or (B, M) one row per sample
    z_e: np.ndarray = None

    def private_per_sample(self):
        n = self.public.quantized.shape[0]
        p = np.asarray(self.private)
        return np.broadcast_to(p, (n, p.shape[-1])) if p.ndim == 1 else p


@dataclass
class SampleGroup:
    samples: np.ndarray
    private_class: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if len(self.samples) == 0:
            raise ValueError("sample group must be non-empty")


@dataclass
class TrainReport:
    steps: int = 0
    losses: list = field(default_factory=list)
    components: list = field(default_factory=list)
    diverged: bool = False

    @property
    def initial_loss(self):
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self):
        # smooth over the tail so one noisy batch doesn't decide it
        tail = self.losses[-max(1, len(self.losses) // 20):]
        return float(np.mean(tail)) if tail else float("nan")


def instance_norm(x, in_layer):
    """Normalise a single C x H x W tensor (or a batch) with ``in_layer``'s affine."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    y = in_layer.forward(x if batched else x[None])
    return y if batched else y[0]


def group_ids(labels, group_size=None):
    """Consecutive ids for runs of equal ``labels``; classes split into chunks of ``group_size``."""
    labels = np.asarray(labels)
    ids = np.empty(len(labels), dtype=np.int64)
    next_id = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        step = len(members) if not group_size else group_size
        for start in range(0, len(members), step):
            ids[members[start:start + step]] = next_id
            next_id += 1
    return ids, next_id


def _group_mean(values, gid, n_groups):
    # values (B, h, w, M) -> (n_groups, M) mean over samples and cells
    per_sample = values.sum(axis=(1, 2))
    cells = values.shape[1] * values.shape[2]
    sums = np.zeros((n_groups, values.shape[-1]))
    np.add.at(sums, gid, per_sample)
    counts = np.bincount(gid, minlength=n_groups) * cells
    return sums / counts[:, None], counts


# "raw": private residual taken from encoder features before instance norm, so it
# keeps the channel statistics IN strips from the public codes; "normalized": from IN output
RESIDUAL_SOURCES = ("raw", "normalized")


class DvqaeModel:
    def __init__(self, encoder, decoder, codebook, in_eps=1e-5, weights=None, residual_source="raw"):
        if residual_source not in RESIDUAL_SOURCES:
            raise ValueError(f"residual_source must be one of {RESIDUAL_SOURCES}")
        self.residual_source = residual_source
        self.encoder = encoder
        self.decoder = decoder
        m, h, w = encoder.output_shape
        self.in_layer = nx.InstanceNorm2d(m, in_eps, name="in")
        self.codebook = codebook
        self.weights = weights or LossWeights()
        if codebook.M != m:
            raise nx.ShapeError(f"encoder emits M={m} channels but codebook has M={codebook.M}")
        if tuple(decoder.input_shape) != (m, h, w):
            raise nx.ShapeError(f"decoder input {decoder.input_shape} != encoder output {(m, h, w)}")
        if tuple(decoder.output_shape) != tuple(encoder.input_shape):
            raise nx.ShapeError("decoder output shape must equal encoder input shape")
        self._atoms_param = None

    # ------------------------------------------------------------- shapes
    @property
    def input_shape(self):
        return self.encoder.input_shape

    @property
    def grid_shape(self):
        m, h, w = self.encoder.output_shape
        return h, w

    @property
    def M(self):
        return self.codebook.M

    def atoms_parameter(self):
        if self._atoms_param is None or self._atoms_param.value is not self.codebook.atoms:
            self._atoms_param = nx.Parameter(self.codebook.atoms, "codebook.atoms")
        return self._atoms_param

    def network_parameters(self):
        return self.encoder.parameters() + self.in_layer.parameters() + self.decoder.parameters()

    def copy(self):
        return copy.deepcopy(self)

    # ------------------------------------------------------------ forward
    def _features(self, x):
        # (raw encoder output, IN output), both channel-last
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.input_shape):
            raise nx.ShapeError(f"model expects (*, {self.input_shape}), got {x.shape}")
        h = self.encoder.forward(x)
        z = self.in_layer.forward(h)
        return np.ascontiguousarray(h.transpose(0, 2, 3, 1)), np.ascontiguousarray(z.transpose(0, 2, 3, 1))

    def encode(self, x):
        """z_e = IN(encoder(x)) as a channel-last (B, h, w, M) grid."""
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == tuple(self.input_shape)
        z = self._features(x[None] if single else x)[1]
        return z[0] if single else z

    def quantize(self, z_e):
        return self.codebook.quantize(z_e)

    def split_latent(self, group, group_size=None, labels=None):
        """Public codes per sample plus the group-mean residual.

        ``group`` may be a ``SampleGroup`` (one residual for the whole group) or
        an array with ``labels``; then residuals are per same-label chunk of at
        most ``group_size`` samples and returned one row per sample.
        """
        if isinstance(group, SampleGroup):
            samples, labels = group.samples, np.zeros(len(group.samples), dtype=np.int64)
            whole = True
        else:
            samples = np.asarray(group, dtype=np.float64)
            labels = np.zeros(len(samples), dtype=np.int64) if labels is None else np.asarray(labels)
            whole = False
        raw, z_e = self._features(samples)
        res = self.quantize(z_e)
        gid, n_groups = group_ids(labels, group_size)
        src = raw if self.residual_source == "raw" else z_e
        means, _ = _group_mean(src - res.quantized, gid, n_groups)
        private = means[0] if whole else means[gid]
        return LatentSplit(res, private, z_e)

    def decoder_input(self, split, private=None):
        priv = split.private_per_sample() if private is None else private
        priv = np.asarray(priv, dtype=np.float64)
        if priv.ndim == 1:
            priv = np.broadcast_to(priv, (split.public.quantized.shape[0], priv.shape[0]))
        if priv.shape[-1] != self.M:
            raise nx.ShapeError(f"private component has length {priv.shape[-1]}, expected M={self.M}")
        return split.public.quantized + priv[:, None, None, :]

    def decode_grid(self, grid):
        grid = np.asarray(grid, dtype=np.float64)
        h, w = self.grid_shape
        if grid.shape[1:] != (h, w, self.M):
            raise nx.ShapeError(f"decoder expects (*, {h}, {w}, {self.M}) grid, got {grid.shape}")
        return self.decoder.forward(np.ascontiguousarray(grid.transpose(0, 3, 1, 2)))

    def decode(self, split):
        return self.decode_grid(self.decoder_input(split))

    def reconstruct(self, x, labels=None, group_size=None):
        return self.decode(self.split_latent(x, group_size, labels))

    def reconstruct_private_variant(self, split, variant="zeroed", sigma=0.0, reference=None, seed=0):
        """Decode public codes with a modified private component.

        variant: ``zeroed``, ``perturbed`` (Gaussian noise of std ``sigma``) or
        ``replaced`` (``reference`` private vector, e.g. from another group).
        """
        priv = np.array(split.private_per_sample(), dtype=np.float64)
        if variant == "zeroed":
            priv = np.zeros_like(priv)
        elif variant == "perturbed":
            if sigma:
                priv = priv + sigma * np.random.default_rng(seed).standard_normal(priv.shape)
        elif variant == "replaced":
            ref = np.asarray(reference, dtype=np.float64)
            if ref.shape[-1] != self.M:
                raise nx.ShapeError(f"replacement private vector has length {ref.shape[-1]}, expected M={self.M}")
            priv = np.broadcast_to(ref, priv.shape)
        else:
            raise ValueError(f"unknown private variant {variant!r}")
        return self.decode_grid(self.decoder_input(split, priv))

    # --------------------------------------------------------------- loss
    def loss_and_grads(self, x, private_labels=None, codebook_grad=True, group_size=None, backward=True):
        """Total loss on a batch and, optionally, gradients accumulated into parameters.

        With ``codebook_grad`` the codebook and latent terms also push on the
        atoms (into ``atoms_parameter().grad``); otherwise atoms are treated as
        constants and the codebook term is omitted.
        """
        wts = self.weights
        x = np.asarray(x, dtype=np.float64)
        labels = np.zeros(len(x), dtype=np.int64) if private_labels is None else np.asarray(private_labels)
        raw, z_e = self._features(x)
        res = self.quantize(z_e)
        z_q = res.quantized
        gid, n_groups = group_ids(labels, group_size)
        resid = z_e - z_q
        from_raw = self.residual_source == "raw"
        priv, group_cells = _group_mean((raw - z_q) if from_raw else resid, gid, n_groups)
        dec_in = z_q + priv[gid][:, None, None, :]
        x_hat = self.decoder.forward(np.ascontiguousarray(dec_in.transpose(0, 3, 1, 2)))

        recon, g_xhat = nx.mse_loss(x_hat, x)
        cells = z_e.shape[0] * z_e.shape[1] * z_e.shape[2]
        sq = float(np.sum(resid * resid)) / cells
        latent = wts.lam * sq
        commitment = wts.beta * sq
        codebook = wts.alpha * sq if codebook_grad else 0.0
        total = recon + latent + commitment + codebook
        parts = {"reconstruction": recon, "latent": latent, "commitment": commitment, "codebook": codebook}
        if not backward:
            return total, parts

        g_dec = self.decoder.backward(g_xhat).transpose(0, 2, 3, 1)
        # straight-through: the decoder-side gradient lands on z_e unchanged
        g_ze = vq.straight_through(g_dec).copy()
        # private residual is a group mean of (features - sg[z_q])
        g_priv = np.zeros((n_groups, self.M))
        np.add.at(g_priv, gid, g_dec.sum(axis=(1, 2)))
        g_src = np.broadcast_to((g_priv / group_cells[:, None])[gid][:, None, None, :], g_ze.shape)
        if not from_raw:
            g_ze += g_src
        g_ze += 2.0 * (wts.lam + wts.beta) * resid / cells
        if codebook_grad:
            g_zq = -2.0 * (wts.lam + wts.alpha) * resid / cells
            self.atoms_parameter().grad += vq.quantized_grad_to_atoms(g_zq, res, self.codebook)
        g_h = self.in_layer.backward(np.ascontiguousarray(g_ze.transpose(0, 3, 1, 2)))
        if from_raw:
            g_h = g_h + g_src.transpose(0, 3, 1, 2)
        self.encoder.backward(g_h)
        return total, parts

    def total_loss(self, group, codebook_grad=True):
        """(total, components) for a ``SampleGroup`` or (samples, labels) pair, no gradients."""
        if isinstance(group, SampleGroup):
            x, labels = group.samples, None
        else:
            x, labels = group
        return self.loss_and_grads(x, labels, codebook_grad=codebook_grad, backward=False)

    def reconstruction_error(self, x, labels=None, group_size=None, batch_size=500):
        errs = []
        labels = np.zeros(len(x), dtype=np.int64) if labels is None else np.asarray(labels)
        for s in range(0, len(x), batch_size):
            xb = x[s:s + batch_size]
            rec = self.reconstruct(xb, labels[s:s + batch_size], group_size)
            errs.append(np.sum((rec - xb) ** 2))
        return float(np.sum(errs) / np.asarray(x).size)


# ------------------------------------------------------------------ builders

def conv_encoder(input_shape, M=64, hidden=(16, 32), rng=None):
    """Two stride-2 4x4 convolutions and a 1x1 projection: spatial size / 4."""
    c = input_shape[0]
    h1, h2 = hidden
    layers = [nx.Conv2d(c, h1, 4, 2, 1, rng, "enc0"), nx.ReLU(),
              nx.Conv2d(h1, h2, 4, 2, 1, rng, "enc1"), nx.ReLU(),
              nx.Conv2d(h2, M, 1, 1, 0, rng, "enc2")]
    return nx.LayerStack(layers, input_shape)


def conv_decoder(input_shape, M=64, hidden=(16, 32), rng=None):
    c = input_shape[0]
    h1, h2 = hidden
    _, h, w = input_shape
    layers = [nx.Conv2d(M, h2, 1, 1, 0, rng, "dec0"), nx.ReLU(),
              nx.ConvTranspose2d(h2, h1, 4, 2, 1, rng, "dec1"), nx.ReLU(),
              nx.ConvTranspose2d(h1, c, 4, 2, 1, rng, "dec2")]
    return nx.LayerStack(layers, (M, h // 4, w // 4))


def mlp_encoder(input_shape, grid=(2, 2), M=8, hidden=64, rng=None):
    n_in = int(np.prod(input_shape))
    h, w = grid
    layers = [nx.Flatten(), nx.Affine(n_in, hidden, rng, "enc0"), nx.ReLU(),
              nx.Affine(hidden, M * h * w, rng, "enc1"), nx.Reshape((M, h, w))]
    return nx.LayerStack(layers, input_shape)


def mlp_decoder(input_shape, grid=(2, 2), M=8, hidden=64, rng=None):
    n_out = int(np.prod(input_shape))
    h, w = grid
    layers = [nx.Flatten(), nx.Affine(M * h * w, hidden, rng, "dec0"), nx.ReLU(),
              nx.Affine(hidden, n_out, rng, "dec1"), nx.Reshape(input_shape)]
    return nx.LayerStack(layers, (M, h, w))


def build_model(input_shape, K=256, M=64, groups=1, slices=1, arch="conv", hidden=None, grid=(2, 2),
                seed=0, seed_data=None, weights=None, decay=0.99, in_eps=1e-5, residual_source="raw"):
    """Fresh model; atoms are drawn from encoder outputs on ``seed_data`` when given."""
    rng = np.random.default_rng(seed)
    input_shape = tuple(input_shape)
    if arch == "conv":
        hidden = tuple(hidden or (16, 32))
        enc = conv_encoder(input_shape, M, hidden, rng)
        dec = conv_decoder(input_shape, M, hidden, rng)
    elif arch == "mlp":
        hidden = hidden or 64
        enc = mlp_encoder(input_shape, grid, M, hidden, rng)
        dec = mlp_decoder(input_shape, grid, M, hidden, rng)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    atoms = rng.standard_normal((K, M))
    model = DvqaeModel(enc, dec, vq.Codebook(atoms, groups, slices, decay), in_eps, weights, residual_source)
    model.arch = {"arch": arch, "hidden": hidden, "grid": list(grid)}
    if seed_data is not None:
        seeds = model.encode(np.asarray(seed_data, dtype=np.float64)).reshape(-1, M)
        seeds = _unique_rows(seeds)
        if len(seeds) < K:
            raise vq.CodebookConfigError(f"only {len(seeds)} distinct encoder vectors for K={K} atoms")
        model.codebook = vq.init_codebook(seeds, K, seed, groups, slices, decay)
    return model


def _unique_rows(a):
    _, first = np.unique(a, axis=0, return_index=True)
    return a[np.sort(first)]


# ------------------------------------------------------------------ training

def _check_finite(loss, report, step):
    if not np.isfinite(loss):
        report.diverged = True
        raise TrainingDivergedError(f"non-finite loss {loss} at step {step}", report)


def train_global(model, x, private_labels, steps, batch_size=100, lr=1e-3, seed=0, codebook_grad=True,
                 group_size=None, log_every=0):
    """Minibatch Adam on the total loss; the codebook is trained by gradient."""
    report = TrainReport()
    if steps <= 0:
        return report
    x = np.asarray(x, dtype=np.float64)
    private_labels = np.asarray(private_labels)
    if len(x) == 0:
        raise ValueError("global training set is empty")
    rng = np.random.default_rng(seed)
    params = model.network_parameters() + ([model.atoms_parameter()] if codebook_grad else [])
    order, pos = rng.permutation(len(x)), 0
    for step in range(steps):
        if pos + batch_size > len(x):
            order, pos = rng.permutation(len(x)), 0
        idx = np.sort(order[pos:pos + batch_size])
        pos += batch_size
        loss, parts = model.loss_and_grads(x[idx], private_labels[idx], codebook_grad, group_size)
        report.losses.append(loss)
        report.components.append(parts)
        _check_finite(loss, report, step)
        nx.adam_step(params, lr)
        report.steps += 1
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    return report


def fine_tune_local(model, x, private_labels=None, mode="encoder_decoder_only", epochs=1, batch_size=100,
                    lr=1e-3, seed=0, group_size=None):
    """One-shot local adaptation; returns a new model and leaves ``model`` untouched.

    ``encoder_decoder_only`` keeps the codebook frozen, ``codebook_ema_only``
    moves only the atoms via the EMA rule, ``both`` does the former then the latter.
    """
    if mode not in FINE_TUNE_MODES:
        raise ValueError(f"fine-tune mode must be one of {FINE_TUNE_MODES}")
    tuned = model.copy()
    x = np.asarray(x, dtype=np.float64)
    labels = np.zeros(len(x), dtype=np.int64) if private_labels is None else np.asarray(private_labels)
    rng = np.random.default_rng(seed)
    if mode in ("encoder_decoder_only", "both"):
        params = tuned.network_parameters()
        for _ in range(epochs):
            order = rng.permutation(len(x))
            for s in range(0, len(x), batch_size):
                idx = np.sort(order[s:s + batch_size])
                loss, _ = tuned.loss_and_grads(x[idx], labels[idx], codebook_grad=False, group_size=group_size)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss during fine-tune: {loss}", TrainReport())
                nx.adam_step(params, lr)
    if mode in ("codebook_ema_only", "both"):
        ema_refresh(tuned, x, batch_size)
    return tuned


def ema_refresh(model, x, batch_size=100):
    """Run EMA codebook updates over ``x`` in batches (encoder untouched)."""
    for s in range(0, len(x), batch_size):
        z = model.encode(x[s:s + batch_size])
        res = model.quantize(z)
        vq.ema_update_batch(model.codebook, z, res.slice_indices)


# ------------------------------------------------------------- serialization

MODEL_MAGIC = b"OCTM"
MODEL_VERSION = 1
_SECTIONS = ("config", "encoder", "in_norm", "codebook", "decoder", "weights")
_TABLE_ENTRY = struct.Struct("<8sQQ")


def _pack_params(params):
    return b"".join(p.value.astype("<f8").tobytes() for p in params)


def _unpack_params(params, buf, what):
    need = sum(p.size for p in params)
    if len(buf) != 8 * need:
        raise ModelFormatError(f"{what} section holds {len(buf)} bytes, expected {8 * need}")
    off = 0
    for p in params:
        p.value[...] = np.frombuffer(buf, "<f8", p.size, off).reshape(p.shape)
        off += 8 * p.size


def model_to_bytes(model):
    cfg = {
        "encoder": model.encoder.spec(),
        "decoder": model.decoder.spec(),
        "in_eps": model.in_layer.eps,
        "residual_source": model.residual_source,
        "arch": getattr(model, "arch", {}),
    }
    blobs = {
        "config": json.dumps(cfg, sort_keys=True).encode(),
        "encoder": _pack_params(model.encoder.parameters()),
        "in_norm": _pack_params(model.in_layer.parameters()),
        "codebook": model.codebook.to_bytes(),
        "decoder": _pack_params(model.decoder.parameters()),
        "weights": struct.pack("<3d", model.weights.alpha, model.weights.beta, model.weights.lam),
    }
    header = struct.pack("<4sHH", MODEL_MAGIC, MODEL_VERSION, len(_SECTIONS))
    offset = len(header) + _TABLE_ENTRY.size * len(_SECTIONS)
    table, body = b"", b""
    for name in _SECTIONS:
        blob = blobs[name]
        table += _TABLE_ENTRY.pack(name.encode()[:8], offset, len(blob))
        body += blob
        offset += len(blob)
    return header + table + body


def model_from_bytes(buf):
    if len(buf) < 8:
        raise ModelFormatError("truncated model header")
    magic, version, n = struct.unpack_from("<4sHH", buf, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    sections = {}
    for i in range(n):
        name, off, length = _TABLE_ENTRY.unpack_from(buf, 8 + i * _TABLE_ENTRY.size)
        if off + length > len(buf):
            raise ModelFormatError(f"section {name!r} runs past end of file")
        sections[name.rstrip(b"\0").decode()] = buf[off:off + length]
    missing = [s for s in _SECTIONS if s not in sections]
    if missing:
        raise ModelFormatError(f"missing sections {missing}")
    cfg = json.loads(sections["config"])
    enc = nx.build_stack(cfg["encoder"])
    dec = nx.build_stack(cfg["decoder"])
    codebook = vq.Codebook.from_bytes(sections["codebook"])
    alpha, beta, lam = struct.unpack("<3d", sections["weights"])
    model = DvqaeModel(enc, dec, codebook, cfg["in_eps"], LossWeights(alpha, beta, lam),
                       cfg.get("residual_source", "raw"))
    model.arch = cfg.get("arch", {})
    _unpack_params(enc.parameters(), sections["encoder"], "encoder")
    _unpack_params(model.in_layer.parameters(), sections["in_norm"], "in_norm")
    _unpack_params(dec.parameters(), sections["decoder"], "decoder")
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
