"""Codebook and vector quantisation (plain, grouped, sliced) with EMA updates."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OCTB"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIId")

# exact-match guard for the inverse-distance weights of grouped VQ
MATCH_EPS = 1e-12


class CodebookConfigError(ValueError):
    pass


class CodebookFormatError(ValueError):
    pass


@dataclass
class Codebook:
    """K atoms of dimension M, split into G groups along K and n_c slices along M.

    ``ema_counts`` has one row of K counts per slice, ``ema_sums`` is K x M; for an
    unsliced codebook the counts reduce to a single length-K vector.
    """

    atoms: np.ndarray
    group_count: int = 1
    slice_count: int = 1
    decay: float = 0.99
    ema_counts: np.ndarray = field(default=None)
    ema_sums: np.ndarray = field(default=None)

    def __post_init__(self):
        self.atoms = np.array(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2 or self.atoms.shape[0] < 1:
            raise CodebookConfigError("atoms must be a non-empty K x M matrix")
        k, m = self.atoms.shape
        if self.group_count < 1 or k % self.group_count:
            raise CodebookConfigError(f"group count {self.group_count} does not divide K={k}")
        if self.slice_count < 1 or m % self.slice_count:
            raise CodebookConfigError(f"slice count {self.slice_count} does not divide M={m}")
        if not 0.0 <= self.decay <= 1.0:
            raise CodebookConfigError("EMA decay must lie in [0, 1]")
        if not np.all(np.isfinite(self.atoms)):
            raise CodebookConfigError("atoms must be finite")
        if self.ema_counts is None:
            self.ema_counts = np.zeros((self.slice_count, k))
        if self.ema_sums is None:
            self.ema_sums = np.zeros((k, m))
        self.ema_counts = np.array(self.ema_counts, dtype=np.float64).reshape(self.slice_count, k)
        self.ema_sums = np.array(self.ema_sums, dtype=np.float64).reshape(k, m)

    @property
    def K(self):
        return self.atoms.shape[0]

    @property
    def M(self):
        return self.atoms.shape[1]

    @property
    def group_size(self):
        return self.K // self.group_count

    @property
    def slice_dim(self):
        return self.M // self.slice_count

    @property
    def grouped(self):
        # G == 1 and G == K both degenerate to nearest-atom matching
        return 1 < self.group_count < self.K

    def slice_atoms(self, j):
        d = self.slice_dim
        return self.atoms[:, j * d:(j + 1) * d]

    def copy(self):
        return Codebook(self.atoms.copy(), self.group_count, self.slice_count, self.decay,
                        self.ema_counts.copy(), self.ema_sums.copy())

    def quantize(self, grid):
        return slice_quantize(grid, self)

    def checksum(self):
        import hashlib
        return hashlib.sha256(self.atoms.tobytes()).hexdigest()

    # ------------------------------------------------------------ wire format
    def to_bytes(self):
        header = _HEADER.pack(MAGIC, VERSION, self.K, self.M, self.group_count, self.slice_count, self.decay)
        body = (self.atoms.astype("<f8").tobytes() + self.ema_counts.astype("<f8").tobytes()
                + self.ema_sums.astype("<f8").tobytes())
        return header + body

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < _HEADER.size:
            raise CodebookFormatError(f"truncated codebook header ({len(buf)} bytes)")
        magic, version, k, m, g, nc, decay = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise CodebookFormatError(f"bad codebook magic {magic!r}")
        if version != VERSION:
            raise CodebookFormatError(f"unsupported codebook version {version}")
        expected = _HEADER.size + 8 * (k * m + nc * k + k * m)
        if len(buf) != expected:
            raise CodebookFormatError(f"codebook payload is {len(buf)} bytes, expected {expected}")
        off = _HEADER.size
        atoms = np.frombuffer(buf, "<f8", k * m, off).reshape(k, m)
        off += 8 * k * m
        counts = np.frombuffer(buf, "<f8", nc * k, off).reshape(nc, k)
        off += 8 * nc * k
        sums = np.frombuffer(buf, "<f8", k * m, off).reshape(k, m)
        return cls(atoms.copy(), g, nc, decay, counts.copy(), sums.copy())


def serialized_size(K, M, slice_count=1):
    return _HEADER.size + 8 * (2 * K * M + slice_count * K)


def init_codebook(seed_vectors, K, rng_seed=0, group_count=1, slice_count=1, decay=0.99):
    """Pick K distinct seed vectors uniformly at random as the initial atoms."""
    seeds = np.asarray(seed_vectors, dtype=np.float64)
    if seeds.ndim != 2:
        raise CodebookConfigError("seed vectors must form an (N, M) array")
    if len(seeds) < K:
        raise CodebookConfigError(f"need at least K={K} seed vectors, got {len(seeds)}")
    rng = np.random.default_rng(rng_seed)
    pick = rng.choice(len(seeds), size=K, replace=False)
    return Codebook(seeds[pick], group_count, slice_count, decay)


# ------------------------------------------------------------------ search

def squared_distances(flat, atoms):
    """(N, K) squared Euclidean distances via the dot-product expansion."""
    return (np.einsum("nd,nd->n", flat, flat)[:, None] - 2.0 * flat @ atoms.T
            + np.einsum("kd,kd->k", atoms, atoms)[None, :])


def nearest_indices(flat, atoms, chunk=8192):
    """Index of the nearest atom for each row; ties go to the lowest index.

    Candidates within rounding distance of the minimum are re-scored with the
    direct difference form so near-ties resolve exactly like a brute-force scan.
    """
    flat = np.asarray(flat, dtype=np.float64)
    out = np.empty(len(flat), dtype=np.int64)
    norms = np.einsum("kd,kd->k", atoms, atoms)
    for start in range(0, len(flat), chunk):
        block = flat[start:start + chunk]
        d = squared_distances(block, atoms)
        best = d.argmin(axis=1)
        dmin = d[np.arange(len(block)), best]
        tol = 1e-9 * (np.einsum("nd,nd->n", block, block) + norms.max()) + 1e-300
        close = d <= (dmin + tol)[:, None]
        multi = np.flatnonzero(close.sum(axis=1) > 1)
        for r in multi:
            cand = np.flatnonzero(close[r])
            diff = block[r][None, :] - atoms[cand]
            exact = np.sum(diff * diff, axis=1)
            best[r] = cand[np.argmin(exact)]
        out[start:start + chunk] = best
    return out


def nearest_atom(vector, codebook):
    if codebook.K == 0:
        raise CodebookConfigError("empty codebook")
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (codebook.M,):
        raise CodebookConfigError(f"vector must have length {codebook.M}")
    idx = int(nearest_indices(vector[None], codebook.atoms)[0])
    return idx, codebook.atoms[idx]


def _group_select(flat, atoms, G):
    """Grouped VQ on rows of ``flat``: returns (group, nearest atom, blended, weights)."""
    n = len(flat)
    k = atoms.shape[0]
    ng = k // G
    sq = np.maximum(squared_distances(flat, atoms), 0.0)
    dist = np.sqrt(sq).reshape(n, G, ng)
    group = dist.mean(axis=2).argmin(axis=1)
    members = group[:, None] * ng + np.arange(ng)[None, :]  # (n, ng)
    chosen = atoms[members]  # (n, ng, d)
    diff = flat[:, None, :] - chosen
    exact = np.sqrt(np.sum(diff * diff, axis=2))
    within = exact.argmin(axis=1)
    atom_idx = members[np.arange(n), within]
    if ng == 1:
        weights = np.ones((n, 1))
        return group, atom_idx, chosen[:, 0, :].copy(), weights
    hit = exact[np.arange(n), within] < MATCH_EPS
    with np.errstate(divide="ignore"):
        w = 1.0 / np.where(hit[:, None], 1.0, exact)
    w[hit] = 0.0
    w[hit, within[hit]] = 1.0
    weights = w / w.sum(axis=1, keepdims=True)
    blended = np.einsum("ng,ngd->nd", w, chosen) / w.sum(axis=1, keepdims=True)
    blended[hit] = chosen[hit, within[hit]]
    return group, atom_idx, blended, weights


def group_quantize(vector, codebook):
    """Map ``vector`` to the atom group with the smallest mean distance.

    Returns (group_index, blended_vector, normalised_weights) where the blended
    vector is the inverse-distance weighted average of the group's atoms.
    """
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (codebook.M,):
        raise CodebookConfigError(f"vector must have length {codebook.M}")
    g, _, blended, weights = _group_select(vector[None], codebook.atoms, codebook.group_count)
    return int(g[0]), blended[0], weights[0]


@dataclass
class QuantizeResult:
    slice_indices: np.ndarray  # (..., n_c) atom indices
    quantized: np.ndarray  # (..., M)
    group_indices: np.ndarray = None  # (..., n_c) when grouped
    weights: np.ndarray = None  # (..., n_c, N_g) normalised, when grouped

    @property
    def indices(self):
        if self.slice_indices.shape[-1] == 1:
            return self.slice_indices[..., 0]
        return self.slice_indices


def slice_quantize(grid, codebook):
    """Quantise the trailing M-axis of ``grid`` slice by slice."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[-1] != codebook.M:
        raise CodebookConfigError(f"grid last axis {grid.shape[-1]} != M={codebook.M}")
    if codebook.M % codebook.slice_count:
        raise CodebookConfigError("slice count must divide M")
    lead = grid.shape[:-1]
    flat = grid.reshape(-1, codebook.M)
    n, nc, d = len(flat), codebook.slice_count, codebook.slice_dim
    idx = np.empty((n, nc), dtype=np.int64)
    quant = np.empty_like(flat)
    groups = weights = None
    if codebook.grouped:
        groups = np.empty((n, nc), dtype=np.int64)
        weights = np.empty((n, nc, codebook.group_size))
    for j in range(nc):
        sub = flat[:, j * d:(j + 1) * d]
        atoms = codebook.slice_atoms(j)
        if codebook.grouped:
            g, a, blended, w = _group_select(sub, atoms, codebook.group_count)
            groups[:, j], idx[:, j], weights[:, j] = g, a, w
            quant[:, j * d:(j + 1) * d] = blended
        else:
            a = nearest_indices(sub, atoms)
            idx[:, j] = a
            quant[:, j * d:(j + 1) * d] = atoms[a]
    return QuantizeResult(
        idx.reshape(lead + (nc,)),
        quant.reshape(grid.shape),
        None if groups is None else groups.reshape(lead + (nc,)),
        None if weights is None else weights.reshape(lead + (nc, codebook.group_size)),
    )


def lookup(indices, codebook):
    """Atoms for transmitted indices, (..., n_c) -> (..., M); plain lookup even for GVQ."""
    indices = np.asarray(indices)
    if codebook.slice_count == 1 and (indices.ndim == 0 or indices.shape[-1] != 1):
        indices = indices[..., None]
    parts = [codebook.slice_atoms(j)[indices[..., j]] for j in range(codebook.slice_count)]
    return np.concatenate(parts, axis=-1)


# ------------------------------------------------------------------ losses

def _cells(z):
    return int(np.prod(z.shape[:-1]))


def vq_loss(z_e, result, alpha=1.0, beta=0.25):
    """(codebook_loss, commitment_loss): alpha / beta times mean squared cell distance."""
    diff = z_e - result.quantized
    per_cell = float(np.sum(diff * diff)) / _cells(z_e)
    return alpha * per_cell, beta * per_cell


def commitment_grad(z_e, result, beta=0.25):
    """d(commitment)/d z_e; the quantised side is held fixed."""
    return 2.0 * beta * (z_e - result.quantized) / _cells(z_e)


def quantized_grad_to_atoms(grad_q, result, codebook):
    """Route a gradient w.r.t. the quantised grid back onto the atoms.

    Plain VQ sends each cell's gradient to its selected atom; grouped VQ spreads
    it over the chosen group in proportion to the normalised weights.
    """
    grad_q = np.asarray(grad_q).reshape(-1, codebook.M)
    idx = result.slice_indices.reshape(-1, codebook.slice_count)
    out = np.zeros_like(codebook.atoms)
    d, ng = codebook.slice_dim, codebook.group_size
    for j in range(codebook.slice_count):
        gj = grad_q[:, j * d:(j + 1) * d]
        if codebook.grouped:
            w = result.weights.reshape(-1, codebook.slice_count, ng)[:, j]
            g = result.group_indices.reshape(-1, codebook.slice_count)[:, j]
            contrib = np.zeros((codebook.group_count, ng, d))
            np.add.at(contrib, g, w[:, :, None] * gj[:, None, :])
            out[:, j * d:(j + 1) * d] += contrib.reshape(codebook.K, d)
        else:
            np.add.at(out[:, j * d:(j + 1) * d], idx[:, j], gj)
    return out


def codebook_grad(z_e, result, codebook, alpha=1.0):
    """d(codebook loss)/d atoms; the encoder side is held fixed."""
    grad_q = 2.0 * alpha * (result.quantized - z_e) / _cells(z_e)
    return quantized_grad_to_atoms(grad_q, result, codebook)


def straight_through(decoder_grad_at_zq):
    """Gradient of the quantised grid is passed to the encoder output unchanged."""
    return decoder_grad_at_zq


# --------------------------------------------------------------------- EMA

def ema_update(codebook, assignments):
    """EMA step from an explicit ``{atom index: [vectors]}`` map (unsliced codebooks)."""
    if codebook.slice_count != 1:
        raise CodebookConfigError("ema_update with an assignment map needs n_c == 1; use ema_update_batch")
    n = np.zeros(codebook.K)
    s = np.zeros_like(codebook.atoms)
    for i, vecs in assignments.items():
        vecs = np.asarray(vecs, dtype=np.float64).reshape(-1, codebook.M)
        n[i] += len(vecs)
        s[i] += vecs.sum(axis=0)
    _ema_apply(codebook, 0, n, s)


def ema_update_batch(codebook, vectors, slice_indices=None):
    """EMA step from encoder vectors (..., M) and their per-slice assignments."""
    flat = np.asarray(vectors, dtype=np.float64).reshape(-1, codebook.M)
    if slice_indices is None:
        slice_indices = slice_quantize(flat, codebook).slice_indices
    idx = np.asarray(slice_indices).reshape(-1, codebook.slice_count)
    d = codebook.slice_dim
    for j in range(codebook.slice_count):
        n = np.bincount(idx[:, j], minlength=codebook.K).astype(np.float64)
        s = np.zeros((codebook.K, d))
        np.add.at(s, idx[:, j], flat[:, j * d:(j + 1) * d])
        _ema_apply(codebook, j, n, s)


def _ema_apply(codebook, j, n, s):
    gamma = codebook.decay
    d = codebook.slice_dim
    cols = slice(j * d, (j + 1) * d)
    counts = codebook.ema_counts[j]
    counts *= gamma
    counts += (1.0 - gamma) * n
    sums = codebook.ema_sums[:, cols]
    sums *= gamma
    sums += (1.0 - gamma) * s
    # unassigned rows keep their atom: m/N is unchanged when both scale by gamma
    live = (counts > 0) & (n > 0)
    codebook.atoms[live, cols] = sums[live] / counts[live, None]
