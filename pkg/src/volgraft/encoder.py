"""Visual encoder: variable-length slice sequences -> exactly K zone tokens.

Pipeline: sinusoidal positional encoding on the physical z coordinate, a
contiguous zone partition of the slice axis, per-zone multi-head cross
attention from K learnable region queries, and one global self-attention
layer for inter-zone mixing. Token k attends only to slices inside zone k;
zeroing everything outside the zone never changes token k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, xavier_uniform


@dataclass
class EncoderConfig:
    d_v: int = 64
    num_tokens: int = 8          # K
    heads: int = 4
    max_slices: int = 600
    pe_base: float = 10000.0
    ff_mult: int = 4

    def __post_init__(self):
        if self.d_v % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide d_v {self.d_v}")
        if self.d_v % 2 != 0:
            raise ValueError("d_v must be even for sin/cos interleaving")


@dataclass
class SliceSequence:
    """N slice embeddings with physical z positions (mm) and validity mask."""

    embeddings: np.ndarray        # (N, d_v)
    z_coords: np.ndarray          # (N,)
    valid_mask: np.ndarray = None  # (N,) bool

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.z_coords = np.asarray(self.z_coords, dtype=np.float64)
        n = self.embeddings.shape[0]
        if n < 1:
            raise ValueError("sequence needs at least one slice")
        if self.valid_mask is None:
            self.valid_mask = np.ones(n, dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        zv = self.z_coords[self.valid_mask]
        if len(zv) > 1 and not np.all(np.diff(zv) > 0):
            raise ValueError("z_coords must be strictly increasing over valid slices")

    @property
    def num_valid(self):
        return int(self.valid_mask.sum())


def z_positional_encoding(z_coords, d_v, base=10000.0):
    """Sinusoid on physical z: pe[2j] = sin(z/base^(2j/d)), pe[2j+1] = cos."""
    z = np.asarray(z_coords, dtype=np.float64)
    j = np.arange(d_v // 2, dtype=np.float64)
    freq = base ** (-2.0 * j / d_v)
    ang = z[..., None] * freq
    pe = np.empty(z.shape + (d_v,), dtype=np.float64)
    pe[..., 0::2] = np.sin(ang)
    pe[..., 1::2] = np.cos(ang)
    return pe


def apply_z_positional_encoding(seq: SliceSequence, base=10000.0) -> SliceSequence:
    """s_i' = s_i + PE(z_i); invalid slices pass through untouched."""
    pe = z_positional_encoding(seq.z_coords, seq.embeddings.shape[1], base)
    out = seq.embeddings + np.where(seq.valid_mask[:, None], pe, 0.0)
    return SliceSequence(out, seq.z_coords.copy(), seq.valid_mask.copy())


def partition_zones(n_slices, num_tokens):
    """Contiguous zone bounds: zone k covers [floor(k*N/K), floor((k+1)*N/K))."""
    k = np.arange(num_tokens + 1, dtype=np.int64)
    edges = (k * n_slices) // num_tokens
    return [(int(edges[i]), int(edges[i + 1])) for i in range(num_tokens)]


def zone_bounds_batch(n_valid, num_tokens):
    """Vectorized bounds for a batch: returns lo, hi arrays of shape (B, K)."""
    n = np.asarray(n_valid, dtype=np.int64)[:, None]
    k = np.arange(num_tokens + 1, dtype=np.int64)[None, :]
    edges = (k * n) // num_tokens
    return edges[:, :-1], edges[:, 1:]


class ZoneEncoder:
    """Zone-constrained cross-attention + one global self-attention layer."""

    def __init__(self, cfg: EncoderConfig, store: ParameterStore, rng, prefix="enc"):
        self.cfg = cfg
        d, k, ff = cfg.d_v, cfg.num_tokens, cfg.ff_mult * cfg.d_v

        def par(name, data):
            return store.create(f"{prefix}.{name}", "encoder", data)

        self.queries = par("queries", rng.normal(0.0, 0.02, size=(k, d)))
        self.wq = par("zone.wq", xavier_uniform((d, d), 1.0, rng))
        self.wk = par("zone.wk", xavier_uniform((d, d), 1.0, rng))
        self.wv = par("zone.wv", xavier_uniform((d, d), 1.0, rng))
        self.wo = par("zone.wo", xavier_uniform((d, d), 1.0, rng))
        self.bq = par("zone.bq", np.zeros(d))
        self.bk = par("zone.bk", np.zeros(d))
        self.bv = par("zone.bv", np.zeros(d))
        self.bo = par("zone.bo", np.zeros(d))
        # global transformer-encoder layer (post-LN, GELU feed-forward)
        self.gwq = par("glob.wq", xavier_uniform((d, d), 1.0, rng))
        self.gwk = par("glob.wk", xavier_uniform((d, d), 1.0, rng))
        self.gwv = par("glob.wv", xavier_uniform((d, d), 1.0, rng))
        self.gwo = par("glob.wo", xavier_uniform((d, d), 1.0, rng))
        self.gbq = par("glob.bq", np.zeros(d))
        self.gbk = par("glob.bk", np.zeros(d))
        self.gbv = par("glob.bv", np.zeros(d))
        self.gbo = par("glob.bo", np.zeros(d))
        self.ln1_g = par("glob.ln1.g", np.ones(d))
        self.ln1_b = par("glob.ln1.b", np.zeros(d))
        self.ln2_g = par("glob.ln2.g", np.ones(d))
        self.ln2_b = par("glob.ln2.b", np.zeros(d))
        self.ff_w1 = par("glob.ff.w1", xavier_uniform((ff, d), 1.0, rng))
        self.ff_b1 = par("glob.ff.b1", np.zeros(ff))
        self.ff_w2 = par("glob.ff.w2", xavier_uniform((d, ff), 1.0, rng))
        self.ff_b2 = par("glob.ff.b2", np.zeros(d))

    def _split_heads(self, x, b, t):
        h, hd = self.cfg.heads, self.cfg.d_v // self.cfg.heads
        return ad.transpose(ad.reshape(x, (b, t, h, hd)), (0, 2, 1, 3))

    def zone_cross_attention(self, slices, n_valid):
        """slices: (B, N, d_v) Tensor/array, n_valid: (B,) -> (B, K, d_v)."""
        cfg = self.cfg
        x = slices if isinstance(slices, Tensor) else Tensor(slices)
        b, n, d = x.shape
        k, h, hd = cfg.num_tokens, cfg.heads, d // cfg.heads
        n_valid = np.asarray(n_valid, dtype=np.int64)
        if np.any(n_valid < 1):
            raise ValueError("every sample needs at least one valid slice")
        if np.any(n_valid > cfg.max_slices):
            raise ValueError(f"slice count exceeds configured max {cfg.max_slices}")

        lo, hi = zone_bounds_batch(n_valid, k)             # (B, K)
        pos = np.arange(n)[None, None, :]
        zone_mask = (pos >= lo[:, :, None]) & (pos < hi[:, :, None])  # (B, K, N)
        empty = (hi == lo)                                  # (B, K)

        q = ad.linear(self.queries, self.wq, self.bq)       # (K, d)
        keys = ad.linear(x, self.wk, self.bk)               # (B, N, d)
        vals = ad.linear(x, self.wv, self.bv)

        qh = ad.transpose(ad.reshape(q, (k, h, hd)), (1, 0, 2))          # (H, K, hd)
        kh = self._split_heads(keys, b, n)                               # (B, H, N, hd)
        vh = self._split_heads(vals, b, n)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(hd))  # (B,H,K,N)
        attn = ad.masked_softmax(scores, zone_mask[:, None, :, :])
        read = ad.matmul(attn, vh)                                       # (B,H,K,hd)
        read = ad.reshape(ad.transpose(read, (0, 2, 1, 3)), (b, k, d))
        # empty zone: the query itself stands in for the (zero) readout,
        # keeping the token count fixed and the output differentiable
        read = ad.where(empty[:, :, None], self.queries, read)
        return ad.linear(read, self.wo, self.bo)

    def global_self_attention(self, tokens):
        """One post-LN transformer encoder layer across the K tokens."""
        cfg = self.cfg
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        b, k, d = x.shape
        h, hd = cfg.heads, d // cfg.heads
        q = self._split_heads(ad.linear(x, self.gwq, self.gbq), b, k)
        ke = self._split_heads(ad.linear(x, self.gwk, self.gbk), b, k)
        v = self._split_heads(ad.linear(x, self.gwv, self.gbv), b, k)
        scores = ad.mul(ad.matmul(q, ad.transpose(ke)), 1.0 / np.sqrt(hd))
        read = ad.matmul(ad.softmax(scores, axis=-1), v)
        read = ad.reshape(ad.transpose(read, (0, 2, 1, 3)), (b, k, d))
        att = ad.linear(read, self.gwo, self.gbo)
        x = ad.add(ad.mul(ad.layer_norm(ad.add(x, att)), self.ln1_g), self.ln1_b)
        ff = ad.linear(ad.gelu(ad.linear(x, self.ff_w1, self.ff_b1)), self.ff_w2, self.ff_b2)
        return ad.add(ad.mul(ad.layer_norm(ad.add(x, ff)), self.ln2_g), self.ln2_b)

    def encode_batch(self, slices, n_valid):
        """PE-augmented padded slices (B, N, d_v) -> visual tokens (B, K, d_v)."""
        return self.global_self_attention(self.zone_cross_attention(slices, n_valid))

    def encode(self, seq: SliceSequence):
        """Single sequence -> (K, d_v) tokens; applies PE internally."""
        pe = apply_z_positional_encoding(seq, self.cfg.pe_base)
        out = self.encode_batch(pe.embeddings[None, :, :], [seq.num_valid])
        return ad.reshape(out, (self.cfg.num_tokens, self.cfg.d_v))


def init_queries_svd(sample_slices, num_tokens):
    """Region queries from the top-K right singular vectors of real slices,
    scaled to the mean slice-embedding norm. Rank-deficient samples are
    rejected rather than padded."""
    m = np.asarray(sample_slices, dtype=np.float64)
    if m.shape[0] < num_tokens:
        raise ValueError(f"need at least K={num_tokens} sample slices, got {m.shape[0]}")
    u, s, vt = ad.svd_thin(m, num_tokens)
    if s[-1] <= max(m.shape) * np.finfo(np.float64).eps * s[0]:
        raise ValueError(f"sample matrix rank < K={num_tokens}")
    mean_norm = float(np.linalg.norm(m, axis=1).mean())
    return vt * mean_norm
