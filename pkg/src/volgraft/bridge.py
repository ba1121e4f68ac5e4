"""Visual-to-LLM bridge: projection, norm calibration, pooling head, whitening.

The predictor lifts visual-width tokens into the decoder's hidden width; the
calibrator rescales them onto the decoder's text-embedding norm; the embed
head pools tokens into the whitened semantic space where the contrastive and
distribution-matching losses operate. PCA whitening of text embeddings (and
its anisotropy diagnostics) also lives here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, xavier_uniform


class JepaPredictor:
    """Dropout -> Linear(d_v -> d_llm) -> LayerNorm (affine).

    Dropout masks come from a counter-based Philox stream so a recorded
    counter can be replayed for deterministic gradient checks.
    """

    def __init__(self, d_v, d_llm, store: ParameterStore, rng, p_drop=0.1,
                 prefix="pred", seed=0):
        self.d_v, self.d_llm, self.p_drop = d_v, d_llm, p_drop
        self.w = store.create(f"{prefix}.w", "predictor", xavier_uniform((d_llm, d_v), 1.0, rng))
        self.b = store.create(f"{prefix}.b", "predictor", np.zeros(d_llm))
        self.ln_g = store.create(f"{prefix}.ln.g", "predictor", np.ones(d_llm))
        self.ln_b = store.create(f"{prefix}.ln.b", "predictor", np.zeros(d_llm))
        self.training = False
        self.seed = seed
        self.call_count = 0

    def reset_dropout_counter(self, value=0):
        self.call_count = value

    def _dropout_mask(self, shape):
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=[self.call_count, 0, 0, 0]))
        self.call_count += 1
        return gen.random(shape) >= self.p_drop

    def __call__(self, tokens):
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if self.training and self.p_drop > 0.0:
            x = ad.dropout(x, self._dropout_mask(x.shape), 1.0 - self.p_drop)
        x = ad.linear(x, self.w, self.b)
        return ad.add(ad.mul(ad.layer_norm(x), self.ln_g), self.ln_b)

    def init_from_text_svd(self, text_embeddings, scale=0.1):
        """Seed the projection from principal axes of a text-embedding corpus."""
        x = np.asarray(text_embeddings, dtype=np.float64)
        xc = x - x.mean(axis=0, keepdims=True)
        _, _, vt = ad.svd_thin(xc, min(self.d_v, min(xc.shape)))
        w = np.zeros((self.d_llm, self.d_v))
        w[:, : vt.shape[0]] = vt.T * scale
        self.w.data[:] = w


class NormCalibrator:
    """Scalar rescaling of projected tokens onto the text-embedding norm.

    alpha = target_norm / mean-row-norm at recalibration events; between
    events the stored scalar applies unchanged. alpha is not touched by the
    optimizer, only by recalibrate().
    """

    def __init__(self, target_norm, store: ParameterStore, prefix="cal"):
        if target_norm <= 0:
            raise ValueError("target_norm must be positive")
        self.target_norm = float(target_norm)
        self.alpha = store.create(f"{prefix}.alpha", "calibrator", np.array(1.0), frozen=True)

    def recalibrate(self, pred):
        data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
        mean_norm = float(np.linalg.norm(data, axis=-1).mean())
        if mean_norm <= 0.0:
            raise ValueError("cannot recalibrate on zero-norm predictions")
        self.alpha.data[()] = self.target_norm / mean_norm
        return float(self.alpha.data)

    def __call__(self, pred):
        x = pred if isinstance(pred, Tensor) else Tensor(pred)
        return ad.mul(x, self.alpha)


class EmbedHead:
    """Mean-pool tokens -> Linear -> LN -> GELU -> Linear into the whitened space."""

    def __init__(self, d_llm, d_out, store: ParameterStore, rng, hidden=None, prefix="ehead"):
        h = hidden or d_llm
        self.w1 = store.create(f"{prefix}.w1", "heads", xavier_uniform((h, d_llm), 1.0, rng))
        self.b1 = store.create(f"{prefix}.b1", "heads", np.zeros(h))
        self.ln_g = store.create(f"{prefix}.ln.g", "heads", np.ones(h))
        self.ln_b = store.create(f"{prefix}.ln.b", "heads", np.zeros(h))
        self.w2 = store.create(f"{prefix}.w2", "heads", xavier_uniform((d_out, h), 1.0, rng))
        self.b2 = store.create(f"{prefix}.b2", "heads", np.zeros(d_out))

    def _mlp(self, x):
        x = ad.linear(x, self.w1, self.b1)
        x = ad.add(ad.mul(ad.layer_norm(x), self.ln_g), self.ln_b)
        return ad.linear(ad.gelu(x), self.w2, self.b2)

    def __call__(self, tokens):
        """tokens (..., K, d_llm) -> (..., d_out) via mean pooling."""
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        return self._mlp(ad.tmean(x, axis=-2))

    def per_token(self, tokens):
        """Same MLP applied to each token row, no pooling: (..., K, d_out)."""
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        return self._mlp(x)


# -- PCA whitening ------------------------------------------------------------


@dataclass
class WhiteningTransform:
    mean: np.ndarray        # (d,)
    axes: np.ndarray        # (D, d), orthonormal rows
    scales: np.ndarray      # (D,), 1/sqrt(eigenvalue)
    variance_retained: float

    @property
    def dim(self):
        return self.axes.shape[0]


def fit_whitening(embeddings, d_out) -> WhiteningTransform:
    """PCA-whiten: top d_out principal axes with per-axis unit-variance scaling."""
    x = np.asarray(embeddings, dtype=np.float64)
    m = x.shape[0]
    if m <= d_out:
        raise ValueError(f"need more samples ({m}) than output dims ({d_out})")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (m - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    eigvals = np.clip(eigvals, 0.0, None)
    nonzero = eigvals > 1e-12 * max(eigvals[0], 1e-30)
    if nonzero[:d_out].sum() < d_out:
        raise ValueError(f"only {int(nonzero.sum())} nonzero eigenvalues, need {d_out}")
    top = eigvals[:d_out]
    retained = float(top.sum() / eigvals.sum()) if eigvals.sum() > 0 else 0.0
    return WhiteningTransform(
        mean=mean,
        axes=eigvecs[:, :d_out].T.copy(),
        scales=1.0 / np.sqrt(top),
        variance_retained=retained,
    )


def apply_whitening(x, w: WhiteningTransform):
    """scales * (axes @ (x - mean)); accepts a vector or a stack of rows."""
    if isinstance(x, Tensor):
        centered = ad.add(x, Tensor(-w.mean))
        return ad.mul(ad.matmul(centered, Tensor(w.axes.T)), Tensor(w.scales))
    arr = np.asarray(x, dtype=np.float64)
    return ((arr - w.mean) @ w.axes.T) * w.scales


# -- anisotropy diagnostics ----------------------------------------------------


def mean_pairwise_cosine(embeddings, max_exact=2000, num_sampled=10000, seed=0):
    """Mean cosine over all unordered pairs; subsampled above max_exact rows."""
    x = np.asarray(embeddings, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise ValueError("need at least two embeddings")
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    if m <= max_exact:
        g = xn @ xn.T
        return float((g.sum() - m) / (m * (m - 1)))
    rng = np.random.default_rng(seed)
    i = rng.integers(0, m, size=num_sampled)
    j = rng.integers(0, m - 1, size=num_sampled)
    j = np.where(j >= i, j + 1, j)
    return float(np.sum(xn[i] * xn[j], axis=1).mean())


def d_prime(embeddings, matched_pairs, mismatched_pairs):
    """Sensitivity index between matched- and mismatched-pair cosine similarities."""
    x = np.asarray(embeddings, dtype=np.float64)
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)

    def cos_of(pairs):
        p = np.asarray(pairs, dtype=np.int64)
        if p.size == 0:
            raise ValueError("empty pair set")
        return np.sum(xn[p[:, 0]] * xn[p[:, 1]], axis=1)

    cm, cmm = cos_of(matched_pairs), cos_of(mismatched_pairs)
    pooled = 0.5 * (cm.var(ddof=1) if len(cm) > 1 else 0.0) + 0.5 * (
        cmm.var(ddof=1) if len(cmm) > 1 else 0.0
    )
    if pooled <= 0.0:
        return float("inf")
    return float((cm.mean() - cmm.mean()) / np.sqrt(pooled))


def anisotropy_report(embeddings, matched_pairs, mismatched_pairs, seed=0):
    """(mean pairwise cosine, d') for a corpus plus labelled index pairs."""
    return (
        mean_pairwise_cosine(embeddings, seed=seed),
        d_prime(embeddings, matched_pairs, mismatched_pairs),
    )
