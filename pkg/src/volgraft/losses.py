"""Training objectives for all four curriculum phases.

Phase 1: positively-weighted BCE + MIL max-pool + token orthogonality + MMD.
Phase 2: InfoNCE with a learned temperature.
Phase 3: masked LM + focal + whitened-space MSE + LLM-side visual classifier.
Phase 4: masked LM + focal + quadratic anchor on the low-rank adapters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    lambda_cls: float = 1.5
    lambda_mil: float = 1.0
    lambda_orth: float = 1.0
    lambda_mmd: float = 0.5
    lambda_fcls: float = 1.0    # phase-3 focal weight (value not pinned upstream)
    lambda_jepa: float = 0.5    # phase-3 embedding-prediction weight (ditto)
    lambda_vcls: float = 3.0
    lambda_ewc: float = 100.0
    gamma_focal: float = 2.0
    gamma_imq: float = 5.0


def pos_weights(label_matrix, cap=10.0):
    """Per-class positive weights min(n_neg/n_pos, cap); classes with no
    positives get the cap."""
    y = np.asarray(label_matrix, dtype=np.float64)
    n_pos = y.sum(axis=0)
    n_neg = y.shape[0] - n_pos
    w = np.where(n_pos > 0, np.minimum(n_neg / np.maximum(n_pos, 1), cap), cap)
    return w


def _log_probs(logits, labels):
    """(log p_t, 1 - p_t) with the stable softplus form, elementwise."""
    x = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    log_p1 = ad.mul(ad.softplus(ad.mul(x, -1.0)), -1.0)   # log sigmoid(x)
    log_p0 = ad.mul(ad.softplus(x), -1.0)                 # log sigmoid(-x)
    log_pt = ad.add(ad.mul(log_p1, y), ad.mul(log_p0, 1.0 - y))
    p = ad.sigmoid(x)
    one_minus_pt = ad.add(ad.mul(ad.add(ad.mul(p, -1.0), 1.0), y), ad.mul(p, 1.0 - y))
    return log_pt, one_minus_pt


def bce_pos_weighted(logits, labels, weights=None):
    """Binary cross-entropy with per-class positive weights, mean-reduced."""
    x = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    w = np.ones(y.shape[-1]) if weights is None else np.asarray(weights, dtype=np.float64)
    pos_term = ad.mul(ad.mul(ad.softplus(ad.mul(x, -1.0)), y), w)
    neg_term = ad.mul(ad.softplus(x), 1.0 - y)
    return ad.tmean(ad.add(pos_term, neg_term))


def mil_loss(per_token_logits, labels, weights=None):
    """Class-wise max over the K token logits, then weighted BCE."""
    x = per_token_logits if isinstance(per_token_logits, Tensor) else Tensor(per_token_logits)
    pooled = ad.tmax(x, axis=-2)
    return bce_pos_weighted(pooled, labels, weights)


def orthogonality_loss(tokens):
    """||G - I||_F^2 / K^2 for the Gram matrix of row-normalized tokens."""
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    k = x.shape[-2]
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(norms < 1e-12):
        raise ValueError("orthogonality loss undefined for zero-norm token rows")
    xn = ad.mul(x, ad.power(ad.tsum(ad.mul(x, x), axis=-1, keepdims=True), -0.5))
    gram = ad.matmul(xn, ad.transpose(xn))
    eye = np.eye(k)
    diff = ad.add(gram, -eye)
    per = ad.mul(ad.tsum(ad.mul(diff, diff), axis=(-1, -2) if gram.ndim > 2 else None), 1.0 / k**2)
    return ad.tmean(per) if per.ndim > 0 else per


def imq_alpha(gamma, dim):
    """Inverse multi-quadratic bandwidth constant 4*gamma / (2*dim - 3)."""
    if dim < 2:
        raise ValueError("kernel dimension must be >= 2")
    return 4.0 * gamma / (2.0 * dim - 3.0)


def imq_kernel(x, y, gamma=5.0, dim=None):
    """(1 + alpha ||x-y||^2)^(-1/2) between two single vectors."""
    xv = x if isinstance(x, Tensor) else Tensor(x)
    yv = y if isinstance(y, Tensor) else Tensor(y)
    d = dim if dim is not None else xv.shape[-1]
    a = imq_alpha(gamma, d)
    diff = ad.add(xv, ad.mul(yv, -1.0))
    sq = ad.tsum(ad.mul(diff, diff))
    return ad.power(ad.add(ad.mul(sq, a), 1.0), -0.5)


def _imq_matrix(a, b, gamma):
    d = a.shape[-1]
    alpha = imq_alpha(gamma, d)
    sq = ad.pairwise_sqdist(a, b)
    return ad.power(ad.add(ad.mul(sq, alpha), 1.0), -0.5)


def mmd_imq(z_v, z_t, gamma=5.0, estimator="auto"):
    """MMD^2 estimate E[k(v,v')] - 2 E[k(v,t)] + E[k(t,t')] with the IMQ kernel.

    estimator: "u" excludes same-index pairs (unbiased, needs >= 2 per set),
    "v" keeps them, "auto" picks "u" when both sets allow it.
    """
    zv = z_v if isinstance(z_v, Tensor) else Tensor(z_v)
    zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    n, m = zv.shape[0], zt.shape[0]
    if n == 0 or m == 0:
        raise ValueError("MMD needs nonempty sets")
    use_u = estimator == "u" or (estimator == "auto" and n >= 2 and m >= 2)

    def self_term(z, count):
        k = _imq_matrix(z, z, gamma)
        if use_u and count >= 2:
            off = ad.masked_fill(k, np.eye(count, dtype=bool), 0.0)
            return ad.mul(ad.tsum(off), 1.0 / (count * (count - 1)))
        return ad.mul(ad.tsum(k), 1.0 / count**2)

    cross = ad.tmean(_imq_matrix(zv, zt, gamma))
    return ad.add(ad.add(self_term(zv, n), self_term(zt, m)), ad.mul(cross, -2.0))


def mmd_imq_batched(z_v, z_t, zt_mask, gamma=5.0):
    """Per-sample MMD^2 over a batch, vectorized.

    z_v (B,K,D): one embedding per visual token; z_t (B,M,D) padded positive-
    condition text embeddings with boolean zt_mask (B,M). Samples without
    positives are excluded (normal volumes get no distribution-matching
    pressure). Self terms use the unbiased form when a set has >= 2 members.
    Returns (mean over included samples, include count) or (None, 0).
    """
    zv = z_v if isinstance(z_v, Tensor) else Tensor(z_v)
    zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    mask = np.asarray(zt_mask, dtype=bool)
    b, k, d = zv.shape
    m_counts = mask.sum(axis=1)
    include = m_counts >= 1
    if not include.any():
        return None, 0
    alpha = imq_alpha(gamma, d)

    def kmat(a, c):
        sq = ad.pairwise_sqdist(a, c)
        return ad.power(ad.add(ad.mul(sq, alpha), 1.0), -0.5)

    kvv = kmat(zv, zv)                                   # (B,K,K)
    eye_k = np.broadcast_to(np.eye(k, dtype=bool), (b, k, k))
    vv = ad.mul(ad.tsum(ad.masked_fill(kvv, eye_k, 0.0), axis=(-1, -2)), 1.0 / (k * (k - 1)))

    kvt = kmat(zv, zt)                                   # (B,K,M)
    cross_mask = mask[:, None, :].astype(np.float64)
    denom_cross = np.maximum(k * m_counts, 1).astype(np.float64)
    cross = ad.mul(ad.tsum(ad.mul(kvt, cross_mask), axis=(-1, -2)), 1.0)
    cross = ad.mul(cross, Tensor(1.0 / denom_cross))

    ktt = kmat(zt, zt)                                   # (B,M,M)
    mm = zt.shape[1]
    pair = mask[:, :, None] & mask[:, None, :]
    pair = pair & ~np.broadcast_to(np.eye(mm, dtype=bool), (b, mm, mm))
    tt_num = ad.tsum(ad.mul(ktt, pair.astype(np.float64)), axis=(-1, -2))
    denom_tt = np.maximum(m_counts * (m_counts - 1), 1).astype(np.float64)
    tt = ad.mul(tt_num, Tensor(1.0 / denom_tt))
    tt = ad.where(m_counts >= 2, tt, Tensor(np.ones(b)))  # singleton: k(x,x)=1

    per_sample = ad.add(ad.add(vv, tt), ad.mul(cross, -2.0))
    inc = include.astype(np.float64)
    loss = ad.mul(ad.tsum(ad.mul(per_sample, inc)), 1.0 / inc.sum())
    return loss, int(include.sum())


def info_nce(z_v, z_t, log_tau, symmetric=False):
    """Contrastive cross-entropy over cosine similarities, temperature exp(log_tau).

    Default matches visual->text direction only; the symmetric flag averages
    both directions. The caller clamps log_tau into [ln 0.01, ln 1] after
    each optimizer step.
    """
    zv = z_v if isinstance(z_v, Tensor) else Tensor(z_v)
    zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    b = zv.shape[0]
    sim = ad.cosine_matrix(zv, zt)
    inv_tau = ad.exp(ad.mul(log_tau, -1.0))
    scaled = ad.mul(sim, inv_tau)
    idx = np.arange(b)
    loss = ad.mul(ad.tmean(ad.take_along_last(ad.log_softmax(scaled, axis=-1), idx)), -1.0)
    if symmetric:
        other = ad.mul(
            ad.tmean(ad.take_along_last(ad.log_softmax(ad.transpose(scaled), axis=-1), idx)), -1.0
        )
        loss = ad.mul(ad.add(loss, other), 0.5)
    return loss


def focal_loss(logits, labels, gamma=2.0):
    """Focal-modulated BCE, -(1-p_t)^gamma log(p_t), mean over classes."""
    log_pt, one_minus_pt = _log_probs(logits, labels)
    return ad.tmean(ad.mul(ad.mul(ad.power(one_minus_pt, gamma), log_pt), -1.0))


def lm_loss_masked(logits, targets, response_mask):
    """Mean next-token cross-entropy over masked positions only."""
    x = logits if isinstance(logits, Tensor) else Tensor(logits)
    mask = np.asarray(response_mask, dtype=bool)
    if not mask.any():
        raise ValueError("response mask selects no positions")
    logp = ad.log_softmax(x, axis=-1)
    nll = ad.mul(ad.take_along_last(logp, np.asarray(targets, dtype=np.int64)), -1.0)
    picked = ad.mul(nll, mask.astype(np.float64))
    return ad.mul(ad.tsum(picked), 1.0 / mask.sum())


def jepa_embed_loss(z_v, z_t, mode="mse"):
    """Embedding-prediction objective in the whitened space (MSE by default)."""
    zv = z_v if isinstance(z_v, Tensor) else Tensor(z_v)
    zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    if mode == "cosine":
        sims = ad.tsum(ad.mul(_unit(zv), _unit(zt)), axis=-1)
        return ad.tmean(ad.add(ad.mul(sims, -1.0), 1.0))
    diff = ad.add(zv, ad.mul(zt, -1.0))
    return ad.tmean(ad.mul(diff, diff))


def _unit(x):
    return ad.mul(x, ad.power(ad.add(ad.tsum(ad.mul(x, x), axis=-1, keepdims=True), 1e-12), -0.5))


def llm_visual_cls_loss(last_hidden, placeholder_mask, labels, head_w, head_b, gamma=2.0):
    """Mean-pool last-layer states at placeholder positions -> linear -> focal.

    Forces visual information to survive the full decoder stack.
    """
    h = last_hidden if isinstance(last_hidden, Tensor) else Tensor(last_hidden)
    m = np.asarray(placeholder_mask, dtype=np.float64)
    if not m.any():
        raise ValueError("no placeholder positions to pool")
    counts = m.sum(axis=-1, keepdims=True)
    pooled = ad.mul(ad.tsum(ad.mul(h, m[..., None]), axis=-2), 1.0 / counts)
    logits = ad.linear(pooled, head_w, head_b)
    return focal_loss(logits, labels, gamma)


def ewc_penalty(store, refs, lam):
    """lam * sum over LoRA tensors of squared deviation from the reference
    snapshot. The reference must cover the LoRA group exactly."""
    names = store.names("lora")
    missing = [n for n in names if n not in refs]
    extra = [n for n in refs if n not in names]
    if missing or extra:
        raise ValueError(f"EWC reference mismatch: missing={missing} extra={extra}")
    total = Tensor(0.0)
    for n in names:
        t = store[n].tensor
        d = ad.add(t, Tensor(-refs[n]))
        total = ad.add(total, ad.tsum(ad.mul(d, d)))
    return ad.mul(total, lam)


def compose_phase_loss(weighted_parts):
    """Weighted sum of loss parts: iterable of (weight, Tensor or None).

    Absent parts contribute zero; the composition is the phase equation.
    """
    total = None
    for weight, part in weighted_parts:
        if part is None or weight == 0.0:
            continue
        term = ad.mul(part, weight) if weight != 1.0 else part
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)
