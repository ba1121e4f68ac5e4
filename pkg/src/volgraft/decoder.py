"""Toy causal decoder with low-rank adapters and gated visual cross-attention.

Topology mirrors a small Llama-style stack: pre-LN blocks with q/k/v/o
attention and a GELU-gated MLP (gate/up/down), so each block carries seven
projection matrices. Visual tokens enter twice: grafted over placeholder
ids at the embedding level, and through per-layer cross-attention adapters
that fire on every decode step (each adapter keeps an invocation counter so
the every-step contract stays testable).

Training uses the autodiff graph over full sequences; generation runs a
grad-free KV-cache session with LoRA deltas merged into dense weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, normal_init, xavier_uniform

LORA_TARGETS = ("q", "k", "v", "o", "gate", "up", "down")
NEG_INF = -1e30


@dataclass
class DecoderConfig:
    layers: int = 8
    d_llm: int = 128
    heads: int = 4
    vocab: int = 512
    inject_layers: tuple = (2, 4, 6)
    lora_rank: int = 4
    lora_scale: float = 1.0
    ff_mult: int = 2
    max_seq: int = 256
    xattn_gain: float = 0.3
    xattn_gate: bool = False    # optional learnable tanh gate, off by default

    def __post_init__(self):
        self.inject_layers = tuple(self.inject_layers)
        if list(self.inject_layers) != sorted(set(self.inject_layers)):
            raise ValueError("inject_layers must be strictly increasing")
        if any(l < 0 or l >= self.layers for l in self.inject_layers):
            raise ValueError("inject_layers must be valid block indices")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.d_llm % self.heads != 0:
            raise ValueError("heads must divide d_llm")


@dataclass
class SamplingConfig:
    temperature: float = 0.6
    top_p: float = 0.9
    repetition_penalty: float = 1.15
    no_repeat_ngram: int = 5
    max_new_tokens: int = 384
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")


@dataclass
class GraftedPrompt:
    token_ids: np.ndarray          # (T,) or (B, T) int
    placeholder_mask: np.ndarray   # same shape, bool
    visual_tokens: object = None   # (K, d) or (B, K, d) Tensor/ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.placeholder_mask = np.asarray(self.placeholder_mask, dtype=bool)
        if self.token_ids.shape != self.placeholder_mask.shape:
            raise ValueError("token_ids and placeholder_mask shapes differ")
        if self.visual_tokens is not None:
            k = self.visual_tokens.shape[-2]
            counts = self.placeholder_mask.sum(axis=-1)
            if not np.all(counts == k):
                raise ValueError(f"placeholder count {counts} != K={k}")
            # placeholders must be one contiguous run
            mask2d = np.atleast_2d(self.placeholder_mask)
            for row in mask2d:
                on = np.flatnonzero(row)
                if len(on) and not np.array_equal(on, np.arange(on[0], on[0] + len(on))):
                    raise ValueError("placeholders must be contiguous")


def lora_apply(base_weight, a, b, scale=1.0):
    """Effective weight = base + scale * B @ A; base stays frozen."""
    w = base_weight if isinstance(base_weight, Tensor) else Tensor(base_weight)
    at = a if isinstance(a, Tensor) else Tensor(a)
    bt = b if isinstance(b, Tensor) else Tensor(b)
    if bt.shape[1] != at.shape[0]:
        raise ad.ShapeError(f"lora rank mismatch: B {bt.shape} vs A {at.shape}")
    return ad.add(w, ad.mul(ad.matmul(bt, at), scale))


def build_prompt(specials, num_visual, batch=None):
    """Fixed chat template [BOS][SYS][VIS]*K[USR][ASST] as ids + placeholder mask."""
    ids = (
        [specials["bos"], specials["sys"]]
        + [specials["vis"]] * num_visual
        + [specials["usr"], specials["asst"]]
    )
    ids = np.array(ids, dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[2 : 2 + num_visual] = True
    if batch is not None:
        ids = np.tile(ids, (batch, 1))
        mask = np.tile(mask, (batch, 1))
    return ids, mask


class XattnAdapter:
    """Cross-attention adapter: h + MHA(LN(h), P(V), P(V)), Xavier gain 0.3.

    Seven tensors per adapter (ln scale/shift, q/k/v/o weights, output bias);
    the per-layer visual projector P lives in the `projectors` group.
    """

    def __init__(self, cfg, layer, store: ParameterStore, rng):
        d, gain = cfg.d_llm, cfg.xattn_gain
        p = f"dec.xattn{layer}"
        self.cfg = cfg
        self.ln_g = store.create(f"{p}.ln.g", "xattn", np.ones(d))
        self.ln_b = store.create(f"{p}.ln.b", "xattn", np.zeros(d))
        self.wq = store.create(f"{p}.wq", "xattn", xavier_uniform((d, d), gain, rng))
        self.wk = store.create(f"{p}.wk", "xattn", xavier_uniform((d, d), gain, rng))
        self.wv = store.create(f"{p}.wv", "xattn", xavier_uniform((d, d), gain, rng))
        self.wo = store.create(f"{p}.wo", "xattn", xavier_uniform((d, d), gain, rng))
        self.bo = store.create(f"{p}.bo", "xattn", np.zeros(d))
        self.gate = (
            store.create(f"{p}.gate", "xattn", np.zeros(1)) if cfg.xattn_gate else None
        )
        self.proj = store.create(f"dec.proj{layer}.w", "projectors", xavier_uniform((d, d), 1.0, rng))
        self.invocations = 0

    def reset_counter(self):
        self.invocations = 0

    def __call__(self, h, visual):
        """h (B,T,d), visual (B,K,d) or (K,d) -> h + cross-attention readout."""
        self.invocations += 1
        cfg = self.cfg
        nh, hd = cfg.heads, cfg.d_llm // cfg.heads
        x = ad.add(ad.mul(ad.layer_norm(h), self.ln_g), self.ln_b)
        kv_src = ad.matmul(visual if isinstance(visual, Tensor) else Tensor(visual),
                           ad.transpose(self.proj))
        b, t, d = h.shape
        k = kv_src.shape[-2]
        q = ad.transpose(ad.reshape(ad.matmul(x, ad.transpose(self.wq)), (b, t, nh, hd)), (0, 2, 1, 3))
        if kv_src.ndim == 2:
            kk = ad.transpose(ad.reshape(ad.matmul(kv_src, ad.transpose(self.wk)), (k, nh, hd)), (1, 0, 2))
            vv = ad.transpose(ad.reshape(ad.matmul(kv_src, ad.transpose(self.wv)), (k, nh, hd)), (1, 0, 2))
        else:
            kk = ad.transpose(ad.reshape(ad.matmul(kv_src, ad.transpose(self.wk)), (b, k, nh, hd)), (0, 2, 1, 3))
            vv = ad.transpose(ad.reshape(ad.matmul(kv_src, ad.transpose(self.wv)), (b, k, nh, hd)), (0, 2, 1, 3))
        scores = ad.mul(ad.matmul(q, ad.transpose(kk)), 1.0 / np.sqrt(hd))
        read = ad.matmul(ad.softmax(scores, axis=-1), vv)
        read = ad.reshape(ad.transpose(read, (0, 2, 1, 3)), (b, t, d))
        out = ad.linear(read, self.wo, self.bo)
        if self.gate is not None:
            out = ad.mul(out, ad.tanh(self.gate))
        return ad.add(h, out)


class ToyDecoder:
    def __init__(self, cfg: DecoderConfig, store: ParameterStore, rng, lora_targets=LORA_TARGETS):
        self.cfg = cfg
        self.store = store
        self.lora_targets = tuple(lora_targets)
        d, v, f = cfg.d_llm, cfg.vocab, cfg.ff_mult * cfg.d_llm

        def base(name, data):
            return store.create(f"dec.{name}", "base", data, frozen=True)

        self.embed = base("embed", normal_init((v, d), 0.02, rng))
        self.pos = base("pos", normal_init((cfg.max_seq, d), 0.02, rng))
        self.blocks = []
        for i in range(cfg.layers):
            blk = {
                "ln1_g": base(f"block{i}.ln1.g", np.ones(d)),
                "ln1_b": base(f"block{i}.ln1.b", np.zeros(d)),
                "q": base(f"block{i}.q.w", xavier_uniform((d, d), 1.0, rng)),
                "k": base(f"block{i}.k.w", xavier_uniform((d, d), 1.0, rng)),
                "v": base(f"block{i}.v.w", xavier_uniform((d, d), 1.0, rng)),
                "o": base(f"block{i}.o.w", xavier_uniform((d, d), 1.0, rng)),
                "ln2_g": base(f"block{i}.ln2.g", np.ones(d)),
                "ln2_b": base(f"block{i}.ln2.b", np.zeros(d)),
                "gate": base(f"block{i}.gate.w", xavier_uniform((f, d), 1.0, rng)),
                "up": base(f"block{i}.up.w", xavier_uniform((f, d), 1.0, rng)),
                "down": base(f"block{i}.down.w", xavier_uniform((d, f), 1.0, rng)),
            }
            blk["lora"] = {}
            for tgt in self.lora_targets:
                out_dim, in_dim = blk[tgt].shape
                blk["lora"][tgt] = (
                    store.create(f"dec.block{i}.{tgt}.lora_a", "lora",
                                 normal_init((cfg.lora_rank, in_dim), 0.02, rng)),
                    store.create(f"dec.block{i}.{tgt}.lora_b", "lora",
                                 np.zeros((out_dim, cfg.lora_rank))),
                )
            self.blocks.append(blk)
        self.lnf_g = base("final.ln.g", np.ones(d))
        self.lnf_b = base("final.ln.b", np.zeros(d))
        self.lm_head = base("head.w", normal_init((v, d), 0.02, rng))
        self.adapters = {
            l: XattnAdapter(cfg, l, store, rng) for l in cfg.inject_layers
        }

    # -- shared helpers -------------------------------------------------------

    def _lin(self, x, blk, tgt):
        out = ad.matmul(x, ad.transpose(blk[tgt]))
        a, b = blk["lora"][tgt]
        if a.requires_grad or b.requires_grad or np.any(b.data):
            delta = ad.matmul(ad.matmul(x, ad.transpose(a)), ad.transpose(b))
            out = ad.add(out, ad.mul(delta, self.cfg.lora_scale))
        return out

    def _heads(self, x, b, t):
        nh, hd = self.cfg.heads, self.cfg.d_llm // self.cfg.heads
        return ad.transpose(ad.reshape(x, (b, t, nh, hd)), (0, 2, 1, 3))

    def reset_adapter_counters(self):
        for a in self.adapters.values():
            a.reset_counter()

    def adapter_counts(self):
        return {l: a.invocations for l, a in self.adapters.items()}

    # -- embedding-level grafting ----------------------------------------------

    def graft(self, prompt: GraftedPrompt):
        """Token embeddings with visual rows scattered over placeholder ids."""
        emb = ad.gather_rows(self.embed, prompt.token_ids)
        if prompt.visual_tokens is None:
            return emb
        vis = (prompt.visual_tokens if isinstance(prompt.visual_tokens, Tensor)
               else Tensor(prompt.visual_tokens))
        return ad.scatter_by_mask(emb, prompt.placeholder_mask, vis)

    # -- full-sequence forward (training / teacher forcing) ---------------------

    def forward_full(self, embeds, visual=None, valid=None, upto_layer=None):
        """embeds (B,T,d) -> (logits (B,T,V), last hidden (B,T,d)).

        `valid` masks padded key positions; `upto_layer` returns the hidden
        state after that block instead (used for toy text embeddings).
        """
        x = embeds if isinstance(embeds, Tensor) else Tensor(embeds)
        b, t, d = x.shape
        if t > self.cfg.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq {self.cfg.max_seq}")
        x = ad.add(x, Tensor(self.pos.data[:t]) if not self.pos.requires_grad else ad.take(self.pos, slice(0, t)))
        causal = np.tril(np.ones((t, t), dtype=bool))
        mask = causal[None, None, :, :]
        if valid is not None:
            mask = mask & np.asarray(valid, dtype=bool)[:, None, None, :]
        addmask = np.where(mask, 0.0, NEG_INF)
        for i, blk in enumerate(self.blocks):
            h = ad.add(ad.mul(ad.layer_norm(x), blk["ln1_g"]), blk["ln1_b"])
            q = self._heads(self._lin(h, blk, "q"), b, t)
            k = self._heads(self._lin(h, blk, "k"), b, t)
            v = self._heads(self._lin(h, blk, "v"), b, t)
            hd = d // self.cfg.heads
            scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(hd))
            attn = ad.softmax_add(scores, addmask)
            read = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
            x = ad.add(x, self._lin(read, blk, "o"))
            if i in self.adapters and visual is not None:
                x = self.adapters[i](x, visual)
            h2 = ad.add(ad.mul(ad.layer_norm(x), blk["ln2_g"]), blk["ln2_b"])
            ff = self._lin(ad.mul(ad.gelu(self._lin(h2, blk, "gate")), self._lin(h2, blk, "up")), blk, "down")
            x = ad.add(x, ff)
            if upto_layer is not None and i == upto_layer:
                return None, x
        x = ad.add(ad.mul(ad.layer_norm(x), self.lnf_g), self.lnf_b)
        logits = ad.matmul(x, ad.transpose(self.lm_head))
        return logits, x

    def text_embedding(self, token_ids, valid=None, layer=None):
        """Mean of mid-layer hidden states over valid positions (grad-free)."""
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        layer = self.cfg.layers // 2 - 1 if layer is None else layer
        with ad.no_grad():
            emb = ad.gather_rows(self.embed, ids)
            _, h = self.forward_full(emb, valid=valid, upto_layer=layer)
        hv = h.data
        if valid is None:
            return hv.mean(axis=1)
        w = np.asarray(valid, dtype=np.float64)
        return (hv * w[:, :, None]).sum(axis=1) / np.maximum(w.sum(axis=1, keepdims=True), 1.0)

    def teacher_forced_nll(self, prompt: GraftedPrompt, target_ids, word_class_mask=None,
                           target_valid=None):
        """Mean NLL of targets under teacher forcing, plus per-word-class means.

        target_ids (B, S) follow the prompt; word_class_mask flags
        pathology-specific target positions; target_valid masks padding.
        """
        ids = np.atleast_2d(prompt.token_ids)
        tgt = np.atleast_2d(np.asarray(target_ids, dtype=np.int64))
        bsz, tp = ids.shape
        s = tgt.shape[1]
        if s == 0:
            raise ValueError("empty target")
        full = np.concatenate([ids, tgt], axis=1)
        tv = np.ones_like(tgt, dtype=bool) if target_valid is None else np.asarray(target_valid, dtype=bool)
        valid = np.concatenate([np.ones_like(ids, dtype=bool), tv], axis=1)
        with ad.no_grad():
            mask2d = np.concatenate(
                [np.atleast_2d(prompt.placeholder_mask), np.zeros_like(tgt, dtype=bool)], axis=1
            )
            gp = GraftedPrompt(full, mask2d, prompt.visual_tokens)
            emb = self.graft(gp)
            logits, _ = self.forward_full(emb, visual=_cal_vis(prompt), valid=valid)
        lp = logits.data - _logsumexp(logits.data)
        pred_pos = np.arange(tp - 1, tp - 1 + s)
        nll = -np.take_along_axis(lp[:, pred_pos, :], tgt[..., None], axis=-1)[..., 0]
        nll = np.where(tv, nll, 0.0)
        total = nll.sum() / tv.sum()
        if word_class_mask is None:
            return float(total), (float("nan"), float("nan"))
        wc = np.asarray(word_class_mask, dtype=bool) & tv
        gc = ~np.asarray(word_class_mask, dtype=bool) & tv
        path_nll = float(nll[wc].sum() / wc.sum()) if wc.any() else float("nan")
        gen_nll = float(nll[gc].sum() / gc.sum()) if gc.any() else float("nan")
        return float(total), (path_nll, gen_nll)


def _cal_vis(prompt):
    if prompt.visual_tokens is None:
        return None
    v = prompt.visual_tokens
    return v if isinstance(v, Tensor) else Tensor(v)


def _logsumexp(logits):
    mx = logits.max(axis=-1, keepdims=True)
    return mx + np.log(np.exp(logits - mx).sum(axis=-1, keepdims=True))


# -- grad-free KV-cache generation --------------------------------------------


class DecodeSession:
    """Incremental decoding over merged (base + LoRA) weights.

    Adapters fire on the prefill pass and on every subsequent step; their
    projected visual keys/values are computed once since the visual tokens
    are static within a generation.
    """

    def __init__(self, model: ToyDecoder, visual, batch, capacity):
        self.m = model
        cfg = model.cfg
        self.nh, self.hd = cfg.heads, cfg.d_llm // cfg.heads
        self.merged = []
        for blk in model.blocks:
            w = {}
            for tgt in ("q", "k", "v", "o", "gate", "up", "down"):
                base = blk[tgt].data
                if tgt in blk["lora"]:
                    a, b = blk["lora"][tgt]
                    w[tgt] = base + cfg.lora_scale * (b.data @ a.data)
                else:
                    w[tgt] = base
            for nm in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                w[nm] = blk[nm].data
            self.merged.append(w)
        self.visual_kv = {}
        if visual is not None:
            vis = visual.data if isinstance(visual, Tensor) else np.asarray(visual)
            if vis.ndim == 2:
                vis = np.broadcast_to(vis, (batch,) + vis.shape)
            for l, adp in model.adapters.items():
                src = vis @ adp.proj.data.T
                k = self._split(src @ adp.wk.data.T)
                v = self._split(src @ adp.wv.data.T)
                self.visual_kv[l] = (k, v)
        self.cache_k = [np.zeros((batch, self.nh, capacity, self.hd)) for _ in model.blocks]
        self.cache_v = [np.zeros((batch, self.nh, capacity, self.hd)) for _ in model.blocks]
        self.length = 0
        self.batch = batch

    def _split(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self.nh, self.hd).transpose(0, 2, 1, 3)

    def _ln(self, x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + ad.LN_EPS) * g + b

    def _xattn(self, l, x):
        adp = self.m.adapters[l]
        adp.invocations += 1
        k, v = self.visual_kv[l]
        h = self._ln(x, adp.ln_g.data, adp.ln_b.data)
        q = self._split(h @ adp.wq.data.T)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.hd)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        read = (w @ v).transpose(0, 2, 1, 3).reshape(x.shape)
        out = read @ adp.wo.data.T + adp.bo.data
        if adp.gate is not None:
            out = out * np.tanh(adp.gate.data)
        return x + out

    def run(self, embeds):
        """Process new positions (prefill: T>1, step: T=1); returns last logits."""
        m, cfg = self.m, self.m.cfg
        b, t, d = embeds.shape
        x = embeds + m.pos.data[self.length : self.length + t]
        new_lo, new_hi = self.length, self.length + t
        for i, w in enumerate(self.merged):
            h = self._ln(x, w["ln1_g"], w["ln1_b"])
            q = self._split(h @ w["q"].T)
            self.cache_k[i][:, :, new_lo:new_hi] = self._split(h @ w["k"].T)
            self.cache_v[i][:, :, new_lo:new_hi] = self._split(h @ w["v"].T)
            keys = self.cache_k[i][:, :, :new_hi]
            vals = self.cache_v[i][:, :, :new_hi]
            scores = q @ keys.transpose(0, 1, 3, 2) / np.sqrt(self.hd)
            if t > 1:
                causal = np.arange(new_hi)[None, :] <= (new_lo + np.arange(t))[:, None]
                scores = np.where(causal[None, None], scores, NEG_INF)
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            read = (attn @ vals).transpose(0, 2, 1, 3).reshape(b, t, d)
            x = x + read @ w["o"].T
            if i in m.adapters and self.visual_kv:
                x = self._xattn(i, x)
            h2 = self._ln(x, w["ln2_g"], w["ln2_b"])
            gelu_part = _np_gelu(h2 @ w["gate"].T)
            x = x + (gelu_part * (h2 @ w["up"].T)) @ w["down"].T
        self.length = new_hi
        x = self._ln(x[:, -1], m.lnf_g.data, m.lnf_b.data)
        return x @ m.lm_head.data.T


def _np_gelu(x):
    from scipy.special import erf

    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def generate(model: ToyDecoder, prompt: GraftedPrompt, cfg: SamplingConfig, eor_id,
             stream_ids=None, pad_id=0):
    """Nucleus sampling with repetition penalty and no-repeat-ngram masking.

    Every sampled token is fed back through a decode step (the final one
    included), so each adapter's counter lands at 1 + generated count.
    Returns (list of generated id lists, steps taken).
    """
    ids2d = np.atleast_2d(prompt.token_ids)
    bsz, tp = ids2d.shape
    if stream_ids is None:
        stream_ids = np.arange(bsz)
    rngs = [
        np.random.Generator(np.random.Philox(key=[cfg.seed, int(s)]))
        for s in stream_ids
    ]
    vis = prompt.visual_tokens
    capacity = tp + cfg.max_new_tokens + 1
    if capacity > model.cfg.max_seq:
        raise ValueError("prompt plus max_new_tokens exceeds decoder max_seq")
    session = DecodeSession(model, vis, bsz, capacity)
    with ad.no_grad():
        gp = GraftedPrompt(ids2d, np.atleast_2d(prompt.placeholder_mask), vis)
        embeds = model.graft(gp).data
    logits = session.run(embeds)

    history = [list(row) for row in ids2d]
    generated = [[] for _ in range(bsz)]
    done = np.zeros(bsz, dtype=bool)
    n = cfg.no_repeat_ngram
    steps = 0
    for _ in range(cfg.max_new_tokens):
        next_ids = np.full(bsz, pad_id, dtype=np.int64)
        for b in range(bsz):
            if done[b]:
                continue
            next_ids[b] = _sample_row(
                logits[b], history[b], generated[b], cfg, rngs[b], n
            )
            generated[b].append(int(next_ids[b]))
            history[b].append(int(next_ids[b]))
            if next_ids[b] == eor_id:
                done[b] = True
        emb_step = model.embed.data[next_ids][:, None, :]
        logits = session.run(emb_step)
        steps += 1
        if done.all():
            break
    return generated, steps


def _sample_row(logits, history, generated, cfg, rng, n):
    l = logits.astype(np.float64).copy()
    if cfg.repetition_penalty != 1.0 and generated:
        seen = np.unique(np.asarray(generated))
        lv = l[seen]
        l[seen] = np.where(lv > 0, lv / cfg.repetition_penalty, lv * cfg.repetition_penalty)
    if n > 0 and len(history) >= n - 1:
        suffix = tuple(history[-(n - 1):]) if n > 1 else ()
        banned = _ngram_bans(history, n, suffix)
        if banned:
            l[list(banned)] = NEG_INF
    finite = l > NEG_INF / 2
    if not finite.any():
        return int(np.argmax(logits))
    if cfg.greedy:
        return int(np.argmax(l))
    z = l / cfg.temperature
    z -= z.max()
    p = np.exp(z)
    p[~finite] = 0.0
    total = p.sum()
    if total <= 0:
        return int(np.argmax(np.where(finite, l, -np.inf)))
    p /= total
    order = np.argsort(-p)
    cum = np.cumsum(p[order])
    cut = int(np.searchsorted(cum, cfg.top_p) + 1)
    keep = order[:cut]
    kp = p[keep]
    kp_sum = kp.sum()
    if kp_sum <= 0:
        return int(np.argmax(np.where(finite, l, -np.inf)))
    return int(rng.choice(keep, p=kp / kp_sum))


def _ngram_bans(history, n, suffix):
    """Tokens that would complete an n-gram already present in history."""
    banned = set()
    h = history
    for i in range(len(h) - n + 1):
        if tuple(h[i : i + n - 1]) == suffix:
            banned.add(h[i + n - 1])
    return banned
