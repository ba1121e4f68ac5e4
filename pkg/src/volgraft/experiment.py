"""Wiring: model bundle, per-phase losses/eval closures, and the pipeline.

A Bundle owns the parameter store and all modules, plus the caches that make
the curriculum cheap: frozen-encoder visual tokens, tokenized reports, and
whitened text embeddings. The pipeline runs phases 1..4 with the collapse /
warm-bridge / ablation side experiments used for verification.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor, no_grad
from .bridge import (EmbedHead, JepaPredictor, NormCalibrator, WhiteningTransform,
                     apply_whitening, fit_whitening)
from .curriculum import (AdamW, Checkpoint, PhaseConfig, apply_freeze_policy,
                         bucketed_order, load_checkpoint, restore_into_store,
                         run_phase, save_checkpoint, warm_bridge_transfer)
from .decoder import (DecoderConfig, GraftedPrompt, SamplingConfig, ToyDecoder,
                      build_prompt, generate)
from .encoder import EncoderConfig, ZoneEncoder, init_queries_svd, z_positional_encoding
from .evaluation import auc_score, macro_metrics
from .params import ParameterStore, normal_init, xavier_uniform
from .synthdata import (SPECIALS, Tokenizer, default_conditions, generate_dataset,
                        label_extractor_oracle)


@dataclass
class ModelConfig:
    d_v: int = 64
    num_tokens: int = 8
    enc_heads: int = 4
    enc_ff_mult: int = 2
    d_llm: int = 128
    dec_layers: int = 8
    dec_heads: int = 4
    dec_ff_mult: int = 2
    inject_layers: tuple = (2, 4, 6)
    lora_rank: int = 4
    max_seq: int = 192
    whiten_dim: int = 16
    embed_hidden: int = 0           # 0 -> d_llm
    predictor_dropout: float = 0.1
    text_embed_layer: int = -1      # -1 -> middle layer
    pretrain_epochs: int = 3
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 64
    gen_batch: int = 64
    max_new_pos: int = 48
    max_new_raw: int = 128


@dataclass
class DataConfig:
    num_train: int = 4000
    num_val: int = 512
    n_range: tuple = (40, 120)
    seed: int = 0
    normal_frac: float = 0.38
    noise: float = 1.0
    strength: object = 3.0       # scalar or per-class sequence
    prevalence: float = 0.25
    conditions_seed: int = 7


@dataclass
class World:
    conditions: list
    tokenizer: Tokenizer
    train: list
    val: list

    @property
    def num_classes(self):
        return len(self.conditions)


def build_world(data_cfg: DataConfig, model_cfg: ModelConfig) -> World:
    conditions = default_conditions(
        model_cfg.d_v, model_cfg.num_tokens, data_cfg.strength,
        data_cfg.prevalence, data_cfg.conditions_seed,
    )
    tokenizer = Tokenizer.from_conditions(conditions)
    common = dict(n_range=data_cfg.n_range, d_v=model_cfg.d_v,
                  num_zones=model_cfg.num_tokens, normal_frac=data_cfg.normal_frac,
                  noise=data_cfg.noise)
    train = generate_dataset(data_cfg.num_train, conditions, seed=data_cfg.seed, **common)
    val = generate_dataset(data_cfg.num_val, conditions, seed=data_cfg.seed + 1, **common)
    return World(conditions, tokenizer, train, val)


class Bundle:
    """Everything assembled: modules, caches, per-phase closures."""

    def __init__(self, model_cfg: ModelConfig, world: World, seed=0, pretrain=True, log=None):
        self.cfg = model_cfg
        self.world = world
        self.log = log or (lambda msg: None)
        rng = np.random.default_rng(seed)
        self.seed = seed
        c = world.num_classes

        self.store = ParameterStore()
        self.enc_cfg = EncoderConfig(
            d_v=model_cfg.d_v, num_tokens=model_cfg.num_tokens,
            heads=model_cfg.enc_heads, ff_mult=model_cfg.enc_ff_mult,
        )
        self.encoder = ZoneEncoder(self.enc_cfg, self.store, rng)
        self.dec_cfg = DecoderConfig(
            layers=model_cfg.dec_layers, d_llm=model_cfg.d_llm,
            heads=model_cfg.dec_heads, vocab=world.tokenizer.vocab_size,
            inject_layers=model_cfg.inject_layers, lora_rank=model_cfg.lora_rank,
            ff_mult=model_cfg.dec_ff_mult, max_seq=model_cfg.max_seq,
        )
        self.decoder = ToyDecoder(self.dec_cfg, self.store, rng)
        self.predictor = JepaPredictor(
            model_cfg.d_v, model_cfg.d_llm, self.store, rng,
            p_drop=model_cfg.predictor_dropout, seed=seed,
        )
        hidden = model_cfg.embed_hidden or model_cfg.d_llm
        self.embed_head = EmbedHead(model_cfg.d_llm, model_cfg.whiten_dim,
                                    self.store, rng, hidden=hidden)
        self.cls_w = self.store.create("cls.w", "heads", xavier_uniform((c, model_cfg.d_v), 1.0, rng))
        self.cls_b = self.store.create("cls.b", "heads", np.zeros(c))
        self.vcls_w = self.store.create("vcls.w", "heads", xavier_uniform((c, model_cfg.d_llm), 1.0, rng))
        self.vcls_b = self.store.create("vcls.b", "heads", np.zeros(c))
        self.log_tau = self.store.create("nce.log_tau", "heads", np.array(math.log(0.10)))
        self.calibrator = NormCalibrator(1.0, self.store)
        self.cal_target = self.store.create("cal.target", "calibrator", np.array(1.0), frozen=True)

        self.prompt_ids, self.prompt_mask = build_prompt(SPECIALS, model_cfg.num_tokens)
        self.pos_weights = L.pos_weights(self.labels_of_split("train"))
        self._vis_cache = {}
        self._report_cache = {}

        if pretrain and model_cfg.pretrain_epochs > 0:
            self._pretrain_base(rng)
        for g in ("base",):
            self.store.set_group_frozen(g, True)

        self._finalize_setup(rng)

    # -- setup ------------------------------------------------------------------

    def _pretrain_base(self, rng):
        """Train the bare decoder on report text (no visual pathway).

        Stands in for the pretrained language model the bridge grafts into:
        installs fluent priors over both report registers (full narrative and
        terse findings-only) before any curriculum phase, the way a general
        LM knows both styles.
        """
        cfg, world = self.cfg, self.world
        self.store.set_group_frozen("base", False)
        for g in ("encoder", "predictor", "projectors", "xattn", "lora", "heads"):
            self.store.set_group_frozen(g, True)
        opt = AdamW(self.store, lr=cfg.pretrain_lr)
        n = len(world.train)
        order_rng = np.random.default_rng(self.seed * 7919 + 13)
        mode_lengths = {m: self.lengths("train", m)
                        for m in ("raw_narrative", "positive_findings")}
        t0 = time.time()
        for epoch in range(cfg.pretrain_epochs):
            mode = ("raw_narrative", "positive_findings")[epoch % 2]
            order = bucketed_order(order_rng, n, cfg.pretrain_batch, mode_lengths[mode])
            total, nb = 0.0, 0
            for lo in range(0, n, cfg.pretrain_batch):
                idxs = order[lo : lo + cfg.pretrain_batch]
                ids, valid, resp_mask, _ = self.assemble_ids("train", idxs, mode)
                self.store.zero_grads()
                emb = ad.gather_rows(self.decoder.embed, ids)
                logits, _ = self.decoder.forward_full(emb, valid=valid)
                loss = self._shifted_lm_loss(logits, ids, resp_mask)
                total += float(loss.data)
                loss.backward()
                opt.step()
                nb += 1
            self.log(f"pretrain epoch {epoch + 1} ({mode}): lm loss {total / nb:.4f} "
                     f"({time.time() - t0:.1f}s)")
        self.store.set_group_frozen("base", True)

    def _finalize_setup(self, rng):
        """Norm target, whitening, text-embedding caches, SVD inits."""
        cfg, world = self.cfg, self.world
        self.calibrator.target_norm = float(
            np.linalg.norm(self.decoder.embed.data, axis=1).mean()
        )
        self.cal_target.data[()] = self.calibrator.target_norm

        layer = cfg.text_embed_layer if cfg.text_embed_layer >= 0 else None
        self.class_embeds_raw = np.stack([
            self._embed_words(c.template_positive, layer) for c in world.conditions
        ])
        corpus = self._report_embeddings("train", "positive_findings", layer)
        self.whitening = fit_whitening(corpus, cfg.whiten_dim)
        wm = self.store.create("whiten.mean", "whitening", self.whitening.mean, frozen=True)
        wa = self.store.create("whiten.axes", "whitening", self.whitening.axes, frozen=True)
        ws = self.store.create("whiten.scales", "whitening", self.whitening.scales, frozen=True)
        # share storage so checkpoint restores update the transform in place
        self.whitening.mean, self.whitening.axes, self.whitening.scales = (
            wm.data, wa.data, ws.data)
        self.class_embeds_white = apply_whitening(self.class_embeds_raw, self.whitening)
        self.zt_cache = {
            "train": apply_whitening(corpus, self.whitening),
            "val": apply_whitening(self._report_embeddings("val", "positive_findings", layer),
                                   self.whitening),
        }
        self.predictor.init_from_text_svd(corpus)
        sample_rows = np.concatenate([s.seq.embeddings for s in world.train[:30]])
        self.encoder.queries.data[:] = init_queries_svd(sample_rows, cfg.num_tokens)
        self.recalibrate()

    def _embed_words(self, words, layer=None):
        ids = np.array([self.world.tokenizer.tokenize(list(words))])
        return self.decoder.text_embedding(ids, layer=layer)[0]

    def _report_embeddings(self, split, mode, layer=None, batch=64):
        samples = self.samples(split)
        out = np.zeros((len(samples), self.cfg.d_llm))
        for lo in range(0, len(samples), batch):
            idxs = np.arange(lo, min(lo + batch, len(samples)))
            ids, valid, _, _ = self.assemble_ids(split, idxs, mode, with_prompt=False)
            out[idxs] = self.decoder.text_embedding(ids, valid=valid, layer=layer)
        return out

    # -- data access ---------------------------------------------------------------

    def samples(self, split):
        return self.world.train if split == "train" else self.world.val

    def labels_of_split(self, split):
        return np.stack([s.labels for s in self.samples(split)])

    def labels_of(self, idxs, split="val"):
        samples = self.samples(split)
        return np.stack([samples[i].labels for i in idxs])

    def lengths(self, split, mode=None):
        """Bucketing keys: slice counts (mode None) or report token lengths."""
        samples = self.samples(split)
        if mode is None:
            return np.array([s.seq.embeddings.shape[0] for s in samples])
        key = "report_positive" if mode == "positive_findings" else "report_raw"
        return np.array([len(getattr(s, key)) for s in samples])

    def slice_batch(self, split, idxs):
        """Padded PE-augmented slice embeddings (B, Nmax, d_v) + valid counts."""
        samples = self.samples(split)
        seqs = [samples[i].seq for i in idxs]
        nmax = max(s.embeddings.shape[0] for s in seqs)
        out = np.zeros((len(seqs), nmax, self.cfg.d_v))
        nv = np.zeros(len(seqs), dtype=np.int64)
        for b, s in enumerate(seqs):
            n = s.embeddings.shape[0]
            out[b, :n] = s.embeddings + z_positional_encoding(
                s.z_coords, self.cfg.d_v, self.enc_cfg.pe_base)
            nv[b] = n
        return out, nv

    def report_ids(self, split, idx, mode):
        key = (split, idx, mode)
        if key not in self._report_cache:
            s = self.samples(split)[idx]
            words = s.report_positive if mode == "positive_findings" else s.report_raw
            mask = s.pos_path_mask if mode == "positive_findings" else s.raw_path_mask
            ids = self.world.tokenizer.tokenize(list(words)) + [SPECIALS["eor"]]
            self._report_cache[key] = (np.array(ids, dtype=np.int64),
                                       np.concatenate([mask, [False]]))
        return self._report_cache[key]

    def assemble_ids(self, split, idxs, mode, with_prompt=True):
        """ids, valid, response_mask, pathology_mask padded over the batch."""
        recs = [self.report_ids(split, i, mode) for i in idxs]
        smax = max(len(r[0]) for r in recs)
        p = len(self.prompt_ids) if with_prompt else 1  # lone BOS without prompt
        bsz = len(recs)
        ids = np.full((bsz, p + smax), SPECIALS["pad"], dtype=np.int64)
        pathm = np.zeros((bsz, p + smax), dtype=bool)
        if with_prompt:
            ids[:, :p] = self.prompt_ids
        else:
            ids[:, 0] = SPECIALS["bos"]
        for b, (rids, rmask) in enumerate(recs):
            ids[b, p : p + len(rids)] = rids
            pathm[b, p : p + len(rids)] = rmask
        valid = ids != SPECIALS["pad"]
        valid[:, :p] = True
        resp = valid.copy()
        resp[:, :p] = False
        return ids, valid, resp, pathm

    # -- model forward pieces ---------------------------------------------------------

    def visual_tokens(self, split, idxs, graph=False):
        """Visual tokens V' (B, K, d_v); cached ndarray when encoder is frozen."""
        if graph:
            emb, nv = self.slice_batch(split, idxs)
            return self.encoder.encode_batch(emb, nv)
        cache = self._vis_cache.get(split)
        if cache is None:
            samples = self.samples(split)
            cache = np.zeros((len(samples), self.cfg.num_tokens, self.cfg.d_v))
            with no_grad():
                for lo in range(0, len(samples), 64):
                    sl = np.arange(lo, min(lo + 64, len(samples)))
                    emb, nv = self.slice_batch(split, sl)
                    cache[sl] = self.encoder.encode_batch(emb, nv).data
            self._vis_cache[split] = cache
        return cache[np.asarray(idxs)]

    def refresh_visual_cache(self):
        self._vis_cache = {}

    def recalibrate(self):
        with no_grad():
            probe = self.visual_tokens_probe()
            self.predictor.training = False
            pred = self.predictor(Tensor(probe))
        self.calibrator.recalibrate(pred)

    def visual_tokens_probe(self):
        idxs = np.arange(min(64, len(self.world.train)))
        emb, nv = self.slice_batch("train", idxs)
        with no_grad():
            return self.encoder.encode_batch(emb, nv).data

    def calibrated_tokens(self, idxs, split="val"):
        """Ṽ as ndarray for generation/ablation (grad-free)."""
        vis = self.visual_tokens(split, idxs)
        with no_grad():
            self.predictor.training = False
            return self.calibrator(self.predictor(Tensor(vis))).data

    @property
    def target_norm(self):
        return self.calibrator.target_norm

    @property
    def class_names(self):
        return [c.name for c in self.world.conditions]

    def oracle(self, words):
        return label_extractor_oracle(words, self.world.conditions)

    # -- generation ----------------------------------------------------------------

    def sampling_config(self, mode, seed=1234):
        max_new = self.cfg.max_new_pos if mode == "positive_findings" else self.cfg.max_new_raw
        return SamplingConfig(max_new_tokens=max_new, seed=seed)

    def generate_reports(self, tokens, idxs, mode="positive_findings", sampling=None):
        """Calibrated tokens (B,K,d) -> list of generated word lists."""
        cfg = sampling or self.sampling_config(mode)
        tok = self.world.tokenizer
        eor = SPECIALS["eor"]
        out = []
        idxs = np.asarray(idxs)
        for lo in range(0, len(idxs), self.cfg.gen_batch):
            sl = slice(lo, min(lo + self.cfg.gen_batch, len(idxs)))
            bsz = sl.stop - sl.start
            ids = np.tile(self.prompt_ids, (bsz, 1))
            mask = np.tile(self.prompt_mask, (bsz, 1))
            prompt = GraftedPrompt(ids, mask, tokens[sl])
            gen, _ = generate(self.decoder, prompt, cfg, eor, stream_ids=idxs[sl])
            for row in gen:
                if eor in row:
                    row = row[: row.index(eor)]
                out.append(tok.detokenize(row))
        return out

    def eval_generation(self, idxs, mode, split="val", sampling=None):
        tokens = self.calibrated_tokens(idxs, split)
        words = self.generate_reports(tokens, idxs, mode, sampling)
        preds = np.stack([self.oracle(w) for w in words])
        return macro_metrics(preds, self.labels_of(idxs, split), self.class_names)

    def teacher_nll(self, tokens, idxs, mode="positive_findings", split="val"):
        """Batched teacher-forced NLL with pathology/generic word split."""
        idxs = np.asarray(idxs)
        total_n = path_n = gen_n = 0
        total_s = path_s = gen_s = 0.0
        for lo in range(0, len(idxs), self.cfg.gen_batch):
            sl = slice(lo, min(lo + self.cfg.gen_batch, len(idxs)))
            sub = idxs[sl]
            ids, valid, resp, pathm = self.assemble_ids(split, sub, mode)
            p = len(self.prompt_ids)
            prompt = GraftedPrompt(
                np.tile(self.prompt_ids, (len(sub), 1)),
                np.tile(self.prompt_mask, (len(sub), 1)),
                tokens[sl],
            )
            tgt = ids[:, p:]
            tv = valid[:, p:]
            wc = pathm[:, p:]
            with no_grad():
                emb = self.decoder.graft(GraftedPrompt(ids, np.pad(
                    np.tile(self.prompt_mask, (len(sub), 1)),
                    ((0, 0), (0, ids.shape[1] - p))), tokens[sl]))
                logits, _ = self.decoder.forward_full(emb, visual=Tensor(tokens[sl]), valid=valid)
            lp = logits.data - _np_logsumexp(logits.data)
            nll = -np.take_along_axis(lp[:, p - 1 : -1, :], tgt[..., None], axis=-1)[..., 0]
            total_s += nll[tv].sum(); total_n += int(tv.sum())
            pm = wc & tv
            gm = ~wc & tv
            path_s += nll[pm].sum(); path_n += int(pm.sum())
            gen_s += nll[gm].sum(); gen_n += int(gm.sum())
        return (total_s / max(total_n, 1), path_s / max(path_n, 1), gen_s / max(gen_n, 1))

    # -- phase losses ------------------------------------------------------------------

    def _shifted_lm_loss(self, logits, ids, resp_mask):
        t = ids.shape[1]
        pred = ad.take(logits, (slice(None), slice(0, t - 1)))
        return L.lm_loss_masked(pred, ids[:, 1:], resp_mask[:, 1:])

    def phase1_loss(self, phase, idxs, epoch):
        y = self.labels_of(idxs, "train")
        w = phase.weights
        vis = self.visual_tokens("train", idxs, graph=True)
        tok_logits = ad.linear(vis, self.cls_w, self.cls_b)
        pooled_logits = ad.linear(ad.tmean(vis, axis=-2), self.cls_w, self.cls_b)
        parts = [
            (w.lambda_cls, L.bce_pos_weighted(pooled_logits, y, self.pos_weights)),
            (w.lambda_mil, L.mil_loss(tok_logits, y, self.pos_weights)),
            (w.lambda_orth, L.orthogonality_loss(vis)),
        ]
        if w.lambda_mmd > 0:
            self.predictor.training = False
            zv = self.embed_head.per_token(self.calibrator(self.predictor(vis)))
            zt, zt_mask = self._class_zt_batch(y)
            mmd, count = L.mmd_imq_batched(zv, zt, zt_mask, gamma=w.gamma_imq)
            if count:
                parts.append((w.lambda_mmd, mmd))
        return L.compose_phase_loss(parts)

    def _class_zt_batch(self, labels):
        b, c = labels.shape
        mmax = max(int(labels.sum(axis=1).max()), 1)
        zt = np.zeros((b, mmax, self.cfg.whiten_dim))
        mask = np.zeros((b, mmax), dtype=bool)
        for i in range(b):
            pos = np.flatnonzero(labels[i])
            zt[i, : len(pos)] = self.class_embeds_white[pos]
            mask[i, : len(pos)] = True
        return zt, mask

    def phase2_loss(self, phase, idxs, epoch):
        w = phase.weights
        vis = Tensor(self.visual_tokens("train", idxs))
        self.predictor.training = True
        cal = self.calibrator(self.predictor(vis))
        z_v = self.embed_head(cal)
        z_t = self.zt_cache["train"][np.asarray(idxs)]
        parts = [(1.0, L.info_nce(z_v, z_t, self.log_tau))]
        if w.lambda_mmd > 0:
            zv_tok = self.embed_head.per_token(cal)
            zt, zt_mask = self._class_zt_batch(self.labels_of(idxs, "train"))
            mmd, count = L.mmd_imq_batched(zv_tok, zt, zt_mask, gamma=w.gamma_imq)
            if count:
                parts.append((w.lambda_mmd, mmd))
        return L.compose_phase_loss(parts)

    def phase34_loss(self, phase, idxs, epoch, ewc_refs=None):
        w = phase.weights
        y = self.labels_of(idxs, "train")
        mode = phase.text_mode
        vis_np = self.visual_tokens("train", idxs)
        self.predictor.training = phase.phase_id == 3
        cal = self.calibrator(self.predictor(Tensor(vis_np)))
        ids, valid, resp, _ = self.assemble_ids("train", idxs, mode)
        p = len(self.prompt_ids)
        full_mask = np.zeros_like(ids, dtype=bool)
        full_mask[:, :p] = self.prompt_mask
        emb = self.decoder.graft(GraftedPrompt(ids, full_mask, cal))
        logits, last_h = self.decoder.forward_full(emb, visual=cal, valid=valid)
        parts = [(1.0, self._shifted_lm_loss(logits, ids, resp))]
        fw = w.lambda_fcls if phase.phase_id == 3 else w.lambda_cls
        if fw > 0:
            pooled = ad.linear(Tensor(vis_np.mean(axis=1)), self.cls_w, self.cls_b)
            parts.append((fw, L.focal_loss(pooled, y, w.gamma_focal)))
        if phase.phase_id == 3 and w.lambda_jepa > 0:
            z_v = self.embed_head(cal)
            z_t = self.zt_cache["train"][np.asarray(idxs)]
            parts.append((w.lambda_jepa, L.jepa_embed_loss(z_v, z_t)))
        if phase.phase_id == 3 and w.lambda_vcls > 0:
            parts.append((w.lambda_vcls, L.llm_visual_cls_loss(
                last_h, full_mask, y, self.vcls_w, self.vcls_b, w.gamma_focal)))
        if ewc_refs is not None and w.lambda_ewc > 0:
            parts.append((1.0, L.ewc_penalty(self.store, ewc_refs, w.lambda_ewc)))
        return L.compose_phase_loss(parts)

    # -- phase evaluation ---------------------------------------------------------------

    def eval_classification(self, split="val"):
        samples = self.samples(split)
        scores = np.zeros((len(samples), len(self.world.conditions)))
        with no_grad():
            for lo in range(0, len(samples), 64):
                idxs = np.arange(lo, min(lo + 64, len(samples)))
                emb, nv = self.slice_batch(split, idxs)
                vis = self.encoder.encode_batch(emb, nv)
                logits = ad.linear(ad.tmean(vis, axis=-2), self.cls_w, self.cls_b)
                scores[idxs] = 1.0 / (1.0 + np.exp(-logits.data))
        y = self.labels_of_split(split)
        report = macro_metrics(scores >= 0.5, y, self.class_names)
        aucs = [auc_score(scores[:, j], y[:, j]) for j in range(y.shape[1])]
        report.auc = aucs
        return report, scores

    def make_phase_closures(self, phase: PhaseConfig, ewc_refs=None, eval_seed=1234):
        """(batch_loss, evaluate, recalibrate) closures for run_phase."""
        if phase.phase_id == 1:
            batch_loss = self.phase1_loss
        elif phase.phase_id == 2:
            batch_loss = self.phase2_loss
        else:
            def batch_loss(ph, idxs, epoch):
                return self.phase34_loss(ph, idxs, epoch, ewc_refs=ewc_refs)

        eval_idxs = np.arange(min(phase.eval_subsample, len(self.world.val)))

        def evaluate(ph, epoch):
            if ph.phase_id <= 2:
                report, _ = self.eval_classification("val")
                auc = float(np.nanmean(report.auc))
                return {"macro_f1": report.macro_f1, "auc": auc}
            rep = self.eval_generation(eval_idxs, ph.text_mode,
                                       sampling=self.sampling_config(ph.text_mode, eval_seed))
            return {"gen_f1": rep.macro_f1, "gen_precision": rep.macro_precision,
                    "gen_recall": rep.macro_recall}

        return batch_loss, evaluate, self.recalibrate

    def reinit_bridge(self, seed):
        """Fresh random init for projectors/xattn/lora (cold-start simulation)."""
        rng = np.random.default_rng(seed)
        cfg = self.dec_cfg
        for adp in self.decoder.adapters.values():
            for wname in ("wq", "wk", "wv", "wo"):
                getattr(adp, wname).data[:] = xavier_uniform(
                    (cfg.d_llm, cfg.d_llm), cfg.xattn_gain, rng)
            adp.bo.data[:] = 0.0
            adp.ln_g.data[:] = 1.0
            adp.ln_b.data[:] = 0.0
            adp.proj.data[:] = xavier_uniform((cfg.d_llm, cfg.d_llm), 1.0, rng)
        for blk in self.decoder.blocks:
            for tgt, (a, b) in blk["lora"].items():
                a.data[:] = normal_init(a.shape, 0.02, rng)
                b.data[:] = 0.0


def _np_logsumexp(x):
    mx = x.max(axis=-1, keepdims=True)
    return mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True))


# -- default phase configs ------------------------------------------------------------


def default_phases(seed=0) -> dict:
    w = L.LossWeights()
    w2 = L.LossWeights(lambda_mmd=0.0)
    return {
        1: PhaseConfig(phase_id=1, lr=3e-3, lr_policy="cosine", epochs=12,
                       batch_size=32, selection="macro_f1", weights=w, seed=seed),
        2: PhaseConfig(phase_id=2, lr=2e-3, lr_policy="constant", epochs=10,
                       batch_size=64, early_stop_patience=8, selection="macro_f1",
                       weights=w2, seed=seed),
        3: PhaseConfig(phase_id=3, text_mode="positive_findings", lr=3e-3,
                       lr_policy="plateau", epochs=15, batch_size=32,
                       lora_freeze_epoch=6, use_projector_lr_scale=True,
                       selection="gen_f1", weights=w, seed=seed),
        4: PhaseConfig(phase_id=4, text_mode="raw_narrative", lr=3e-4,
                       lr_policy="constant", epochs=6, batch_size=32,
                       selection="gen_f1", weights=w, seed=seed, ewc_enabled=True),
    }


# -- pipeline ---------------------------------------------------------------------------


def run_pipeline(data_cfg: DataConfig, model_cfg: ModelConfig, phases=None,
                 out_dir=None, seed=0, log=print, warm_seeds=(1, 2, 3),
                 run_collapse=True, run_warm=True, run_phase4_variant=True):
    """Full curriculum plus the verification side experiments.

    Returns a results dict with per-phase histories, warm/cold comparisons,
    and checkpoints (in memory plus files when out_dir is set).
    """
    t_start = time.time()
    phases = phases or default_phases(seed)
    world = build_world(data_cfg, model_cfg)
    bundle = Bundle(model_cfg, world, seed=seed, pretrain=True, log=log)
    store = bundle.store
    results = {"phases": {}, "checkpoints": {}, "timing": {}}

    def ckpt_of(meta):
        return Checkpoint(
            tensors=store.snapshot(),
            groups={n: store[n].group for n in store.names()},
            frozen={n: store[n].frozen for n in store.names()},
            optimizer={"m": {}, "v": {}, "t": 0},
            rng_states={"seed": seed},
            phase_meta=meta,
            metric_history=[],
        )

    def save(name, ckpt):
        results["checkpoints"][name] = ckpt
        if out_dir:
            save_checkpoint(os.path.join(out_dir, f"{name}.ckpt"), checkpoint=ckpt)

    def run_one(name, phase, ewc_refs=None):
        t0 = time.time()
        batch_loss, evaluate, recal = bundle.make_phase_closures(phase, ewc_refs=ewc_refs)
        lengths = bundle.lengths("train", phase.text_mode if phase.phase_id >= 3 else None)
        hist, info = run_phase(phase, store, len(world.train), batch_loss, evaluate,
                               recalibrate=recal, log_tau=bundle.log_tau, log=log,
                               lengths=lengths)
        results["phases"][name] = {"history": hist, "best": info["best_metric"],
                                   "best_epoch": info["best_epoch"]}
        results["timing"][name] = time.time() - t0
        return hist, info

    save("init", ckpt_of({"stage": "init"}))

    # Phase 1: classification-driven encoder shaping
    run_one("phase1", phases[1])
    bundle.refresh_visual_cache()
    save("phase1", ckpt_of({"stage": "phase1"}))

    # Phase 2: contrastive bridge
    run_one("phase2", phases[2])
    save("phase2", ckpt_of({"stage": "phase2"}))
    p2 = results["checkpoints"]["phase2"]

    # Phase 3 (cold start, positive findings): this is also the cold baseline
    hist3, _ = run_one("phase3", phases[3])
    save("phase3", ckpt_of({"stage": "phase3"}))
    p3 = results["checkpoints"]["phase3"]

    # Collapse reproduction: same data, raw narrative targets, cold bridge
    if run_collapse:
        restore_into_store(p2, store)
        collapse_cfg = PhaseConfig(
            phase_id=3, text_mode="raw_narrative", lr=phases[3].lr,
            lr_policy=phases[3].lr_policy, epochs=phases[3].epochs,
            batch_size=phases[3].batch_size, lora_freeze_epoch=phases[3].lora_freeze_epoch,
            use_projector_lr_scale=phases[3].use_projector_lr_scale,
            selection="gen_f1", weights=phases[3].weights, seed=phases[3].seed,
        )
        run_one("phase3_collapse", collapse_cfg)

    # Warm vs cold epoch-1 comparison across seeds
    if run_warm:
        results["warm_cold"] = {}
        for s in warm_seeds:
            pair = {}
            for variant in ("cold", "warm"):
                restore_into_store(p2, store)
                bundle.reinit_bridge(seed=1000 + s)
                if variant == "warm":
                    warm_bridge_transfer(store, p3.tensors)
                one_epoch = PhaseConfig(
                    phase_id=3, text_mode="positive_findings", lr=phases[3].lr,
                    epochs=1, batch_size=phases[3].batch_size,
                    use_projector_lr_scale=phases[3].use_projector_lr_scale,
                    selection="gen_f1", weights=phases[3].weights, seed=s,
                )
                hist, _ = run_one(f"phase3_{variant}_seed{s}", one_epoch)
                pair[variant] = hist[0]["gen_f1"] if hist else 0.0
            results["warm_cold"][s] = pair

    # Phase 4 (selective freeze + quadratic anchor) and its unfrozen variant
    restore_into_store(p3, store)
    ewc_refs = store.snapshot("lora")
    run_one("phase4", phases[4], ewc_refs=ewc_refs)
    save("phase4", ckpt_of({"stage": "phase4"}))

    if run_phase4_variant:
        restore_into_store(p3, store)
        v1 = PhaseConfig(
            phase_id=4, text_mode="raw_narrative", lr=phases[4].lr,
            lr_policy=phases[4].lr_policy, epochs=phases[4].epochs,
            batch_size=phases[4].batch_size, selection="gen_f1",
            trainable_groups=("predictor", "lora", "xattn", "projectors", "heads"),
            weights=phases[4].weights, seed=phases[4].seed, ewc_enabled=False,
        )
        run_one("phase4_v1", v1, ewc_refs=None)
        save("phase4_v1", ckpt_of({"stage": "phase4_v1"}))

    results["timing"]["total"] = time.time() - t_start
    results["world"] = world
    results["bundle"] = bundle
    return results
