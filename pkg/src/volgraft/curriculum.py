"""Four-phase training driver: schedules, freezing, surgery, checkpoints.

Phase table (trainable groups):
  1  encoder + heads            classification-driven token shaping
  2  predictor + heads          contrastive bridge (encoder optional)
  3  predictor + lora + xattn + projectors + heads   generative fine-tune
  4  lora + heads               narrative adaptation under a quadratic anchor

The warm bridge selectively overwrites only {projectors, xattn, lora} by
exact tensor name; everything else must come out bit-identical.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .losses import LossWeights
from .params import ParameterStore
from .synthdata import build_positive_findings_text  # re-export: text-mode op

__all__ = [
    "PhaseConfig", "AdamW", "apply_freeze_policy", "warm_bridge_transfer",
    "TransferReport", "projector_lr_scale", "run_phase", "save_checkpoint",
    "load_checkpoint", "Checkpoint", "CheckpointError", "crc64",
    "build_positive_findings_text", "PHASE_TRAINABLE", "BRIDGE_GROUPS",
]

PHASE_TRAINABLE = {
    1: ("encoder", "heads"),
    2: ("predictor", "heads"),
    3: ("predictor", "lora", "xattn", "projectors", "heads"),
    4: ("lora", "heads"),
}

NEVER_TRAINABLE = ("base", "calibrator", "whitening")
BRIDGE_GROUPS = ("projectors", "xattn", "lora")

LOG_TAU_BOUNDS = (math.log(0.01), math.log(1.0))


@dataclass
class PhaseConfig:
    phase_id: int
    text_mode: str = "none"              # none | positive_findings | raw_narrative
    lr: float = 1e-3
    lr_policy: str = "constant"          # constant | cosine | plateau
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    epochs: int = 10
    early_stop_patience: int = 0         # 0 disables
    batch_size: int = 32
    trainable_groups: tuple = None       # defaults to the phase table
    lora_freeze_epoch: int = 0           # phase 3: freeze lora after this epoch
    use_projector_lr_scale: bool = False
    projector_lr_range: tuple = (1.0, 30.0)
    warm_bridge_source: str = None       # checkpoint path, phase 3 only
    selection: str = "macro_f1"          # metric name picked from evaluate()
    weights: LossWeights = field(default_factory=LossWeights)
    recalibrate_every: int = 500
    eval_subsample: int = 256
    seed: int = 0
    grad_clip: float = 0.0
    ewc_enabled: bool = False            # phase 4

    def __post_init__(self):
        if self.phase_id not in PHASE_TRAINABLE:
            raise ValueError(f"phase_id must be 1..4, got {self.phase_id}")
        if self.text_mode not in ("none", "positive_findings", "raw_narrative"):
            raise ValueError(f"unknown text_mode {self.text_mode!r}")
        if self.lr_policy not in ("constant", "cosine", "plateau"):
            raise ValueError(f"unknown lr_policy {self.lr_policy!r}")
        if self.trainable_groups is None:
            self.trainable_groups = PHASE_TRAINABLE[self.phase_id]
        self.trainable_groups = tuple(self.trainable_groups)

    def check_freeze_invariants(self):
        """Default-policy invariants; variants (e.g. ablations) may override."""
        if self.phase_id == 3 and "encoder" in self.trainable_groups:
            raise ValueError("phase 3 must freeze the visual encoder")
        if self.phase_id == 4:
            bad = {"xattn", "projectors"} & set(self.trainable_groups)
            if bad:
                raise ValueError(f"phase 4 must freeze {sorted(bad)}")


def apply_freeze_policy(store: ParameterStore, phase: PhaseConfig):
    """Set frozen flags so exactly the phase's trainable groups receive updates."""
    from .params import GROUPS

    for g in phase.trainable_groups:
        if g not in GROUPS:
            raise ValueError(f"unknown parameter group {g!r}")
    for g in GROUPS:
        trainable = g in phase.trainable_groups and g not in NEVER_TRAINABLE
        store.set_group_frozen(g, not trainable)
    return store


def projector_lr_scale(grad_norm, weight_norm, scale_range=(1.0, 30.0), eps=1e-8):
    """Trust-ratio multiplier clamp(weight_norm / (grad_norm + eps), lo, hi)."""
    lo, hi = scale_range
    return float(np.clip(weight_norm / (grad_norm + eps), lo, hi))


def bucketed_order(rng, num, batch_size, lengths=None, bucket_batches=8):
    """Shuffled index order; when lengths are given, similar-length samples
    are grouped within shuffled megabatches to cut padding waste."""
    order = rng.permutation(num)
    if lengths is None:
        return order
    lengths = np.asarray(lengths)
    mega = batch_size * bucket_batches
    chunks = [order[i : i + mega] for i in range(0, num, mega)]
    return np.concatenate([c[np.argsort(lengths[c], kind="stable")] for c in chunks])


class AdamW:
    """Decoupled-weight-decay adaptive moments over a parameter store."""

    def __init__(self, store: ParameterStore, lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, lr=None, group_lr_scale=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, e in self.store.entries.items():
            if e.frozen or e.tensor.grad is None:
                continue
            g = e.tensor.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(e.tensor.data)
                self.v[name] = np.zeros_like(e.tensor.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr_eff = lr * (group_lr_scale or {}).get(e.group, 1.0)
            if self.weight_decay:
                e.tensor.data *= 1.0 - lr_eff * self.weight_decay
            e.tensor.data -= lr_eff * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self):
        return {"m": dict(self.m), "v": dict(self.v), "t": self.t}


# -- warm bridge surgery --------------------------------------------------------


@dataclass
class TransferReport:
    counts: dict
    total: int
    dry_run: bool

    def __str__(self):
        parts = ", ".join(f"{g}={c}" for g, c in sorted(self.counts.items()))
        tag = " (dry run)" if self.dry_run else ""
        return f"bridge transfer: {parts}, total={self.total}{tag}"


def warm_bridge_transfer(target: ParameterStore, source_tensors, dry_run=False):
    """Overwrite exactly the bridge groups {projectors, xattn, lora} by name.

    source_tensors: name -> ndarray (e.g. Checkpoint.tensors). Missing names
    or shape mismatches are hard failures; nothing is written on failure.
    """
    plan = []
    missing, mismatched = [], []
    for group in BRIDGE_GROUPS:
        for name in target.names(group):
            if name not in source_tensors:
                missing.append(name)
                continue
            src = np.asarray(source_tensors[name])
            if src.shape != target[name].tensor.data.shape:
                mismatched.append(f"{name}: {src.shape} vs {target[name].tensor.data.shape}")
                continue
            plan.append((group, name, src))
    if missing or mismatched:
        raise ValueError(
            f"bridge transfer failed; missing={missing} shape-mismatch={mismatched}"
        )
    counts = {g: 0 for g in BRIDGE_GROUPS}
    for group, name, src in plan:
        if not dry_run:
            np.copyto(target[name].tensor.data, src.astype(np.float64))
        counts[group] += 1
    expected = {g: len(target.names(g)) for g in BRIDGE_GROUPS}
    if counts != expected:
        raise AssertionError(f"transfer counts {counts} != group sizes {expected}")
    return TransferReport(counts=counts, total=sum(counts.values()), dry_run=dry_run)


# -- checkpoint container -------------------------------------------------------

CKPT_MAGIC = b"GLAB"
CKPT_VERSION = 1
_CRC_POLY = 0x42F0E1EBA9EA3693
_MASK64 = (1 << 64) - 1


class CheckpointError(ValueError):
    pass


def _build_crc_tables():
    base = []
    for i in range(256):
        crc = i << 56
        for _ in range(8):
            crc = ((crc << 1) ^ _CRC_POLY if crc & (1 << 63) else crc << 1) & _MASK64
        base.append(crc)
    tables = [base]
    for k in range(1, 8):
        prev = tables[k - 1]
        tables.append([
            base[(prev[i] >> 56) & 0xFF] ^ ((prev[i] << 8) & _MASK64) for i in range(256)
        ])
    return tables


_CRC_TABLES = _build_crc_tables()


def crc64(data, crc=0):
    """CRC-64/ECMA-182, slice-by-8."""
    t = _CRC_TABLES
    n = len(data)
    i = 0
    end8 = n - (n % 8)
    mv = memoryview(data)
    while i < end8:
        crc ^= int.from_bytes(mv[i : i + 8], "big")
        crc = (
            t[7][(crc >> 56) & 0xFF] ^ t[6][(crc >> 48) & 0xFF]
            ^ t[5][(crc >> 40) & 0xFF] ^ t[4][(crc >> 32) & 0xFF]
            ^ t[3][(crc >> 24) & 0xFF] ^ t[2][(crc >> 16) & 0xFF]
            ^ t[1][(crc >> 8) & 0xFF] ^ t[0][crc & 0xFF]
        )
        i += 8
    while i < n:
        crc = (t[0][((crc >> 56) ^ mv[i]) & 0xFF] ^ ((crc << 8) & _MASK64))
        i += 1
    return crc


@dataclass
class Checkpoint:
    tensors: dict                 # name -> ndarray
    groups: dict                  # name -> group tag
    frozen: dict                  # name -> bool
    optimizer: dict               # {"m": {...}, "v": {...}, "t": int}
    rng_states: dict
    phase_meta: dict
    metric_history: list


def save_checkpoint(path, store: ParameterStore = None, optimizer: AdamW = None,
                    rng_states=None, phase_meta=None, metric_history=None,
                    checkpoint: Checkpoint = None, include_optimizer=True):
    """Serialize to the GLAB container: magic, version, manifest JSON,
    float64 little-endian payloads, trailing CRC-64."""
    if checkpoint is None:
        opt_state = optimizer.state() if (optimizer and include_optimizer) else {"m": {}, "v": {}, "t": 0}
        checkpoint = Checkpoint(
            tensors=store.snapshot(),
            groups={n: store[n].group for n in store.names()},
            frozen={n: store[n].frozen for n in store.names()},
            optimizer=opt_state,
            rng_states=rng_states or {},
            phase_meta=phase_meta or {},
            metric_history=metric_history or [],
        )
    records = []
    payloads = []
    for kind, bag in (("param", checkpoint.tensors),
                      ("adam_m", checkpoint.optimizer.get("m", {})),
                      ("adam_v", checkpoint.optimizer.get("v", {}))):
        for name in sorted(bag):
            arr = np.ascontiguousarray(np.asarray(bag[name], dtype="<f8"))
            records.append({
                "name": name, "kind": kind, "dtype": "f8",
                "shape": list(arr.shape),
                "group": checkpoint.groups.get(name, ""),
                "frozen": bool(checkpoint.frozen.get(name, False)),
            })
            payloads.append(arr.tobytes())
    manifest = {
        "records": records,
        "adam_t": int(checkpoint.optimizer.get("t", 0)),
        "rng_states": checkpoint.rng_states,
        "phase_meta": checkpoint.phase_meta,
        "metric_history": checkpoint.metric_history,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<IQ", CKPT_VERSION, len(mbytes))
    blob += mbytes
    for p in payloads:
        blob += p
    blob += struct.pack("<Q", crc64(bytes(blob)))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return checkpoint


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a GLAB checkpoint")
    body, trailer = blob[:-8], blob[-8:]
    (stored_crc,) = struct.unpack("<Q", trailer)
    if crc64(body) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted file)")
    version, mlen = struct.unpack("<IQ", blob[4:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        manifest = json.loads(blob[16 : 16 + mlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from None
    off = 16 + mlen
    tensors, groups, frozen = {}, {}, {}
    opt_m, opt_v = {}, {}
    for rec in manifest["records"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        nbytes = count * 8
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated payload at {rec['name']}")
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(rec["shape"]).copy()
        off += nbytes
        if rec["kind"] == "param":
            tensors[rec["name"]] = arr
            groups[rec["name"]] = rec["group"]
            frozen[rec["name"]] = rec["frozen"]
        elif rec["kind"] == "adam_m":
            opt_m[rec["name"]] = arr
        else:
            opt_v[rec["name"]] = arr
    return Checkpoint(
        tensors=tensors, groups=groups, frozen=frozen,
        optimizer={"m": opt_m, "v": opt_v, "t": manifest["adam_t"]},
        rng_states=manifest["rng_states"],
        phase_meta=manifest["phase_meta"],
        metric_history=manifest["metric_history"],
    )


def restore_into_store(ckpt: Checkpoint, store: ParameterStore, strict=True):
    """Copy checkpoint tensors into an existing store by name, in place."""
    missing = [n for n in store.names() if n not in ckpt.tensors]
    if strict and missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing}")
    for name, arr in ckpt.tensors.items():
        if name in store.entries:
            np.copyto(store[name].tensor.data, arr)


# -- phase driver ---------------------------------------------------------------


def run_phase(phase: PhaseConfig, store: ParameterStore, num_train, batch_loss,
              evaluate, recalibrate=None, log_tau=None, log=None, lengths=None):
    """Generic minibatch loop for one curriculum phase.

    batch_loss(phase, indices, epoch) -> scalar loss Tensor (graph built);
    evaluate(phase, epoch) -> metric dict containing phase.selection;
    recalibrate() refreshes the norm calibrator (phase start + every
    `recalibrate_every` steps); lengths enable bucketed batching. Returns
    (history, info) and leaves the store holding the best-epoch parameters.
    """
    apply_freeze_policy(store, phase)
    opt = AdamW(store, lr=phase.lr)
    rng = np.random.default_rng(phase.seed)
    history = []
    best_metric, best_state, best_epoch = -np.inf, None, 0
    lr = phase.lr
    plateau_wait = 0
    step = 0
    aborted = False
    for epoch in range(1, phase.epochs + 1):
        if phase.lora_freeze_epoch and epoch == phase.lora_freeze_epoch + 1:
            store.set_group_frozen("lora", True)
            if log:
                log(f"phase {phase.phase_id}: lora frozen entering epoch {epoch}")
        if phase.lr_policy == "cosine":
            lr = phase.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / max(phase.epochs - 1, 1)))
        order = bucketed_order(rng, num_train, phase.batch_size, lengths)
        epoch_loss, nb = 0.0, 0
        for lo in range(0, num_train, phase.batch_size):
            idxs = order[lo : lo + phase.batch_size]
            if recalibrate is not None and step % phase.recalibrate_every == 0:
                recalibrate()
            store.zero_grads()
            loss = batch_loss(phase, idxs, epoch)
            lval = float(loss.data)
            if not np.isfinite(lval):
                aborted = True
                break
            loss.backward()
            if phase.grad_clip > 0:
                _clip_grads(store, phase.grad_clip)
            scales = None
            if phase.use_projector_lr_scale:
                gn, wn = _group_norms(store, "projectors")
                scales = {"projectors": projector_lr_scale(gn, wn, phase.projector_lr_range)}
            opt.step(lr, scales)
            if log_tau is not None:
                np.clip(log_tau.data, LOG_TAU_BOUNDS[0], LOG_TAU_BOUNDS[1], out=log_tau.data)
            epoch_loss += lval
            nb += 1
            step += 1
        if aborted:
            if log:
                log(f"phase {phase.phase_id}: non-finite loss, aborting at epoch {epoch}")
            break
        metrics = evaluate(phase, epoch)
        sel = float(metrics[phase.selection])
        entry = {"epoch": epoch, "loss": epoch_loss / max(nb, 1), "lr": lr}
        entry.update({k: float(v) for k, v in metrics.items()})
        history.append(entry)
        if log:
            log(f"phase {phase.phase_id} epoch {epoch}: loss={entry['loss']:.4f} "
                f"{phase.selection}={sel:.4f} lr={lr:.2e}")
        if sel > best_metric:
            best_metric, best_epoch = sel, epoch
            best_state = store.snapshot()
            plateau_wait = 0
        else:
            plateau_wait += 1
            if phase.lr_policy == "plateau" and plateau_wait >= phase.plateau_patience:
                lr *= phase.plateau_factor
                plateau_wait = 0
                if log:
                    log(f"phase {phase.phase_id}: plateau, lr -> {lr:.2e}")
        if phase.early_stop_patience and (epoch - best_epoch) >= phase.early_stop_patience:
            if log:
                log(f"phase {phase.phase_id}: early stop at epoch {epoch}")
            break
    if best_state is not None:
        for name, arr in best_state.items():
            np.copyto(store[name].tensor.data, arr)
    return history, {"best_metric": best_metric, "best_epoch": best_epoch,
                     "aborted": aborted, "optimizer": opt}


def _group_norms(store, group):
    g2, w2 = 0.0, 0.0
    for n in store.names(group):
        t = store[n].tensor
        w2 += float((t.data * t.data).sum())
        if t.grad is not None:
            g2 += float((t.grad * t.grad).sum())
    return math.sqrt(g2), math.sqrt(w2)


def _clip_grads(store, max_norm):
    total = 0.0
    live = []
    for n, e in store.entries.items():
        if not e.frozen and e.tensor.grad is not None:
            live.append(e.tensor)
            total += float((e.tensor.grad ** 2).sum())
    total = math.sqrt(total)
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in live:
            t.grad = t.grad * scale  # grad buffers may be shared; never in place
