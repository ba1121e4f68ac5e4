"""Deterministic synthetic benchmark: volumes, reports, tokenizer, oracle.

Each condition owns a direction in slice-embedding space, a band of
anatomical zones it may occupy, a one-sentence finding template with a
unique keyword, and a prevalence. Volumes are Gaussian slices plus planted
signature bumps inside one zone; reports come in two flavours (findings-only
and full narrative with boilerplate). The keyword oracle recovers labels
from generated text exactly on generator output, standing in for a learned
extractor.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import SliceSequence, partition_zones

SPECIALS = {"pad": 0, "bos": 1, "sys": 2, "usr": 3, "asst": 4, "vis": 5, "eor": 6}
SPECIAL_NAMES = {v: f"[{k.upper()}]" for k, v in SPECIALS.items()}

NORMAL_TEMPLATE = ("no", "significant", "thoracic", "abnormalities", "identified", ".")

# Eight normal-anatomy sentence slots in fixed order; each slot has several
# paraphrase variants drawn per sample, so normal text carries irreducible
# entropy the way real radiologist prose does. Roughly 90% of raw-report
# tokens are normal text. No variant contains a condition keyword.
BOILERPLATE = (
    (("scan", "technique", "adequate", "."),
     ("study", "quality", "acceptable", "."),
     ("exam", "technique", "satisfactory", "."),
     ("technical", "quality", "adequate", ".")),
    (("central", "airways", "patent", "."),
     ("central", "airways", "open", "."),
     ("main", "bronchi", "patent", "."),
     ("trachea", "appears", "open", ".")),
    (("mediastinal", "contours", "unremarkable", "."),
     ("mediastinum", "appears", "normal", "."),
     ("mediastinal", "silhouette", "preserved", "."),
     ("mediastinal", "structures", "intact", ".")),
    (("great", "vessels", "normal", "."),
     ("vascular", "structures", "unremarkable", "."),
     ("great", "vessels", "preserved", "."),
     ("major", "vessels", "appear", "normal", ".")),
    (("lung", "volumes", "symmetric", "."),
     ("lung", "volumes", "adequate", "."),
     ("aerated", "lungs", "symmetric", "."),
     ("lung", "expansion", "satisfactory", ".")),
    (("pleural", "spaces", "clear", "."),
     ("pleural", "surfaces", "smooth", "."),
     ("costophrenic", "angles", "sharp", "."),
     ("pleural", "margins", "preserved", ".")),
    (("upper", "abdomen", "unremarkable", "."),
     ("visualized", "abdomen", "normal", "."),
     ("upper", "abdominal", "organs", "normal", "."),
     ("imaged", "abdomen", "unremarkable", ".")),
    (("no", "acute", "osseous", "findings", "."),
     ("no", "aggressive", "bone", "lesions", "."),
     ("skeletal", "structures", "intact", "."),
     ("osseous", "structures", "unremarkable", ".")),
)

NEGATION_WORDS = ("no", "without")
NEGATION_WINDOW = 3

_CONDITION_TABLE = (
    # name, keyword, template, zone band (over K=8 reference zones)
    ("nodule", "nodule", ("small", "nodule", "present", "."), (0, 4)),
    ("effusion", "effusion", ("pleural", "effusion", "seen", "."), (5, 8)),
    ("cardiomegaly", "cardiomegaly", ("cardiomegaly", "is", "observed", "."), (3, 6)),
    ("consolidation", "consolidation", ("patchy", "consolidation", "present", "."), (2, 7)),
    ("emphysema", "emphysema", ("emphysema", "changes", "noted", "."), (0, 4)),
    ("atelectasis", "atelectasis", ("atelectasis", "bands", "visible", "."), (4, 8)),
)


@dataclass
class ConditionSpec:
    class_id: int
    name: str
    signature: np.ndarray       # (d_v,) unit direction
    zone_range: tuple           # [lo, hi) over the K anatomical zones
    strength: float
    template_positive: tuple    # word sequence, exactly one keyword
    keywords: frozenset
    prevalence: float


def default_conditions(d_v=64, num_zones=8, strength=3.0, prevalence=0.25, seed=7):
    """Six conditions with mutually orthogonal signatures.

    `strength` may be a scalar or per-class sequence; heterogeneous strengths
    give the benchmark a conspicuity spread (some findings are faint).
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(d_v, len(_CONDITION_TABLE))))
    strengths = np.broadcast_to(np.asarray(strength, dtype=np.float64),
                                (len(_CONDITION_TABLE),))
    conds = []
    for i, (name, kw, template, band) in enumerate(_CONDITION_TABLE):
        lo = band[0] * num_zones // 8
        hi = max(lo + 1, band[1] * num_zones // 8)
        conds.append(
            ConditionSpec(
                class_id=i,
                name=name,
                signature=basis[:, i].copy(),
                zone_range=(lo, min(hi, num_zones)),
                strength=float(strengths[i]),
                template_positive=template,
                keywords=frozenset([kw]),
                prevalence=prevalence,
            )
        )
    return conds


# -- tokenizer ----------------------------------------------------------------


class Tokenizer:
    """Closed-vocabulary word-level tokenizer, bijective on its vocabulary."""

    MAX_VOCAB = 512

    def __init__(self, words):
        self.id_to_word = dict(SPECIAL_NAMES)
        next_id = len(SPECIALS)
        for w in words:
            if w in SPECIAL_NAMES.values():
                continue
            if w not in self.id_to_word.values():
                self.id_to_word[next_id] = w
                next_id += 1
        if next_id > self.MAX_VOCAB:
            raise ValueError(f"vocabulary {next_id} exceeds {self.MAX_VOCAB}")
        self.word_to_id = {w: i for i, w in self.id_to_word.items()}

    @classmethod
    def from_conditions(cls, conditions):
        words = []
        for variants in BOILERPLATE:
            for sent in variants:
                words.extend(sent)
        words.extend(NORMAL_TEMPLATE)
        for c in conditions:
            words.extend(c.template_positive)
        return cls(words)

    @property
    def vocab_size(self):
        return len(self.id_to_word)

    def tokenize(self, words):
        try:
            return [self.word_to_id[w] for w in words]
        except KeyError as e:
            raise ValueError(f"out-of-vocabulary word: {e.args[0]!r}") from None

    def detokenize(self, ids):
        try:
            return [self.id_to_word[int(i)] for i in ids]
        except KeyError as e:
            raise ValueError(f"unknown token id: {e.args[0]}") from None

    def special(self, name):
        return SPECIALS[name]


# -- report construction --------------------------------------------------------


def build_positive_findings_text(labels, templates, rng, normal_template=NORMAL_TEMPLATE):
    """Concatenated templates of the positive classes in random order; the
    fixed normal sentence when nothing is positive."""
    pos = [i for i, y in enumerate(labels) if y]
    if not pos:
        return list(normal_template)
    order = rng.permutation(len(pos))
    words = []
    for j in order:
        words.extend(templates[pos[j]])
    return words


def build_raw_narrative(labels, planted_zones, conditions, num_zones, rng):
    """Normal-anatomy slots in fixed order (per-sample paraphrase variant)
    with positive sentences interleaved at per-sample random slots, the way
    narrative prose mentions findings at dictation-dependent positions."""
    slots = [[] for _ in range(len(BOILERPLATE))]
    for c in conditions:
        if labels[c.class_id]:
            slot = int(rng.integers(len(BOILERPLATE)))
            slots[slot].append(c.class_id)
    words, mask = [], []
    for si, variants in enumerate(BOILERPLATE):
        sent = variants[int(rng.integers(len(variants)))]
        words.extend(sent)
        mask.extend([False] * len(sent))
        entries = slots[si]
        if len(entries) > 1:
            entries = [entries[i] for i in rng.permutation(len(entries))]
        for cid in entries:
            t = conditions[cid].template_positive
            words.extend(t)
            mask.extend([True] * len(t))
    return words, np.array(mask, dtype=bool)


# -- samples and generation -----------------------------------------------------


@dataclass
class SyntheticSample:
    seq: SliceSequence
    labels: np.ndarray              # (C,) bool
    planted_zones: np.ndarray       # (C,) int, -1 where absent
    report_raw: list
    report_positive: list
    raw_path_mask: np.ndarray
    pos_path_mask: np.ndarray


def _sample_rng(seed, index):
    return np.random.Generator(np.random.Philox(key=[int(seed), int(index)]))


def generate_sample(index, conditions, n_range, d_v, num_zones, seed,
                    normal_frac=0.38, noise=1.0):
    rng = _sample_rng(seed, index)
    c = len(conditions)
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    spacing = rng.uniform(1.5, 3.0)
    z0 = rng.uniform(0.0, 5.0)
    z = z0 + np.arange(n) * spacing

    if rng.random() < normal_frac:
        labels = np.zeros(c, dtype=bool)
    else:
        labels = np.zeros(c, dtype=bool)
        while not labels.any():
            labels = rng.random(c) < np.array([cond.prevalence for cond in conditions])

    emb = rng.normal(0.0, noise, size=(n, d_v))
    zones = np.full(c, -1, dtype=np.int64)
    bounds = partition_zones(n, num_zones)
    for cond in conditions:
        if not labels[cond.class_id]:
            continue
        zone = int(rng.integers(cond.zone_range[0], cond.zone_range[1]))
        zones[cond.class_id] = zone
        lo, hi = bounds[zone]
        amp = cond.strength * rng.uniform(0.8, 1.2)
        emb[lo:hi] += amp * cond.signature

    templates = [cond.template_positive for cond in conditions]
    rep_pos = build_positive_findings_text(labels, templates, rng)
    pos_mask = np.array([labels.any()] * len(rep_pos), dtype=bool) if labels.any() else np.zeros(len(rep_pos), dtype=bool)
    rep_raw, raw_mask = build_raw_narrative(labels, zones, conditions, num_zones, rng)
    return SyntheticSample(
        seq=SliceSequence(emb, z),
        labels=labels,
        planted_zones=zones,
        report_raw=rep_raw,
        report_positive=rep_pos,
        raw_path_mask=raw_mask,
        pos_path_mask=pos_mask,
    )


def generate_dataset(n, conditions, n_range=(40, 120), d_v=64, num_zones=8,
                     seed=0, normal_frac=0.38, noise=1.0):
    """Deterministic per (seed, index); order of generation is irrelevant."""
    if n < 1:
        raise ValueError("need at least one sample")
    return [
        generate_sample(i, conditions, n_range, d_v, num_zones, seed, normal_frac, noise)
        for i in range(n)
    ]


def label_extractor_oracle(words, conditions):
    """Class c is positive iff one of its keywords appears outside a negation
    window (a negation word within the 3 preceding words)."""
    labels = np.zeros(len(conditions), dtype=bool)
    words = list(words)
    for i, w in enumerate(words):
        for cond in conditions:
            if w in cond.keywords:
                window = words[max(0, i - NEGATION_WINDOW):i]
                if not any(neg in window for neg in NEGATION_WORDS):
                    labels[cond.class_id] = True
    return labels


def dataset_checksum(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(s.seq.embeddings.tobytes())
        h.update(s.seq.z_coords.tobytes())
        h.update(np.asarray(s.labels).tobytes())
        h.update(" ".join(s.report_raw).encode())
        h.update(" ".join(s.report_positive).encode())
    return h.hexdigest()


# -- split export / import ------------------------------------------------------

_MAGIC = b"VGDS"
_VERSION = 1


def save_split(path, samples, meta):
    """One binary file per split: header json + per-sample records, plus a
    plain-text report sidecar next to it."""
    meta = dict(meta)
    meta["num_samples"] = len(samples)
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        for s in samples:
            n, d = s.seq.embeddings.shape
            rec_meta = json.dumps({
                "labels": [int(v) for v in s.labels],
                "zones": [int(v) for v in s.planted_zones],
                "report_raw": s.report_raw,
                "report_positive": s.report_positive,
                "raw_path_mask": [int(v) for v in s.raw_path_mask],
                "pos_path_mask": [int(v) for v in s.pos_path_mask],
            }, sort_keys=True).encode()
            f.write(struct.pack("<III", n, d, len(rec_meta)))
            f.write(rec_meta)
            f.write(s.seq.z_coords.astype("<f8").tobytes())
            f.write(s.seq.embeddings.astype("<f8").tobytes())
    with open(str(path) + ".reports.txt", "w") as f:
        for s in samples:
            f.write(" ".join(s.report_raw) + "\n")


def load_split(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a dataset split file")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported split version {version}")
        meta = json.loads(f.read(hlen))
        samples = []
        for _ in range(meta["num_samples"]):
            n, d, mlen = struct.unpack("<III", f.read(12))
            rec = json.loads(f.read(mlen))
            z = np.frombuffer(f.read(8 * n), dtype="<f8")
            emb = np.frombuffer(f.read(8 * n * d), dtype="<f8").reshape(n, d)
            samples.append(SyntheticSample(
                seq=SliceSequence(emb.copy(), z.copy()),
                labels=np.array(rec["labels"], dtype=bool),
                planted_zones=np.array(rec["zones"], dtype=np.int64),
                report_raw=rec["report_raw"],
                report_positive=rec["report_positive"],
                raw_path_mask=np.array(rec["raw_path_mask"], dtype=bool),
                pos_path_mask=np.array(rec["pos_path_mask"], dtype=bool),
            ))
    return samples, meta
