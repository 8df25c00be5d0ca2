"""Seeded long-tailed multimodal datasets and metadata-to-text bridging.

A sample is a set of patch features (class-specific "lesion" patches mixed
with shared background patches, in random order), a small metadata record,
and a description token sequence that opens with its class's signature
tokens.  The OOD split reuses the generator with every prototype rotated by a
fixed orthogonal transform.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import DatasetParseError, InfeasibleConfigError, ParameterError, VocabularyError

log = logging.getLogger(__name__)

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
SPLITS = ("train", "val", "test", "ood")

SITES = (
    "anterior torso",
    "posterior torso",
    "lateral torso",
    "head/neck",
    "upper extremity",
    "lower extremity",
    "palms/soles",
    "oral/genital",
)
SEXES = ("male", "female")
TEMPLATE = "A lesion on the {site} of a {age}-year-old {sex} patient."


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 8
    n_total: int = 2000
    imbalance_rho: float = 50.0
    n_patches: int = 8
    d_v: int = 16
    vocab_size: int = 64
    desc_len: int = 12
    noise_sigma: float = 1.0
    seed: int = 0
    n_lesion_patches: int = 3
    signature_len: int = 3
    n_ood: int = 600
    ood_angle: float = 0.3
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ParameterError("need at least two classes")
        if self.imbalance_rho < 1:
            raise ParameterError("imbalance_rho must be >= 1")
        for name in ("n_total", "n_patches", "d_v", "vocab_size", "desc_len", "signature_len"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if not 0 <= self.n_lesion_patches <= self.n_patches:
            raise ParameterError("n_lesion_patches must lie in [0, n_patches]")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be nonnegative")
        if self.desc_len < self.signature_len + 1:
            raise ParameterError("desc_len must leave room for the signature and the end token")
        if N_SPECIAL + self.n_classes * self.signature_len >= self.vocab_size:
            raise ParameterError("vocab_size too small for the class signatures")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ParameterError("val/test fractions must be nonnegative and sum below 1")

    @property
    def filler_range(self) -> tuple[int, int]:
        return N_SPECIAL + self.n_classes * self.signature_len, self.vocab_size

    def signature(self, class_id: int) -> list[int]:
        start = N_SPECIAL + class_id * self.signature_len
        return list(range(start, start + self.signature_len))


@dataclass(frozen=True)
class Meta:
    site: str
    age: int
    sex: str


@dataclass(eq=False)
class SampleRecord:
    id: str
    class_id: int
    patch_features: np.ndarray
    meta: Meta
    description_tokens: list[int]
    split: str

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.class_id == other.class_id
            and np.array_equal(self.patch_features, other.patch_features)
            and self.meta == other.meta
            and list(self.description_tokens) == list(other.description_tokens)
            and self.split == other.split
        )


# -- metadata text -------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s?[A-Za-z]+|\s?\d|\s?[^\sA-Za-z\d]")


def _build_meta_vocab() -> dict[str, int]:
    vocab = {"<pad>": 0}
    texts = [TEMPLATE.format(site=s, age="0", sex=x) for s in SITES for x in SEXES]
    texts.append(" ".join("0123456789") + "0123456789")
    for text in texts:
        for tok in _TOKEN_RE.findall(text):
            vocab.setdefault(tok, len(vocab))
    return vocab


META_VOCAB: dict[str, int] = _build_meta_vocab()
META_ID_TO_TOKEN: dict[int, str] = {i: t for t, i in META_VOCAB.items()}


def tokenize(text: str) -> list[int]:
    pieces = _TOKEN_RE.findall(text)
    if "".join(pieces) != text:
        raise VocabularyError(f"text contains characters outside the metadata vocabulary: {text!r}")
    try:
        return [META_VOCAB[p] for p in pieces]
    except KeyError as exc:
        raise VocabularyError(f"unknown token {exc.args[0]!r}") from None


def detokenize(ids: Iterable[int]) -> str:
    return "".join(META_ID_TO_TOKEN[int(i)] for i in ids if int(i) != 0)


def serialize_metadata(meta: Meta) -> tuple[str, list[int]]:
    """Render ``meta`` with the fixed template and tokenize it."""
    if meta.site not in SITES:
        raise VocabularyError(f"unknown anatomical site {meta.site!r}")
    if meta.sex not in SEXES:
        raise VocabularyError(f"unknown sex {meta.sex!r}")
    if not 0 <= int(meta.age) <= 999:
        raise VocabularyError(f"age {meta.age!r} outside the supported range")
    text = TEMPLATE.format(site=meta.site, age=int(meta.age), sex=meta.sex)
    return text, tokenize(text)


META_MAX_LEN = max(len(serialize_metadata(Meta(s, 100, x))[1]) for s in SITES for x in SEXES)


@dataclass(frozen=True)
class ExpansionProvider:
    """Where clinical descriptions come from: the local template or a remote service.

    The remote service receives the metadata as a JSON object and answers with
    plain text.  Any failure falls back to the template.
    """

    mode: str = "template"
    endpoint: str | None = None
    timeout: float = 5.0

    def __post_init__(self):
        if self.mode not in ("template", "external"):
            raise ParameterError(f"unknown expansion mode {self.mode!r}")
        if self.mode == "external" and not self.endpoint:
            raise ParameterError("external expansion needs an endpoint")


def expand_metadata(meta: Meta, provider: ExpansionProvider = ExpansionProvider()) -> str:
    fallback = serialize_metadata(meta)[0]
    if provider.mode == "template":
        return fallback
    body = json.dumps({"site": meta.site, "age": int(meta.age), "sex": meta.sex}).encode()
    req = urllib.request.Request(
        provider.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(req, timeout=provider.timeout) as resp:
            text = resp.read().decode("utf-8").strip()
    except (urllib.error.URLError, OSError, ValueError, UnicodeDecodeError) as exc:
        log.warning("metadata expansion via %s failed (%s); using template", provider.endpoint, exc)
        return fallback
    if not text:
        log.warning("metadata expansion via %s returned an empty body; using template", provider.endpoint)
        return fallback
    return text


# -- generation ----------------------------------------------------------------


def class_counts(n_total: int, n_classes: int, rho: float) -> np.ndarray:
    """Geometric priors with max/min ratio ``rho``, rounded by largest remainder."""
    if n_total < n_classes:
        raise InfeasibleConfigError(f"n_total={n_total} cannot cover {n_classes} classes")
    priors = rho ** (-np.arange(n_classes) / (n_classes - 1))
    priors /= priors.sum()
    raw = priors * n_total
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n_total - counts.sum()]] += 1
    while counts.min() == 0:
        counts[counts.argmax()] -= 1
        counts[counts.argmin()] += 1
    return counts


@dataclass
class Prototypes:
    lesion: np.ndarray  # (C, d_v)
    background: np.ndarray  # (N - K, d_v)
    rotation: np.ndarray  # (d_v, d_v), applied to both for the OOD split
    site_pref: np.ndarray  # (C,) preferred site index
    n_lesion: int

    def pattern(self, class_id: int, ood: bool = False) -> np.ndarray:
        """Noise-free patch set of a class (lesion rows first)."""
        rows = np.vstack([np.repeat(self.lesion[class_id][None], self.n_lesion, 0), self.background])
        return rows @ self.rotation.T if ood else rows


def make_prototypes(cfg: DataConfig) -> Prototypes:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    d = cfg.d_v
    lesion = rng.normal(0.0, 1.0, (cfg.n_classes, d))
    background = rng.normal(0.0, 1.0, (cfg.n_patches - cfg.n_lesion_patches, d))
    skew = rng.normal(0.0, 1.0, (d, d))
    skew = skew - skew.T
    skew /= np.linalg.norm(skew, 2)
    rotation = expm(cfg.ood_angle * skew)
    site_pref = rng.permutation(cfg.n_classes) % len(SITES)
    return Prototypes(lesion, background, rotation, site_pref, cfg.n_lesion_patches)


def _stratified_splits(counts: np.ndarray, cfg: DataConfig, rng: np.random.Generator) -> list[str]:
    splits = []
    for k in counts:
        n_val = int(round(cfg.val_fraction * k))
        n_test = int(round(cfg.test_fraction * k))
        if k >= 3:
            n_val, n_test = max(n_val, 1 if cfg.val_fraction > 0 else 0), max(n_test, 1 if cfg.test_fraction > 0 else 0)
        n_train = k - n_val - n_test
        labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        splits.extend(rng.permutation(labels).tolist())
    return splits


def _make_sample(
    idx: str,
    c: int,
    split: str,
    cfg: DataConfig,
    protos: Prototypes,
    rng: np.random.Generator,
) -> SampleRecord:
    pattern = protos.pattern(c, ood=split == "ood")
    feats = pattern + cfg.noise_sigma * rng.normal(0.0, 1.0, pattern.shape)
    feats = feats[rng.permutation(cfg.n_patches)]

    if rng.random() < 0.5:
        site = SITES[int(protos.site_pref[c])]
    else:
        site = SITES[int(rng.integers(len(SITES)))]
    age = int(np.clip(round(rng.normal(40.0 + 4.0 * c, 12.0)), 18, 90))
    sex = SEXES[int(rng.integers(2))]

    lo, hi = cfg.filler_range
    n_fill = cfg.desc_len - cfg.signature_len - 1
    filler = rng.integers(lo, hi, n_fill).tolist()
    tokens = cfg.signature(c) + filler + [EOS]
    return SampleRecord(idx, int(c), feats, Meta(site, age, sex), tokens, split)


def generate_dataset(cfg: DataConfig) -> list[SampleRecord]:
    """All splits of a dataset; a pure function of ``cfg``."""
    counts = class_counts(cfg.n_total, cfg.n_classes, cfg.imbalance_rho)
    protos = make_prototypes(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    splits = _stratified_splits(counts, cfg, rng)
    labels = np.repeat(np.arange(cfg.n_classes), counts)

    records = []
    for i, (c, split) in enumerate(zip(labels, splits)):
        records.append(_make_sample(f"id{i:06d}", int(c), split, cfg, protos, rng))
    if cfg.n_ood > 0:
        ood_counts = class_counts(max(cfg.n_ood, cfg.n_classes), cfg.n_classes, cfg.imbalance_rho)
        for j, c in enumerate(np.repeat(np.arange(cfg.n_classes), ood_counts)):
            records.append(_make_sample(f"ood{j:06d}", int(c), "ood", cfg, protos, rng))
    return records


def split_records(records: Sequence[SampleRecord], split: str) -> list[SampleRecord]:
    return [r for r in records if r.split == split]


def nearest_prototype_predict(records: Sequence[SampleRecord], protos: Prototypes) -> np.ndarray:
    """Order-free baseline: match each sample's mean patch to the class mean patterns."""
    centers = np.stack([protos.pattern(c).mean(axis=0) for c in range(protos.lesion.shape[0])])
    means = np.stack([r.patch_features.mean(axis=0) for r in records])
    d2 = ((means[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


# -- JSON Lines ----------------------------------------------------------------


def _fmt_float(x: float) -> str:
    s = format(float(x), ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def record_to_line(r: SampleRecord) -> str:
    feats = "[" + ", ".join("[" + ", ".join(_fmt_float(x) for x in row) + "]" for row in r.patch_features) + "]"
    meta = json.dumps({"site": r.meta.site, "age": int(r.meta.age), "sex": r.meta.sex})
    return (
        f'{{"id": {json.dumps(r.id)}, "class_id": {int(r.class_id)}, "patch_features": {feats}, '
        f'"meta": {meta}, "description_tokens": {json.dumps([int(t) for t in r.description_tokens])}, '
        f'"split": {json.dumps(r.split)}}}'
    )


def _record_from_obj(obj, line_no: int) -> SampleRecord:
    try:
        feats = np.asarray(obj["patch_features"], dtype=np.float64)
        meta = obj["meta"]
        rec = SampleRecord(
            id=str(obj["id"]),
            class_id=int(obj["class_id"]),
            patch_features=feats,
            meta=Meta(str(meta["site"]), int(meta["age"]), str(meta["sex"])),
            description_tokens=[int(t) for t in obj["description_tokens"]],
            split=str(obj["split"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(line_no, f"bad record: {exc}") from None
    if feats.ndim != 2 or not np.all(np.isfinite(feats)):
        raise DatasetParseError(line_no, "patch_features must be a finite 2-D array")
    if rec.split not in SPLITS:
        raise DatasetParseError(line_no, f"unknown split {rec.split!r}")
    if rec.class_id < 0 or any(t < 0 for t in rec.description_tokens):
        raise DatasetParseError(line_no, "class ids and tokens must be nonnegative")
    return rec


def save_dataset(records: Iterable[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(record_to_line(r))
            fh.write("\n")


def load_dataset(path) -> list[SampleRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(line_no, f"invalid JSON: {exc.msg}") from None
            out.append(_record_from_obj(obj, line_no))
    return out


def dataset_digest(records: Iterable[SampleRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(record_to_line(r).encode())
        h.update(b"\n")
    return h.hexdigest()
