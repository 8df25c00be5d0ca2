"""Desk-scale multimodal classifier/generator.

Pipeline per sample: a frozen linear encoder maps patch features to
embeddings, a trainable projector lifts them to the decoder width, focal
pooling summarises them into ``v_global``, and a small pre-norm transformer
reads ``[patches; metadata tokens; CLS; description]``.  The CLS state feeds
the class head and the description positions feed the LM head.

Attention mask: patches and metadata see each other, CLS sees those plus
itself, description position ``t`` sees the prefix and description ``<= t``.
Patches carry no positional signal, so outputs do not depend on patch order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .errors import CheckpointError, ConfigError, ParameterError
from .pooling import focal_pool
from .synthdata import BOS, EOS, META_MAX_LEN, META_VOCAB, SampleRecord, serialize_metadata

NEG_INF = -1e9
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_v: int = 16
    d_enc: int = 16
    d_llm: int = 32
    n_patches: int = 8
    n_layers: int = 2
    vocab_size: int = 64
    desc_len: int = 12
    n_classes: int = 8
    lora_rank: int = 4
    lora_alpha: float = 16.0
    d_k: int = 0  # 0 means d_llm
    ffn_mult: int = 2
    full_finetune: bool = False

    def __post_init__(self):
        if self.lora_rank <= 0:
            raise ParameterError("LoRA rank must be positive")
        for name in ("d_v", "d_enc", "d_llm", "n_patches", "n_layers", "vocab_size", "desc_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def key_dim(self) -> int:
        return self.d_k or self.d_llm

    @property
    def meta_len(self) -> int:
        return META_MAX_LEN


# -- LoRA ------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    base: np.ndarray  # (d_in, d_out), frozen
    a: np.ndarray  # (r, d_in)
    b: np.ndarray  # (d_out, r), zero at init
    alpha: float

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def __post_init__(self):
        if self.a.ndim != 2 or self.a.shape[0] <= 0:
            raise ParameterError("LoRA rank must be positive")
        d_in, d_out = self.base.shape
        if self.a.shape[1] != d_in or self.b.shape != (d_out, self.rank):
            raise ConfigError(f"adapter shapes A{self.a.shape} B{self.b.shape} do not fit base {self.base.shape}")

    @classmethod
    def init(cls, base: np.ndarray, rank: int, alpha: float, rng: np.random.Generator) -> "LoraAdapter":
        if rank <= 0:
            raise ParameterError("LoRA rank must be positive")
        d_in, d_out = base.shape
        return cls(base, rng.normal(0.0, 1.0 / math.sqrt(d_in), (rank, d_in)), np.zeros((d_out, rank)), alpha)

    def effective_weight(self) -> np.ndarray:
        return self.base + (self.alpha / self.rank) * (self.b @ self.a).T

    def trainable_count(self) -> int:
        return self.a.size + self.b.size


def lora_forward(x, base, a=None, b=None, alpha: float = 16.0) -> DiffValue:
    """``x @ base + (alpha / r) (x @ A^T) @ B^T``; plain ``x @ base`` when no adapter."""
    if isinstance(base, LoraAdapter):
        tape = x.tape if isinstance(x, DiffValue) else Tape()
        x = ad._lift(x, tape)
        adapter = base
        base, a, b, alpha = (tape.const(adapter.base), tape.const(adapter.a), tape.const(adapter.b), adapter.alpha)
    out = ad.matmul(x, base)
    if a is None:
        return out
    r = a.shape[0]
    if r <= 0:
        raise ParameterError("LoRA rank must be positive")
    delta = ad.matmul(ad.matmul(x, ad.transpose(a)), ad.transpose(b))
    return ad.add(out, ad.scale(delta, alpha / r))


# -- batches ---------------------------------------------------------------------


@dataclass
class Batch:
    patches: np.ndarray  # (B, N, d_v)
    meta_ids: np.ndarray  # (B, M), 0-padded
    meta_mask: np.ndarray  # (B, M) bool
    desc: np.ndarray  # (B, T)
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.labels.shape[0]


_META_CACHE: dict[tuple, list[int]] = {}


def _meta_ids(record: SampleRecord) -> list[int]:
    key = (record.meta.site, record.meta.age, record.meta.sex)
    ids = _META_CACHE.get(key)
    if ids is None:
        ids = _META_CACHE[key] = serialize_metadata(record.meta)[1]
    return ids


def make_batch(records: Sequence[SampleRecord]) -> Batch:
    m = META_MAX_LEN
    meta = np.zeros((len(records), m), dtype=np.int64)
    mask = np.zeros((len(records), m), dtype=bool)
    for i, r in enumerate(records):
        ids = _meta_ids(r)
        meta[i, : len(ids)] = ids
        mask[i, : len(ids)] = True
    return Batch(
        patches=np.stack([r.patch_features for r in records]).astype(np.float64),
        meta_ids=meta,
        meta_mask=mask,
        desc=np.array([r.description_tokens for r in records], dtype=np.int64),
        labels=np.array([r.class_id for r in records], dtype=np.int64),
    )


def attention_mask(meta_mask: np.ndarray, n_patches: int, n_desc: int) -> np.ndarray:
    """Additive (B, S, S) mask for the ``[patches; meta; CLS; desc]`` layout."""
    b, m = meta_mask.shape
    prefix = n_patches + m
    s = prefix + 1 + n_desc
    key_ok = np.zeros((b, s), dtype=bool)
    key_ok[:, :n_patches] = True
    key_ok[:, n_patches:prefix] = meta_mask
    allowed = np.zeros((b, s, s), dtype=bool)
    allowed[:, :, :prefix] = key_ok[:, None, :prefix]
    allowed[:, prefix, prefix] = True
    d0 = prefix + 1
    if n_desc:
        allowed[:, d0:, d0:] = np.tril(np.ones((n_desc, n_desc), dtype=bool))
    return np.where(allowed, 0.0, NEG_INF)


# -- model -------------------------------------------------------------------------


@dataclass
class ModelOutput:
    logits: DiffValue  # (B, C)
    v_global: DiffValue  # (B, d)
    t_global: DiffValue | None  # (B, d)
    token_logits: DiffValue | None  # (B, T, V)
    alphas: DiffValue  # (B, N)


def _block_names(layer: int) -> list[str]:
    p = f"dec.{layer}."
    return [p + n for n in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")]


@dataclass
class CfaModel:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    trainable: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "CfaModel":
        streams = np.random.SeedSequence([seed, 7]).spawn(3)
        frozen_rng, train_rng, lora_rng = (np.random.default_rng(s) for s in streams)
        d, dv, de = cfg.d_llm, cfg.d_v, cfg.d_enc
        h = cfg.ffn_mult * d
        p: dict[str, np.ndarray] = {}

        def normal(rng, shape, std):
            return rng.normal(0.0, std, shape)

        # frozen "pretrained" pieces
        q, _ = np.linalg.qr(frozen_rng.normal(size=(max(dv, de), max(dv, de))))
        p["enc.w"] = q[:dv, :de] * math.sqrt(max(dv, de) / de)
        p["dec.tok_emb"] = normal(frozen_rng, (cfg.vocab_size, d), 1.0)
        p["dec.meta_emb"] = normal(frozen_rng, (len(META_VOCAB), d), 1.0)
        p["dec.pos_meta"] = normal(frozen_rng, (cfg.meta_len, d), 0.1)
        p["dec.pos_desc"] = normal(frozen_rng, (cfg.desc_len, d), 0.1)
        for layer in range(cfg.n_layers):
            pre = f"dec.{layer}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = normal(frozen_rng, (d, d), 1.0 / math.sqrt(d))
            p[pre + "w1"] = normal(frozen_rng, (d, h), 1.0 / math.sqrt(d))
            p[pre + "b1"] = np.zeros(h)
            p[pre + "w2"] = normal(frozen_rng, (h, d), 1.0 / math.sqrt(h))
            p[pre + "b2"] = np.zeros(d)

        # task-specific pieces
        p["proj.w"] = normal(train_rng, (de, d), 1.0 / math.sqrt(de))
        p["proj.b"] = np.zeros(d)
        p["pool.q_focal"] = normal(train_rng, (1, d), 0.02)
        p["pool.w_q"] = normal(train_rng, (d, cfg.key_dim), 0.02)
        p["pool.w_k"] = normal(train_rng, (d, cfg.key_dim), 0.02)
        p["pool.w_v"] = normal(train_rng, (d, d), 0.02)
        p["dec.cls"] = normal(train_rng, (1, d), 0.02)
        p["head.cls_w"] = normal(train_rng, (d, cfg.n_classes), 0.02)
        p["head.cls_b"] = np.zeros(cfg.n_classes)
        p["head.lm_w"] = normal(train_rng, (d, cfg.vocab_size), 0.02)
        p["head.lm_b"] = np.zeros(cfg.vocab_size)

        if cfg.full_finetune:
            trainable = frozenset(p)
        else:
            for layer in range(cfg.n_layers):
                for proj in ("q", "v"):
                    ad_ = LoraAdapter.init(p[f"dec.{layer}.w{proj}"], cfg.lora_rank, cfg.lora_alpha, lora_rng)
                    p[f"dec.{layer}.lora_{proj}.a"] = ad_.a
                    p[f"dec.{layer}.lora_{proj}.b"] = ad_.b
            task = ("proj.", "pool.", "head.", "dec.cls")
            trainable = frozenset(k for k in p if k.startswith(task) or ".lora_" in k)
        return cls(cfg, p, trainable)

    # -- bookkeeping -------------------------------------------------------------

    def copy(self) -> "CfaModel":
        return CfaModel(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.trainable)

    def trainable_names(self) -> list[str]:
        return sorted(self.trainable)

    def frozen_names(self) -> list[str]:
        return sorted(set(self.params) - self.trainable)

    def encoder_bytes(self) -> bytes:
        return np.ascontiguousarray(self.params["enc.w"]).tobytes()

    def bind(self, tape: Tape) -> dict[str, DiffValue]:
        return {k: tape.leaf(v, k in self.trainable) for k, v in self.params.items()}

    # -- forward ---------------------------------------------------------------------

    def _block(self, x: DiffValue, w: dict[str, DiffValue], layer: int, mask: np.ndarray, use_lora: bool) -> DiffValue:
        pre = f"dec.{layer}."
        d = self.cfg.d_llm
        alpha = self.cfg.lora_alpha

        def adapted(h, proj):
            key = f"{pre}lora_{proj}."
            if use_lora and key + "a" in w:
                return lora_forward(h, w[f"{pre}w{proj}"], w[key + "a"], w[key + "b"], alpha)
            return ad.matmul(h, w[f"{pre}w{proj}"])

        h = ad.layer_norm(x)
        q = adapted(h, "q")
        k = ad.matmul(h, w[pre + "wk"])
        v = adapted(h, "v")
        scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d)), mask)
        attn = ad.matmul(ad.matmul(ad.softmax_rows(scores), v), w[pre + "wo"])
        x = ad.add(x, attn)
        h = ad.layer_norm(x)
        b, s, _ = h.shape
        f = ad.add(ad.matmul(h, w[pre + "w1"]), ad.expand(w[pre + "b1"], (b, s, w[pre + "b1"].shape[0])))
        f = ad.matmul(ad.relu(f), w[pre + "w2"])
        f = ad.add(f, ad.expand(w[pre + "b2"], (b, s, d)))
        return ad.add(x, f)

    def forward(
        self,
        tape: Tape,
        batch: Batch,
        w: dict[str, DiffValue] | None = None,
        with_text: bool = True,
        desc_in: np.ndarray | None = None,
        use_lora: bool = True,
    ) -> ModelOutput:
        """Build the graph for one batch.

        ``desc_in`` overrides the teacher-forced decoder input (used by greedy
        decoding); by default it is ``[BOS, desc[:-1]]``.
        """
        cfg = self.cfg
        w = self.bind(tape) if w is None else w
        bsz, n, dv = batch.patches.shape
        if dv != cfg.d_v or n < 1:
            raise ConfigError(f"patch features {batch.patches.shape[1:]} do not match d_v={cfg.d_v}")
        d = cfg.d_llm

        enc = ad.matmul(tape.const(batch.patches), w["enc.w"])
        proj = ad.add(ad.matmul(enc, w["proj.w"]), ad.expand(w["proj.b"], (bsz, n, d)))
        pool = focal_pool(proj, {k: w["pool." + k] for k in ("q_focal", "w_q", "w_k", "w_v")})

        m = batch.meta_ids.shape[1]
        meta = ad.add(ad.embed(w["dec.meta_emb"], batch.meta_ids), ad.expand(w["dec.pos_meta"][:m], (bsz, m, d)))
        cls_tok = ad.expand(ad.reshape(w["dec.cls"], (1, 1, d)), (bsz, 1, d))
        parts = [proj, meta, cls_tok]

        n_desc = 0
        if with_text:
            if desc_in is None:
                desc_in = np.concatenate([np.full((bsz, 1), BOS), batch.desc[:, :-1]], axis=1)
            n_desc = desc_in.shape[1]
            if n_desc > cfg.desc_len:
                raise ConfigError(f"description length {n_desc} exceeds desc_len={cfg.desc_len}")
            emb = ad.embed(w["dec.tok_emb"], desc_in)
            pos = ad.expand(ad.getitem(w["dec.pos_desc"], slice(0, n_desc)), (bsz, n_desc, d))
            parts.append(ad.add(emb, pos))

        x = ad.concat(parts, axis=1)
        mask = attention_mask(batch.meta_mask, n, n_desc)
        for layer in range(cfg.n_layers):
            x = self._block(x, w, layer, mask, use_lora)
        x = ad.layer_norm(x)

        cls_pos = n + m
        h_cls = ad.reshape(ad.getitem(x, (slice(None), slice(cls_pos, cls_pos + 1))), (bsz, d))
        logits = ad.add(ad.matmul(h_cls, w["head.cls_w"]), ad.expand(w["head.cls_b"], (bsz, cfg.n_classes)))

        token_logits = t_global = None
        if with_text:
            h_txt = ad.getitem(x, (slice(None), slice(cls_pos + 1, None)))
            token_logits = ad.add(
                ad.matmul(h_txt, w["head.lm_w"]), ad.expand(w["head.lm_b"], (bsz, n_desc, cfg.vocab_size))
            )
            t_global = ad.reduce("mean", ad.embed(w["dec.tok_emb"], batch.desc), axis=1)
        return ModelOutput(logits, pool.v_global, t_global, token_logits, pool.alphas)

    def predict_proba(self, records: Sequence[SampleRecord], batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(records), batch_size):
            batch = make_batch(records[i : i + batch_size])
            tape = Tape()
            w = {k: tape.const(v) for k, v in self.params.items()}
            z = self.forward(tape, batch, w, with_text=False).logits.value
            out.append(ad._softmax(z))
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))

    # -- accounting ---------------------------------------------------------------

    def count_parameters(self) -> dict:
        trainable = sum(self.params[k].size for k in self.trainable)
        frozen = sum(v.size for k, v in self.params.items() if k not in self.trainable)
        lora = {}
        for layer in range(self.cfg.n_layers):
            for proj in ("q", "v"):
                key = f"dec.{layer}.lora_{proj}."
                if key + "a" in self.params:
                    lora[f"dec.{layer}.w{proj}"] = self.params[key + "a"].size + self.params[key + "b"].size
        total = trainable + frozen
        return {
            "trainable": int(trainable),
            "frozen": int(frozen),
            "ratio": trainable / total if total else 0.0,
            "lora": lora,
        }


def forward_train(record: SampleRecord, model: CfaModel) -> ModelOutput:
    """Single-record forward on a fresh tape (batch axis of size 1)."""
    tape = Tape()
    return model.forward(tape, make_batch([record]))


def generate(records: Sequence[SampleRecord] | SampleRecord, model: CfaModel, max_len: int | None = None) -> list[list[int]]:
    """Greedy decoding conditioned on the patches and metadata; EOS is dropped."""
    single = isinstance(records, SampleRecord)
    records = [records] if single else list(records)
    max_len = model.cfg.desc_len if max_len is None else max_len
    if max_len < 1:
        raise ParameterError("max_len must be at least 1")
    max_len = min(max_len, model.cfg.desc_len)
    if not records:
        return []
    batch = make_batch(records)
    bsz = len(records)
    seq = np.full((bsz, 1), BOS, dtype=np.int64)
    done = np.zeros(bsz, dtype=bool)
    out: list[list[int]] = [[] for _ in range(bsz)]
    for _ in range(max_len):
        tape = Tape()
        w = {k: tape.const(v) for k, v in model.params.items()}
        logits = model.forward(tape, batch, w, desc_in=seq).token_logits.value[:, -1]
        nxt = logits.argmax(axis=1)
        for i in np.flatnonzero(~done):
            if nxt[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all():
            break
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out[0] if single else out


def count_parameters(model: CfaModel) -> dict:
    return model.count_parameters()


# -- checkpoints -----------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _checkpoint_body(model: CfaModel, seed: int, config_echo: dict) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "model_config": asdict(model.cfg),
        "config": config_echo,
        "trainable": sorted(model.trainable),
        "weights": {
            k: {"shape": list(v.shape), "data": [_fmt(x) for x in v.reshape(-1)]} for k, v in sorted(model.params.items())
        },
    }


def _digest(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class Checkpoint:
    model: CfaModel
    seed: int
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = _checkpoint_body(self.model, self.seed, self.config_echo)
        body["digest"] = _digest(body)
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            body = json.loads(text)
            digest = body.pop("digest")
        except (json.JSONDecodeError, KeyError, AttributeError) as exc:
            raise CheckpointError(f"unreadable checkpoint: {exc}") from None
        if body.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {body.get('version')!r}")
        if _digest(body) != digest:
            raise CheckpointError("checkpoint digest mismatch")
        cfg = ModelConfig(**body["model_config"])
        params = {
            k: np.array([float(x) for x in spec["data"]], dtype=np.float64).reshape(spec["shape"])
            for k, spec in body["weights"].items()
        }
        model = CfaModel(cfg, params, frozenset(body["trainable"]))
        return cls(model, int(body["seed"]), body.get("config", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
