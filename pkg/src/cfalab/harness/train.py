"""Mini-batch AdamW training on the CFA objective, and split evaluation."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from .. import losses as L
from ..errors import DivergedRunError, EmptyInputError, NonFiniteLossError
from ..metrics import EvalReport, balanced_accuracy, evaluate_predictions
from ..model import Checkpoint, CfaModel, generate, make_batch
from ..synthdata import SPLITS, SampleRecord, dataset_digest, generate_dataset, split_records
from .config import TrainConfig

log = logging.getLogger(__name__)

HISTORY_FIELDS = (
    "epoch",
    "focal",
    "align",
    "cal",
    "gen",
    "total",
    "scale_head",
    "scale_tail",
    "val_b_acc",
    "val_auroc",
    "val_ece",
)

# which optional terms each arm switches on: (align, cal, gen)
ARM_TERMS = {
    "ce_only": (False, False, False),
    "focal_only": (False, False, False),
    "focal_align": (True, False, False),
    "focal_cal": (False, True, False),
    "full_cfa": (True, True, True),
    "frozen_vs_fullft": (True, True, True),
}


class AdamW:
    """Adam with decoupled weight decay over a dict of numpy arrays."""

    def __init__(self, names: Sequence[str], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.names = list(names)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in self.names:
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p = params[k]
            p -= self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p)


@dataclass
class RunHistory:
    rows: list[dict] = field(default_factory=list)
    reports: dict[str, EvalReport] = field(default_factory=dict)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    seed: int = 0
    dataset_digest: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=("seed",) + HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            out = {"seed": self.seed}
            for k in HISTORY_FIELDS:
                v = row[k]
                out[k] = v if isinstance(v, int) else f"{v:.10g}"
            writer.writerow(out)
        return buf.getvalue()

    def reports_csv(self) -> str:
        return "".join(r.to_csv(header=i == 0) for i, r in enumerate(self.reports.values()))

    def digest(self) -> str:
        return hashlib.sha256((self.to_csv() + self.reports_csv()).encode()).hexdigest()


def focal_config_for(cfg: TrainConfig, train: Sequence[SampleRecord]) -> L.FocalConfig:
    c = cfg.data.n_classes
    if cfg.arm == "ce_only":
        return L.FocalConfig.uniform(c, gamma=0.0)
    counts = np.bincount([r.class_id for r in train], minlength=c)
    return L.FocalConfig.from_class_counts(counts, gamma=cfg.loss.gamma)


def subsample(train: Sequence[SampleRecord], fraction: float, seed: int, n_classes: int) -> tuple[list[SampleRecord], list[int]]:
    """Class-stratified, seed-deterministic subset.  Returns the subset and classes left empty."""
    if fraction >= 1.0:
        return list(train), []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    keep: list[int] = []
    empty = []
    labels = np.array([r.class_id for r in train])
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        k = int(round(fraction * idx.size))
        if k == 0:
            empty.append(c)
            continue
        keep.extend(rng.choice(idx, size=k, replace=False).tolist())
    if empty:
        log.warning("train fraction %.3g leaves classes %s without samples; folding them out of B-ACC", fraction, empty)
    return [train[i] for i in sorted(keep)], empty


def compute_losses(model: CfaModel, tape: ad.Tape, w, batch, cfg: TrainConfig, focal_cfg: L.FocalConfig) -> L.LossBundle:
    use_align, use_cal, use_gen = ARM_TERMS[cfg.arm]
    out = model.forward(tape, batch, w, with_text=use_gen)
    zero = tape.const(0.0)
    focal = L.focal_loss(out.logits, batch.labels, focal_cfg)
    align = cal = gen = zero
    if use_align:
        if out.t_global is None:
            t_global = ad.reduce("mean", ad.embed(w["dec.tok_emb"], batch.desc), axis=1)
        else:
            t_global = out.t_global
        align = L.align_loss(out.v_global, t_global, cfg.loss.tau, cfg.loss.sim_kind)
    if use_cal:
        cal = L.cal_loss(out.logits, L.one_hot(batch.labels, cfg.data.n_classes))
    if use_gen:
        gen = L.gen_loss(out.token_logits, batch.desc)
    lc = cfg.loss
    weights = L.LossWeights(
        lc.lambda1 if use_align else 0.0,
        lc.lambda2 if use_cal else 0.0,
        lc.lambda3 if use_gen else 0.0,
    )
    return L.cfa_total(focal, align, cal, gen, weights)


def _modulation_summary(model: CfaModel, probe: Sequence[SampleRecord], focal_cfg: L.FocalConfig, head: set[int]):
    probs = model.predict_proba(probe)
    labels = np.array([r.class_id for r in probe])
    with np.errstate(divide="ignore"):
        logits = np.log(np.maximum(probs, 1e-300))
    rows = L.grad_modulation_report(logits, labels, focal_cfg)
    head_s = [r.scale for r in rows if r.target in head]
    tail_s = [r.scale for r in rows if r.target not in head]
    return (float(np.mean(head_s)) if head_s else float("nan"), float(np.mean(tail_s)) if tail_s else float("nan"))


def train(
    cfg: TrainConfig,
    dataset: Sequence[SampleRecord] | None = None,
    eval_splits: Sequence[str] = ("val", "test", "ood"),
) -> tuple[Checkpoint, RunHistory]:
    """Train one arm.  Deterministic given ``cfg`` (and ``dataset``)."""
    t0 = time.perf_counter()
    records = list(dataset) if dataset is not None else generate_dataset(cfg.data)
    c = cfg.data.n_classes
    train_all = split_records(records, "train")
    train_set, empty = subsample(train_all, cfg.train_fraction, cfg.seed, c)
    if not train_set:
        raise EmptyInputError("training split is empty")
    val = split_records(records, "val")

    model = CfaModel.init(cfg.model_config(), cfg.seed)
    focal_cfg = focal_config_for(cfg, train_set)
    names = model.trainable_names()
    opt = AdamW(
        names,
        cfg.optim.lr,
        (cfg.optim.beta1, cfg.optim.beta2),
        cfg.optim.eps,
        cfg.optim.weight_decay,
    )
    counts = np.bincount([r.class_id for r in train_set], minlength=c)
    head = set(np.argsort(-counts, kind="stable")[: c // 2].tolist())
    probe = train_set[: min(len(train_set), 256)]
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    bs = cfg.optim.batch_size

    history = RunHistory(config=cfg.echo(), seed=cfg.seed, dataset_digest=dataset_digest(records))
    for epoch in range(1, cfg.optim.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        sums = dict.fromkeys(("focal", "align", "cal", "gen", "total"), 0.0)
        n_batches = 0
        for bi, start in enumerate(range(0, len(order), bs)):
            batch = make_batch([train_set[i] for i in order[start : start + bs]])
            tape = ad.Tape()
            w = model.bind(tape)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    bundle = compute_losses(model, tape, w, batch, cfg, focal_cfg)
            except NonFiniteLossError as exc:
                raise DivergedRunError(epoch, bi, float("nan")) from exc
            total = bundle.total.item()
            if not np.isfinite(total):
                raise DivergedRunError(epoch, bi, total)
            grads = ad.backward(bundle.total, [w[k] for k in names])
            opt.step(model.params, dict(zip(names, grads)))
            for k, v in bundle.components().items():
                sums[k] += v
            n_batches += 1
        row: dict = {"epoch": epoch}
        row.update({k: v / n_batches for k, v in sums.items()})
        row["scale_head"], row["scale_tail"] = _modulation_summary(model, probe, focal_cfg, head)
        if val:
            rep = evaluate_predictions(model.predict_proba(val), [r.class_id for r in val], split="val")
            row.update(val_b_acc=rep.b_acc, val_auroc=rep.auroc_macro, val_ece=rep.ece)
        else:
            row.update(val_b_acc=float("nan"), val_auroc=float("nan"), val_ece=float("nan"))
        history.rows.append(row)
        log.debug("epoch %d %s", epoch, row)

    ckpt = Checkpoint(model, cfg.seed, cfg.echo())
    for split in eval_splits:
        if split_records(records, split):
            history.reports[split] = evaluate(ckpt, split, records, exclude_classes=empty)
    history.wall_time = time.perf_counter() - t0
    return ckpt, history


def evaluate(
    checkpoint: Checkpoint | CfaModel,
    split: str,
    dataset: Sequence[SampleRecord],
    exclude_classes: Sequence[int] = (),
) -> EvalReport:
    """Metrics of a checkpoint on one split.  ``exclude_classes`` are left out of B-ACC only."""
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    if split not in SPLITS:
        raise EmptyInputError(f"unknown split {split!r}")
    recs = split_records(dataset, split)
    if not recs:
        raise EmptyInputError(f"split {split!r} is empty")
    probs = model.predict_proba(recs)
    labels = np.array([r.class_id for r in recs])
    report = evaluate_predictions(probs, labels, split=split)
    if exclude_classes:
        keep = ~np.isin(labels, list(exclude_classes))
        if keep.any():
            report.b_acc = float(balanced_accuracy(probs[keep].argmax(axis=1), labels[keep], probs.shape[1]))
    return report


def generation_accuracy(model: CfaModel, records: Sequence[SampleRecord], signature_len: int) -> float:
    """Share of samples whose generated text opens with the true class signature."""
    if not records:
        raise EmptyInputError("no records to generate for")
    hits = 0
    for i in range(0, len(records), 256):
        chunk = records[i : i + 256]
        for r, toks in zip(chunk, generate(chunk, model, signature_len + 1)):
            hits += list(toks[:signature_len]) == list(r.description_tokens[:signature_len])
    return hits / len(records)
