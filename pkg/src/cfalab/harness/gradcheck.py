"""Finite-difference gate over every training objective and the pooling layer."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import autodiff as ad
from .. import losses as L
from .. import pooling
from ..model import CfaModel, ModelConfig, make_batch
from ..synthdata import DataConfig, generate_dataset, split_records

TOLERANCE = 1e-4


@dataclass
class ObjectiveCheck:
    objective: str
    report: ad.GradientReport

    @property
    def max_rel_err(self) -> float:
        return self.report.max_rel_err


@dataclass
class GradcheckSummary:
    checks: list[ObjectiveCheck] = field(default_factory=list)
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(c.max_rel_err <= self.tol for c in self.checks)

    def failures(self) -> list[tuple[str, str, float]]:
        """``(objective, parameter, max rel err)`` for every parameter over tolerance."""
        return [
            (c.objective, p.name, p.max_rel_err) for c in self.checks for p in c.report.checks if p.max_rel_err > self.tol
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("objective", "parameter", "size", "max_rel_err", "passed"))
        for c in self.checks:
            for p in c.report.checks:
                writer.writerow((c.objective, p.name, p.analytic.size, f"{p.max_rel_err:.3e}", p.max_rel_err <= self.tol))
        return buf.getvalue()


def _objectives(seed: int) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    rng = np.random.default_rng(seed)
    b, c, d, t, v = 6, 5, 4, 5, 7
    targets = rng.integers(0, c, b)
    targets[:c] = np.arange(c)
    counts = np.bincount(targets, minlength=c)
    fcfg = L.FocalConfig.from_class_counts(counts, gamma=2.0)
    onehot = L.one_hot(targets, c)
    tok_targets = rng.integers(0, v, (b, t))
    tok_mask = rng.random((b, t)) < 0.8
    tok_mask[0, 0] = True
    patches = rng.normal(size=(b, 4, d))

    logits0 = rng.normal(0, 1.5, (b, c))
    vt0 = {"v": rng.normal(size=(b, d)), "t": rng.normal(size=(b, d))}
    pool0 = {
        "q_focal": rng.normal(0, 0.7, (1, d)),
        "w_q": rng.normal(0, 0.7, (d, 3)),
        "w_k": rng.normal(0, 0.7, (d, 3)),
        "w_v": rng.normal(0, 0.7, (d, d)),
    }
    # fixed readout so both pooling outputs reach the scalar
    read_v = rng.normal(size=(b, d))
    read_a = rng.normal(size=(b, 4))
    weights = L.LossWeights(1.0, 1.0, 0.5)

    def focal(p):
        return L.focal_loss(p["logits"], targets, fcfg)

    def align_cos(p):
        return L.align_loss(p["v"], p["t"], 0.07, "cosine")

    def align_dot(p):
        return L.align_loss(p["v"], p["t"], 0.5, "dot")

    def cal(p):
        return L.cal_loss(p["logits"], onehot)

    def gen(p):
        return L.gen_loss(p["token_logits"], tok_targets, tok_mask)

    def pool(p):
        res = pooling.focal_pool(ad._lift(patches, p["w_v"].tape), p)
        return ad.add(ad.reduce("sum", ad.mul(res.v_global, read_v)), ad.reduce("sum", ad.mul(res.alphas, read_a)))

    def combined(p):
        return L.cfa_total(
            L.focal_loss(p["logits"], targets, fcfg),
            L.align_loss(p["v"], p["t"], 0.07, "cosine"),
            L.cal_loss(p["logits"], onehot),
            L.gen_loss(p["token_logits"], tok_targets, tok_mask),
            weights,
        ).total

    tok0 = rng.normal(0, 1.5, (b, t, v))
    return {
        "focal_loss": (focal, {"logits": logits0}),
        "align_loss[cosine]": (align_cos, dict(vt0)),
        "align_loss[dot]": (align_dot, dict(vt0)),
        "cal_loss": (cal, {"logits": logits0}),
        "gen_loss": (gen, {"token_logits": tok0}),
        "focal_pool": (pool, pool0),
        "cfa_total": (combined, {"logits": logits0, **vt0, "token_logits": tok0}),
        "model_cfa": _model_objective(seed),
    }


def _model_objective(seed: int):
    """End-to-end CFA objective of a tiny model, differentiated w.r.t. its trainable weights."""
    data = DataConfig(n_classes=3, n_total=30, imbalance_rho=2.0, n_patches=3, d_v=4, vocab_size=10, desc_len=5,
                      seed=seed, n_lesion_patches=1, signature_len=2, n_ood=0)
    cfg = ModelConfig(d_v=4, d_enc=4, d_llm=6, n_patches=3, n_layers=1, vocab_size=10, desc_len=5, n_classes=3,
                      lora_rank=2, lora_alpha=4.0, ffn_mult=1)
    model = CfaModel.init(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # move the adapters and heads away from their init so every path carries gradient
    for k in model.trainable_names():
        model.params[k] = model.params[k] + rng.normal(0, 0.3, model.params[k].shape)
    batch = make_batch(split_records(generate_dataset(data), "train")[:4])
    fcfg = L.FocalConfig.from_class_counts(np.bincount(batch.labels, minlength=3) + 1, gamma=2.0)
    weights = L.LossWeights(1.0, 1.0, 0.5)
    trainable = model.trainable_names()
    frozen = {k: v for k, v in model.params.items() if k not in model.trainable}

    def objective(p):
        tape = p[trainable[0]].tape
        w = {**{k: tape.const(v) for k, v in frozen.items()}, **p}
        out = model.forward(tape, batch, w)
        return L.cfa_total(
            L.focal_loss(out.logits, batch.labels, fcfg),
            L.align_loss(out.v_global, out.t_global, 0.5, "cosine"),
            L.cal_loss(out.logits, L.one_hot(batch.labels, 3)),
            L.gen_loss(out.token_logits, batch.desc),
            weights,
        ).total

    return objective, {k: model.params[k] for k in trainable}


def gradcheck_all(seed: int = 0, h: float = 1e-5, tol: float = TOLERANCE) -> GradcheckSummary:
    """Run the central-difference oracle over every objective on seeded inputs."""
    summary = GradcheckSummary(tol=tol)
    for name, (fn, params) in _objectives(seed).items():
        summary.checks.append(ObjectiveCheck(name, ad.finite_diff_check(fn, params, h)))
    return summary
