"""The four CFA objective terms, their weighted total, and the focal
gradient-modulation diagnostic.

All losses are batch means so that the balancing weights do not depend on the
batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .errors import ContractError, DegenerateInputError, EmptyInputError, NonFiniteLossError, ParameterError


@dataclass(frozen=True)
class LossWeights:
    """Weights on the align, cal and gen terms; focal always has weight 1.

    Only ``lambda3 = 0.5`` is grounded in the reference sensitivity study.
    ``lambda1`` and ``lambda2`` default to 1.0 by choice.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class FocalConfig:
    gamma: float
    alpha_weights: tuple[float, ...]

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError("gamma must be nonnegative")
        if any(a < 0 for a in self.alpha_weights):
            raise ParameterError("alpha weights must be nonnegative")
        object.__setattr__(self, "alpha_weights", tuple(float(a) for a in self.alpha_weights))

    @property
    def n_classes(self) -> int:
        return len(self.alpha_weights)

    @classmethod
    def uniform(cls, n_classes: int, gamma: float = 0.0) -> "FocalConfig":
        return cls(gamma, (1.0,) * n_classes)

    @classmethod
    def from_class_counts(cls, counts: Sequence[int], gamma: float = 2.0) -> "FocalConfig":
        """Inverse class frequency, rescaled to mean 1.  Empty classes count as 1."""
        counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
        inv = 1.0 / counts
        return cls(gamma, tuple(inv / inv.mean()))


@dataclass
class LossBundle:
    focal: DiffValue
    align: DiffValue
    cal: DiffValue
    gen: DiffValue
    total: DiffValue
    weights: LossWeights = field(default_factory=LossWeights)

    def components(self) -> dict[str, float]:
        return {
            "focal": self.focal.item(),
            "align": self.align.item(),
            "cal": self.cal.item(),
            "gen": self.gen.item(),
            "total": self.total.item(),
        }


def _check_targets(targets, n_rows: int, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n_rows,):
        raise ContractError(f"expected {n_rows} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(f"target outside [0, {n_classes})")
    return targets


def focal_terms(logits: DiffValue, targets, cfg: FocalConfig) -> DiffValue:
    """Per-sample ``-alpha_t (1 - p_t)^gamma log p_t`` as a length-B value."""
    if logits.ndim != 2:
        raise ContractError(f"logits must be B x C, got {logits.shape}")
    b, c = logits.shape
    if cfg.n_classes != c:
        raise ContractError(f"focal config has {cfg.n_classes} alpha weights for {c} classes")
    targets = _check_targets(targets, b, c)
    logp_t = ad.pick(ad.log_softmax_rows(logits), targets)
    alpha_t = np.asarray(cfg.alpha_weights)[targets]
    if cfg.gamma == 0.0:
        return ad.mul(ad.neg(logp_t), alpha_t)
    modulator = ad.power(1.0 - ad.exp(logp_t), cfg.gamma)
    return ad.mul(ad.neg(ad.mul(modulator, logp_t)), alpha_t)


def focal_loss(logits: DiffValue, targets, cfg: FocalConfig) -> DiffValue:
    return ad.reduce("mean", focal_terms(logits, targets, cfg))


def cross_entropy(logits: DiffValue, targets) -> DiffValue:
    b, c = logits.shape
    targets = _check_targets(targets, b, c)
    return ad.neg(ad.reduce("mean", ad.pick(ad.log_softmax_rows(logits), targets)))


def similarity_logits(v: DiffValue, t: DiffValue, tau: float, sim_kind: str = "cosine") -> DiffValue:
    """B x B matrix of ``sim(v_i, t_j) / tau``."""
    if not tau > 0:
        raise ParameterError("temperature tau must be positive")
    if v.ndim != 2 or v.shape != t.shape:
        raise ContractError(f"v and t must both be B x d, got {v.shape} and {t.shape}")
    if v.shape[0] < 1:
        raise EmptyInputError("alignment needs at least one pair")
    if sim_kind == "cosine":
        try:
            v, t = ad.normalize_rows(v), ad.normalize_rows(t)
        except DegenerateInputError:
            raise DegenerateInputError("zero-norm embedding under cosine similarity") from None
    elif sim_kind != "dot":
        raise ParameterError(f"unknown similarity {sim_kind!r}")
    return ad.scale(ad.matmul(v, ad.transpose(t)), 1.0 / tau)


def align_loss(v_batch: DiffValue, t_batch: DiffValue, tau: float = 0.07, sim_kind: str = "cosine") -> DiffValue:
    """Symmetric InfoNCE: the mean of the v->t and t->v directions, diagonal positive."""
    s = similarity_logits(v_batch, t_batch, tau, sim_kind)
    diag = np.arange(s.shape[0])
    v2t = ad.reduce("mean", ad.pick(ad.log_softmax_rows(s), diag))
    t2v = ad.reduce("mean", ad.pick(ad.log_softmax_rows(ad.transpose(s)), diag))
    return ad.scale(ad.add(v2t, t2v), -0.5)


def one_hot(targets, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    out = np.zeros((targets.size, n_classes))
    out[np.arange(targets.size), targets] = 1.0
    return out


def cal_loss(logits: DiffValue, onehot) -> DiffValue:
    """Batch mean of the per-sample Brier score ``(1/C) sum_k (p_k - y_k)^2``."""
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != logits.shape:
        raise ContractError(f"one-hot shape {y.shape} does not match logits {logits.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ContractError("targets are not one-hot rows")
    c = logits.shape[1]
    diff = ad.sub(ad.softmax_rows(logits), y)
    per_sample = ad.reduce("sum", ad.square(diff), axis=1)
    return ad.scale(ad.reduce("mean", per_sample), 1.0 / c)


def gen_loss(token_logits: DiffValue, token_targets, mask=None) -> DiffValue:
    """Mean next-token negative log-likelihood over unmasked positions.

    ``token_logits`` is ``(..., V)``; targets and mask share its leading shape.
    """
    lead = token_logits.shape[:-1]
    vocab = token_logits.shape[-1]
    targets = np.asarray(token_targets, dtype=np.int64)
    if targets.shape != lead:
        raise ContractError(f"targets shape {targets.shape} does not match logits {lead}")
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise ContractError("mask shape does not match targets")
    n = int(mask.sum())
    if n == 0:
        raise EmptyInputError("all token positions are masked")
    safe = np.where(mask, targets, 0)
    if safe.size and (safe.min() < 0 or safe.max() >= vocab):
        raise IndexError(f"token target outside [0, {vocab})")
    logp = ad.pick(ad.log_softmax_rows(token_logits), safe)
    masked = ad.mul(logp, mask.astype(np.float64))
    return ad.scale(ad.reduce("sum", masked), -1.0 / n)


def cfa_total(focal: DiffValue, align: DiffValue, cal: DiffValue, gen: DiffValue, w: LossWeights) -> LossBundle:
    for name, term in (("focal", focal), ("align", align), ("cal", cal), ("gen", gen)):
        if term.value.size != 1:
            raise ContractError(f"{name} component must be a scalar")
        if not np.isfinite(term.value).all():
            raise NonFiniteLossError(f"{name} component is not finite")
    for name in ("lambda1", "lambda2", "lambda3"):
        if getattr(w, name) < 0:
            raise ParameterError(f"{name} must be nonnegative")
    total = focal
    for lam, term in ((w.lambda1, align), (w.lambda2, cal), (w.lambda3, gen)):
        if lam != 0.0:
            total = ad.add(total, ad.scale(term, lam))
    return LossBundle(focal, align, cal, gen, total, w)


# -- gradient modulation -------------------------------------------------------


@dataclass
class ModulationRow:
    index: int
    target: int
    p_t: float
    scale: float
    focal_grad_norm: float
    ce_grad_norm: float
    align_grad_norm: float
    decomposition_residual: float


def grad_modulation_report(
    logits,
    targets,
    cfg: FocalConfig,
    lam: float = 1.0,
    v_batch=None,
    t_batch=None,
    tau: float = 0.07,
    sim_kind: str = "cosine",
) -> list[ModulationRow]:
    """Per-sample view of how the focal term reshapes the CE gradient.

    The focal gradient w.r.t. a sample's logits decomposes exactly into
    ``alpha_t (1-p_t)^gamma * grad CE`` plus the correction
    ``alpha_t * gamma (1-p_t)^(gamma-1) p_t log(p_t) (e_t - p)``.
    ``decomposition_residual`` is the max deviation of autodiff from that sum.
    ``align_grad_norm`` is ``|lam * dL_align / dv_i|`` when embeddings are given.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise EmptyInputError("modulation report needs a nonempty B x C batch")
    b, c = z.shape
    targets = _check_targets(targets, b, c)

    tape = Tape()
    zl = tape.leaf(z)
    g_focal = ad.backward(ad.reduce("sum", focal_terms(zl, targets, cfg)), [zl])[0]
    tape = Tape()
    zl = tape.leaf(z)
    g_ce = ad.backward(ad.neg(ad.reduce("sum", ad.pick(ad.log_softmax_rows(zl), targets))), [zl])[0]

    g_align = np.zeros((b, 1))
    if v_batch is not None and t_batch is not None:
        tape = Tape()
        vl = tape.leaf(np.asarray(v_batch, dtype=np.float64))
        tl = tape.const(np.asarray(t_batch, dtype=np.float64))
        g_align = lam * ad.backward(align_loss(vl, tl, tau, sim_kind), [vl])[0]

    p = ad._softmax(z)
    rows = np.arange(b)
    p_t = p[rows, targets]
    alpha_t = np.asarray(cfg.alpha_weights)[targets]
    onehot = one_hot(targets, c)
    gamma = cfg.gamma
    scale = (1.0 - p_t) ** gamma
    if gamma == 0.0:
        correction = np.zeros_like(p)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = gamma * (1.0 - p_t) ** (gamma - 1.0) * p_t * np.log(p_t)
        coef = np.where(np.isfinite(coef), coef, 0.0)
        correction = coef[:, None] * (onehot - p)
    predicted = alpha_t[:, None] * (scale[:, None] * g_ce + correction)
    residual = np.abs(predicted - g_focal).max(axis=1)

    return [
        ModulationRow(
            index=int(i),
            target=int(targets[i]),
            p_t=float(p_t[i]),
            scale=float(scale[i]),
            focal_grad_norm=float(np.linalg.norm(g_focal[i])),
            ce_grad_norm=float(np.linalg.norm(g_ce[i])),
            align_grad_norm=float(np.linalg.norm(g_align[i])) if v_batch is not None else 0.0,
            decomposition_residual=float(residual[i]),
        )
        for i in range(b)
    ]
