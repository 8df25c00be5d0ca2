"""Focal pooling: one learnable query attending over projected patches.

Scores are ``(p_i W_Q)(q W_K)^T / sqrt(d_k)``, so W_Q
projects the *patches* and W_K projects the *query*.  That is the reverse of
the usual attention naming and is kept on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .errors import DimensionError, EmptyInputError, ParameterError


@dataclass
class FocalPooling:
    """Plain-array parameters; bind them to a tape with :meth:`bind`."""

    q_focal: np.ndarray  # (1, d_llm)
    w_q: np.ndarray  # (d_llm, d_k)
    w_k: np.ndarray  # (d_llm, d_k)
    w_v: np.ndarray  # (d_llm, d_llm)

    @property
    def d_llm(self) -> int:
        return self.q_focal.shape[1]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    def __post_init__(self):
        d = self.q_focal.shape[1]
        if self.q_focal.shape != (1, d):
            raise DimensionError(f"q_focal must be 1 x d, got {self.q_focal.shape}")
        if self.w_q.shape[0] != d or self.w_k.shape[0] != d or self.w_q.shape[1] != self.w_k.shape[1]:
            raise DimensionError(f"W_Q {self.w_q.shape} and W_K {self.w_k.shape} must both be {d} x d_k")
        if self.w_v.shape != (d, d):
            raise DimensionError(f"W_V must be {d} x {d}, got {self.w_v.shape}")
        for name in ("q_focal", "w_q", "w_k", "w_v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"{name} has non-finite entries")

    @classmethod
    def init(cls, d_llm: int, d_k: int | None = None, rng: np.random.Generator | None = None, std: float = 0.02):
        rng = rng if rng is not None else np.random.default_rng(0)
        d_k = d_llm if d_k is None else d_k
        return cls(
            q_focal=rng.normal(0.0, std, (1, d_llm)),
            w_q=rng.normal(0.0, std, (d_llm, d_k)),
            w_k=rng.normal(0.0, std, (d_llm, d_k)),
            w_v=rng.normal(0.0, std, (d_llm, d_llm)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"q_focal": self.q_focal, "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}

    def bind(self, tape: Tape, requires_grad: bool = True) -> dict[str, DiffValue]:
        return {k: tape.leaf(v, requires_grad) for k, v in self.arrays().items()}


@dataclass
class PoolResult:
    alphas: DiffValue  # (N,) or (B, N)
    v_global: DiffValue  # (d,) or (B, d)


def focal_pool(patches: DiffValue, params: dict[str, DiffValue]) -> PoolResult:
    """Pool ``patches`` of shape (N, d) or (B, N, d) into one descriptor each."""
    if patches.ndim not in (2, 3):
        raise DimensionError(f"patches must be N x d or B x N x d, got {patches.shape}")
    n = patches.shape[-2]
    if n == 0:
        raise EmptyInputError("focal pooling needs at least one patch")
    d_k = params["w_q"].shape[1]
    batched = patches.ndim == 3

    query = ad.matmul(params["q_focal"], params["w_k"])  # (1, d_k)
    keys = ad.matmul(patches, params["w_q"])  # (.., N, d_k)
    scores = ad.scale(ad.matmul(keys, ad.transpose(query)), 1.0 / math.sqrt(d_k))  # (.., N, 1)
    values = ad.matmul(patches, params["w_v"])  # (.., N, d)
    if batched:
        b = patches.shape[0]
        alphas = ad.softmax_rows(ad.reshape(scores, (b, n)))
        v_global = ad.reshape(ad.matmul(ad.reshape(alphas, (b, 1, n)), values), (b, values.shape[-1]))
    else:
        alphas = ad.softmax_rows(ad.reshape(scores, (n,)))
        v_global = ad.reshape(ad.matmul(ad.reshape(alphas, (1, n)), values), (values.shape[-1],))
    return PoolResult(alphas, v_global)


def grounding_gradient(
    pool: PoolResult,
    patches,
    fp: FocalPooling,
    t_global,
    tau: float,
    sim_kind: str = "dot",
) -> np.ndarray:
    """d S / d alpha_k for the positive-pair logit ``S = (v_global . t_global) / tau``.

    The attention weights are treated as free coordinates at the evaluated point
    and differentiated by reverse mode; the result equals
    ``(1/tau) (p_k W_V) . t_global`` (see :func:`grounding_closed_form`).
    Only the dot-product similarity admits this form.
    """
    if sim_kind != "dot":
        raise ParameterError(f"grounding gradient is defined for dot similarity only, got {sim_kind!r}")
    if not tau > 0:
        raise ParameterError("temperature tau must be positive")
    p = np.asarray(patches.value if isinstance(patches, DiffValue) else patches, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError("grounding gradient is per sample: patches must be N x d")
    tape = Tape()
    alpha = tape.leaf(np.asarray(pool.alphas.value, dtype=np.float64))
    values = tape.const(p @ fp.w_v)
    v_global = ad.reshape(ad.matmul(ad.reshape(alpha, (1, p.shape[0])), values), (p.shape[1],))
    s = ad.scale(ad.dot(v_global, np.asarray(t_global, dtype=np.float64)), 1.0 / tau)
    return ad.backward(s, [alpha])[0]


def grounding_closed_form(patches, fp: FocalPooling, t_global, tau: float) -> np.ndarray:
    p = np.asarray(patches, dtype=np.float64)
    return (p @ fp.w_v) @ np.asarray(t_global, dtype=np.float64) / tau
