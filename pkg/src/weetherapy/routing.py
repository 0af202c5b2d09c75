"""Dual routing over the weak-expert pool, feature fusion and the audio adapter.

Both routers make a hard top-1 choice in the forward pass.  Gradients reach
the router through a straight-through estimator: the backward pass treats
the mixed features as the soft-weighted sum over experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    DiffArray,
    as_diff,
    concat,
    concat_features,
    gelu,
    make_op,
    mean_pool_time,
    parameter,
    softmax,
    stack,
)

ROUTING_MODES = ("hard_st", "soft")


@dataclass
class RouterParams:
    w_indep: DiffArray  # (M,)
    W_dep: DiffArray  # (d_base, M)

    @classmethod
    def init(cls, num_experts: int, d_base: int, rng: np.random.Generator,
             prior_index: int | None = None, prior_value: float = 1.0,
             dep_scale: float = 0.01) -> RouterParams:
        w = np.zeros(num_experts)
        if prior_index is not None:
            w[prior_index] = prior_value
        W = dep_scale * rng.standard_normal((d_base, num_experts))
        return cls(parameter(w, "w_indep"), parameter(W, "W_dep"))

    @property
    def num_experts(self) -> int:
        return self.w_indep.shape[0]


@dataclass
class RoutingDecision:
    soft: DiffArray  # (..., M)
    hard: np.ndarray  # one-hot, same shape
    chosen_index: np.ndarray  # (...) int

    @classmethod
    def from_soft(cls, soft: DiffArray) -> RoutingDecision:
        hard = keep_top1(soft.values)
        return cls(soft, hard, np.argmax(hard, axis=-1))


def keep_top1(p) -> np.ndarray:
    """One-hot at the argmax of the last axis; ties go to the lowest index."""
    p = np.asarray(p, dtype=np.float64)
    idx = np.argmax(p, axis=-1)
    out = np.zeros_like(p)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def route_indep(params: RouterParams) -> RoutingDecision:
    """Data-independent choice: the same expert for every sample."""
    return RoutingDecision.from_soft(softmax(params.w_indep))


def route_dep(z_base, params: RouterParams) -> RoutingDecision:
    """Per-sample choice from time-pooled base features, z_base (..., T, d_base)."""
    z_base = as_diff(z_base)
    if z_base.shape[-1] != params.W_dep.shape[0]:
        raise ShapeError(f"z_base dim {z_base.shape[-1]} != router input dim {params.W_dep.shape[0]}")
    pooled = mean_pool_time(z_base)
    return RoutingDecision.from_soft(softmax(pooled @ params.W_dep))


def mix_experts(decision: RoutingDecision, expert_outputs, mode: str = "hard_st") -> DiffArray:
    """Combine expert maps (..., M, T, d) under a routing decision.

    ``hard_st``: the value is exactly the chosen expert's map, gradients are
    those of sum_k soft[k] * E_k.  ``soft``: the value is that soft sum too.
    A data-independent decision (soft of shape (M,)) applies to every sample.
    """
    if mode not in ROUTING_MODES:
        raise ConfigError(f"routing mode must be one of {ROUTING_MODES}")
    if isinstance(expert_outputs, (list, tuple)):
        parts = [as_diff(getattr(e, "values", e)) if not isinstance(e, DiffArray) else e
                 for e in expert_outputs]
        if len({p.shape for p in parts}) != 1:
            raise ShapeError(f"expert outputs differ in shape: {sorted({p.shape for p in parts})}")
        experts = stack(parts, axis=-3)
    else:
        experts = as_diff(expert_outputs)
    soft = decision.soft
    M = soft.shape[-1]
    if experts.ndim < 3 or experts.shape[-3] != M:
        raise ShapeError(f"expected (..., {M}, T, d) expert outputs, got {experts.shape}")
    ev = experts.values
    sv = soft.values
    lead = ev.shape[:-3]
    # broadcast a shared decision over the batch
    s_b = np.broadcast_to(sv, lead + (M,))

    if mode == "hard_st":
        chosen = np.broadcast_to(decision.chosen_index, lead)
        out = np.take_along_axis(ev, chosen[..., None, None, None], axis=-3)[..., 0, :, :].copy()
    else:
        out = np.einsum("...k,...ktd->...td", s_b, ev)

    def vjp(g):
        g_soft = np.einsum("...td,...ktd->...k", g, ev)
        if sv.ndim == 1 and g_soft.ndim > 1:
            g_soft = g_soft.reshape((-1, M)).sum(axis=0)
        g_exp = s_b[..., :, None, None] * g[..., None, :, :]
        return g_soft, g_exp

    return make_op(out, (soft, experts), vjp)


def fuse(z_base, z_dep=None, z_indep=None) -> DiffArray:
    """Feature-axis concatenation [base, dep, indep]; time length is unchanged."""
    parts = [p for p in (z_base, z_dep, z_indep) if p is not None]
    out = concat_features(parts)
    if out.shape[-2] != as_diff(z_base).shape[-2]:
        raise ShapeError("fusion changed the sequence length")
    return out


@dataclass
class AdapterParams:
    """Frame-stacking adapter (linear + GELU) followed by the projection layer."""

    W_adapter: DiffArray  # (k * d_fused, d_adapter)
    b_adapter: DiffArray
    W_proj: DiffArray  # (d_adapter, d_llm)
    b_proj: DiffArray
    stack_factor: int

    @classmethod
    def init(cls, d_fused: int, d_adapter: int, d_llm: int, stack_factor: int,
             rng: np.random.Generator, identity: bool = False) -> AdapterParams:
        if stack_factor < 1:
            raise ConfigError("stack_factor must be >= 1")
        d_in = stack_factor * d_fused
        if identity:
            Wa, Wp = np.eye(d_in, d_adapter), np.eye(d_adapter, d_llm)
        else:
            Wa = rng.standard_normal((d_in, d_adapter)) / np.sqrt(d_in)
            Wp = rng.standard_normal((d_adapter, d_llm)) / np.sqrt(d_adapter)
        return cls(parameter(Wa, "adapter.W"), parameter(np.zeros(d_adapter), "adapter.b"),
                   parameter(Wp, "projection.W"), parameter(np.zeros(d_llm), "projection.b"),
                   stack_factor)

    def arrays(self) -> dict[str, DiffArray]:
        return {"adapter.W": self.W_adapter, "adapter.b": self.b_adapter,
                "projection.W": self.W_proj, "projection.b": self.b_proj}


def stack_frames(z: DiffArray, k: int) -> DiffArray:
    """(..., T, d) -> (..., ceil(T/k), k*d); the last partial group is zero-padded."""
    if k <= 0:
        raise ConfigError("stack_factor must be >= 1")
    z = as_diff(z)
    T, d = z.shape[-2:]
    groups = -(-T // k)
    pad = groups * k - T
    if pad:
        z = concat([z, DiffArray(np.zeros(z.shape[:-2] + (pad, d)))], axis=-2)
    return z.reshape(z.shape[:-2] + (groups, k * d))


def adapt_project(z, params: AdapterParams) -> DiffArray:
    """Audio tokens = proj(adapter(z)), shape (..., ceil(T/k), d_llm)."""
    stacked = stack_frames(z, params.stack_factor)
    if stacked.shape[-1] != params.W_adapter.shape[0]:
        raise ShapeError(f"fused dim x stack {stacked.shape[-1]} != adapter input {params.W_adapter.shape[0]}")
    h = gelu(stacked @ params.W_adapter + params.b_adapter)
    return h @ params.W_proj + params.b_proj
