"""The full audio-to-text model for one ablation variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vocab
from .decoder import Decoder, generate
from .errors import ConfigError
from .numerics import DiffArray, parameter
from .objective import (
    LossTerms,
    dep_diversity_loss,
    dep_entropy_loss,
    indep_entropy_loss,
    next_token_loss,
    total_loss,
)
from .routing import (
    AdapterParams,
    RouterParams,
    RoutingDecision,
    adapt_project,
    fuse,
    mix_experts,
    route_dep,
    route_indep,
)

VARIANTS = ("base_only", "weak_only", "indep_only", "dep_only", "full_wee")


@dataclass
class Batch:
    tasks: list[str]
    base: np.ndarray  # (B, T, d_base)
    experts: np.ndarray  # (B, M, T, d_w) features, or descriptors when experts are trainable
    instruction_ids: np.ndarray  # (B, I)
    target_ids: np.ndarray  # (B, Lt), PAD-filled
    target_mask: np.ndarray  # (B, Lt) bool

    def __len__(self) -> int:
        return len(self.tasks)


@dataclass
class ForwardOut:
    logits: DiffArray  # (B, Lt, V), row j predicts target_ids[:, j]
    indep: RoutingDecision | None
    dep: RoutingDecision | None
    audio_tokens: DiffArray


class WEEModel:
    def __init__(self, variant: str, decoder: Decoder, d_base: int, d_w: int, num_experts: int,
                 stack_factor: int = 3, d_adapter: int = 64, routing_mode: str = "hard_st",
                 weak_only_index: int = 1, prior_index: int | None = 0, prior_value: float = 1.0,
                 seed: int = 0, expert_projections: list[np.ndarray] | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.decoder = decoder
        self.routing_mode = routing_mode
        self.num_experts = num_experts
        self.weak_only_index = weak_only_index
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        self.uses_indep = variant in ("indep_only", "full_wee")
        self.uses_dep = variant in ("dep_only", "full_wee")
        if variant == "weak_only":
            d_fused = d_w
        else:
            d_fused = d_base + d_w * (int(self.uses_dep) + int(self.uses_indep))
        self.d_fused = d_fused
        self.router = RouterParams.init(num_experts, d_base, rng, prior_index, prior_value) \
            if (self.uses_dep or self.uses_indep) else None
        self.adapter = AdapterParams.init(d_fused, d_adapter, decoder.config.d_llm, stack_factor, rng)
        # trainable weak-encoder projections (off by default: experts are frozen)
        self.expert_proj = None
        if expert_projections is not None:
            self.expert_proj = [parameter(np.array(w), f"encoder.expert{k}.projection")
                                for k, w in enumerate(expert_projections)]

    # -- parameters ---------------------------------------------------------------

    def trainable(self) -> dict[str, DiffArray]:
        out = {}
        if self.router is not None:
            if self.uses_indep:
                out["w_indep"] = self.router.w_indep
            if self.uses_dep:
                out["W_dep"] = self.router.W_dep
        out.update(self.adapter.arrays())
        out.update(self.decoder.lora_arrays())
        if self.expert_proj is not None:
            out.update({p.name: p for p in self.expert_proj})
        return out

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        arrays, _ = self.decoder.state()
        return {k: v for k, v in arrays.items() if not k.startswith("lora.")}

    # -- forward -----------------------------------------------------------------------

    def expert_features(self, batch: Batch) -> DiffArray:
        if self.expert_proj is None:
            return DiffArray(batch.experts)
        from .numerics import stack
        desc = batch.experts  # (B, M, T, n_desc)
        return stack([(DiffArray(desc[:, k]) @ W).tanh() for k, W in enumerate(self.expert_proj)], axis=1)

    def audio_tokens(self, batch: Batch) -> tuple[DiffArray, RoutingDecision | None, RoutingDecision | None]:
        base = DiffArray(batch.base)
        indep = dep = None
        if self.variant == "weak_only":
            experts = self.expert_features(batch)
            z = experts[:, self.weak_only_index]
        elif self.variant == "base_only":
            z = base
        else:
            experts = self.expert_features(batch)
            z_dep = z_indep = None
            if self.uses_dep:
                dep = route_dep(base, self.router)
                z_dep = mix_experts(dep, experts, self.routing_mode)
            if self.uses_indep:
                indep = route_indep(self.router)
                z_indep = mix_experts(indep, experts, self.routing_mode)
            z = fuse(base, z_dep, z_indep)
        return adapt_project(z, self.adapter), indep, dep

    def forward(self, batch: Batch) -> ForwardOut:
        audio, indep, dep = self.audio_tokens(batch)
        ids = np.concatenate([batch.instruction_ids, batch.target_ids[:, :-1]], axis=1)
        logits = self.decoder.forward(self.decoder.assemble(audio, ids))
        n_prefix = audio.shape[-2] + batch.instruction_ids.shape[1] - 1
        return ForwardOut(logits[:, n_prefix:, :], indep, dep, audio)

    def loss(self, batch: Batch, lam: float = 0.1, diversity_weight: float = 1.0) -> tuple[LossTerms, ForwardOut]:
        out = self.forward(batch)
        nt = next_token_loss(out.logits, batch.target_ids, batch.target_mask)
        ie = indep_entropy_loss(out.indep.soft) if out.indep is not None else None
        de = dd = None
        if out.dep is not None:
            de = dep_entropy_loss(out.dep.soft)
            dd = dep_diversity_loss(out.dep.soft)
        return total_loss(nt, ie, de, dd, lam=lam, diversity_weight=diversity_weight), out

    def predict(self, batch: Batch, max_new: int = 6):
        """Greedy generations, first-step distributions and dep-router choices."""
        from .numerics import no_grad
        with no_grad():
            audio, indep, dep = self.audio_tokens(batch)
        seqs, probs = generate(self.decoder, audio, batch.instruction_ids, max_new, return_first_probs=True)
        dep_choice = None if dep is None else dep.chosen_index.copy()
        indep_choice = None if indep is None else int(indep.chosen_index)
        return seqs, probs, dep_choice, indep_choice


def make_batch(tasks, base, experts, examples) -> Batch:
    """Pad targets of a list of TaskExamples into a Batch."""
    Lt = max(len(e.target_ids) for e in examples)
    B = len(examples)
    tgt = np.full((B, Lt), vocab.PAD, dtype=np.int64)
    mask = np.zeros((B, Lt), dtype=bool)
    for b, e in enumerate(examples):
        tgt[b, : len(e.target_ids)] = e.target_ids
        mask[b, : len(e.target_ids)] = True
    instr = np.array([e.instruction_ids for e in examples], dtype=np.int64)
    return Batch(list(tasks), base, experts, instr, tgt, mask)
