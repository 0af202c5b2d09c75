"""Acceptance criteria, one test each; verdicts are summarised at the end of the run.

The experiment criteria (8-10) run in the low-resource regime of configs/acceptance.json,
where the base encoder alone is not at ceiling.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from test_decoder import _micro, hand_rolled_forward
from test_taskbench import ref_accuracy, ref_macro_f1, ref_precision_at_k, ref_rouge_l
from weetherapy import harness
from weetherapy import taskbench as tb
from weetherapy.config import load_config
from weetherapy.errors import FrozenDriftError
from weetherapy.numerics import DiffArray, parameter, softmax
from weetherapy.objective import dep_diversity_loss, dep_entropy_loss, indep_entropy_loss, total_loss
from weetherapy.routing import RouterParams, RoutingDecision, fuse, keep_top1, mix_experts, route_indep

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.json"
LN3 = math.log(3)


@pytest.fixture(scope="session")
def acc_cfg(pretrained, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("decoder") / "decoder.ckpt"
    pretrained.decoder.save(ckpt)
    return load_config(CONFIG).replace(decoder_checkpoint=str(ckpt))


@pytest.fixture(scope="session")
def grid(acc_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    start = time.perf_counter()
    report = harness.ablate(acc_cfg, out)
    return report, time.perf_counter() - start, out


@pytest.fixture(scope="session")
def sweep(acc_cfg):
    return harness.sweep_routing(acc_cfg, (acc_cfg.lam,), (True, False))


class TestAcceptance:
    def test_01_gradient_correctness(self, acceptance):
        start = time.perf_counter()
        reports = harness.run_grad_check("full_wee", 0, 0.1)
        elapsed = time.perf_counter() - start
        worst = max(r.max_rel_error for r in reports)
        ok = worst < 1e-4 and elapsed < 60
        acceptance(1, ok, f"worst rel error {worst:.2e} over {len(reports)} parameters in {elapsed:.1f}s")
        assert ok

    def test_02_loss_composition(self, acceptance):
        rng = np.random.default_rng(2)
        worst_id = 0.0
        in_bounds = True
        for _ in range(10_000):
            B = int(rng.integers(1, 17))
            scale = rng.choice([0.1, 1.0, 10.0])
            w = softmax(rng.normal(size=3) * scale)
            dep = softmax(rng.normal(size=(B, 3)) * scale)
            bd = total_loss(float(rng.uniform(0, 5)), indep_entropy_loss(w), dep_entropy_loss(dep),
                            dep_diversity_loss(dep)).breakdown()
            worst_id = max(worst_id, abs(bd.wee - 0.5 * (bd.indep_ent + bd.dep_ent + bd.dep_div)),
                           abs(bd.total - (bd.next_token + 0.1 * bd.wee)))
            in_bounds &= (0.0 <= bd.indep_ent <= LN3 + 1e-12 and 0.0 <= bd.dep_ent <= LN3 + 1e-12
                          and -LN3 - 1e-12 <= bd.dep_div <= 0.0)
        ok = worst_id <= 1e-12 and in_bounds
        acceptance(2, ok, f"max identity residual {worst_id:.1e}, bounds held: {in_bounds}")
        assert ok

    def test_03_routing_invariants(self, acceptance):
        rng = np.random.default_rng(3)
        p = rng.integers(0, 3, size=(100_000, 4)).astype(float)
        p[p.sum(axis=1) == 0, 0] = 1.0
        p /= p.sum(axis=1, keepdims=True)
        h = keep_top1(p)
        chosen = h.argmax(axis=1)
        mx = p.max(axis=1)
        one_hot = bool(np.all(h.sum(axis=1) == 1.0) and np.all(np.count_nonzero(h, axis=1) == 1))
        lowest = bool(np.all(p[np.arange(len(p)), chosen] == mx))
        for k in range(4):
            lowest &= not np.any((k < chosen) & (p[:, k] == mx))
        lengths = all(fuse(np.zeros((2, T, 5)), np.ones((2, T, 3)), np.ones((2, T, 3))).shape[1] == T
                      for T in range(1, 40))
        params = RouterParams.init(3, 4, rng)
        params.w_indep.values = rng.normal(size=3)
        experts = rng.normal(size=(8, 3, 6, 2))
        d = route_indep(params)
        out = mix_experts(d, experts).values
        shared = d.soft.shape == (3,) and all(np.array_equal(out[b], experts[b, int(d.chosen_index)])
                                               for b in range(8))
        ok = one_hot and lowest and lengths and shared
        acceptance(3, ok, f"one-hot {one_hot}, lowest-index ties {lowest}, length kept {lengths}, "
                          f"indep shared {shared}")
        assert ok

    def test_04_straight_through(self, acceptance):
        rng = np.random.default_rng(4)
        logits0 = rng.normal(size=(6, 3))
        experts0 = rng.normal(size=(6, 3, 5, 2))
        w = rng.normal(size=(6, 5, 2))
        fwd = mix_experts(RoutingDecision.from_soft(softmax(DiffArray(logits0))), experts0).values
        bit_equal = all(np.array_equal(fwd[b], experts0[b, int(np.argmax(logits0[b]))]) for b in range(6))

        def grads(twin):
            logits, experts = parameter(logits0), parameter(experts0)
            s = softmax(logits)
            if twin:
                out = (experts * s.reshape((6, 3, 1, 1))).sum(axis=1)
            else:
                out = mix_experts(RoutingDecision.from_soft(s), experts, "hard_st")
            (out * w).sum().backward()
            return logits.grad, experts.grad

        (gl, ge), (tl, te) = grads(False), grads(True)
        diff = max(np.max(np.abs(gl - tl)), np.max(np.abs(ge - te)))
        ok = bit_equal and diff <= 1e-10
        acceptance(4, ok, f"forward bit-equal {bit_equal}, gradient gap to soft twin {diff:.1e}")
        assert ok

    def test_05_freezing_audit(self, acceptance, acc_cfg, grid, pretrained_arrays):
        report, _, _ = grid
        cfg = acc_cfg.replace(steps=100, seeds=[0])
        res = harness.train(cfg, 0, None, harness.prepare_data(cfg, 0), pretrained_arrays, evaluate_splits=False)
        allowed = ("w_indep", "W_dep", "adapter.", "projection.", "lora.")
        census = set(res.census) == harness.expected_census(cfg) and all(
            n.startswith(allowed) and (not n.startswith("lora.") or ".attn.q." in n or ".attn.v." in n)
            for n in res.census)
        drift = [k for k, v in report.failures.items() if FrozenDriftError.__name__ in v]
        ok = res.audit.ok and census and not drift and len(report.failures) == 0
        acceptance(5, ok, f"{len(res.audit.before)} frozen arrays unchanged, census of {len(res.census)} "
                          f"matches, {len(report.loss_curves)} grid runs without drift")
        assert ok

    def test_06_metric_oracles(self, acceptance):
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 25))
            c = int(rng.integers(2, 5))
            y = rng.integers(0, c, n).tolist()
            p = rng.integers(-1, c, n).tolist()
            worst = max(worst, abs(tb.macro_f1(p, y, c) - ref_macro_f1(p, y, c)))
            pa = rng.integers(0, c, n).tolist()
            worst = max(worst, abs(tb.accuracy(pa, y) - ref_accuracy(pa, y)))
            scores = rng.integers(0, 5, n) / 4.0
            labels = rng.integers(0, 2, n).tolist()
            k = int(rng.integers(1, n + 1))
            worst = max(worst, abs(tb.precision_at_k(scores, labels, k) - ref_precision_at_k(scores, labels, k)))
            cand = rng.integers(0, 4, int(rng.integers(0, 10))).tolist()
            ref = rng.integers(0, 4, int(rng.integers(1, 10))).tolist()
            worst = max(worst, abs(tb.rouge_l(cand, ref) - ref_rouge_l(cand, ref)))
        examples = (tb.macro_f1([1, 1, 0, 0], [1, 0, 1, 0], 2) == 0.5
                    and tb.precision_at_k([0.9, 0.8, 0.7, 0.6, 0.5, 0.1], [1, 0, 1, 0, 1, 1], 5) == 0.6
                    and tb.rouge_l(list("ABCD"), list("ACBD")) == 0.75)
        ok = worst <= 1e-12 and examples
        acceptance(6, ok, f"max oracle gap {worst:.1e} over 4x1000 cases, worked examples exact {examples}")
        assert ok

    def test_07_decoder_sanity(self, acceptance, pretrained):
        dec = _micro()
        ids = [1, 4, 2]
        gap = float(np.max(np.abs(dec.forward(dec.embed_ids(np.array(ids))).values - hand_rolled_forward(dec, ids))))
        ok = pretrained.heldout_accuracy >= 0.99 and pretrained.steps <= 5000 and gap < 1e-10
        acceptance(7, ok, f"copy accuracy {pretrained.heldout_accuracy:.4f} after {pretrained.steps} steps, "
                          f"oracle gap {gap:.1e}")
        assert ok

    def test_08_ablation_ordering(self, acceptance, grid):
        report, elapsed, _ = grid
        check = harness.check_ordering(report)
        means = ", ".join(f"{v} {m:.3f}" for v, m in check.means.items())
        wins = ", ".join(f"{a}>{b} {w}/{check.num_seeds}" for (a, b), w in check.wins.items())
        ok = check.ok and elapsed < 30 * 60
        acceptance(8, ok, f"means {means}; wins {wins}; grid {elapsed / 60:.1f} min")
        assert ok

    def test_08b_training_reduces_loss(self, grid):
        report, _, _ = grid
        for key, curve in report.loss_curves.items():
            first = np.mean([r["total"] for r in curve[:50]])
            last = np.mean([r["total"] for r in curve[-50:]])
            assert last < first, key

    def test_09_expert_specialization(self, acceptance, grid):
        report, _, _ = grid
        cmd_k, er_k = harness.encoders.DEFAULT_POOL.index("burst_expert"), harness.encoders.DEFAULT_POOL.index(
            "envelope_expert")
        seeds_ok = []
        parts = []
        for seed in report.seeds:
            u = report.usage[("full_wee", seed)]
            seeds_ok.append(u["CMD"][cmd_k] >= 0.7 and u["ER"][er_k] >= 0.7)
            parts.append(f"seed {seed}: CMD->burst {u['CMD'][cmd_k]:.2f}, ER->envelope {u['ER'][er_k]:.2f}")
        ok = 2 * sum(seeds_ok) > len(seeds_ok)
        acceptance(9, ok, "; ".join(parts))
        assert ok

    def test_10_diversity_effect(self, acceptance, sweep):
        on = {r["seed"]: r["usage_entropy"] for r in sweep if r["diversity"] == 1}
        off = {r["seed"]: r["usage_entropy"] for r in sweep if r["diversity"] == 0}
        higher = sum(on[s] >= off[s] for s in on)
        spread = sum(on[s] >= 0.5 * LN3 for s in on)
        ok = 2 * higher > len(on) and 2 * spread > len(on)
        detail = "; ".join(f"seed {s}: on {on[s]:.3f} off {off[s]:.3f}" for s in sorted(on))
        acceptance(10, ok, f"{detail} (threshold {0.5 * LN3:.3f})")
        assert ok

    def test_11_determinism(self, acceptance, acc_cfg, tmp_path):
        cfg = acc_cfg.replace(seeds=[0])
        harness.ablate(cfg, tmp_path / "a")
        harness.ablate(cfg, tmp_path / "b")
        a, b = (tmp_path / "a" / "report.csv").read_bytes(), (tmp_path / "b" / "report.csv").read_bytes()
        ok = a == b and len(a) > 0
        acceptance(11, ok, f"report.csv byte-identical across two runs ({len(a)} bytes)")
        assert ok
