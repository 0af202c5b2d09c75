import numpy as np
import pytest

from weetherapy import vocab
from weetherapy.decoder import Decoder, DecoderConfig
from weetherapy.errors import ConfigError
from weetherapy.model import VARIANTS, Batch, WEEModel
from weetherapy.numerics import log_softmax


def _batch(rng, B=3, T=39, M=3):
    tgt = np.array([[vocab.CLASS_TOKENS[0], vocab.EOS, vocab.PAD]] * B)
    mask = tgt != vocab.PAD
    return Batch(["ER"] * B, np.tanh(rng.normal(size=(B, T, 32))), np.tanh(rng.normal(size=(B, M, T, 16))),
                 np.full((B, 1), vocab.TASK_TOKENS["ER"]), tgt, mask)


def _model(variant, seed=0):
    dec = Decoder(DecoderConfig(), seed=seed)
    dec.freeze()
    dec.attach_lora(np.random.default_rng(seed))
    return WEEModel(variant, dec, 32, 16, 3, seed=seed)


class TestVariants:
    @pytest.mark.parametrize("variant,d_fused", [("base_only", 32), ("weak_only", 16), ("indep_only", 48),
                                                 ("dep_only", 48), ("full_wee", 64)])
    def test_fused_width(self, variant, d_fused):
        assert _model(variant).d_fused == d_fused

    def test_census(self):
        lora = {f"lora.block{i}.attn.{p}.{m}" for i in range(2) for p in "qv" for m in "AB"}
        common = {"adapter.W", "adapter.b", "projection.W", "projection.b"} | lora
        expect = {"base_only": common, "weak_only": common, "indep_only": common | {"w_indep"},
                  "dep_only": common | {"W_dep"}, "full_wee": common | {"w_indep", "W_dep"}}
        for v in VARIANTS:
            assert set(_model(v).trainable()) == expect[v]

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            _model("moe")

    def test_weak_only_uses_configured_expert(self, rng):
        m = _model("weak_only")
        b = _batch(rng)
        b2 = Batch(b.tasks, np.zeros_like(b.base), b.experts.copy(), b.instruction_ids, b.target_ids, b.target_mask)
        b2.experts[:, [0, 2]] = 0.0
        a1 = m.audio_tokens(b)[0].values
        a2 = m.audio_tokens(b2)[0].values
        assert np.array_equal(a1, a2)  # only expert 1 (spectral) and not the base is read

    def test_base_only_ignores_experts(self, rng):
        m = _model("base_only")
        b = _batch(rng)
        b2 = Batch(b.tasks, b.base, np.zeros_like(b.experts), b.instruction_ids, b.target_ids, b.target_mask)
        assert np.array_equal(m.audio_tokens(b)[0].values, m.audio_tokens(b2)[0].values)


class TestForward:
    def test_shapes_and_decisions(self, rng):
        out = _model("full_wee").forward(_batch(rng))
        assert out.logits.shape == (3, 3, 32)
        assert out.audio_tokens.shape == (3, 13, 48)
        assert out.indep.soft.shape == (3,)
        assert out.dep.soft.shape == (3, 3)

    def test_logit_rows_predict_targets(self, rng):
        m = _model("dep_only", seed=1)
        b = _batch(rng, B=2)
        out = m.forward(b)
        audio = m.audio_tokens(b)[0]
        full = np.concatenate([b.instruction_ids, b.target_ids], axis=1)
        logits = m.decoder.forward(m.decoder.assemble(audio, full[:, :-1])).values
        A, I = audio.shape[1], b.instruction_ids.shape[1]
        # position A + I - 1 (the last instruction token) predicts target 0
        np.testing.assert_array_equal(out.logits.values, logits[:, A + I - 1:, :])

    def test_loss_matches_manual(self, rng):
        m = _model("full_wee", seed=2)
        b = _batch(rng)
        terms, out = m.loss(b, lam=0.1)
        lp = log_softmax(out.logits.values).values
        nll = [-lp[i, j, b.target_ids[i, j]] for i in range(3) for j in range(3) if b.target_mask[i, j]]
        assert terms.next_token.item() == pytest.approx(np.mean(nll), abs=1e-12)
        bd = terms.breakdown()
        assert bd.total == pytest.approx(bd.next_token + 0.1 * 0.5 * (bd.indep_ent + bd.dep_ent + bd.dep_div), abs=1e-12)

    def test_prior_picks_envelope_at_init(self, rng):
        out = _model("indep_only").forward(_batch(rng))
        assert int(out.indep.chosen_index) == 0

    def test_predict(self, rng):
        seqs, probs, dep, indep = _model("full_wee").predict(_batch(rng), max_new=3)
        assert len(seqs) == 3 and probs.shape == (3, 32)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert dep.shape == (3,) and indep == 0

    def test_trainable_weak_encoders(self, rng):
        dec = Decoder(DecoderConfig())
        dec.freeze()
        dec.attach_lora(rng)
        proj = [rng.normal(size=(13, 16)) for _ in range(3)]
        m = WEEModel("full_wee", dec, 32, 16, 3, expert_projections=proj)
        assert {"encoder.expert0.projection", "encoder.expert2.projection"} <= set(m.trainable())
        b = _batch(rng)
        b.experts = rng.normal(size=(3, 3, 39, 13))
        terms, _ = m.loss(b)
        terms.total.backward()
        assert m.expert_proj[0].grad is not None or m.expert_proj[1].grad is not None
