"""Unit tests for the dual-attention encoder-decoder and its training loop."""

import numpy as np
import pytest

from factsum import model as M
from factsum import nncore as nc
from factsum.corpus import SEP_ID, ParallelPair, Vocab, encode_batch, make_batches


def tiny_cfg(fusion="gated", dropout=0.0, **kw):
    return M.ModelConfig(
        src_vocab_size=20,
        tgt_vocab_size=20,
        embed_dim=8,
        hidden_dim=8,
        fusion_mode=fusion,
        dropout=dropout,
        **kw,
    )


def probe(seed=0, **kw):
    return M._probe_batch(np.random.default_rng(seed), **kw)


class TestConfig:
    def test_unknown_fusion_mode_rejected(self):
        with pytest.raises(ValueError, match="fusion_mode"):
            tiny_cfg(fusion="both")

    def test_nonpositive_dimensions_rejected(self):
        with pytest.raises(ValueError):
            M.ModelConfig(src_vocab_size=0, tgt_vocab_size=5)

    def test_context_widths(self):
        assert tiny_cfg(fusion="gated").fused_dim == 16
        assert tiny_cfg(fusion="concat").fused_dim == 32

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            M.TrainConfig(patience=0)
        with pytest.raises(ValueError):
            M.TrainConfig(batch_size=0)


class TestInitParams:
    def test_gated_has_gate_weights_concat_does_not(self):
        rng = np.random.default_rng(0)
        gated = M.init_params(tiny_cfg("gated"), rng)
        concat = M.init_params(tiny_cfg("concat"), np.random.default_rng(0))
        assert "gate.W" in gated and "gate.b" in gated
        assert "gate.W" not in concat
        assert gated["gate.W"].shape == (32, 16)

    def test_shared_fact_embedding_has_no_separate_table(self):
        shared = M.init_params(tiny_cfg(), np.random.default_rng(0))
        assert "emb_fact" not in shared
        unshared = M.init_params(
            tiny_cfg(share_fact_embedding=False), np.random.default_rng(0)
        )
        assert unshared["emb_fact"].shape == (20, 8)

    def test_pretrained_source_embeddings_override(self):
        table = np.full((20, 8), 0.125)
        params = M.init_params(tiny_cfg(), np.random.default_rng(0), pretrained_src=table)
        assert np.array_equal(params["emb_src"], table)

    def test_readout_shapes(self):
        params = M.init_params(tiny_cfg(), np.random.default_rng(0))
        assert params["out.W_w"].shape == (8, 8)
        assert params["out.W_c"].shape == (16, 8)
        assert params["out.W_s"].shape == (8, 8)
        assert params["out.W_o"].shape == (8, 20)


class TestEncoders:
    def test_each_fact_encodes_independently(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(3)
        params = M.init_params(cfg, rng)
        ids = np.array([[6, 7, 8, SEP_ID, 9, 10]])
        mask = np.ones_like(ids, dtype=np.float64)
        gamma = (ids != SEP_ID).astype(np.float64)
        enc = M.encode_facts(params, cfg, ids, mask, gamma)
        for span in (slice(0, 3), slice(4, 6)):
            alone_ids = ids[:, span]
            alone = M.encode_facts(
                params,
                cfg,
                alone_ids,
                np.ones_like(alone_ids, dtype=np.float64),
                np.ones_like(alone_ids, dtype=np.float64),
            )
            assert np.array_equal(enc.states[:, span], alone.states)

    def test_trailing_padding_does_not_change_states(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, np.random.default_rng(3))
        ids = np.array([[6, 7, 8]])
        mask = np.ones_like(ids, dtype=np.float64)
        plain = M.encode_sentence(params, cfg, ids, mask)
        padded_ids = np.array([[6, 7, 8, 0, 0]])
        padded_mask = np.array([[1.0, 1.0, 1.0, 0.0, 0.0]])
        padded = M.encode_sentence(params, cfg, padded_ids, padded_mask)
        assert np.array_equal(plain.states, padded.states[:, :3])
        assert np.array_equal(plain.final_fwd, padded.final_fwd)
        assert np.array_equal(plain.first_bwd, padded.first_bwd)
        assert np.all(padded.states[:, 3:] == 0.0)


class TestForward:
    def test_probabilities_are_distributions(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, np.random.default_rng(1))
        fwd = M.teacher_forced_distributions(params, cfg, probe())
        sums = fwd.probs.sum(axis=-1)
        np.testing.assert_allclose(
            sums[fwd.step_mask > 0], 1.0, rtol=0, atol=1e-12
        )

    def test_loss_equals_mean_gold_token_nll(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, np.random.default_rng(1))
        batch = probe()
        fwd = M.teacher_forced_distributions(params, cfg, batch)
        loss = M.batch_loss(params, cfg, batch)
        gold = batch.target_ids[:, 1:]
        picked = np.take_along_axis(fwd.probs, gold[:, :, None], axis=-1)[:, :, 0]
        expected = -(np.log(picked) * fwd.step_mask).sum() / fwd.step_mask.sum()
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_gates_recorded_only_in_gated_mode(self):
        batch = probe()
        gated = tiny_cfg("gated")
        fwd = M.teacher_forced_distributions(
            M.init_params(gated, np.random.default_rng(1)), gated, batch
        )
        assert fwd.gates is not None
        assert np.all((fwd.gates > 0.0) & (fwd.gates < 1.0))
        concat = tiny_cfg("concat")
        fwd = M.teacher_forced_distributions(
            M.init_params(concat, np.random.default_rng(1)), concat, batch
        )
        assert fwd.gates is None

    def test_eval_mode_ignores_rng(self):
        cfg = tiny_cfg(dropout=0.5)
        params = M.init_params(cfg, np.random.default_rng(1))
        batch = probe()
        a = M.batch_loss(params, cfg, batch, train=False, rng=np.random.default_rng(7))
        b = M.batch_loss(params, cfg, batch, train=False, rng=np.random.default_rng(8))
        assert a == b

    def test_train_mode_dropout_perturbs_loss(self):
        cfg = tiny_cfg(dropout=0.5)
        params = M.init_params(cfg, np.random.default_rng(1))
        batch = probe()
        eval_loss = M.batch_loss(params, cfg, batch)
        train_loss = M.batch_loss(
            params, cfg, batch, train=True, rng=np.random.default_rng(7)
        )
        assert train_loss != eval_loss

    def test_empty_fact_sequence_is_supported(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, np.random.default_rng(1))
        src = Vocab([f"w{i}" for i in range(10)])
        tgt = Vocab([f"t{i}" for i in range(10)])
        batch = encode_batch([ParallelPair(["w1", "w2"], [], ["t3"])], src, tgt)
        loss, grads = M.batch_loss_and_grads(params, cfg, batch, train=False)
        assert np.isfinite(loss)
        assert all(np.all(np.isfinite(g)) for g in grads.values())
        # with no fact positions the fact attention gets no gradient at all
        assert np.all(grads["att_r.W_k"] == 0.0)

    def test_non_finite_forward_raises(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, np.random.default_rng(1))
        params["emb_src"] = params["emb_src"] + np.nan
        with pytest.raises(FloatingPointError):
            M.batch_loss(params, cfg, probe())


class TestStepConsistency:
    @pytest.mark.parametrize("fusion", ["gated", "concat"])
    def test_decode_step_reproduces_teacher_forced_probs(self, fusion):
        cfg = tiny_cfg(fusion)
        params = M.init_params(cfg, np.random.default_rng(5))
        batch = probe(batch=1)
        fwd = M.teacher_forced_distributions(params, cfg, batch)
        enc_x = M.encode_sentence(params, cfg, batch.source_ids, batch.source_mask)
        enc_r = M.encode_facts(
            params, cfg, batch.fact_ids, batch.fact_mask, batch.gamma
        )
        state, _ = M._init_state(params, enc_x)
        steps = batch.target_ids.shape[1] - 1
        for t in range(steps):
            out = M.decode_step(
                params, cfg, batch.target_ids[:, t], state, enc_x, enc_r
            )
            np.testing.assert_allclose(
                out.distribution, fwd.probs[:, t], rtol=0, atol=1e-14
            )
            state = out.state


class TestGradients:
    def test_full_check_with_dropout_enabled(self):
        err = M.gradient_check("gated", dropout=0.5)
        assert err <= 1e-4

    def test_full_check_with_unshared_fact_embedding(self):
        cfg = tiny_cfg(share_fact_embedding=False)
        params = M.init_params(cfg, np.random.default_rng([2, 0]))
        for name in params:
            params[name] *= 2.0
            if ".b" in name and not name.startswith("emb"):
                params[name] += 0.2
        batch = probe(seed=[2, 1])
        loss_fn = lambda p: M.batch_loss(p, cfg, batch)
        grad_fn = lambda p: M.batch_loss_and_grads(p, cfg, batch, train=False)[1]
        assert nc.finite_diff_check(loss_fn, grad_fn, params) <= 1e-4

    def test_subset_check_with_empty_facts(self):
        cfg = tiny_cfg()
        params = M.init_params(cfg, np.random.default_rng([2, 0]))
        for name in params:
            params[name] *= 2.0
            if ".b" in name and not name.startswith("emb"):
                params[name] += 0.2
        src = Vocab([f"w{i}" for i in range(15)])
        tgt = Vocab([f"t{i}" for i in range(15)])
        batch = encode_batch(
            [ParallelPair(["w1", "w2", "w3"], [], ["t4", "t5"])], src, tgt
        )
        subset = {
            k: params[k]
            for k in ("enc_x.fwd.W_z", "dec.U_h", "out.W_o", "gate.b", "att_r.v")
        }
        loss_fn = lambda p: M.batch_loss(params, cfg, batch)
        grad_fn = lambda p: M.batch_loss_and_grads(params, cfg, batch, train=False)[1]
        assert nc.finite_diff_check(loss_fn, grad_fn, subset) <= 1e-4


class TestSentenceOnlyAndGate:
    def test_sentence_only_requires_gated_config(self):
        cfg = tiny_cfg("concat")
        params = M.init_params(cfg, np.random.default_rng(1))
        with pytest.raises(ValueError, match="gated"):
            M.teacher_forced_distributions(params, cfg, probe(), sentence_only=True)

    def test_saturated_gate_matches_sentence_only(self):
        cfg = tiny_cfg("gated")
        params = M.init_params(cfg, np.random.default_rng(6))
        saturated = {k: v.copy() for k, v in params.items()}
        saturated["gate.W"] = np.zeros_like(saturated["gate.W"])
        saturated["gate.b"] = np.full_like(saturated["gate.b"], 20.0)
        batch = probe()
        gated = M.teacher_forced_distributions(saturated, cfg, batch)
        plain = M.teacher_forced_distributions(saturated, cfg, batch, sentence_only=True)
        tv = 0.5 * np.abs(gated.probs - plain.probs).sum(axis=-1)
        assert tv[gated.step_mask > 0].max() <= 1e-6


class TestScheduler:
    def test_halving_fires_at_patience_and_counter_resets(self):
        sched = M.LrScheduler(lr=1.0, patience=10)
        assert sched.update(5.0) is False  # first validation improves on +inf
        halved = [sched.update(5.0) for _ in range(10)]
        assert halved == [False] * 9 + [True]
        assert sched.lr == 0.5 and sched.halvings == 1

    def test_improvement_resets_the_counter(self):
        sched = M.LrScheduler(lr=1.0, patience=3)
        sched.update(5.0)
        sched.update(5.0)
        sched.update(5.0)
        assert sched.update(4.0) is False  # improvement, counter back to 0
        assert sched.update(4.5) is False
        assert sched.update(4.5) is False
        assert sched.update(4.5) is True
        assert sched.lr == 0.5

    def test_successive_halvings(self):
        sched = M.LrScheduler(lr=1.0, patience=2)
        sched.update(1.0)
        for _ in range(2):
            sched.update(2.0)
        for _ in range(2):
            sched.update(2.0)
        assert sched.halvings == 2 and sched.lr == 0.25

    def test_equal_cost_is_not_an_improvement(self):
        sched = M.LrScheduler(lr=1.0, patience=1)
        sched.update(3.0)
        assert sched.update(3.0) is True


def _toy_training_setup(n_pairs=8):
    words = [f"w{i}" for i in range(6)]
    pairs = []
    for i in range(n_pairs):
        src = [words[(i + j) % 6] for j in range(4)]
        pairs.append(ParallelPair(src, [src[0], src[1]], src[:2]))
    src_vocab = Vocab(words)
    tgt_vocab = Vocab(words)
    return pairs, src_vocab, tgt_vocab


class TestTrain:
    def _cfgs(self, **kw):
        mcfg = M.ModelConfig(
            src_vocab_size=11, tgt_vocab_size=11, embed_dim=6, hidden_dim=6
        )
        defaults = dict(lr=0.01, batch_size=4, validate_every=2, max_epochs=2, seed=1)
        defaults.update(kw)
        return mcfg, M.TrainConfig(**defaults)

    def test_log_records_and_lr_field(self):
        pairs, sv, tv = _toy_training_setup()
        mcfg, tcfg = self._cfgs()
        params, log = M.train(pairs, pairs, sv, tv, mcfg, tcfg)
        assert len(log) == 2  # 4 steps, validations at 2 and 4
        assert log[0]["step"] == 2 and log[1]["step"] == 4
        for rec in log:
            assert set(rec) == {"step", "dev_cost", "lr", "gate_mean", "gate_std"}
            assert 0.0 < rec["gate_mean"] < 1.0

    def test_identical_seeds_reproduce_identical_logs_and_params(self):
        pairs, sv, tv = _toy_training_setup()
        mcfg, tcfg = self._cfgs()
        params_a, log_a = M.train(pairs, pairs, sv, tv, mcfg, tcfg)
        params_b, log_b = M.train(pairs, pairs, sv, tv, mcfg, tcfg)
        assert log_a == log_b
        assert all(np.array_equal(params_a[k], params_b[k]) for k in params_a)

    def test_different_seed_changes_the_log(self):
        pairs, sv, tv = _toy_training_setup()
        mcfg, tcfg = self._cfgs()
        _, log_a = M.train(pairs, pairs, sv, tv, mcfg, tcfg)
        mcfg2, tcfg2 = self._cfgs(seed=2)
        _, log_b = M.train(pairs, pairs, sv, tv, mcfg2, tcfg2)
        assert log_a != log_b

    def test_final_validation_when_none_fired(self):
        pairs, sv, tv = _toy_training_setup()
        mcfg, tcfg = self._cfgs(validate_every=1000, max_epochs=1)
        _, log = M.train(pairs, pairs, sv, tv, mcfg, tcfg)
        assert len(log) == 1

    def test_zero_lr_keeps_pretrained_embeddings(self):
        pairs, sv, tv = _toy_training_setup()
        mcfg, tcfg = self._cfgs(lr=0.0)
        table = np.full((11, 6), 0.0625)
        params, _ = M.train(pairs, pairs, sv, tv, mcfg, tcfg, pretrained_src=table)
        assert np.array_equal(params["emb_src"], table)

    def test_divergence_is_reported(self):
        # Adam keeps update magnitude near lr, so the rate has to be absurd
        # before any forward product actually overflows float64
        pairs, sv, tv = _toy_training_setup()
        mcfg, tcfg = self._cfgs(lr=1e150, max_epochs=30)
        with pytest.raises(M.TrainingDiverged, match="step"):
            M.train(pairs, pairs, sv, tv, mcfg, tcfg)

    def test_empty_dataset_rejected(self):
        pairs, sv, tv = _toy_training_setup()
        mcfg, tcfg = self._cfgs()
        with pytest.raises(ValueError):
            M.train([], pairs, sv, tv, mcfg, tcfg)
