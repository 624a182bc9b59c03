"""Encoder behavior, masking, both pretraining losses, and training runs."""

import hashlib
import math

import numpy as np
import pytest

from txfuse import numcore as nc
from txfuse import txclm
from txfuse import txcorpus as tc
from txfuse.rng import stream

from gradcheck import agrees, analytic_grads, numeric_grads

TINY = txclm.TxCLMConfig(vocab_size=12, d_lm=8, layers=1, heads=2,
                         max_seq_len=12)


def _tiny_params(seed=3):
    return txclm.init_params(TINY, np.random.default_rng(seed))


def _synthetic_sequences(n_accounts=200, seed=11, max_seq_len=64):
    """Quick seeded corpus: random transfer histories, encoded to ids."""
    rng = np.random.default_rng(seed)
    groups = {}
    for a in range(n_accounts):
        t = int(rng.integers(1, 10 ** 6))
        recs = []
        for _ in range(int(rng.integers(3, 9))):
            t += int(rng.integers(60, 10 ** 5))
            recs.append(tc.TransactionRecord(
                "0xa", "0xb", float(rng.lognormal(0.0, 2.0)),
                int(rng.choice([-1, 1])), t))
        groups[f"acct{a:04d}"] = recs
    sents = tc.build_corpus(groups, max_seq_len=max_seq_len)
    vocab = tc.build_vocab(sents)
    return [vocab.encode(s.tokens) for s in sents], vocab


def _params_sha(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


class TestEncode:

    def test_deterministic(self):
        params = _tiny_params()
        ids = np.array([[1, 5, 6, 7, 2]])
        a = txclm.encode(ids, params, TINY).data
        b = txclm.encode(ids, params, TINY).data
        np.testing.assert_array_equal(a, b)

    def test_zeroed_weights_reduce_to_embedding_plus_position(self):
        params = _tiny_params()
        for k in params:
            if ".attn." in k or ".ff.w" in k:
                params[k].data[:] = 0.0
        ids = np.array([[1, 5, 6, 7]])
        out = txclm.encode(ids, params, TINY).data[0]
        expected = params["tok_emb"].data[ids[0]] + params["pos_emb"].data[:4]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_swapping_tokens_changes_both_rows(self):
        params = _tiny_params(seed=9)
        a = txclm.encode(np.array([[1, 7, 8, 9]]), params, TINY).data[0]
        b = txclm.encode(np.array([[1, 9, 8, 7]]), params, TINY).data[0]
        assert np.abs(a[1] - b[1]).max() > 1e-9
        assert np.abs(a[3] - b[3]).max() > 1e-9

    def test_padding_never_influences_real_tokens(self):
        params = _tiny_params(seed=5)
        short = txclm.encode(np.array([[1, 5, 6]]), params, TINY).data[0]
        padded = txclm.encode(np.array([[1, 5, 6, 0, 0]]), params, TINY).data[0]
        np.testing.assert_allclose(short, padded[:3], atol=1e-12)

    def test_rejects_out_of_range_and_overlong(self):
        params = _tiny_params()
        with pytest.raises(ValueError):
            txclm.encode(np.array([[1, 99]]), params, TINY)
        with pytest.raises(ValueError):
            txclm.encode(np.ones((1, 13), dtype=np.int64), params, TINY)


class TestApplyMask:

    def test_ratio_zero_is_identity(self):
        ids = [1, 5, 6, 7, 2]
        masked, plan = txclm.apply_mask(ids, 0.0, np.random.default_rng(0), 12)
        assert list(masked) == ids
        assert len(plan) == 0

    def test_ratio_one_masks_all_maskable(self):
        ids = [1] + [5] * 10 + [2]
        _, plan = txclm.apply_mask(ids, 1.0, np.random.default_rng(0), 12)
        assert len(plan) == 10

    def test_specials_never_masked(self):
        ids = [1, 5, 2, 6, 0, 0]
        masked, plan = txclm.apply_mask(ids, 1.0, np.random.default_rng(1), 12)
        assert set(plan.positions) == {1, 3}
        assert masked[0] == 1 and masked[2] == 2 and masked[4] == 0

    def test_same_seed_same_plan(self):
        ids = [1] + list(range(5, 11)) + [2]
        m1, p1 = txclm.apply_mask(ids, 0.5, np.random.default_rng(42), 12)
        m2, p2 = txclm.apply_mask(ids, 0.5, np.random.default_rng(42), 12)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(p1.positions, p2.positions)
        np.testing.assert_array_equal(p1.actions, p2.actions)

    def test_action_mix_is_80_10_10(self):
        ids = [1] + [5] * 2000 + [2]
        _, plan = txclm.apply_mask(ids, 1.0, np.random.default_rng(3), 50)
        frac_mask = np.mean(plan.actions == txclm.MASK_ACTION)
        frac_rand = np.mean(plan.actions == txclm.RANDOM_ACTION)
        frac_keep = np.mean(plan.actions == txclm.KEEP_ACTION)
        assert abs(frac_mask - 0.8) < 0.04
        assert abs(frac_rand - 0.1) < 0.03
        assert abs(frac_keep - 0.1) < 0.03

    def test_originals_preserved_in_plan(self):
        ids = [1, 5, 6, 7, 8, 2]
        masked, plan = txclm.apply_mask(ids, 1.0, np.random.default_rng(7), 20)
        np.testing.assert_array_equal(plan.originals,
                                      np.asarray(ids)[plan.positions])


class TestMlmLoss:

    def test_uniform_logits_give_log_vocab(self):
        plan = txclm.MaskPlan(np.array([0, 1]), np.array([3, 7]),
                              np.zeros(2, np.int64))
        logits = nc.Tensor(np.zeros((2, 10)))
        loss = txclm.mlm_loss(logits, plan)
        np.testing.assert_allclose(loss.data, math.log(10), atol=1e-12)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        # loss = ln(1 + (V-1) e^-margin), vanishing as the margin grows
        plan = txclm.MaskPlan(np.array([0]), np.array([2]),
                              np.zeros(1, np.int64))
        row = np.zeros((1, 4))
        row[0, 2] = 20.0
        loose = row.copy()
        loose[0, 2] = 5.0
        assert (float(txclm.mlm_loss(nc.Tensor(row), plan).data)
                < float(txclm.mlm_loss(nc.Tensor(loose), plan).data))
        assert float(txclm.mlm_loss(nc.Tensor(row), plan).data) < 1e-8

    def test_empty_mask_returns_zero(self):
        plan = txclm.MaskPlan(np.empty(0, np.int64), np.empty(0, np.int64),
                              np.empty(0, np.int64))
        assert float(txclm.mlm_loss(nc.Tensor(np.zeros((0, 5))), plan).data) == 0.0

    def test_shape_mismatch_rejected(self):
        plan = txclm.MaskPlan(np.array([0, 1]), np.array([1, 2]),
                              np.zeros(2, np.int64))
        with pytest.raises(ValueError):
            txclm.mlm_loss(nc.Tensor(np.zeros((3, 5))), plan)


class TestContrastiveLoss:

    def _plan(self, positions, originals=None):
        positions = np.asarray(positions, dtype=np.int64)
        originals = (np.zeros(len(positions), np.int64)
                     if originals is None else np.asarray(originals))
        return txclm.MaskPlan(positions, originals,
                              np.zeros(len(positions), np.int64))

    def test_aligned_positive_frozen_value(self):
        anchor = np.eye(3)
        enh = nc.Tensor(np.eye(3))
        loss = txclm.token_contrastive_loss(enh, anchor, self._plan([0]), 1.0)
        expected = -math.log(math.e / (math.e + 2.0))
        np.testing.assert_allclose(loss.data, expected, atol=1e-9)

    def test_equidistant_gives_log_n(self):
        anchor = np.eye(3)
        enh = np.eye(3)
        enh[0] = 1.0 / math.sqrt(3.0)
        loss = txclm.token_contrastive_loss(nc.Tensor(enh), anchor,
                                            self._plan([0]), 0.37)
        np.testing.assert_allclose(loss.data, math.log(3), atol=1e-12)

    def test_empty_mask_returns_zero(self):
        loss = txclm.token_contrastive_loss(
            nc.Tensor(np.eye(3)), np.eye(3), self._plan([]), 0.1)
        assert float(loss.data) == 0.0

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            txclm.token_contrastive_loss(nc.Tensor(np.eye(3)), np.eye(3),
                                         self._plan([0]), 0.0)

    def test_pad_columns_excluded_from_denominator(self):
        anchor = np.eye(4)
        valid = np.array([True, True, True, False])
        loss = txclm.token_contrastive_loss(
            nc.Tensor(np.eye(4)), anchor, self._plan([0]), 1.0, valid)
        expected = -math.log(math.e / (math.e + 2.0))
        np.testing.assert_allclose(loss.data, expected, atol=1e-9)

    def test_bounded_for_unit_norm_representations(self):
        # cross-entropy over cosine logits stays under ln n + 1/tau
        for seed in range(8):
            rng = np.random.default_rng(seed)
            n, d, tau = 10, 8, 0.1
            enh = rng.normal(size=(n, d))
            enh /= np.linalg.norm(enh, axis=1, keepdims=True)
            anc = rng.normal(size=(n, d))
            anc /= np.linalg.norm(anc, axis=1, keepdims=True)
            loss = txclm.token_contrastive_loss(
                nc.Tensor(enh), anc, self._plan(np.arange(n)), tau)
            assert float(loss.data) <= math.log(n) + 1.0 / tau


class TestFullGradient:
    """Finite differences across every trainable tensor of a tiny model."""

    def test_combined_loss_gradcheck(self):
        params = _tiny_params(seed=13)
        rng = np.random.default_rng(5)
        ids_clean = np.array([[1, 5, 6, 7, 8, 2, 9, 10],
                              [1, 6, 9, 11, 2, 0, 0, 0]])
        mask_rng = np.random.default_rng(21)
        masked_rows, plans = [], []
        for row in ids_clean:
            masked, plan = txclm.apply_mask(row, 0.4, mask_rng, TINY.vocab_size)
            masked_rows.append(masked)
            plans.append(plan)
        ids_masked = np.stack(masked_rows)
        anchor = {k: nc.Tensor(rng.normal(size=t.data.shape) * 0.3)
                  for k, t in params.items()}
        anchor_reps = txclm.encode(ids_clean, anchor, TINY).data

        rows = np.concatenate([p.positions for p in plans]).astype(np.int64)
        seq_index = np.concatenate(
            [np.full(len(p), i, np.int64) for i, p in enumerate(plans)])
        merged = txclm.MaskPlan(
            rows, np.concatenate([p.originals for p in plans]),
            np.concatenate([p.actions for p in plans]))

        def loss_fn():
            h = txclm.encode(ids_masked, params, TINY)
            loss = txclm.mlm_loss(
                txclm.mlm_logits(h, params, rows, seq_index), merged)
            for i, plan in enumerate(plans):
                if len(plan) == 0:
                    continue
                h_i = nc.reshape(nc.narrow(h, 0, i, 1),
                                 (h.shape[1], h.shape[2]))
                valid = ids_clean[i] != tc.PAD_ID
                term = txclm.token_contrastive_loss(
                    h_i, anchor_reps[i], plan, 0.5, valid)
                loss = nc.add(loss, nc.mul(term,
                                           nc.Tensor(len(plan) / len(merged))))
            return loss

        tensors = list(params.values())
        ana = analytic_grads(loss_fn, tensors)
        num = numeric_grads(loss_fn, tensors)
        for name, a, n in zip(params, ana, num):
            assert agrees(a, n), f"gradient mismatch for {name}"


@pytest.fixture(scope="module")
def trained_pair():
    """One contrastive and one plain-MLM training run on a shared corpus."""
    seqs, vocab = _synthetic_sequences()
    cfg = txclm.TxCLMConfig(vocab_size=len(vocab), d_lm=32, layers=1, heads=4,
                            max_seq_len=64, epochs=5, batch_size=16, lr=2e-3,
                            tau=0.1, seed=77)
    model_full, logs_full = txclm.pretrain(seqs[:170], cfg)
    cfg_mlm = txclm.TxCLMConfig(**{**cfg.__dict__, "contrastive_weight": 0.0})
    model_mlm, logs_mlm = txclm.pretrain(seqs[:170], cfg_mlm)
    held_out = seqs[170:]
    return (cfg, seqs, model_full, logs_full, model_mlm, logs_mlm, held_out)


class TestPretrain:

    def test_loss_improves_over_epochs(self, trained_pair):
        _, _, _, logs_full, _, logs_mlm, _ = trained_pair
        assert logs_full[-1].combined < logs_full[0].combined
        assert logs_mlm[-1].combined < logs_mlm[0].combined

    def test_anchor_frozen_through_training(self, trained_pair):
        cfg, seqs, *_ = trained_pair
        model = txclm.TxCLM(cfg, stream(cfg.seed, "txclm-init"))
        snapshot = {k: v.copy() for k, v in model.anchor.items()}
        txclm.pretrain(seqs[:40],
                       txclm.TxCLMConfig(**{**cfg.__dict__, "epochs": 2}),
                       model=model)
        for k in snapshot:
            np.testing.assert_array_equal(model.anchor[k], snapshot[k])
            assert np.abs(model.params[k].data - snapshot[k]).max() > 0

    def test_same_seed_identical_checkpoints(self, trained_pair):
        cfg, seqs, model_full, *_ = trained_pair
        rerun, _ = txclm.pretrain(seqs[:170], cfg)
        assert _params_sha(rerun.params) == _params_sha(model_full.params)

    def test_zero_weight_matches_mlm_only_bitwise(self, trained_pair):
        cfg, seqs, _, _, model_mlm, logs_mlm, _ = trained_pair
        cfg0 = txclm.TxCLMConfig(**{**cfg.__dict__, "contrastive_weight": 0.0})
        again, logs_again = txclm.pretrain(seqs[:170], cfg0)
        assert _params_sha(again.params) == _params_sha(model_mlm.params)
        assert [l.combined for l in logs_again] == [l.combined for l in logs_mlm]
        assert all(l.contrastive == 0.0 for l in logs_mlm)

    def test_contrastive_training_lowers_self_similarity(self, trained_pair):
        cfg, _, model_full, _, model_mlm, _, held_out = trained_pair
        usable = [s for s in held_out
                  if (~np.isin(np.asarray(s), txclm.SPECIAL_IDS)).sum() >= 2]
        sim_full = np.mean([txclm.self_similarity(s, model_full.params, cfg)
                            for s in usable])
        sim_mlm = np.mean([txclm.self_similarity(s, model_mlm.params, cfg)
                           for s in usable])
        assert sim_full < sim_mlm

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            txclm.pretrain([], TINY)


class TestAccountEmbedding:

    def test_shape_and_determinism(self, trained_pair):
        _, seqs, model_full, *_ = trained_pair
        s = seqs[0]
        emb1 = txclm.account_embedding(s, model_full)
        emb2 = txclm.account_embedding(s, model_full)
        assert emb1.shape == (len(s), model_full.config.d_lm)
        np.testing.assert_array_equal(emb1, emb2)

    def test_untrained_model_rejected(self):
        model = txclm.TxCLM(TINY)
        with pytest.raises(ValueError):
            txclm.account_embedding([1, 5, 2], model)

    def test_checkpoint_roundtrip(self, trained_pair, tmp_path):
        _, seqs, model_full, *_ = trained_pair
        path = str(tmp_path / "lm.ckpt")
        model_full.save(path)
        loaded = txclm.TxCLM.load(path)
        assert loaded.trained
        np.testing.assert_array_equal(
            txclm.account_embedding(seqs[0], loaded),
            txclm.account_embedding(seqs[0], model_full))


class TestSelfSimilarity:

    def test_identical_rows_give_one(self):
        reps = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
        np.testing.assert_allclose(txclm.mean_pairwise_cosine(reps), 1.0,
                                   atol=1e-12)

    def test_orthogonal_rows_give_zero(self):
        np.testing.assert_allclose(txclm.mean_pairwise_cosine(np.eye(3)), 0.0,
                                   atol=1e-12)

    def test_two_rows_at_half_cosine(self):
        reps = np.array([[1.0, 0.0], [0.5, math.sqrt(3) / 2.0]])
        np.testing.assert_allclose(txclm.mean_pairwise_cosine(reps), 0.5,
                                   atol=1e-12)

    def test_needs_two_content_tokens(self):
        params = _tiny_params()
        with pytest.raises(ValueError):
            txclm.self_similarity([1, 5, 2], params, TINY)

    def test_value_in_range_on_model_outputs(self):
        params = _tiny_params()
        val = txclm.self_similarity([1, 5, 6, 7, 2], params, TINY)
        assert -1.0 <= val <= 1.0


class TestTrainingLogFile:

    def test_csv_columns(self, trained_pair, tmp_path):
        _, _, _, logs_full, *_ = trained_pair
        path = str(tmp_path / "log.csv")
        txclm.write_training_log(path, logs_full)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        assert header == ["epoch", "mlm_loss", "contrastive_loss", "combined"]
