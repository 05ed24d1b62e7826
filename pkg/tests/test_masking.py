import numpy as np
import pytest

from icuseq.errors import NoEligibleTokens
from icuseq.masking import KEEP, MASK, RANDOM, MaskingRates, apply_masking, eligible_mask, plan_masking
from icuseq.types import MASK_TEXT, FeatureStats, Special, Vocabularies, pad_token

from conftest import dyn_token, make_window, padded

VOCAB = Vocabularies(
    features=("[CLS]", "[PAD]", "[MASK]", "lab: a", "lab: b", "lab: c"),
    categorical_values=("[MASK]", "[UNK]", "high", "low", "normal"),
    per_feature_stats={"lab: a": FeatureStats(0.0, 1.0, 5)},
)


def window(n_cont=4, n_cat=4, pad_to=None):
    tokens = [dyn_token("lab: a", float(i), i) for i in range(n_cont)]
    tokens += [dyn_token("lab: b", ("high", "low", "normal")[i % 3], i) for i in range(n_cat)]
    seq = make_window(tokens)
    if pad_to:
        seq = seq.with_tokens(list(seq.tokens) + [pad_token()] * (pad_to - len(seq.tokens)))
    return seq


class TestPlanMasking:
    def test_cls_and_pad_never_selected(self):
        seq = window(pad_to=16)
        rng = np.random.default_rng(0)
        for _ in range(50):
            plan = plan_masking(seq, VOCAB, rng, MaskingRates(select=1.0))
            assert not plan.selected[0]
            assert not plan.selected[9:].any()

    def test_no_eligible_tokens(self):
        seq = make_window([]).with_tokens([make_window([]).tokens[0], pad_token()])
        with pytest.raises(NoEligibleTokens):
            plan_masking(seq, VOCAB, np.random.default_rng(0))

    def test_out_of_vocab_features_ineligible(self):
        seq = make_window([dyn_token("lab: unseen", 1.0, 0), dyn_token("lab: a", 1.0, 1)])
        mask = eligible_mask(seq, VOCAB)
        assert mask.tolist() == [False, False, True]

    def test_selected_implies_some_slot(self):
        seq = window()
        plan = plan_masking(seq, VOCAB, np.random.default_rng(1), MaskingRates(select=1.0))
        assert np.all(plan.selected == (plan.mask_feature | plan.mask_value))
        assert not (plan.mask_feature[~plan.selected]).any()

    def test_targets_recorded_from_original(self):
        seq = window()
        for seed in range(20):
            plan = plan_masking(seq, VOCAB, np.random.default_rng(seed), MaskingRates(select=0.9))
            for i in np.flatnonzero(plan.mask_feature):
                assert plan.feature_target[i] == VOCAB.feature_index(seq.tokens[i].feature_text)
            for i in np.flatnonzero(plan.mask_value):
                tok = seq.tokens[i]
                if tok.is_continuous:
                    assert plan.value_is_continuous[i]
                    assert plan.cont_target[i] == pytest.approx(float(tok.value))
                else:
                    assert plan.cat_target[i] == VOCAB.value_index(str(tok.value))

    def test_deterministic_given_seed(self):
        seq = window()
        a = plan_masking(seq, VOCAB, np.random.default_rng(5))
        b = plan_masking(seq, VOCAB, np.random.default_rng(5))
        assert np.array_equal(a.selected, b.selected)
        assert np.array_equal(a.feature_corruption, b.feature_corruption)

    def test_rates_within_three_sigma(self):
        # moderate-size unit check; the acceptance suite runs the 100k version
        seqs = [window(n_cont=20, n_cat=20) for _ in range(200)]
        rng = np.random.default_rng(0)
        n_eligible = n_selected = n_both = 0
        for seq in seqs:
            plan = plan_masking(seq, VOCAB, rng)
            n_eligible += int(eligible_mask(seq, VOCAB).sum())
            n_selected += int(plan.selected.sum())
            n_both += int((plan.mask_feature & plan.mask_value).sum())
        sigma = np.sqrt(n_eligible * 0.15 * 0.85)
        assert abs(n_selected - 0.15 * n_eligible) <= 3 * sigma
        sigma_both = np.sqrt(n_selected * 0.25)
        assert abs(n_both - 0.5 * n_selected) <= 3 * sigma_both


class TestApplyMasking:
    def all_keep_plan(self, seq):
        plan = plan_masking(seq, VOCAB, np.random.default_rng(0), MaskingRates(select=1.0))
        plan.feature_corruption[plan.mask_feature] = KEEP
        plan.value_corruption[plan.mask_value] = KEEP
        return plan

    def test_all_keep_is_identity(self):
        seq = window()
        out = apply_masking(seq, self.all_keep_plan(seq), VOCAB, np.random.default_rng(1))
        assert out.tokens == seq.tokens

    def test_mask_token_feature_slot(self):
        seq = window()
        plan = plan_masking(seq, VOCAB, np.random.default_rng(0), MaskingRates(select=1.0))
        plan.feature_corruption[plan.mask_feature] = MASK
        plan.value_corruption[plan.mask_value] = KEEP
        out = apply_masking(seq, plan, VOCAB, np.random.default_rng(1))
        for i in np.flatnonzero(plan.mask_feature):
            assert out.tokens[i].feature_text == MASK_TEXT
            assert out.tokens[i].value == seq.tokens[i].value

    def test_mask_token_value_slot(self):
        seq = window()
        plan = plan_masking(seq, VOCAB, np.random.default_rng(2), MaskingRates(select=1.0))
        plan.value_corruption[plan.mask_value] = MASK
        plan.feature_corruption[plan.mask_feature] = KEEP
        out = apply_masking(seq, plan, VOCAB, np.random.default_rng(1))
        for i in np.flatnonzero(plan.mask_value):
            assert out.tokens[i].value is Special.MASK
            assert not out.tokens[i].is_continuous

    def test_random_replacements_from_vocab(self):
        seq = window()
        plan = plan_masking(seq, VOCAB, np.random.default_rng(3), MaskingRates(select=1.0))
        plan.feature_corruption[plan.mask_feature] = RANDOM
        plan.value_corruption[plan.mask_value] = RANDOM
        out = apply_masking(seq, plan, VOCAB, np.random.default_rng(4))
        for i in np.flatnonzero(plan.mask_feature):
            assert out.tokens[i].feature_text in VOCAB.features[3:]
        for i in np.flatnonzero(plan.mask_value):
            tok, orig = out.tokens[i], seq.tokens[i]
            if orig.is_continuous:
                assert tok.is_continuous and isinstance(tok.value, float)
            else:
                assert tok.value in VOCAB.categorical_values[2:]

    def test_tau_delta_never_altered(self):
        seq = window()
        for seed in range(10):
            rng = np.random.default_rng(seed)
            plan = plan_masking(seq, VOCAB, rng, MaskingRates(select=0.8))
            out = apply_masking(seq, plan, VOCAB, rng)
            for before, after in zip(seq.tokens, out.tokens):
                assert before.tau_minutes == after.tau_minutes
                assert before.delta_minutes == after.delta_minutes

    def test_unselected_tokens_bitwise_unchanged(self):
        seq = window()
        rng = np.random.default_rng(9)
        plan = plan_masking(seq, VOCAB, rng)
        out = apply_masking(seq, plan, VOCAB, rng)
        for i, (before, after) in enumerate(zip(seq.tokens, out.tokens)):
            if not plan.selected[i]:
                assert before == after

    def test_seeded_determinism(self):
        seq = window()
        plan = plan_masking(seq, VOCAB, np.random.default_rng(1), MaskingRates(select=1.0))
        a = apply_masking(seq, plan, VOCAB, np.random.default_rng(42))
        b = apply_masking(seq, plan, VOCAB, np.random.default_rng(42))
        assert a.tokens == b.tokens
