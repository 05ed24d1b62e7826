"""Masked language-value modelling: slot selection, corruption, and targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoEligibleTokens, ShapeMismatch
from .types import MASK_TEXT, Special, Token, Vocabularies, WindowSequence

# corruption codes recorded per masked slot
NONE, MASK, RANDOM, KEEP = 0, 1, 2, 3


@dataclass(frozen=True)
class MaskingRates:
    select: float = 0.15
    both: float = 0.5
    value_only: float = 0.25
    feature_only: float = 0.25
    corrupt_mask: float = 0.8
    corrupt_random: float = 0.1
    corrupt_keep: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.select <= 1.0:
            raise ShapeMismatch("selection rate must be in (0, 1]")
        if abs(self.both + self.value_only + self.feature_only - 1.0) > 1e-9:
            raise ShapeMismatch("both/value-only/feature-only rates must sum to 1")
        if abs(self.corrupt_mask + self.corrupt_random + self.corrupt_keep - 1.0) > 1e-9:
            raise ShapeMismatch("corruption rates must sum to 1")


@dataclass(frozen=True)
class MaskingPlan:
    """Per-token masking decisions plus the uncorrupted reconstruction targets."""

    selected: np.ndarray          # (L,) bool
    mask_feature: np.ndarray      # (L,) bool
    mask_value: np.ndarray        # (L,) bool
    feature_corruption: np.ndarray  # (L,) int8, codes above
    value_corruption: np.ndarray    # (L,) int8
    feature_target: np.ndarray    # (L,) int64, -1 where not a feature slot
    value_is_continuous: np.ndarray  # (L,) bool, continuity of the original value
    cat_target: np.ndarray        # (L,) int64, -1 where not a categorical slot
    cont_target: np.ndarray       # (L,) float32, 0 where not a continuous slot

    def __len__(self) -> int:
        return len(self.selected)

    @property
    def n_feature_slots(self) -> int:
        return int(self.mask_feature.sum())

    @property
    def n_cat_slots(self) -> int:
        return int((self.mask_value & ~self.value_is_continuous).sum())

    @property
    def n_cont_slots(self) -> int:
        return int((self.mask_value & self.value_is_continuous).sum())


def eligible_mask(seq: WindowSequence, vocab: Vocabularies) -> np.ndarray:
    """Tokens that can be masked: real quadruplets whose feature is in-vocabulary.

    CLS and PAD are never eligible; statics are quadruplets like any other.
    """
    return np.array(
        [not t.is_special and vocab.feature_index(t.feature_text) is not None for t in seq.tokens],
        dtype=bool,
    )


def plan_masking(seq: WindowSequence, vocab: Vocabularies, rng: np.random.Generator,
                 rates: MaskingRates = MaskingRates()) -> MaskingPlan:
    """Draw the masking decisions for one window.

    Each eligible token is selected independently; selected tokens mask both
    slots, the value only, or the feature only; each masked slot is then
    corrupted as mask/random/keep. Targets are recorded from the uncorrupted
    token, so they survive every corruption mode.
    """
    n = len(seq.tokens)
    eligible = eligible_mask(seq, vocab)
    n_eligible = int(eligible.sum())
    if n_eligible == 0:
        raise NoEligibleTokens(f"window {seq.stay_id}/{seq.window_index} has no maskable tokens")

    selected = np.zeros(n, dtype=bool)
    selected[eligible] = rng.random(n_eligible) < rates.select

    mask_feature = np.zeros(n, dtype=bool)
    mask_value = np.zeros(n, dtype=bool)
    sel_idx = np.flatnonzero(selected)
    u_mode = rng.random(len(sel_idx))
    both = u_mode < rates.both
    value_only = (~both) & (u_mode < rates.both + rates.value_only)
    feature_only = ~(both | value_only)
    mask_feature[sel_idx[both | feature_only]] = True
    mask_value[sel_idx[both | value_only]] = True

    feature_corruption = np.zeros(n, dtype=np.int8)
    value_corruption = np.zeros(n, dtype=np.int8)
    feature_corruption[mask_feature] = _draw_corruption(rng, int(mask_feature.sum()), rates)
    value_corruption[mask_value] = _draw_corruption(rng, int(mask_value.sum()), rates)

    feature_target = np.full(n, -1, dtype=np.int64)
    value_is_continuous = np.zeros(n, dtype=bool)
    cat_target = np.full(n, -1, dtype=np.int64)
    cont_target = np.zeros(n, dtype=np.float32)
    for i in np.flatnonzero(selected):
        tok = seq.tokens[i]
        if mask_feature[i]:
            feature_target[i] = vocab.feature_index(tok.feature_text)
        if mask_value[i]:
            if tok.is_continuous:
                value_is_continuous[i] = True
                cont_target[i] = float(tok.value)
            else:
                cat_target[i] = vocab.value_index(str(tok.value))

    return MaskingPlan(
        selected=selected,
        mask_feature=mask_feature,
        mask_value=mask_value,
        feature_corruption=feature_corruption,
        value_corruption=value_corruption,
        feature_target=feature_target,
        value_is_continuous=value_is_continuous,
        cat_target=cat_target,
        cont_target=cont_target,
    )


def _draw_corruption(rng: np.random.Generator, count: int, rates: MaskingRates) -> np.ndarray:
    u = rng.random(count)
    out = np.full(count, MASK, dtype=np.int8)
    out[u >= rates.corrupt_mask] = RANDOM
    out[u >= rates.corrupt_mask + rates.corrupt_random] = KEEP
    return out


def apply_masking(seq: WindowSequence, plan: MaskingPlan, vocab: Vocabularies,
                  rng: np.random.Generator) -> WindowSequence:
    """Corrupt a window according to a plan drawn for it.

    Random feature/categorical replacements draw uniformly from the
    non-reserved vocabulary entries; random continuous replacements are
    standard-normal draws (values are z-scored by this point). Relative time
    and duration are never altered.
    """
    if len(plan) != len(seq.tokens):
        raise ShapeMismatch(f"plan length {len(plan)} vs window length {len(seq.tokens)}")

    tokens = list(seq.tokens)
    for i in np.flatnonzero(plan.selected):
        tok = tokens[i]
        feature = tok.feature_text
        value = tok.value
        continuous = tok.is_continuous

        code = plan.feature_corruption[i]
        if code == MASK:
            feature = MASK_TEXT
        elif code == RANDOM:
            feature = _random_feature(vocab, rng)

        code = plan.value_corruption[i]
        if code == MASK:
            value, continuous = Special.MASK, False
        elif code == RANDOM:
            if tok.is_continuous:
                value, continuous = float(rng.standard_normal()), True
            else:
                value, continuous = _random_value(vocab, rng), False

        tokens[i] = Token(feature, value, tok.tau_minutes, tok.delta_minutes, continuous, tok.is_static)
    return seq.with_tokens(tokens)


def _random_feature(vocab: Vocabularies, rng: np.random.Generator) -> str:
    lo = vocab.n_reserved_features
    if vocab.feature_size <= lo:
        return MASK_TEXT
    return vocab.features[int(rng.integers(lo, vocab.feature_size))]


def _random_value(vocab: Vocabularies, rng: np.random.Generator):
    lo = vocab.n_reserved_values
    if vocab.value_size <= lo:
        return Special.MASK
    return vocab.categorical_values[int(rng.integers(lo, vocab.value_size))]
