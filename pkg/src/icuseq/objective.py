"""Multi-task pre-training loss and the fine-tuning losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NoMaskedSlots, ShapeMismatch, UnknownTask
from .masking import MaskingPlan

DEFAULT_ALPHA = 3.0
DEFAULT_BETA = 1.0


@dataclass
class LossBreakdown:
    l_f: float
    l_cat: float
    l_cont: float
    n_cat: int
    n_cont: int
    l_total: float
    alpha: float
    beta: float
    n_feature_slots: int = 0
    node: Optional[Tensor] = field(default=None, repr=False, compare=False)


def value_term_coefficients(n_cat: int, n_cont: int, alpha: float, beta: float) -> tuple[float, float]:
    """Weights multiplying the categorical and continuous value losses.

    Slot types with zero count are excluded from the shared denominator, so a
    batch whose masked values are all one type still gets a clean average.
    """
    denom = n_cat + n_cont
    if denom == 0:
        return 0.0, 0.0
    return beta * n_cat / denom, beta * alpha * n_cont / denom


def combine_losses(l_f: float, l_cat: float, n_cat: int, l_cont: float, n_cont: int,
                   alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> float:
    """Total loss from already-averaged components (plain-number form)."""
    c_cat, c_cont = value_term_coefficients(n_cat, n_cont, alpha, beta)
    return l_f + c_cat * l_cat + c_cont * l_cont


def mlvm_loss(outputs: tuple[Tensor, Tensor, Tensor], plans: Sequence[MaskingPlan],
              alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
              attention_mask: Optional[np.ndarray] = None,
              feature_loss_over_all_tokens: bool = False) -> LossBreakdown:
    """Reconstruction loss over every masked slot, keep-corrupted ones included.

    Feature and categorical slots use mean cross-entropy, continuous slots use
    mean absolute error, and the two value losses are blended by slot counts
    with the continuous side scaled by ``alpha``. The non-standard
    ``feature_loss_over_all_tokens`` flag renormalizes the feature term by the
    real-token count instead of the masked-slot count.
    """
    feature_logits, cat_logits, cont_pred = outputs
    b, length = feature_logits.shape[:2]
    if len(plans) != b:
        raise ShapeMismatch(f"{b} output rows but {len(plans)} plans")
    if any(len(p) != length for p in plans):
        raise ShapeMismatch("plan length disagrees with output length")

    mask_feature = np.stack([p.mask_feature for p in plans])
    mask_value = np.stack([p.mask_value for p in plans])
    value_cont = np.stack([p.value_is_continuous for p in plans])

    feat_slots = np.flatnonzero(mask_feature.reshape(-1))
    cat_slots = np.flatnonzero((mask_value & ~value_cont).reshape(-1))
    cont_slots = np.flatnonzero((mask_value & value_cont).reshape(-1))
    n_feat, n_cat, n_cont = len(feat_slots), len(cat_slots), len(cont_slots)
    if n_feat == 0 and n_cat == 0 and n_cont == 0:
        raise NoMaskedSlots("batch contains no masked slots")

    dtype = feature_logits.dtype
    zero = ad.constant(np.zeros((), dtype=dtype))

    if n_feat:
        targets = np.stack([p.feature_target for p in plans]).reshape(-1)[feat_slots]
        rows = ad.take_rows(ad.reshape(feature_logits, (b * length, feature_logits.shape[2])), feat_slots)
        l_f_node = ad.cross_entropy_mean(rows, targets)
        if feature_loss_over_all_tokens:
            k_total = int(attention_mask.sum()) if attention_mask is not None else b * length
            l_f_node = ad.scale(l_f_node, n_feat / k_total)
    else:
        l_f_node = zero

    if n_cat:
        targets = np.stack([p.cat_target for p in plans]).reshape(-1)[cat_slots]
        rows = ad.take_rows(ad.reshape(cat_logits, (b * length, cat_logits.shape[2])), cat_slots)
        l_cat_node = ad.cross_entropy_mean(rows, targets)
    else:
        l_cat_node = zero

    if n_cont:
        targets = np.stack([p.cont_target for p in plans]).reshape(-1)[cont_slots]
        preds = ad.take_rows(ad.reshape(cont_pred, (b * length, 1)), cont_slots)
        l_cont_node = ad.mae_mean(ad.squeeze_last(preds), targets)
    else:
        l_cont_node = zero

    c_cat, c_cont = value_term_coefficients(n_cat, n_cont, alpha, beta)
    total = ad.add(l_f_node, ad.add(ad.scale(l_cat_node, c_cat), ad.scale(l_cont_node, c_cont)))

    return LossBreakdown(
        l_f=l_f_node.item(), l_cat=l_cat_node.item(), l_cont=l_cont_node.item(),
        n_cat=n_cat, n_cont=n_cont, l_total=total.item(),
        alpha=alpha, beta=beta, n_feature_slots=n_feat, node=total,
    )


def finetune_loss(task_kind: str, predictions: Tensor, labels: np.ndarray,
                  class_weight: float | np.ndarray = 1.0) -> Tensor:
    """Task loss: weighted BCE for (multi-)label tasks, MAE for regression."""
    if np.any(np.asarray(class_weight) <= 0):
        raise ShapeMismatch("class weights must be positive")
    labels = np.asarray(labels)
    if task_kind == "binary":
        if predictions.data.ndim != 1:
            raise ShapeMismatch(f"binary task expects one logit per sample, got {predictions.shape}")
        return ad.bce_logits_mean(predictions, labels, class_weight)
    if task_kind == "multilabel":
        if predictions.data.ndim != 2:
            raise ShapeMismatch(f"multi-label task expects (batch, labels) logits, got {predictions.shape}")
        return ad.bce_logits_mean(predictions, labels, class_weight)
    if task_kind == "regression":
        return ad.mae_mean(predictions, labels.astype(predictions.dtype))
    raise UnknownTask(f"unknown task kind {task_kind!r}")
