"""Pre-training and fine-tuning loops, optimizer, schedules, and evaluation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Tensor
from .embedder import EmbedderParams, EncodedBatch, compose_batch, encode_batch, init_embedder
from .errors import ConfigMismatch, DivergedLoss, MissingLabels, ShapeMismatch, UnknownTask
from .ingest import Corpus, Split, Stay
from .masking import MaskingPlan, MaskingRates, apply_masking, eligible_mask, plan_masking
from .metrics import MetricReport, auprc, auroc, mae
from .objective import DEFAULT_ALPHA, DEFAULT_BETA, LossBreakdown, combine_losses, finetune_loss, mlvm_loss
from .textvec import EmbeddingProvider
from .types import Token, Vocabularies, WindowSequence, cls_token
from .windows import normalize_values, segment_windows, truncate_and_pad


@dataclass(frozen=True)
class ModelConfig:
    encoder: enc.EncoderConfig
    d_pre: int
    window_minutes: int
    feature_vocab: int
    value_vocab: int
    head_mode: str = "pretrain"
    task_dim: int = 1
    task_dropout: float = 0.5

    def to_dict(self) -> dict:
        return {
            "layers": self.encoder.layers,
            "hidden": self.encoder.hidden,
            "heads": self.encoder.heads,
            "ffn_dim": self.encoder.ffn_dim,
            "max_seq_len": self.encoder.max_seq_len,
            "dropout": self.encoder.dropout,
            "d_pre": self.d_pre,
            "window_minutes": self.window_minutes,
            "feature_vocab": self.feature_vocab,
            "value_vocab": self.value_vocab,
            "head_mode": self.head_mode,
            "task_dim": self.task_dim,
            "task_dropout": self.task_dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(
                encoder=enc.EncoderConfig(
                    layers=d["layers"], hidden=d["hidden"], heads=d["heads"],
                    ffn_dim=d["ffn_dim"], max_seq_len=d["max_seq_len"], dropout=d["dropout"],
                ),
                d_pre=d["d_pre"], window_minutes=d["window_minutes"],
                feature_vocab=d["feature_vocab"], value_vocab=d["value_vocab"],
                head_mode=d.get("head_mode", "pretrain"), task_dim=d.get("task_dim", 1),
                task_dropout=d.get("task_dropout", 0.5),
            )
        except KeyError as exc:
            raise ConfigMismatch(f"checkpoint config missing {exc}") from exc


class Model:
    """Embedding composition, encoder stack, and the active head set."""

    def __init__(self, config: ModelConfig, embedder: EmbedderParams,
                 encoder_params: enc.EncoderParams, heads: enc.HeadSet):
        self.config = config
        self.embedder = embedder
        self.encoder = encoder_params
        self.heads = heads

    @classmethod
    def build(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "Model":
        rng = np.random.default_rng([seed, 0])
        embedder = init_embedder(rng, config.d_pre, config.encoder.hidden,
                                 config.window_minutes, config.encoder.dropout, dtype)
        encoder_params = enc.init_encoder(rng, config.encoder, dtype)
        if config.head_mode == "pretrain":
            heads = enc.init_pretrain_heads(rng, config.encoder.hidden, config.feature_vocab,
                                            config.value_vocab, dtype)
        else:
            heads = enc.init_task_head(rng, config.encoder.hidden, config.task_dim,
                                       config.task_dropout, dtype)
        return cls(config, embedder, encoder_params, heads)

    def parameters(self) -> dict[str, Tensor]:
        return ad.collect_parameters(
            self.embedder.named_parameters()
            + self.encoder.named_parameters()
            + self.heads.named_parameters()
        )

    def trainable_parameters(self, unfrozen_layers: Optional[int] = None,
                             unfreeze_embedder: bool = False) -> dict[str, Tensor]:
        """Heads always train; optionally only the top encoder layers and the embedder."""
        if unfrozen_layers is None:
            return self.parameters()
        keep = {name for name, _ in self.heads.named_parameters()}
        n_layers = len(self.encoder.layers)
        for i in range(max(n_layers - unfrozen_layers, 0), n_layers):
            keep.update(name for name, _ in self.encoder.layers[i].named_parameters(f"encoder.layer{i}"))
        if unfreeze_embedder:
            keep.update(name for name, _ in self.embedder.named_parameters())
        return {name: t for name, t in self.parameters().items() if name in keep}

    def clone(self) -> "Model":
        clone = copy.copy(self)
        params = self.parameters()
        fresh = {name: ad.parameter(t.data.copy(), name) for name, t in params.items()}
        clone.embedder = _rebind(self.embedder, fresh)
        clone.encoder = enc.EncoderParams([
            _rebind(layer, fresh) for layer in self.encoder.layers
        ])
        clone.heads = _rebind(self.heads, fresh)
        return clone

    def with_task_head(self, task_dim: int, task_dropout: float, seed: int) -> "Model":
        """Drop the reconstruction heads and attach a fresh task head."""
        rng = np.random.default_rng([seed, 81])
        dtype = self.embedder.w_f.data.dtype
        heads = enc.init_task_head(rng, self.config.encoder.hidden, task_dim, task_dropout, dtype)
        config = replace(self.config, head_mode="task", task_dim=task_dim, task_dropout=task_dropout)
        model = Model(config, self.embedder, self.encoder, heads)
        return model.clone()

    # forward paths ---------------------------------------------------------

    def hidden_states(self, batch: EncodedBatch, mode: str = "eval",
                      rng: Optional[np.random.Generator] = None) -> Tensor:
        embedded = compose_batch(batch, self.embedder, mode, rng)
        return enc.forward(embedded, batch.attention_mask, self.config.encoder,
                           self.encoder, mode, rng)

    def pretrain_outputs(self, batch: EncodedBatch, mode: str = "eval",
                         rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor, Tensor]:
        return enc.mlvm_outputs(self.hidden_states(batch, mode, rng), self.heads)

    def task_scores(self, window_batches: Sequence[EncodedBatch], mode: str = "eval",
                    rng: Optional[np.random.Generator] = None) -> Tensor:
        """Task logits from the CLS outputs of one or more windows per sample."""
        cls_sum = None
        for batch in window_batches:
            cls_vec = enc.cls_output(self.hidden_states(batch, mode, rng))
            cls_sum = cls_vec if cls_sum is None else ad.add(cls_sum, cls_vec)
        cls_avg = ad.scale(cls_sum, 1.0 / len(window_batches))
        return enc.task_output(cls_avg, self.heads, mode, rng)

    # persistence -----------------------------------------------------------

    def save(self, path: str) -> None:
        enc.save_checkpoint(path, self.config.to_dict(), self.parameters())

    @classmethod
    def load(cls, path: str, expect: Optional[dict] = None) -> "Model":
        config_dict, arrays = enc.load_checkpoint(path, expect)
        config = ModelConfig.from_dict(config_dict)
        model = cls.build(config, seed=0)
        params = model.parameters()
        if set(params) != set(arrays):
            missing = set(params).symmetric_difference(arrays)
            raise ConfigMismatch(f"checkpoint parameters do not match the config: {sorted(missing)[:4]}")
        for name, tensor in params.items():
            if tensor.data.shape != arrays[name].shape:
                raise ConfigMismatch(f"{name} has shape {arrays[name].shape}, expected {tensor.data.shape}")
            tensor.data = arrays[name]
        return model


def _rebind(obj, fresh: dict[str, Tensor]):
    """Copy a params dataclass, swapping each Tensor field for its fresh clone."""
    out = copy.copy(obj)
    for attr in vars(obj) if hasattr(obj, "__dict__") else ():
        value = getattr(obj, attr)
        if isinstance(value, Tensor) and value.name in fresh:
            setattr(out, attr, fresh[value.name])
    return out


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - (lr * update).astype(p.data.dtype)


def linear_lr(base_lr: float, epoch: int, total_epochs: int, warmup_epochs: int) -> float:
    """Linear warmup to ``base_lr`` then linear decay; epoch is 1-based."""
    if warmup_epochs > 0 and epoch <= warmup_epochs:
        return base_lr * epoch / warmup_epochs
    if total_epochs <= warmup_epochs:
        return base_lr
    return base_lr * (total_epochs - epoch + 1) / (total_epochs - warmup_epochs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-5
    weight_decay: float = 0.0
    warmup_epochs: Optional[int] = None  # None: 40% of total epochs
    patience: Optional[int] = None
    seed: int = 0
    unfrozen_layers: Optional[int] = None  # None: everything trains
    unfreeze_embedder: bool = False
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ShapeMismatch("epochs and batch size must be positive")
        if self.lr <= 0:
            raise ShapeMismatch("learning rate must be positive")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return round(0.4 * self.epochs)


# ---------------------------------------------------------------------------
# window preparation


def prepare_windows(corpus: Corpus, split: Split, vocab: Vocabularies,
                    window_minutes: int, max_seq_len: int) -> list[WindowSequence]:
    """Segment, truncate/pad, and normalize every window of a split.

    Windows without any maskable token are dropped; they carry no training
    signal and cannot be planned.
    """
    out = []
    for stay in corpus.stays_in(split):
        for seq in segment_windows(stay, window_minutes):
            seq = normalize_values(truncate_and_pad(seq, max_seq_len), vocab)
            if eligible_mask(seq, vocab).any():
                out.append(seq)
    return out


@dataclass
class LossRow:
    epoch: int
    split: str
    l_f: float
    l_cat: float
    l_cont: float
    l_total: float
    lr: float

    def csv(self) -> str:
        return (f"{self.epoch},{self.split},{self.l_f:.6f},{self.l_cat:.6f},"
                f"{self.l_cont:.6f},{self.l_total:.6f},{self.lr:.8f}")


class _LossAggregator:
    """Slot-weighted aggregation of per-batch breakdowns into one epoch row."""

    def __init__(self, alpha: float, beta: float):
        self.alpha, self.beta = alpha, beta
        self.f_sum = self.cat_sum = self.cont_sum = 0.0
        self.n_f = self.n_cat = self.n_cont = 0

    def add(self, b: LossBreakdown) -> None:
        self.f_sum += b.l_f * b.n_feature_slots
        self.cat_sum += b.l_cat * b.n_cat
        self.cont_sum += b.l_cont * b.n_cont
        self.n_f += b.n_feature_slots
        self.n_cat += b.n_cat
        self.n_cont += b.n_cont

    def totals(self) -> tuple[float, float, float, float]:
        l_f = self.f_sum / self.n_f if self.n_f else 0.0
        l_cat = self.cat_sum / self.n_cat if self.n_cat else 0.0
        l_cont = self.cont_sum / self.n_cont if self.n_cont else 0.0
        total = combine_losses(l_f, l_cat, self.n_cat, l_cont, self.n_cont, self.alpha, self.beta)
        return l_f, l_cat, l_cont, total


@dataclass
class PretrainResult:
    model: Model
    rows: list[LossRow]
    best_epoch: int
    best_val_total: float

    def val_totals(self) -> list[float]:
        return [r.l_total for r in self.rows if r.split == "val"]


def pretrain(corpus: Corpus, vocab: Vocabularies, provider: EmbeddingProvider,
             model_config: ModelConfig, train_config: TrainConfig,
             rates: MaskingRates = MaskingRates(),
             on_row: Optional[Callable[[LossRow], None]] = None) -> PretrainResult:
    """Masked pre-training with AdamW, a linear schedule, and best-val retention."""
    cfg = train_config
    train_windows = prepare_windows(corpus, Split.TRAIN, vocab,
                                    model_config.window_minutes, model_config.encoder.max_seq_len)
    val_windows = prepare_windows(corpus, Split.VAL, vocab,
                                  model_config.window_minutes, model_config.encoder.max_seq_len)
    if not train_windows:
        raise MissingLabels("no trainable windows in the train split")

    model = Model.build(model_config, cfg.seed)
    optimizer = AdamW(model.parameters(), weight_decay=cfg.weight_decay)

    # validation masking is frozen once so epochs stay comparable
    val_plans = [
        plan_masking(w, vocab, np.random.default_rng([cfg.seed, 40, i]), rates)
        for i, w in enumerate(val_windows)
    ]

    rows: list[LossRow] = []
    best_val = np.inf
    best_epoch = 0
    best_state: dict[str, np.ndarray] = {}
    epochs_since_best = 0
    diverged_above: Optional[float] = None

    for epoch in range(1, cfg.epochs + 1):
        lr = linear_lr(cfg.lr, epoch, cfg.epochs, cfg.resolved_warmup)
        order = np.random.default_rng([cfg.seed, 50, epoch]).permutation(len(train_windows))
        train_agg = _LossAggregator(cfg.alpha, cfg.beta)

        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            windows, plans = [], []
            for i in idx:
                rng = np.random.default_rng([cfg.seed, 60, epoch, int(i)])
                plan = plan_masking(train_windows[i], vocab, rng, rates)
                windows.append(apply_masking(train_windows[i], plan, vocab, rng))
                plans.append(plan)
            batch = encode_batch(windows, provider, plans)
            rng = np.random.default_rng([cfg.seed, 70, epoch, start])
            outputs = model.pretrain_outputs(batch, mode="train", rng=rng)
            breakdown = mlvm_loss(outputs, plans, cfg.alpha, cfg.beta)
            if not np.isfinite(breakdown.l_total):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            # layernorm keeps float32 activations finite under almost any step
            # size, so runaway growth needs its own tripwire
            if diverged_above is None:
                diverged_above = 1e6 * (breakdown.l_total + 1.0)
            elif breakdown.l_total > diverged_above:
                raise DivergedLoss(
                    f"loss {breakdown.l_total:.3e} at epoch {epoch} exceeds "
                    f"{diverged_above:.3e}")
            optimizer.zero_grad()
            ad.backward(breakdown.node)
            optimizer.step(lr)
            train_agg.add(breakdown)

        row = LossRow(epoch, "train", *train_agg.totals(), lr)
        rows.append(row)
        if on_row:
            on_row(row)

        val_total = np.nan
        if val_windows:
            val_agg = _LossAggregator(cfg.alpha, cfg.beta)
            for start in range(0, len(val_windows), cfg.batch_size):
                chunk = slice(start, start + cfg.batch_size)
                masked = [apply_masking(w, p, vocab, np.random.default_rng([cfg.seed, 41, start, j]))
                          for j, (w, p) in enumerate(zip(val_windows[chunk], val_plans[chunk]))]
                batch = encode_batch(masked, provider, val_plans[chunk])
                outputs = model.pretrain_outputs(batch, mode="eval")
                val_agg.add(mlvm_loss(outputs, val_plans[chunk], cfg.alpha, cfg.beta))
            val_row = LossRow(epoch, "val", *val_agg.totals(), lr)
            rows.append(val_row)
            if on_row:
                on_row(val_row)
            val_total = val_row.l_total
            if not np.isfinite(val_total):
                raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")

        if val_windows and val_total < best_val:
            best_val, best_epoch, epochs_since_best = val_total, epoch, 0
            best_state = {k: t.data.copy() for k, t in model.parameters().items()}
        else:
            epochs_since_best += 1
            if cfg.patience is not None and epochs_since_best > cfg.patience:
                break

    if best_state:
        for name, tensor in model.parameters().items():
            tensor.data = best_state[name]
    return PretrainResult(model, rows, best_epoch, float(best_val))


def feature_top1_accuracy(model: Model, windows: Sequence[WindowSequence],
                          plans: Sequence[MaskingPlan], vocab: Vocabularies,
                          provider: EmbeddingProvider, batch_size: int = 64) -> tuple[float, float]:
    """Top-1 masked-feature reconstruction accuracy and the majority baseline."""
    hits = 0
    targets_all: list[np.ndarray] = []
    for start in range(0, len(windows), batch_size):
        chunk = slice(start, start + batch_size)
        masked = [apply_masking(w, p, vocab, np.random.default_rng([start, j]))
                  for j, (w, p) in enumerate(zip(windows[chunk], plans[chunk]))]
        batch = encode_batch(masked, provider, plans[chunk])
        feature_logits, _, _ = model.pretrain_outputs(batch, mode="eval")
        mask = np.stack([p.mask_feature for p in plans[chunk]])
        targets = np.stack([p.feature_target for p in plans[chunk]])[mask]
        preds = feature_logits.data.argmax(axis=2)[mask]
        hits += int((preds == targets).sum())
        targets_all.append(targets)
    targets = np.concatenate(targets_all)
    if targets.size == 0:
        raise MissingLabels("no masked feature slots to evaluate")
    majority = np.bincount(targets).max() / targets.size
    return hits / targets.size, float(majority)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class Task:
    """A fine-tuning target: its kind, label source, and window policy."""

    kind: str  # "binary" | "multilabel" | "regression"
    label_of: Callable[[Stay], object]
    n_windows: int = 1
    out_dim: int = 1
    class_weight: str | float = "auto"

    def __post_init__(self):
        if self.kind not in ("binary", "multilabel", "regression"):
            raise UnknownTask(f"unknown task kind {self.kind!r}")


@dataclass
class Sample:
    windows: list[WindowSequence]
    label: object


def build_samples(corpus: Corpus, split: Split, task: Task, vocab: Vocabularies,
                  window_minutes: int, max_seq_len: int) -> list[Sample]:
    samples = []
    for stay in corpus.stays_in(split):
        label = task.label_of(stay)
        if label is None:
            raise MissingLabels(f"stay {stay.stay_id!r} has no label")
        windows = segment_windows(stay, window_minutes)[: task.n_windows]
        windows = [normalize_values(truncate_and_pad(w, max_seq_len), vocab) for w in windows]
        samples.append(Sample(windows, label))
    return samples


def _sample_batches(samples: Sequence[Sample], idx: np.ndarray, n_windows: int,
                    provider: EmbeddingProvider) -> tuple[list[EncodedBatch], np.ndarray]:
    """One EncodedBatch per window slot; short stays repeat their last window."""
    slots = []
    for w in range(n_windows):
        windows = []
        for i in idx:
            sample_windows = samples[i].windows
            windows.append(sample_windows[min(w, len(sample_windows) - 1)])
        slots.append(encode_batch(windows, provider))
    labels = np.asarray([samples[i].label for i in idx], dtype=np.float32)
    return slots, labels


def _class_weight(task: Task, labels: np.ndarray):
    if task.class_weight != "auto":
        return float(task.class_weight)
    if task.kind == "regression":
        return 1.0
    pos = np.maximum(labels.sum(axis=0), 1.0)
    neg = np.maximum(labels.shape[0] - pos, 1.0)
    weight = neg / pos
    return float(weight) if np.ndim(weight) == 0 else weight


def predict_scores(model: Model, samples: Sequence[Sample], provider: EmbeddingProvider,
                   task_kind: str, batch_size: int = 64) -> np.ndarray:
    """Eval-mode task scores: probabilities for classification, raw values for regression."""
    outputs = []
    n_windows = max((len(s.windows) for s in samples), default=1)
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        slots, _ = _sample_batches(samples, idx, n_windows, provider)
        logits = model.task_scores(slots, mode="eval")
        outputs.append(logits.data)
    raw = np.concatenate(outputs)
    return raw if task_kind == "regression" else expit(raw)


@dataclass
class FinetuneResult:
    report: MetricReport
    best_model: Model
    rows: list[LossRow]


def finetune(pretrained: Model, task: Task, corpus: Corpus, vocab: Vocabularies,
             provider: EmbeddingProvider, train_config: TrainConfig, folds: int = 5,
             on_row: Optional[Callable[[LossRow], None]] = None) -> FinetuneResult:
    """Cross-validated fine-tuning: resample train+val per fold, test split fixed."""
    cfg = train_config
    window_minutes = pretrained.config.window_minutes
    max_seq_len = pretrained.config.encoder.max_seq_len

    pool_stays = corpus.stays_in(Split.TRAIN) + corpus.stays_in(Split.VAL)
    pool_patients = sorted({s.patient_id for s in pool_stays})
    if len(pool_patients) < folds:
        raise MissingLabels(f"{len(pool_patients)} patients cannot form {folds} folds")
    test_samples = build_samples(corpus, Split.TEST, task, vocab, window_minutes, max_seq_len)
    if not test_samples:
        raise MissingLabels("no test-split samples to evaluate")

    order = np.random.default_rng([cfg.seed, 80]).permutation(len(pool_patients))
    chunks = np.array_split(order, folds)

    metric_names = ("auroc", "auprc") if task.kind != "regression" else ("mae",)
    per_fold: list[dict[str, float]] = []
    rows: list[LossRow] = []
    best_model: Optional[Model] = None
    best_val = np.inf

    stays_by_patient: dict[str, list[Stay]] = {}
    for stay in pool_stays:
        stays_by_patient.setdefault(stay.patient_id, []).append(stay)

    for fold in range(folds):
        val_patients = {pool_patients[i] for i in chunks[fold]}
        train_stays = [s for pid in pool_patients if pid not in val_patients for s in stays_by_patient[pid]]
        val_stays = [s for pid in sorted(val_patients) for s in stays_by_patient[pid]]
        fold_corpus = Corpus(tuple(train_stays + val_stays),
                             {**{s.patient_id: Split.TRAIN for s in train_stays},
                              **{s.patient_id: Split.VAL for s in val_stays}})
        train_samples = build_samples(fold_corpus, Split.TRAIN, task, vocab, window_minutes, max_seq_len)
        val_samples = build_samples(fold_corpus, Split.VAL, task, vocab, window_minutes, max_seq_len)

        model, fold_rows, fold_val = _finetune_fold(
            pretrained, task, train_samples, val_samples, provider, cfg, fold)
        rows.extend(fold_rows)
        if on_row:
            for row in fold_rows:
                on_row(row)
        if fold_val < best_val:
            best_val, best_model = fold_val, model

        scores = predict_scores(model, test_samples, provider, task.kind, batch_size=2 * cfg.batch_size)
        labels = np.asarray([s.label for s in test_samples], dtype=np.float64)
        if task.kind == "regression":
            per_fold.append({"mae": mae(scores, labels)})
        else:
            per_fold.append({"auroc": auroc(scores, labels), "auprc": auprc(scores, labels)})

    report = MetricReport(metric_names, tuple(per_fold))
    return FinetuneResult(report, best_model, rows)


def _finetune_fold(pretrained: Model, task: Task, train_samples: list[Sample],
                   val_samples: list[Sample], provider: EmbeddingProvider,
                   cfg: TrainConfig, fold: int) -> tuple[Model, list[LossRow], float]:
    model = pretrained.with_task_head(task.out_dim, pretrained.config.task_dropout, seed=cfg.seed + fold)
    trainable = model.trainable_parameters(cfg.unfrozen_layers, cfg.unfreeze_embedder)
    optimizer = AdamW(trainable, weight_decay=cfg.weight_decay)
    n_windows = max((len(s.windows) for s in train_samples), default=1)

    train_labels = np.asarray([s.label for s in train_samples], dtype=np.float32)
    weight = _class_weight(task, train_labels)

    rows: list[LossRow] = []
    best_val = np.inf
    best_state: dict[str, np.ndarray] = {}
    since_best = 0

    for epoch in range(1, cfg.epochs + 1):
        lr = linear_lr(cfg.lr, epoch, cfg.epochs, cfg.resolved_warmup)
        order = np.random.default_rng([cfg.seed, 90, fold, epoch]).permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            slots, labels = _sample_batches(train_samples, idx, n_windows, provider)
            rng = np.random.default_rng([cfg.seed, 91, fold, epoch, start])
            logits = model.task_scores(slots, mode="train", rng=rng)
            loss = finetune_loss(task.kind, logits, labels, weight)
            if not np.isfinite(loss.item()):
                raise DivergedLoss(f"non-finite fine-tune loss at fold {fold} epoch {epoch}")
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step(lr)
            epoch_loss += loss.item()
            n_batches += 1

        val_loss = _task_loss(model, task, val_samples, provider, weight, cfg.batch_size) \
            if val_samples else epoch_loss / max(n_batches, 1)
        rows.append(LossRow(epoch, f"fold{fold}-train", 0.0, 0.0, 0.0, epoch_loss / max(n_batches, 1), lr))
        rows.append(LossRow(epoch, f"fold{fold}-val", 0.0, 0.0, 0.0, val_loss, lr))

        if val_loss < best_val:
            best_val, since_best = val_loss, 0
            best_state = {k: t.data.copy() for k, t in model.parameters().items()}
        else:
            since_best += 1
            if cfg.patience is not None and since_best > cfg.patience:
                break

    if best_state:
        for name, tensor in model.parameters().items():
            tensor.data = best_state[name]
    return model, rows, best_val


def _task_loss(model: Model, task: Task, samples: Sequence[Sample],
               provider: EmbeddingProvider, weight, batch_size: int) -> float:
    total, count = 0.0, 0
    n_windows = max((len(s.windows) for s in samples), default=1)
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        slots, labels = _sample_batches(samples, idx, n_windows, provider)
        logits = model.task_scores(slots, mode="eval")
        total += finetune_loss(task.kind, logits, labels, weight).item() * len(idx)
        count += len(idx)
    return total / max(count, 1)


def gradcheck_problem(hidden: int = 8, layers: int = 1, heads: int = 2, ffn_dim: int = 16,
                      max_seq_len: int = 6, feat_vocab: int = 12, val_vocab: int = 7,
                      d_pre: int = 8, window_minutes: int = 16, batch: int = 2,
                      alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                      seed: int = 0) -> tuple[Model, Callable[[], Tensor]]:
    """A float64 model plus a multi-task loss closure on a tiny masked batch.

    The masking seed is searched so the batch exercises all three heads
    (feature, categorical, continuous slots all non-empty).
    """
    from datetime import datetime

    from .textvec import StubProvider

    features = tuple(f"lab: marker {i}" for i in range(feat_vocab - 3))
    values = tuple(f"level {i}" for i in range(val_vocab - 2))
    vocab = Vocabularies(
        features=("[CLS]", "[PAD]", "[MASK]") + features,
        categorical_values=("[MASK]", "[UNK]") + values,
        per_feature_stats={},
    )
    provider = StubProvider(d_pre, seed)
    rng = np.random.default_rng([seed, 5])

    windows = []
    for b in range(batch):
        tokens = []
        for j in range(max_seq_len - 2):
            feature = features[int(rng.integers(len(features)))]
            if rng.random() < 0.5:
                tokens.append(Token(feature, float(rng.standard_normal()),
                                    int(rng.integers(window_minutes)), int(rng.integers(window_minutes)),
                                    is_continuous=True))
            else:
                tokens.append(Token(feature, values[int(rng.integers(len(values)))],
                                    int(rng.integers(window_minutes)), int(rng.integers(window_minutes)),
                                    is_continuous=False))
        seq = WindowSequence(f"s{b}", 0, datetime(2023, 1, 1), (cls_token(), *tokens))
        windows.append(truncate_and_pad(seq, max_seq_len))

    rates = MaskingRates(select=0.6)
    plans = None
    for attempt in range(500):
        plan_rng = np.random.default_rng([seed, 7, attempt])
        candidate = [plan_masking(w, vocab, plan_rng, rates) for w in windows]
        n_cat = sum(p.n_cat_slots for p in candidate)
        n_cont = sum(p.n_cont_slots for p in candidate)
        n_feat = sum(p.n_feature_slots for p in candidate)
        if n_cat > 0 and n_cont > 0 and n_feat > 0:
            apply_rng = np.random.default_rng([seed, 8, attempt])
            corrupted = [apply_masking(w, p, vocab, apply_rng) for w, p in zip(windows, candidate)]
            plans = candidate
            break
    if plans is None:
        raise ShapeMismatch("could not draw a masking plan covering all three heads")

    config = ModelConfig(
        encoder=enc.EncoderConfig(layers=layers, hidden=hidden, heads=heads,
                                  ffn_dim=ffn_dim, max_seq_len=max_seq_len, dropout=0.0),
        d_pre=d_pre, window_minutes=window_minutes,
        feature_vocab=vocab.feature_size, value_vocab=vocab.value_size,
    )
    model = Model.build(config, seed, dtype=np.float64)
    encoded = encode_batch(corrupted, provider, plans, dtype=np.float64)

    def loss_fn() -> Tensor:
        return mlvm_loss(model.pretrain_outputs(encoded, mode="eval"), plans, alpha, beta).node

    return model, loss_fn


def evaluate(model: Model, task: Task, corpus: Corpus, vocab: Vocabularies,
             provider: EmbeddingProvider, batch_size: int = 64) -> dict[str, float]:
    """Test-split metrics for a fine-tuned model."""
    samples = build_samples(corpus, Split.TEST, task, vocab,
                            model.config.window_minutes, model.config.encoder.max_seq_len)
    if not samples:
        raise MissingLabels("no test-split samples to evaluate")
    scores = predict_scores(model, samples, provider, task.kind, batch_size)
    labels = np.asarray([s.label for s in samples], dtype=np.float64)
    if task.kind == "regression":
        return {"mae": mae(scores, labels)}
    return {"auroc": auroc(scores, labels), "auprc": auprc(scores, labels)}
