"""Bidirectional transformer encoder, output heads, gradient checking, checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigMismatch, FormatError, GradMismatch, ModeMismatch, ShapeMismatch
from .textvec import atomic_write

CHECKPOINT_MAGIC = b"ICUB1"


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 6
    hidden: int = 768
    heads: int = 6
    ffn_dim: int = 64
    max_seq_len: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.layers, self.hidden, self.heads, self.ffn_dim, self.max_seq_len) < 1:
            raise ShapeMismatch("all encoder dimensions must be >= 1")
        if self.hidden % self.heads != 0:
            raise ShapeMismatch(f"hidden {self.hidden} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{name}", getattr(self, name)) for name in (
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ln1_gain", "ln1_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
            "ln2_gain", "ln2_bias",
        )]


@dataclass
class EncoderParams:
    layers: list[LayerParams]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"encoder.layer{i}"))
        return out


def init_encoder(rng: np.random.Generator, config: EncoderConfig, dtype=np.float32) -> EncoderParams:
    d, f = config.hidden, config.ffn_dim

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dtype)

    layers = []
    for i in range(config.layers):
        layers.append(LayerParams(
            wq=ad.parameter(normal(d, d), f"encoder.layer{i}.wq"),
            bq=ad.parameter(np.zeros(d, dtype=dtype), f"encoder.layer{i}.bq"),
            wk=ad.parameter(normal(d, d), f"encoder.layer{i}.wk"),
            bk=ad.parameter(np.zeros(d, dtype=dtype), f"encoder.layer{i}.bk"),
            wv=ad.parameter(normal(d, d), f"encoder.layer{i}.wv"),
            bv=ad.parameter(np.zeros(d, dtype=dtype), f"encoder.layer{i}.bv"),
            wo=ad.parameter(normal(d, d), f"encoder.layer{i}.wo"),
            bo=ad.parameter(np.zeros(d, dtype=dtype), f"encoder.layer{i}.bo"),
            ln1_gain=ad.parameter(np.ones(d, dtype=dtype), f"encoder.layer{i}.ln1_gain"),
            ln1_bias=ad.parameter(np.zeros(d, dtype=dtype), f"encoder.layer{i}.ln1_bias"),
            ffn_w1=ad.parameter(normal(d, f), f"encoder.layer{i}.ffn_w1"),
            ffn_b1=ad.parameter(np.zeros(f, dtype=dtype), f"encoder.layer{i}.ffn_b1"),
            ffn_w2=ad.parameter(normal(f, d), f"encoder.layer{i}.ffn_w2"),
            ffn_b2=ad.parameter(np.zeros(d, dtype=dtype), f"encoder.layer{i}.ffn_b2"),
            ln2_gain=ad.parameter(np.ones(d, dtype=dtype), f"encoder.layer{i}.ln2_gain"),
            ln2_bias=ad.parameter(np.zeros(d, dtype=dtype), f"encoder.layer{i}.ln2_bias"),
        ))
    return EncoderParams(layers)


def forward(x: Tensor, attention_mask: np.ndarray, config: EncoderConfig,
            params: EncoderParams, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Post-norm encoder stack; PAD key positions are excluded from attention."""
    b, length, d = x.shape
    if d != config.hidden:
        raise ShapeMismatch(f"input width {d} vs configured hidden {config.hidden}")
    mask = np.asarray(attention_mask)
    if mask.shape != (b, length):
        raise ShapeMismatch(f"mask shape {mask.shape} vs batch {(b, length)}")
    if mode == "train" and rng is None:
        raise ShapeMismatch("train mode needs an rng for dropout")

    heads, dh = config.heads, config.head_dim
    keep = (mask > 0)[:, None, None, :]  # admissible key positions
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    def drop(t: Tensor) -> Tensor:
        return ad.dropout(t, config.dropout, rng, training=(mode == "train"))

    for layer in params.layers:
        q = split_heads(ad.add(ad.matmul(x, layer.wq), layer.bq))
        k = split_heads(ad.add(ad.matmul(x, layer.wk), layer.bk))
        v = split_heads(ad.add(ad.matmul(x, layer.wv), layer.bv))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
        probs = drop(ad.softmax_masked(scores, keep))
        context = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, length, d))
        attn_out = drop(ad.add(ad.matmul(context, layer.wo), layer.bo))
        x = ad.layer_norm(ad.add(x, attn_out), layer.ln1_gain, layer.ln1_bias)
        inner = ad.gelu(ad.add(ad.matmul(x, layer.ffn_w1), layer.ffn_b1))
        ffn_out = drop(ad.add(ad.matmul(inner, layer.ffn_w2), layer.ffn_b2))
        x = ad.layer_norm(ad.add(x, ffn_out), layer.ln2_gain, layer.ln2_bias)
    return x


# ---------------------------------------------------------------------------
# output heads


@dataclass
class HeadSet:
    """Either the three reconstruction heads or a single task head."""

    mode: str  # "pretrain" | "task"
    feature_w: Optional[Tensor] = None
    feature_b: Optional[Tensor] = None
    cat_w: Optional[Tensor] = None
    cat_b: Optional[Tensor] = None
    cont_w: Optional[Tensor] = None
    cont_b: Optional[Tensor] = None
    task_w: Optional[Tensor] = None
    task_b: Optional[Tensor] = None
    task_dropout: float = 0.5

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        names = (
            ("feature_w", "feature_b", "cat_w", "cat_b", "cont_w", "cont_b")
            if self.mode == "pretrain" else ("task_w", "task_b")
        )
        return [(f"heads.{n}", getattr(self, n)) for n in names]


def init_pretrain_heads(rng: np.random.Generator, hidden: int, feature_size: int,
                        value_size: int, dtype=np.float32) -> HeadSet:
    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dtype)

    return HeadSet(
        mode="pretrain",
        feature_w=ad.parameter(normal(hidden, feature_size), "heads.feature_w"),
        feature_b=ad.parameter(np.zeros(feature_size, dtype=dtype), "heads.feature_b"),
        cat_w=ad.parameter(normal(hidden, value_size), "heads.cat_w"),
        cat_b=ad.parameter(np.zeros(value_size, dtype=dtype), "heads.cat_b"),
        cont_w=ad.parameter(normal(hidden, 1), "heads.cont_w"),
        cont_b=ad.parameter(np.zeros(1, dtype=dtype), "heads.cont_b"),
    )


def init_task_head(rng: np.random.Generator, hidden: int, out_dim: int,
                   task_dropout: float = 0.5, dtype=np.float32) -> HeadSet:
    w = (rng.standard_normal((hidden, out_dim)) * 0.02).astype(dtype)
    return HeadSet(
        mode="task",
        task_w=ad.parameter(w, "heads.task_w"),
        task_b=ad.parameter(np.zeros(out_dim, dtype=dtype), "heads.task_b"),
        task_dropout=task_dropout,
    )


def mlvm_outputs(hidden: Tensor, heads: HeadSet) -> tuple[Tensor, Tensor, Tensor]:
    """Per-position feature logits, categorical logits, and continuous predictions."""
    if heads.mode != "pretrain":
        raise ModeMismatch("reconstruction outputs need the pre-training heads")
    feature_logits = ad.add(ad.matmul(hidden, heads.feature_w), heads.feature_b)
    cat_logits = ad.add(ad.matmul(hidden, heads.cat_w), heads.cat_b)
    cont_pred = ad.squeeze_last(ad.add(ad.matmul(hidden, heads.cont_w), heads.cont_b))
    return feature_logits, cat_logits, cont_pred


def cls_output(hidden: Tensor) -> Tensor:
    """Final-layer representation of the CLS token (position 0)."""
    return ad.take_position(hidden, 0)


def task_output(cls_vec: Tensor, heads: HeadSet, mode: str = "eval",
                rng: Optional[np.random.Generator] = None) -> Tensor:
    if heads.mode != "task":
        raise ModeMismatch("task output needs a task head")
    dropped = ad.dropout(cls_vec, heads.task_dropout, rng, training=(mode == "train"))
    out = ad.add(ad.matmul(dropped, heads.task_w), heads.task_b)
    if heads.task_w.shape[1] == 1:
        out = ad.squeeze_last(out)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckEntry:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.rel_err <= self.tolerance for e in self.entries)

    @property
    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.rel_err, default=None)

    def summary(self, limit: int = 10) -> str:
        lines = [f"checked {len(self.entries)} entries, tolerance {self.tolerance:g}"]
        for e in sorted(self.entries, key=lambda e: -e.rel_err)[:limit]:
            lines.append(
                f"  {e.param}{list(e.index)}: analytic {e.analytic:+.6e}"
                f" numeric {e.numeric:+.6e} rel_err {e.rel_err:.3e}"
            )
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
               epsilon: float = 1e-4, tolerance: float = 1e-4,
               samples_per_param: int = 6,
               rng: Optional[np.random.Generator] = None,
               raise_on_mismatch: bool = True) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    Samples the largest-gradient entries of every parameter plus a few random
    ones, so embedding-table rows that were actually touched get covered.
    """
    rng = rng or np.random.default_rng(0)
    for t in params.values():
        t.zero_grad()
    loss = loss_fn()
    ad.backward(loss)

    report = GradCheckReport(tolerance=tolerance)
    for name, tensor in params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat_grad = grad.reshape(-1)
        n = flat_grad.size
        k = min(samples_per_param, n)
        top = np.argsort(-np.abs(flat_grad))[: (k + 1) // 2]
        extra = rng.integers(0, n, size=k)
        picked = np.unique(np.concatenate([top, extra]))[:samples_per_param]
        flat_data = tensor.data.reshape(-1)
        for flat_idx in picked:
            original = flat_data[flat_idx]
            flat_data[flat_idx] = original + epsilon
            f_plus = loss_fn().item()
            flat_data[flat_idx] = original - epsilon
            f_minus = loss_fn().item()
            flat_data[flat_idx] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = float(flat_grad[flat_idx])
            rel_err = abs(analytic - numeric) / max(1.0, abs(analytic))
            report.entries.append(GradCheckEntry(
                param=name,
                index=tuple(int(i) for i in np.unravel_index(flat_idx, tensor.data.shape)),
                analytic=analytic, numeric=numeric, rel_err=rel_err,
            ))

    if raise_on_mismatch and not report.ok:
        worst = report.worst
        err = GradMismatch(worst.param, worst.rel_err)
        err.report = report
        raise err
    return report


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: str, config: dict, params: dict[str, Tensor]) -> None:
    """Binary checkpoint: magic, JSON config block, then named float32 blobs."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(config_bytes))
    buf += config_bytes
    names = sorted(params)
    buf += struct.pack("<I", len(names))
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", data.ndim)
        buf += struct.pack(f"<{data.ndim}I", *data.shape)
        buf += data.tobytes()
    atomic_write(path, bytes(buf))


def load_checkpoint(path: str, expect: Optional[dict] = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; optionally enforce config keys the caller relies on."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    try:
        (config_len,) = struct.unpack_from("<I", data, off)
        off += 4
        raw_config = data[off : off + config_len]
        if len(raw_config) != config_len:
            raise FormatError("truncated config block")
        config = json.loads(raw_config.decode("utf-8"))
        off += config_len
        (n_params,) = struct.unpack_from("<I", data, off)
        off += 4
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            raw = data[off : off + 4 * size]
            if len(raw) != 4 * size:
                raise FormatError(f"truncated blob for {name!r}")
            off += 4 * size
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise FormatError("trailing bytes after last parameter blob")
    if expect:
        for key, value in expect.items():
            if config.get(key) != value:
                raise ConfigMismatch(f"checkpoint {key}={config.get(key)!r}, expected {value!r}")
    return config, params
