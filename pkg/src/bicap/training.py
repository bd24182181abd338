"""Pretraining loop, checkpoint serialization and frozen linear probing.

The loop samples batches with replacement, augments per (seed, step, example)
streams, takes Lookahead-SGD steps under per-group warmup/cosine schedules,
and keeps the checkpoint with the lowest validation loss (computed with
dropout off and normalization-only preprocessing).

Checkpoints are a binary format: magic, version, a length-prefixed UTF-8
JSON header, then named little-endian float32 arrays with shape prefixes.
They round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, augment_image, normalize_image
from .model import (
    ModelConfig,
    ModelParams,
    bicaption_loss_batch,
    encode_image_batch,
    init_params,
    parameter_groups,
)
from .optim import LrSchedule, OptimizerState, init_optimizer, lr_at_step, sgd_lookahead_step
from .rng import make_rng
from .tensor import Tensor
from .textpipe import Report, Vocabulary, prepare_training_sequence, remove_prior_references

CHECKPOINT_MAGIC = b"BICAPCK1"
CHECKPOINT_VERSION = 1
LOSS_NORMALIZATION = "per-unmasked-token mean within each direction, directions summed"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during pretraining."""


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 32
    encoder_lr: float = 0.2
    decoder_lr: float = 0.02
    warmup_fraction: float = 0.05
    seed: int = 0
    forward_only: bool = False
    remove_priors: bool = True
    eval_interval: int = 200
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    momentum: float = 0.9
    nesterov: bool = False

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if self.encoder_lr <= 0 or self.decoder_lr <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    optimizer: OptimizerState | None
    step: int
    val_loss: float
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# sequence/image preparation


def prepare_reports(records, vocab: Vocabulary, context_len: int, remove_priors: bool):
    """Token matrix and lengths for manifest records (order preserved)."""
    ids = np.zeros((len(records), context_len), dtype=np.int64)
    lengths = np.zeros(len(records), dtype=np.int64)
    for i, rec in enumerate(records):
        report = Report(findings=rec["findings"], impression=rec["impression"])
        if remove_priors:
            report = remove_prior_references(report)
        seq = prepare_training_sequence(report, vocab, context_len)
        ids[i] = seq.ids
        lengths[i] = seq.length
    return ids, lengths


def validation_loss(params: ModelParams, images: np.ndarray, token_ids, lengths, pad_id: int, forward_only: bool = False, chunk: int = 64) -> float:
    """Mean bicaption loss over a prepared set, dropout off, no graph."""
    total = 0.0
    count = 0
    with T.no_grad():
        for start in range(0, len(images), chunk):
            sl = slice(start, start + chunk)
            loss = bicaption_loss_batch(
                params, images[sl], token_ids[sl], lengths[sl], pad_id, forward_only=forward_only, train=False
            )
            n = len(images[sl])
            total += float(loss.data) * n
            count += n
    return total / count


def params_hash(params: ModelParams) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.tensors[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# pretraining


def pretrain(
    train_records,
    val_records,
    train_images: np.ndarray,
    val_images: np.ndarray,
    vocab: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    augment_policy: AugmentPolicy | None = None,
):
    """Run the captioning pretraining loop; returns (best Checkpoint, history).

    History rows are dicts with step, train_loss (batch), ema_loss, val_loss
    (None off the eval grid), lr_encoder and lr_decoder.
    """
    if not train_records or not val_records:
        raise ValueError("train and validation manifests must be non-empty")
    cfg, tc = model_config, train_config
    if augment_policy is None:
        mean = float(np.mean(train_images))
        std = float(np.std(train_images)) or 1.0
        augment_policy = AugmentPolicy(output_side=cfg.image_size, mean=mean, std=std)

    train_ids, train_lens = prepare_reports(train_records, vocab, cfg.context_len, tc.remove_priors)
    val_ids, val_lens = prepare_reports(val_records, vocab, cfg.context_len, tc.remove_priors)
    val_norm = normalize_image(val_images, augment_policy.mean, augment_policy.std)

    params = init_params(cfg, tc.seed)
    opt = init_optimizer(
        params.tensors, k=tc.lookahead_k, alpha=tc.lookahead_alpha, momentum=tc.momentum, nesterov=tc.nesterov
    )
    groups = parameter_groups(params)
    sched_enc = LrSchedule(tc.encoder_lr, tc.total_steps, tc.warmup_fraction)
    sched_dec = LrSchedule(tc.decoder_lr, tc.total_steps, tc.warmup_fraction)

    meta = {
        "loss_normalization": LOSS_NORMALIZATION,
        "norm_mean": augment_policy.mean,
        "norm_std": augment_policy.std,
        "forward_only": tc.forward_only,
        "remove_priors": tc.remove_priors,
        "train_config": tc.to_dict(),
    }
    history = []
    best: Checkpoint | None = None
    ema = None
    n_train = len(train_records)

    for step in range(1, tc.total_steps + 1):
        batch_idx = make_rng(tc.seed, "batch", step).integers(0, n_train, tc.batch_size)
        batch_images = np.stack(
            [
                augment_image(train_images[i], augment_policy, make_rng(tc.seed, "augment", step, int(i)))
                for i in batch_idx
            ]
        )
        loss = bicaption_loss_batch(
            params,
            batch_images,
            train_ids[batch_idx],
            train_lens[batch_idx],
            vocab.pad_id,
            forward_only=tc.forward_only,
            train=True,
            rng=make_rng(tc.seed, "dropout", step),
        )
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"loss became {loss_val} at step {step}")
        ema = loss_val if ema is None else 0.98 * ema + 0.02 * loss_val

        params.zero_grad()
        T.backward(loss)
        grads = {name: t.grad for name, t in params.named() if t.grad is not None}
        lr_enc = lr_at_step(sched_enc, step)
        lr_dec = lr_at_step(sched_dec, step)
        lr_map = {name: (lr_enc if groups[name] == "encoder" else lr_dec) for name in grads}
        sgd_lookahead_step(opt, grads, lr_map)

        val_loss = None
        if step % tc.eval_interval == 0 or step == tc.total_steps:
            val_loss = validation_loss(params, val_norm, val_ids, val_lens, vocab.pad_id, tc.forward_only)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"validation loss became {val_loss} at step {step}")
            if best is None or val_loss < best.val_loss:
                best = Checkpoint(
                    config=cfg,
                    params=params.copy(),
                    optimizer=_copy_optimizer(opt),
                    step=step,
                    val_loss=val_loss,
                    meta=dict(meta),
                )
        history.append(
            {
                "step": step,
                "train_loss": loss_val,
                "ema_loss": ema,
                "val_loss": val_loss,
                "lr_encoder": lr_enc,
                "lr_decoder": lr_dec,
            }
        )
    return best, history


def _copy_optimizer(opt: OptimizerState) -> OptimizerState:
    return OptimizerState(
        fast={},
        slow={k: v.copy() for k, v in opt.slow.items()},
        momentum_buffers={k: v.copy() for k, v in opt.momentum_buffers.items()},
        k=opt.k,
        alpha=opt.alpha,
        momentum=opt.momentum,
        nesterov=opt.nesterov,
        counter=opt.counter,
    )


def write_history_csv(path, history, config: dict | None = None) -> None:
    """Loss history as CSV (step, train_loss, val_loss, lr); the optional
    resolved config rides in a leading comment line."""
    with open(path, "w", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        fh.write("step,train_loss,val_loss,lr\n")
        for row in history:
            val = "" if row["val_loss"] is None else f"{row['val_loss']:.6f}"
            fh.write(f"{row['step']},{row['ema_loss']:.6f},{val},{row['lr_decoder']:.8f}\n")


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint file")
    return buf


def _read_array(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float32)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "val_loss": ckpt.val_loss,
        "meta": ckpt.meta,
        "optimizer": None
        if ckpt.optimizer is None
        else {
            "k": ckpt.optimizer.k,
            "alpha": ckpt.optimizer.alpha,
            "momentum": ckpt.optimizer.momentum,
            "nesterov": ckpt.optimizer.nesterov,
            "counter": ckpt.optimizer.counter,
        },
    }
    arrays = [("param:" + name, t.data) for name, t in sorted(ckpt.params.tensors.items())]
    if ckpt.optimizer is not None:
        arrays += [("slow:" + name, arr) for name, arr in sorted(ckpt.optimizer.slow.items())]
        arrays += [("mom:" + name, arr) for name, arr in sorted(ckpt.optimizer.momentum_buffers.items())]
    header_b = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_b)))
        fh.write(header_b)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_array(fh, name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = dict(_read_array(fh) for _ in range(n_arrays))

    config = ModelConfig.from_dict(header["model_config"])
    tensors = {
        name[len("param:"):]: Tensor(arr.copy(), requires_grad=True)
        for name, arr in arrays.items()
        if name.startswith("param:")
    }
    params = ModelParams(config=config, tensors=tensors)
    optimizer = None
    if header.get("optimizer"):
        opt_h = header["optimizer"]
        optimizer = OptimizerState(
            fast=params.tensors,
            slow={n[len("slow:"):]: arr.copy() for n, arr in arrays.items() if n.startswith("slow:")},
            momentum_buffers={n[len("mom:"):]: arr.copy() for n, arr in arrays.items() if n.startswith("mom:")},
            k=opt_h["k"],
            alpha=opt_h["alpha"],
            momentum=opt_h["momentum"],
            nesterov=opt_h["nesterov"],
            counter=opt_h["counter"],
        )
    return Checkpoint(
        config=config,
        params=params,
        optimizer=optimizer,
        step=header["step"],
        val_loss=header["val_loss"],
        meta=header.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# pooled features and linear probing


def pooled_features(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Global average pool over the visual sequence rows -> (d,) vector."""
    with T.no_grad():
        from .model import encode_image

        return encode_image(params, image).data.mean(axis=0)


def pooled_features_batch(params: ModelParams, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(images), chunk):
            out.append(encode_image_batch(params, images[start : start + chunk]).data.mean(axis=1))
    return np.concatenate(out, axis=0)


@dataclass
class ProbeConfig:
    lr: float = 0.02
    epochs: int = 80
    batch_size: int = 16
    plateau_patience: int = 5
    seed: int = 0


@dataclass
class ProbeHead:
    """Multilabel linear head over pooled encoder features."""

    classes: list
    weight: np.ndarray  # (d, num_classes)
    bias: np.ndarray  # (num_classes,)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Per-class sigmoid probabilities, (N, num_classes)."""
        z = features @ self.weight + self.bias
        return 1.0 / (1.0 + np.exp(-z))


def _bce_loss(probs, y):
    eps = 1e-7
    p = np.clip(probs, eps, 1 - eps)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def label_matrix(label_sets, classes) -> np.ndarray:
    y = np.zeros((len(label_sets), len(classes)), dtype=np.float64)
    for i, labels in enumerate(label_sets):
        for j, c in enumerate(classes):
            if c in labels:
                y[i, j] = 1.0
    return y


def linear_probe_train(
    params: ModelParams,
    train_images: np.ndarray,
    train_label_sets,
    val_images: np.ndarray,
    val_label_sets,
    classes,
    cfg: ProbeConfig | None = None,
) -> ProbeHead:
    """Fit a sigmoid-per-class head on frozen pooled features.

    The encoder is only read (hash-identical before and after); the head is
    trained with SGD, halving the LR when validation loss plateaus. The
    returned head applies to raw pooled features (feature standardization is
    folded into the weights).
    """
    cfg = cfg or ProbeConfig()
    classes = list(classes)
    y_train = label_matrix(train_label_sets, classes)
    for j, c in enumerate(classes):
        if y_train[:, j].sum() == 0:
            raise ValueError(f"class {c!r} has no positive training examples")
    x_train = pooled_features_batch(params, train_images).astype(np.float64)
    x_val = pooled_features_batch(params, val_images).astype(np.float64)
    y_val = label_matrix(val_label_sets, classes)

    mu = x_train.mean(axis=0)
    sigma = x_train.std(axis=0)
    sigma[sigma == 0] = 1.0
    z_train = (x_train - mu) / sigma
    z_val = (x_val - mu) / sigma

    rng = make_rng(cfg.seed, "probe")
    d, k = z_train.shape[1], len(classes)
    w = rng.standard_normal((d, k)) * 0.01
    b = np.zeros(k)
    lr = cfg.lr
    best_val = np.inf
    stale = 0
    n = len(z_train)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            zb, yb = z_train[idx], y_train[idx]
            probs = 1.0 / (1.0 + np.exp(-(zb @ w + b)))
            g = (probs - yb) / len(idx)
            w -= lr * (zb.T @ g)
            b -= lr * g.sum(axis=0)
        val_probs = 1.0 / (1.0 + np.exp(-(z_val @ w + b)))
        val_loss = _bce_loss(val_probs, y_val)
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                lr *= 0.5
                stale = 0
    weight = w / sigma[:, None]
    bias = b - (mu / sigma) @ w
    return ProbeHead(classes=classes, weight=weight, bias=bias)
