"""Supervised training: BCE loss on the soft assignment, AdamW updates,
periodic validation, and binary checkpoint serialization with CRC."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DataFormatError, NumericError, ShapeError
from .metrics import mae, mie
from .pipeline import register

WEIGHTS_MAGIC = b"GAFARWTS"
WEIGHTS_FORMAT_VERSION = 1
_META_TENSOR = "__meta__"

_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    eval_every: int = 10
    # desk-scale validation recall thresholds (paper-scale 1 deg / 0.1 via config)
    rot_thresh_deg: float = 5.0
    trans_thresh: float = 0.05
    # optional early stop once validation (and train, if set) recall targets hold
    target_val_rr: float | None = None
    target_train_rr: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning_rate, batch_size, epochs must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


class AdamW:
    """Adam with decoupled weight decay; moments kept in float64."""

    def __init__(self, store: ParamStore, learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.store = store
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros(p.data.shape, dtype=np.float64)
                   for name, p in store.parameters()}
        self._v = {name: np.zeros(p.data.shape, dtype=np.float64)
                   for name, p in store.parameters()}

    def step(self) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.store.parameters():
            g = p.grad.astype(np.float64)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            decay = self.learning_rate * self.weight_decay * p.data.astype(np.float64)
            p.data = (p.data.astype(np.float64) - update - decay).astype(p.data.dtype)


def bce_loss(c_star: Tensor, gt) -> Tensor:
    """Binary cross entropy between the soft assignment and the ground-truth
    matrix, summed over every entry except the slack corner.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    c_star = ad.as_tensor(c_star)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != tuple(c_star.shape):
        raise ShapeError(
            f"assignment shape {tuple(c_star.shape)} does not match ground truth {gt.shape}"
        )
    mask = np.ones(gt.shape)
    mask[-1, -1] = 0.0
    g = ad.constant(gt, dtype=c_star.dtype)
    one_minus_g = ad.constant(1.0 - gt, dtype=c_star.dtype)
    c = ad.clip(c_star, _CLAMP, 1.0 - _CLAMP)
    terms = ad.add(ad.mul(g, ad.log(c)),
                   ad.mul(one_minus_g, ad.log(ad.sub(ad.constant(1.0, dtype=c_star.dtype), c))))
    return ad.neg(ad.reduce_sum(ad.mul(terms, ad.constant(mask, dtype=c_star.dtype))))


def train_step(batch, model, optimizer: AdamW) -> float:
    """One optimizer update on the mean BCE over a batch (single registration
    iteration per example)."""
    if not batch:
        raise ConfigError("batch must be non-empty")
    model.store.zero_grad()
    total = None
    for example in batch:
        assignment = model.assignment(example.source, example.reference, mode="train")
        loss = bce_loss(assignment, example.gt_matrix.entries)
        total = loss if total is None else ad.add(total, loss)
    mean_loss = ad.mul(total, 1.0 / len(batch))
    value = float(mean_loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    ad.backward(mean_loss)
    optimizer.step()
    return value


def evaluate_recall(examples, model, rot_thresh_deg: float, trans_thresh: float,
                    iterations: int = 1) -> tuple[float, float, float]:
    """(recall, mean MIE rotation, mean MIE translation) on a list of examples.

    Recall covers all examples; the error means cover valid registrations only.
    """
    hits = 0
    mie_r_values = []
    mie_t_values = []
    for example in examples:
        result = register(example.source, example.reference, model, iterations)
        if not result.valid:
            continue
        mae_r, mae_t = mae(result.transform, example.gt_transform)
        mie_r, mie_t = mie(result.transform, example.gt_transform)
        mie_r_values.append(mie_r)
        mie_t_values.append(mie_t)
        if mae_r < rot_thresh_deg and mae_t < trans_thresh:
            hits += 1
    rr = hits / len(examples) if examples else float("nan")
    mean_r = float(np.mean(mie_r_values)) if mie_r_values else float("nan")
    mean_t = float(np.mean(mie_t_values)) if mie_t_values else float("nan")
    return rr, mean_r, mean_t


@dataclass
class Checkpoint:
    """Model state (parameters, running statistics, slack score) plus the
    effective configuration and the epoch it was captured at."""

    tensors: dict
    config: dict
    epoch: int


def make_checkpoint(model, config_echo: dict, epoch: int) -> Checkpoint:
    return Checkpoint(tensors=model.state_dict(), config=dict(config_echo), epoch=epoch)


def train(train_examples, val_examples, model, cfg: TrainConfig,
          log_path=None, resume: Checkpoint | None = None) -> Checkpoint:
    """Epoch loop with periodic validation; returns the best-by-validation
    checkpoint (last state if no validation examples were given)."""
    from . import __version__

    if not train_examples:
        raise ConfigError("training set is empty")
    optimizer = AdamW(model.store, cfg.learning_rate, cfg.beta1, cfg.beta2,
                      cfg.adam_eps, cfg.weight_decay)
    start_epoch = 1
    if resume is not None:
        model.load_state(resume.tensors)
        start_epoch = resume.epoch + 1

    def config_echo(epoch, val_rr):
        return {
            "tool_version": __version__,
            "model": model.config.to_dict(),
            "train": asdict(cfg),
            "val_rr": val_rr,
        }

    best: Checkpoint | None = None
    best_rr = -1.0
    log_handle = open(log_path, "a" if resume else "w") if log_path else None
    step = 0
    last_epoch = start_epoch
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            last_epoch = epoch
            order = np.random.default_rng(cfg.seed * 100003 + epoch).permutation(
                len(train_examples))
            losses = []
            for batch_start in range(0, len(order), cfg.batch_size):
                batch = [train_examples[i]
                         for i in order[batch_start:batch_start + cfg.batch_size]]
                losses.append(train_step(batch, model, optimizer))
                step += 1
            record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)),
                      "val_rr": None, "val_mie_r": None, "val_mie_t": None}
            should_eval = val_examples and (
                (epoch - start_epoch + 1) % cfg.eval_every == 0
                or epoch == start_epoch + cfg.epochs - 1)
            stop = False
            if should_eval:
                val_rr, val_mie_r, val_mie_t = evaluate_recall(
                    val_examples, model, cfg.rot_thresh_deg, cfg.trans_thresh)
                record.update(val_rr=val_rr, val_mie_r=val_mie_r, val_mie_t=val_mie_t)
                if val_rr > best_rr:
                    best_rr = val_rr
                    best = make_checkpoint(model, config_echo(epoch, val_rr), epoch)
                if cfg.target_val_rr is not None and val_rr >= cfg.target_val_rr:
                    stop = True
                    if cfg.target_train_rr is not None:
                        train_rr, _, _ = evaluate_recall(
                            train_examples, model, cfg.rot_thresh_deg, cfg.trans_thresh)
                        stop = train_rr >= cfg.target_train_rr
            if log_handle:
                log_handle.write(json.dumps(record, sort_keys=True) + "\n")
                log_handle.flush()
            if stop:
                break
    finally:
        if log_handle:
            log_handle.close()
    if best is None:
        best = make_checkpoint(model, config_echo(last_epoch, None), last_epoch)
    return best


# ---------------------------------------------------------------------------
# weight file format: magic, version u32, tensor count u32, per tensor
# (u16 name length + utf-8 name, u8 rank, u32 dims, float32 row-major data),
# trailing CRC32 of everything before it; all little-endian
# ---------------------------------------------------------------------------


def save_weights(checkpoint: Checkpoint, path) -> None:
    meta = json.dumps({"config": checkpoint.config, "epoch": checkpoint.epoch},
                      sort_keys=True).encode("utf-8")
    tensors = dict(checkpoint.tensors)
    if _META_TENSOR in tensors:
        raise ValueError(f"{_META_TENSOR!r} is reserved")
    tensors[_META_TENSOR] = np.frombuffer(meta, dtype=np.uint8).astype(np.float32)
    buf = bytearray()
    buf += WEIGHTS_MAGIC
    buf += struct.pack("<I", WEIGHTS_FORMAT_VERSION)
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        # asarray keeps 0-d tensors 0-d (ascontiguousarray would promote them)
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as handle:
        handle.write(bytes(buf))


def load_weights(path) -> Checkpoint:
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < len(WEIGHTS_MAGIC) + 12:
        raise DataFormatError(f"{path}: truncated weight file")
    if blob[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise DataFormatError(f"{path}: bad magic bytes")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise DataFormatError(f"{path}: CRC mismatch, file corrupted")
    offset = len(WEIGHTS_MAGIC)

    def take(count):
        nonlocal offset
        if offset + count > len(payload):
            raise DataFormatError(f"{path}: truncated weight file")
        chunk = payload[offset:offset + count]
        offset += count
        return chunk

    version = struct.unpack("<I", take(4))[0]
    if version != WEIGHTS_FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    count = struct.unpack("<I", take(4))[0]
    tensors = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        rank = struct.unpack("<B", take(1))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(size * 4), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if offset != len(payload):
        raise DataFormatError(f"{path}: trailing bytes after tensor data")
    if _META_TENSOR not in tensors:
        raise DataFormatError(f"{path}: missing metadata tensor")
    meta_bytes = bytes(np.round(tensors.pop(_META_TENSOR)).astype(np.uint8))
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: malformed metadata: {exc}") from exc
    return Checkpoint(tensors=tensors, config=meta["config"], epoch=meta["epoch"])
