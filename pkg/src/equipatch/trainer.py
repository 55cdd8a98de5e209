"""Deterministic supervised training: AdamW, cosine annealing, checkpoints.

The loop is single-threaded over optimizer steps; given a model seed, a
train-config seed, and a dataset it reproduces parameters bit-for-bit.
Checkpoints use a little-endian binary layout with the architecture
descriptor embedded as JSON so loading can validate every tensor shape.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vit
from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    ConfigError,
    DataError,
    ShapeError,
    TrainingDivergedError,
)
from . import tensorkit as tk
from .tensorkit import Tensor

CHECKPOINT_MAGIC = b"EQVT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-5
    epochs: int = 10
    batch_size: int = 64
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_min: float = 0.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class OptimizerState:
    """First/second moment buffers (f64, shapes mirror the parameters) and step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + 0.5*(lr0 - lr_min)*(1 + cos(pi * step / total_steps))."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> dict[str, Tensor]:
    """One decoupled-weight-decay Adam update; returns successor parameters.

    Moments and parameters are stored f32; the update arithmetic runs in
    f64.  ``state`` is advanced in place.
    """
    b1, b2 = cfg.betas
    state.t += 1
    t = state.t
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        with np.errstate(over="ignore", invalid="ignore"):
            g64 = g.astype(np.float64)
            m_prev = state.m.get(name, 0.0)
            v_prev = state.v.get(name, 0.0)
            m = b1 * m_prev + (1 - b1) * g64
            v = b2 * v_prev + (1 - b2) * g64 * g64
            state.m[name] = m
            state.v[name] = v
            theta = p.data.astype(np.float64)
            theta = theta - lr * ((m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * theta)
            new_params[name] = Tensor(theta.astype(np.float32), requires_grad=True)
    return new_params


def train(model: vit.ViTModel, train_index, cfg: TrainConfig) -> list[tuple[int, float, float]]:
    """Train in place; returns per-epoch (epoch, mean_loss, train_acc) history.

    Seeded shuffle per epoch, per-step cosine learning rate over
    epochs * ceil(n/batch) steps, last partial batch kept, no geometric
    augmentation.  Raises TrainingDivergedError on a non-finite loss.
    """
    images = train_index.images()
    labels = train_index.labels()
    n = len(labels)
    if n == 0:
        raise DataError("training dataset is empty")
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    history: list[tuple[int, float, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum = 0.0
        correct = 0
        for b in range(batches_per_epoch):
            ids = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = Tensor(images[ids])
            y = labels[ids]
            # overflow here is the divergence condition itself; the loss
            # check below turns it into a typed error instead of a warning
            with np.errstate(over="ignore", invalid="ignore"):
                logits = vit.forward(model, x)
                loss = tk.cross_entropy(logits, y)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise TrainingDivergedError(f"non-finite loss {loss_val} at step {step}")
                tk.backward(loss)
                grads = {name: p.grad for name, p in model.params.items()}
                lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
                model.replace_params(adamw_step(model.params, grads, state, lr, cfg))
            loss_sum += loss_val * len(ids)
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            step += 1
        history.append((epoch, loss_sum / n, correct / n))
    return history


def write_history_csv(history, path) -> None:
    lines = ["epoch,mean_loss,train_acc"]
    for epoch, mean_loss, train_acc in history:
        lines.append(f"{epoch},{mean_loss:.9g},{train_acc:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: vit.ViTModel, path, state: OptimizerState | None = None,
                    meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Bit-exact serialization: magic, version, descriptor JSON, named f32 tensors.

    Optimizer state, when given, rides along as ``opt.m.*`` / ``opt.v.*``
    tensors plus ``opt.t`` (moments quantize to the f32 payload format).
    ``extra_tensors`` ride along under a ``meta.`` name prefix.  Neither is
    validated against the architecture template on load.
    """
    blob = json.dumps(
        {"vit_config": vit.config_to_dict(model.cfg), "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = [(name, t.data) for name, t in model.params.items()]
    if state is not None:
        for name, arr in state.m.items():
            tensors.append((f"opt.m.{name}", np.asarray(arr, dtype=np.float32)))
        for name, arr in state.v.items():
            tensors.append((f"opt.v.{name}", np.asarray(arr, dtype=np.float32)))
        tensors.append(("opt.t", np.asarray([state.t], dtype=np.float32)))
    for name, arr in (extra_tensors or {}).items():
        tensors.append((f"meta.{name}", np.asarray(arr, dtype=np.float32)))
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(blob))
    out += blob
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<BB", 0, arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<Q", dim)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptionError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_checkpoint(path) -> tuple[vit.ViTModel, dict]:
    """Rebuild a model from a checkpoint, validating magic, version, shapes."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic in {path}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    blob = r.take(r.u32())
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptionError(f"unreadable architecture descriptor: {exc}") from exc
    cfg = vit.config_from_dict(header["vit_config"])
    template = {name: vit.param_shape(cfg, name) for name in vit.param_template(cfg)}

    tensors: dict[str, np.ndarray] = {}
    count = r.u32()
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        dtype_code = r.u8()
        if dtype_code != 0:
            raise CheckpointCorruptionError(f"unknown dtype code {dtype_code} for tensor {name}")
        rank = r.u8()
        shape = tuple(r.u64() for _ in range(rank))
        n_elem = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * n_elem)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)

    params: dict[str, Tensor] = {}
    for name, shape in template.items():
        if name not in tensors:
            raise CheckpointCorruptionError(f"checkpoint is missing parameter {name}")
        if tensors[name].shape != shape:
            raise CheckpointCorruptionError(
                f"parameter {name} has shape {tensors[name].shape}, architecture expects {shape}"
            )
        params[name] = Tensor(tensors[name], requires_grad=True)
    extras = {k[len("meta.") :]: v for k, v in tensors.items() if k.startswith("meta.")}
    meta = dict(header.get("meta", {}))
    meta["tensors"] = extras
    if "opt.t" in tensors:
        meta["optimizer_state"] = OptimizerState(
            m={k[len("opt.m.") :]: v for k, v in tensors.items() if k.startswith("opt.m.")},
            v={k[len("opt.v.") :]: v for k, v in tensors.items() if k.startswith("opt.v.")},
            t=int(tensors["opt.t"][0]),
        )

    model = vit.ViTModel(cfg=cfg, params=params)
    if cfg.embed.variant == "gmr_stack":
        from . import gmr

        for i, st in enumerate(cfg.embed.stages):
            model.bases[i] = gmr.build_basis(gmr.ring_spec(st.k, cfg.embed.sigma_ratio))
    return model, meta
