"""Deterministic AdamW pretraining with resumable binary checkpoints.

Checkpoint layout ("LMAE", little-endian)::

    magic        4 bytes  b"LMAE"
    version      u16
    config       u32 length + UTF-8 ``key=value`` lines (model.*, train.*, state.*)
    params       u32 count + tensors
    optimizer    u32 count + tensors (``m/<name>``, ``v/<name>``, ``loss_history``)
    step         u64
    stream_pos   u64

    tensor       u16 name length + name | u8 rank | rank x u32 dims | f64 data

All randomness of a run derives from ``(seed, purpose, counters)`` so the
stream position is simply the number of optimizer steps taken.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .dataio import (BadMagicError, RecordFormatError, TruncatedPayloadError, VersionMismatchError,
                     read_record)
from .model import ModelConfig, forward_pretrain, init_params
from .synthgen import DipoleConfig, synth_dataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LMAE"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; ``checkpoint`` holds the last finite state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class IncompatibleCheckpointError(RecordFormatError):
    pass


def derive_seed(seed: int, purpose: str, *counters: int) -> int:
    """Stable 64-bit sub-seed for ``purpose`` under the run seed."""
    ss = np.random.SeedSequence([seed % 2 ** 64, zlib.crc32(purpose.encode()), *counters])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: float = None  # default: 10% of epochs
    betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    grad_clip: float = None
    seed: int = 0
    dataset: str = "synth:n=2000"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.warmup_epochs is None:
            object.__setattr__(self, "warmup_epochs", 0.1 * self.epochs)
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero (1-based step)."""
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step <= warm:
        return cfg.learning_rate * step / warm
    frac = (step - warm) / max(total - warm, 1)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def _decays(name: str, value: np.ndarray) -> bool:
    return value.ndim >= 2


def adamw_step(params: dict, grads: dict, moments: dict, step: int, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``moments``."""
    if step < 1:
        raise ValueError("step counts from 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence detected: non-finite gradient in {name}")
    if cfg.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads[name]
        m = moments.setdefault("m/" + name, np.zeros_like(p.data))
        v = moments.setdefault("v/" + name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and _decays(name, p.data):
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict  # name -> ndarray
    moments: dict = field(default_factory=dict)
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    step: int = 0
    stream_pos: int = 0
    version: int = CHECKPOINT_VERSION

    def tensors(self) -> dict:
        return {k: tn.parameter(v.copy()) for k, v in self.params.items()}

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return encode_checkpoint(self) == encode_checkpoint(other)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def model_config_lines(cfg: ModelConfig) -> list:
    return [f"model.{f.name}={_fmt(getattr(cfg, f.name))}" for f in fields(ModelConfig)]


def train_config_lines(cfg: TrainConfig) -> list:
    return [f"train.{f.name}={_fmt(getattr(cfg, f.name))}" for f in fields(TrainConfig) if f.name != "model"]


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256("\n".join(model_config_lines(cfg)).encode()).hexdigest()


def _parse_value(text: str, like):
    if isinstance(like, bool):
        if text not in ("True", "False", "true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {text!r}")
        return text in ("True", "true", "1")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if like and isinstance(like[0], float):
            return tuple(float(p) for p in parts)
        return tuple(parts)
    return text


def _parse_config_blob(text: str):
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    mdef, tdef = ModelConfig(), TrainConfig()
    mkw = {f.name: _parse_value(kv[f"model.{f.name}"], getattr(mdef, f.name)) for f in fields(ModelConfig)}
    tkw = {}
    for f in fields(TrainConfig):
        if f.name == "model":
            continue
        raw = kv[f"train.{f.name}"]
        like = getattr(tdef, f.name)
        tkw[f.name] = None if raw == "None" else _parse_value(raw, 0.0 if f.name == "grad_clip" else like)
    mcfg = ModelConfig(**mkw)
    return mcfg, TrainConfig(model=mcfg, **tkw), int(kv.get("state.epoch", 0)), kv.get("state.model_hash")


def _pack_tensors(table: dict) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise TruncatedPayloadError("checkpoint payload is truncated")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensors(self) -> dict:
        (count,) = self.unpack("<I")
        table = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            table[name] = np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        return table


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    lines = model_config_lines(ckpt.model_config) + train_config_lines(ckpt.train_config)
    lines += [f"state.epoch={ckpt.epoch}", f"state.model_hash={config_hash(ckpt.model_config)}"]
    blob = "\n".join(lines).encode()
    opt = dict(ckpt.moments)
    opt["loss_history"] = np.asarray(ckpt.loss_history, dtype=np.float64)
    return b"".join([
        CHECKPOINT_MAGIC, struct.pack("<H", ckpt.version),
        struct.pack("<I", len(blob)), blob,
        _pack_tensors(ckpt.params), _pack_tensors(opt),
        struct.pack("<QQ", ckpt.step, ckpt.stream_pos),
    ])


def decode_checkpoint(buf: bytes, expected: ModelConfig = None) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
    (n,) = r.unpack("<I")
    mcfg, tcfg, epoch, stored_hash = _parse_config_blob(r.take(n).decode())
    if stored_hash is not None and stored_hash != config_hash(mcfg):
        raise IncompatibleCheckpointError("stored model hash does not match its config")
    if expected is not None and config_hash(expected) != config_hash(mcfg):
        raise IncompatibleCheckpointError("checkpoint was written for a different model config")
    params = r.tensors()
    opt = r.tensors()
    history = [float(v) for v in opt.pop("loss_history", np.zeros(0))]
    step, pos = r.unpack("<QQ")
    return Checkpoint(mcfg, tcfg, params, opt, epoch, history, step, pos, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, expected: ModelConfig = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected)


# ---------------------------------------------------------------------------
# dataset and loop


def load_dataset(spec: str, seed: int = 0):
    """Records from ``synth:n=..,seed=..,noise=..`` or a directory of .lecg files."""
    if spec.startswith("synth:"):
        opts = dict(kv.split("=", 1) for kv in spec[len("synth:"):].split(",") if kv)
        unknown = set(opts) - {"n", "seed", "noise"}
        if unknown:
            raise ConfigError(f"unknown synth dataset option(s): {sorted(unknown)}")
        dcfg = DipoleConfig(seed=int(opts.get("seed", seed)), noise_std=float(opts.get("noise", 0.01)))
        return synth_dataset(int(opts.get("n", 2000)), dcfg)[0]
    path = Path(spec)
    files = sorted(path.glob("*.lecg"))
    if not files:
        raise ConfigError(f"no .lecg records found under {spec!r}")
    return [read_record(f) for f in files]


def _snapshot(params, moments, cfg, epoch, history, step) -> Checkpoint:
    return Checkpoint(cfg.model, cfg, {k: v.data.copy() for k, v in params.items()},
                      {k: v.copy() for k, v in moments.items()}, epoch, list(history), step, step)


def epoch_batches(n: int, cfg: TrainConfig, epoch: int) -> list:
    order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch)).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def pretrain(cfg: TrainConfig, records=None, resume: Checkpoint = None, stop_after_epoch: int = None,
             on_epoch=None) -> Checkpoint:
    """Run (or continue) masked-reconstruction pretraining.

    ``stop_after_epoch`` ends the run early with a resumable checkpoint;
    ``on_epoch(checkpoint)`` is called after every epoch.
    """
    if records is None:
        records = load_dataset(cfg.dataset, cfg.seed)
    if resume is not None:
        if config_hash(resume.model_config) != config_hash(cfg.model):
            raise IncompatibleCheckpointError("resume checkpoint model config differs from the run config")
        params = resume.tensors()
        moments = {k: v.copy() for k, v in resume.moments.items()}
        epoch, history, step = resume.epoch, list(resume.loss_history), resume.step
    else:
        params = init_params(cfg.model, derive_seed(cfg.seed, "init"))
        moments, epoch, history, step = {}, 0, [], 0
    names = list(params)
    plist = [params[k] for k in names]
    n_steps = math.ceil(len(records) / cfg.batch_size)
    last = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)

    while epoch < last:
        total = 0.0
        for b, idx in enumerate(epoch_batches(len(records), cfg, epoch)):
            batch = [records[i] for i in idx]
            loss, _, _ = forward_pretrain(params, cfg.model, batch, derive_seed(cfg.seed, "mask", epoch, b))
            if not math.isfinite(loss.item()):
                raise DivergenceError("divergence detected: non-finite loss",
                                      _snapshot(params, moments, cfg, epoch, history, step))
            grads = tn.grad(loss, plist)
            step += 1
            try:
                adamw_step(params, dict(zip(names, grads)), moments, step, lr_at(step, cfg, n_steps), cfg)
            except DivergenceError as exc:
                exc.checkpoint = _snapshot(params, moments, cfg, epoch, history, step - 1)
                raise
            total += loss.item() * len(idx)
        epoch += 1
        history.append(total / len(records))
        log.info("epoch %d/%d loss %.6g", epoch, cfg.epochs, history[-1])
        if on_epoch is not None:
            on_epoch(_snapshot(params, moments, cfg, epoch, history, step))
    return _snapshot(params, moments, cfg, epoch, history, step)


def evaluation_loss(params, model_cfg: ModelConfig, records, seed: int, batch_size: int = 64) -> float:
    """Mean masked-reconstruction loss over ``records`` with fixed masks."""
    total = 0.0
    with tn.no_grad():
        for i in range(0, len(records), batch_size):
            batch = records[i:i + batch_size]
            loss, _, _ = forward_pretrain(params, model_cfg, batch, derive_seed(seed, "eval", i))
            total += loss.item() * len(batch)
    return total / len(records)


def with_model(cfg: TrainConfig, **model_overrides) -> TrainConfig:
    return replace(cfg, model=replace(cfg.model, **model_overrides))
