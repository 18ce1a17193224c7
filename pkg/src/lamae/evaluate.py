"""Downstream evaluation: AUROC, linear probes, fine-tuning and label-efficiency sweeps."""

from __future__ import annotations

import csv
import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import tensor as tn
from .model import ModelConfig, draw_masks, embed_batch, init_params
from .train import (ConfigError, DivergenceError, TrainConfig, adamw_step, derive_seed,
                    epoch_batches, lr_at)

log = logging.getLogger(__name__)

MODES = ("linear_probe", "finetune")
MODEL_TAGS = ("lamae", "baseline", "scratch")


class UndefinedAurocError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), from midranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAurocError("AUROC is undefined for single-class labels")
    ranks = rankdata(s)  # midranks, so every rank sum is a multiple of 0.5
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ProbeResult:
    per_label: dict  # label -> AUROC, or None when undefined
    macro: float
    n_train: int
    mode: str
    model: str
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name, v in self.per_label.items():
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"AUROC for {name} outside [0, 1]")


def macro_auroc(per_label: dict) -> float:
    defined = [v for v in per_label.values() if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


def _per_label(scores, labels, names) -> dict:
    out = {}
    for j, name in enumerate(names):
        try:
            out[name] = auroc(scores[:, j], labels[:, j])
        except UndefinedAurocError:
            warnings.warn(f"label {name!r} has a single class on the held-out split; excluded", stacklevel=3)
            out[name] = None
    return out


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def hash_split(n: int) -> Split:
    """Deterministic 70/15/15 assignment from a hash of each record index."""
    bucket = np.array([zlib.crc32(f"record:{i}".encode()) % 100 for i in range(n)])
    idx = np.arange(n)
    return Split(idx[bucket < 70], idx[(bucket >= 70) & (bucket < 85)], idx[bucket >= 85])


def nested_subsample(pool, n: int, seed: int) -> np.ndarray:
    """First ``n`` of a seeded permutation, so smaller draws nest in larger ones."""
    pool = np.asarray(pool)
    if n > pool.size:
        raise ConfigError(f"train size {n} exceeds the {pool.size} available records")
    order = np.random.default_rng(derive_seed(seed, "subsample")).permutation(pool.size)
    return pool[order[:n]]


# ---------------------------------------------------------------------------
# linear probe


def fit_logistic(X, Y, iterations: int = 500, lr: float = 0.1):
    """Independent logistic regressors per column of ``Y`` by full-batch gradient descent."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    W = np.zeros((X.shape[1], Y.shape[1]))
    b = np.zeros(Y.shape[1])
    n = X.shape[0]
    for _ in range(iterations):
        err = expit(X @ W + b) - Y
        W -= lr * (X.T @ err) / n
        b -= lr * err.mean(axis=0)
    return W, b


def train_linear_probe(embeddings, labels, split, seed: int = 0, label_names=None, model: str = "lamae",
                       train_idx=None, iterations: int = 500, lr: float = 0.1) -> ProbeResult:
    """Logistic probes on frozen embeddings; AUROC on ``split.test``.

    Features are standardized with training-split statistics. ``train_idx``
    overrides ``split.train`` (used for subsampled sweeps).
    """
    E = np.asarray(embeddings, dtype=np.float64)
    Y = np.asarray(labels).astype(bool)
    names = tuple(label_names or (f"label{j}" for j in range(Y.shape[1])))
    tr = np.asarray(split.train if train_idx is None else train_idx)
    te = np.asarray(split.test)
    mu = E[tr].mean(axis=0)
    sd = E[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (E - mu) / sd
    keep = [j for j in range(Y.shape[1]) if 0 < Y[tr, j].sum() < tr.size]
    for j in set(range(Y.shape[1])) - set(keep):
        warnings.warn(f"label {names[j]!r} has a single class in the training split; excluded", stacklevel=2)
    scores = np.zeros((te.size, Y.shape[1]))
    if keep:
        W, b = fit_logistic(Z[tr], Y[tr][:, keep], iterations, lr)
        scores[:, keep] = Z[te] @ W + b
    per = _per_label(scores, Y[te], names)
    for j in set(range(Y.shape[1])) - set(keep):
        per[names[j]] = None
    return ProbeResult(per, macro_auroc(per), int(tr.size), "linear_probe", model, seed)


def compute_embeddings(params, cfg: ModelConfig, records, batch_size: int = 64) -> np.ndarray:
    """Frozen (N, d) embeddings with every patch visible."""
    chunks = []
    with tn.no_grad():
        for i in range(0, len(records), batch_size):
            chunks.append(embed_batch(params, cfg, records[i:i + batch_size]).data)
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneState:
    params: dict  # name -> Tensor, backbone plus head.w / head.b
    moments: dict = field(default_factory=dict)
    step: int = 0


def _head_init(d: int, n_labels: int, seed: int) -> dict:
    rng = np.random.default_rng(derive_seed(seed, "head"))
    w = np.clip(rng.normal(0.0, 0.02, (d, n_labels)), -0.04, 0.04)
    return {"head.w": tn.parameter(w), "head.b": tn.parameter(np.zeros(n_labels))}


def _logits(params, cfg, records, visible=None):
    z = embed_batch(params, cfg, records, visible)
    return tn.linear(z, params["head.w"], params["head.b"])


def finetune_logits(params, cfg: ModelConfig, records, batch_size: int = 64) -> np.ndarray:
    out = []
    with tn.no_grad():
        for i in range(0, len(records), batch_size):
            out.append(_logits(params, cfg, records[i:i + batch_size]).data)
    return np.concatenate(out)


def finetune(checkpoint, records, labels, split, config: TrainConfig, seed: int = 0, label_names=None,
             model: str = "lamae", train_idx=None, epochs: int = None,
             finetune_with_masking: bool = False) -> tuple:
    """Update backbone and a linear CLS head end-to-end with summed BCE.

    ``checkpoint`` may be None for a randomly initialized (scratch) backbone of
    ``config.model``. ``epochs`` overrides ``config.epochs`` and may be 0, in
    which case the head stays at its random initialization.
    Returns (ProbeResult on ``split.test``, FinetuneState).
    """
    cfg = config.model if checkpoint is None else checkpoint.model_config
    Y = np.asarray(labels).astype(np.float64)
    names = tuple(label_names or (f"label{j}" for j in range(Y.shape[1])))
    if checkpoint is None:
        params = init_params(cfg, derive_seed(seed, "scratch-init"))
    else:
        params = checkpoint.tensors()
    params.update(_head_init(cfg.d_model, Y.shape[1], seed))
    state = FinetuneState(params)
    tr = np.asarray(split.train if train_idx is None else train_idx)
    n_epochs = config.epochs if epochs is None else epochs
    if n_epochs < 0:
        raise ConfigError("epochs must be >= 0")
    run_cfg = replace(config, seed=seed, epochs=max(n_epochs, 1),
                      warmup_epochs=min(config.warmup_epochs, max(n_epochs, 1) * 0.1))
    names_p = list(params)
    plist = [params[k] for k in names_p]
    n_steps = math.ceil(tr.size / config.batch_size)
    for epoch in range(n_epochs):
        for b, sel in enumerate(epoch_batches(tr.size, run_cfg, epoch)):
            idx = tr[sel]
            batch = [records[i] for i in idx]
            visible = None
            if finetune_with_masking:
                T = batch[0].n_samples // cfg.patch_len
                visible = draw_masks(cfg, len(batch), batch[0].n_leads, T,
                                     derive_seed(seed, "finetune-mask", epoch, b)).encoder_visible
            logits = _logits(params, cfg, batch, visible)
            loss = tn.mul(tn.bce_with_logits(logits, Y[idx]), 1.0 / len(idx))
            if not math.isfinite(loss.item()):
                raise DivergenceError("divergence detected: non-finite fine-tuning loss", state)
            grads = tn.grad(loss, plist)
            state.step += 1
            adamw_step(params, dict(zip(names_p, grads)), state.moments, state.step,
                       lr_at(state.step, run_cfg, n_steps), run_cfg)
    scores = finetune_logits(params, cfg, [records[i] for i in split.test])
    per = _per_label(scores, Y[split.test].astype(bool), names)
    return ProbeResult(per, macro_auroc(per), int(tr.size), "finetune", model, seed), state


# ---------------------------------------------------------------------------
# label-efficiency sweep


def label_efficiency_sweep(models: dict, records, labels, train_sizes, mode: str, seeds, split=None,
                           label_names=None, finetune_config: TrainConfig = None, finetune_epochs=None,
                           embeddings: dict = None) -> list:
    """ProbeResults for every (model, size, seed) cell.

    ``models`` maps a tag to a Checkpoint (None means a scratch backbone of
    ``finetune_config.model``). Training subsets are nested across sizes for
    a fixed seed. ``embeddings`` may supply precomputed frozen features per tag.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    sizes = list(train_sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ConfigError("train_sizes must be strictly ascending")
    split = split or hash_split(len(records))
    if sizes and sizes[-1] > split.train.size:
        raise ConfigError(f"train size {sizes[-1]} exceeds the {split.train.size}-record train split")
    results = []
    for tag, ckpt in models.items():
        if mode == "linear_probe":
            if embeddings is not None and tag in embeddings:
                E = embeddings[tag]
            elif ckpt is None:
                raise ConfigError(f"linear probing model {tag!r} needs a checkpoint or embeddings")
            else:
                E = compute_embeddings(ckpt.tensors(), ckpt.model_config, records)
        for seed in seeds:
            for n in sizes:
                sub = nested_subsample(split.train, n, seed)
                if mode == "linear_probe":
                    res = train_linear_probe(E, labels, split, seed, label_names, tag, train_idx=sub)
                else:
                    if finetune_config is None:
                        raise ConfigError("fine-tuning sweeps need a TrainConfig")
                    res, _ = finetune(ckpt, records, labels, split, finetune_config, seed, label_names, tag,
                                      train_idx=sub, epochs=_epochs_for(finetune_epochs, n))
                log.info("%s %s n=%d seed=%d macro AUROC %.4f", tag, mode, n, seed, res.macro)
                results.append(res)
    return results


def _epochs_for(spec, n):
    if spec is None or isinstance(spec, int):
        return spec
    return spec(n)


def summarize(results) -> dict:
    """Mean and std of macro AUROC per (model, mode, n_train)."""
    groups = {}
    for r in results:
        groups.setdefault((r.model, r.mode, r.n_train), []).append(r.macro)
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in sorted(groups.items())}


SWEEP_COLUMNS = ("model", "mode", "n_train", "seed", "label", "auroc", "macro_auroc")


def write_sweep_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in results:
            for name, v in r.per_label.items():
                w.writerow([r.model, r.mode, r.n_train, r.seed, name, "" if v is None else repr(v), repr(r.macro)])
            w.writerow([r.model, r.mode, r.n_train, r.seed, "macro", repr(r.macro), repr(r.macro)])


def read_sweep_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# cross-lead reconstruction


def masked_lead_mse(params, cfg: ModelConfig, records, lead: int, seed: int = 0, context_alpha: float = 0.0) -> float:
    """Mean squared reconstruction error on ``lead`` when it is wholly hidden.

    Every other lead keeps a seeded ``1 - context_alpha`` fraction of its
    patches (all of them by default); the latent set is not thinned.
    """
    from .model import forward_record, n_visible

    errs = []
    rng = np.random.default_rng(derive_seed(seed, "masked-lead", lead))
    with tn.no_grad():
        for rec in records:
            T = rec.n_samples // cfg.patch_len
            k = n_visible(T, context_alpha)
            visible = [np.sort(rng.permutation(T)[:k]) if l != lead else np.zeros(0, dtype=np.intp)
                       for l in range(rec.n_leads)]
            X_hat, _ = forward_record(params, cfg, rec, visible)
            target = rec.samples[lead, :T * cfg.patch_len].reshape(T, cfg.patch_len)
            errs.append(np.mean((X_hat.data[lead] - target) ** 2))
    return float(np.mean(errs))
